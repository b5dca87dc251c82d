"""Training on synthetic blob data: focal loss normalized by its own total
weight, Adam with a stepped learning-rate decay, and click sampling that
replays the inference loop (warm-start pass, recurrence threading and all)
so the train and test distributions match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import tensor as T
from .backbone import ModelConfig, PemedModel, save_checkpoint
from .engine import binarize, refine, self_loop_init, tsip_combine
from .errors import (
    BadGeometryError,
    DivergenceError,
    EmptyGtError,
    NoErrorRegionError,
    NonFiniteError,
    ShapeMismatchError,
)
from .harness import next_click
from .prompts import Click, assemble_input, write_pgm
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 5e-3
    lr_decay_factor: float = 0.6
    lr_decay_every: int = 20
    focal_gamma: float = 2.0
    max_train_clicks: int = 5
    seed: int = 0
    train_count: int = 2000
    blob_count_min: int = 1
    blob_count_max: int = 3
    contrast_min: float = 0.35
    contrast_max: float = 0.65
    background_min: float = 0.1
    background_max: float = 0.3
    noise_sigma: float = 0.05
    warm_pass_prob: float = 0.5  # chance a one-click sample supervises the warm pass
    max_grad_norm: float = 5.0  # near-empty prompt maps spike the first gradients

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must be in (0,1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every)


# -- synthetic data --------------------------------------------------------


def gen_synthetic_sample(rng_seed, h: int, w: int, cfg: TrainConfig):
    """One (image, gt) pair of 1-3 blurred-contrast ellipse blobs, fully
    determined by the seed. Ground-truth area is kept within [0.02, 0.5]
    of the frame by resampling."""
    if h % 4 or w % 4:
        raise BadGeometryError(f"sample size {h}x{w} must be stride-divisible")
    rng = np.random.default_rng(rng_seed)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(200):
        gt = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(cfg.blob_count_min, cfg.blob_count_max + 1))):
            cy = rng.uniform(0.15 * h, 0.85 * h)
            cx = rng.uniform(0.15 * w, 0.85 * w)
            a = rng.uniform(0.08 * h, 0.27 * h)
            b = rng.uniform(0.08 * w, 0.27 * w)
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
            v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
            gt |= u * u + v * v <= 1.0
        frac = gt.mean()
        if 0.02 <= frac <= 0.5:
            break
    else:
        raise BadGeometryError("could not sample a blob layout in range")
    background = rng.uniform(cfg.background_min, cfg.background_max)
    contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max)
    noise = rng.normal(0.0, cfg.noise_sigma, size=(h, w)) if cfg.noise_sigma > 0 else 0.0
    image = np.clip(background + contrast * gt + noise, 0.0, 1.0).astype(np.float32)
    return image[None, :, :], gt


def sample_seed(base_seed: int, index: int):
    return np.random.SeedSequence([base_seed, 0x5EED, index])


def write_dataset(out_dir, count: int, size: int, cfg: TrainConfig, start_index: int = 0):
    """Materialize <case>.img.pgm / <case>.gt.pgm pairs for the benchmark."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        image, gt = gen_synthetic_sample(sample_seed(cfg.seed, start_index + i), size, size, cfg)
        case = f"case{start_index + i:04d}"
        (out / f"{case}.img.pgm").write_bytes(write_pgm(image[0]))
        (out / f"{case}.gt.pgm").write_bytes(write_pgm(gt.astype(np.uint8) * 255))
    return out


# -- loss -------------------------------------------------------------------


def normalized_focal_loss(logits: Tensor, gt: np.ndarray, gamma: float) -> Tensor:
    """Focal loss normalized by its total focal weight.

    Per pixel, p_t is the predicted probability of the true class and the
    weight (1-p_t)^gamma down-weights easy pixels; dividing by the summed
    weight restores cross-entropy scale. gamma=0 is exactly mean BCE.
    """
    gt = np.asarray(gt)
    if gt.ndim == logits.ndim - 1:
        gt = gt[None]
    if gt.shape != logits.shape:
        raise ShapeMismatchError(f"loss shapes: logits {logits.shape} vs gt {gt.shape}")
    sign = np.where(gt.astype(bool), 1.0, -1.0).astype(logits.data.dtype)
    z = T.mul(logits, Tensor(sign))
    log_pt = T.logsigmoid(z)
    weight = T.pow_const(T.sigmoid(T.mul(z, -1.0)), gamma)
    return T.mul(T.div(T.tsum(T.mul(weight, log_pt)), T.tsum(weight)), -1.0)


# -- click sampling ----------------------------------------------------------


def interior_click(gt: np.ndarray, rng) -> Click:
    """A positive click at a jittered deep-interior pixel of the target."""
    gt = np.asarray(gt).astype(bool)
    if not gt.any():
        raise EmptyGtError("cannot place a click in an empty mask")
    padded = np.pad(gt, 1)
    edt = distance_transform_edt(padded)[1:-1, 1:-1]
    cutoff = max(1.0, 0.5 * float(edt.max()))
    candidates = np.argwhere(edt >= cutoff)
    r, c = candidates[int(rng.integers(len(candidates)))]
    return Click(x=int(c), y=int(r), polarity="positive")


def sample_training_clicks(image: np.ndarray, gt: np.ndarray, model: PemedModel, k: int, rng):
    """Roll the inference loop forward k-1 clicks without gradients and hand
    back the state for the supervised pass that consumes click k.

    k=1 is the cold first-interaction state: a single positive click over
    an all-zero previous mask. Rollouts that converge early return fewer
    clicks.
    """
    if not 1 <= k <= max(1, model.config.input_size):
        raise ValueError(f"bad click count {k}")
    first = interior_click(gt, rng)
    zeros = np.zeros_like(image)
    if k == 1:
        return [first], zeros, None
    _, _, state = self_loop_init(image, first, model)
    for _ in range(k - 2):
        pred = binarize(state.prev_mask)[0]
        if np.array_equal(pred.astype(bool), gt.astype(bool)):
            return list(state.clicks), state.prev_mask, state.o_prev
        _, state = refine(state, next_click(pred, gt), model)
    pred = binarize(state.prev_mask)[0]
    if np.array_equal(pred.astype(bool), gt.astype(bool)):
        return list(state.clicks), state.prev_mask, state.o_prev
    final = next_click(pred, gt)
    clicks = list(state.clicks) + [Click(final.x, final.y, final.polarity, t=state.t + 1)]
    return clicks, state.prev_mask, state.o_prev


# -- optimizer ----------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients down to a global L2 norm cap; returns the norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    total = float(np.sqrt(total))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# -- the loop -----------------------------------------------------------------


def _supervised_state(image, gt, model, k, rng, warm_pass_prob):
    """Pick the forward pass to supervise: the cold pass for k=1, sometimes
    replaced by the warm-start second pass so that input distribution is
    trained too."""
    clicks, prev_mask, o_prev = sample_training_clicks(image, gt, model, k, rng)
    if (
        len(clicks) == 1
        and model.config.enable_self_loop
        and rng.random() < warm_pass_prob
    ):
        from .engine import _forward_mask

        m0, o0 = _forward_mask(model, image, tuple(clicks), np.zeros_like(image), None)
        return clicks, m0, (o0 if model.config.enable_tsip else None)
    return clicks, prev_mask, o_prev


def train_step(model: PemedModel, batch, gamma: float) -> float:
    """Accumulate gradients of the mean loss over (image, gt, clicks,
    prev_mask, o_prev) tuples; returns the batch loss."""
    total = 0.0
    scale = 1.0 / len(batch)
    for image, gt, clicks, prev_mask, o_prev in batch:
        maps = assemble_input(
            Tensor(image), clicks, Tensor(prev_mask), radius=model.config.disk_radius
        )
        logits = model.forward(maps)
        if model.config.enable_tsip and o_prev is not None:
            logits = tsip_combine(logits, o_prev, model)
        loss = T.mul(normalized_focal_loss(logits, gt, gamma), scale)
        loss.backward()
        total += loss.item()
    return total


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, out_path, log_path=None) -> PemedModel:
    """Full optimization run; writes the checkpoint and a JSON-lines log."""
    model = PemedModel(model_cfg, seed=train_cfg.seed)
    params = model.named_params()
    adam = Adam(params)
    size = model_cfg.input_size
    log_rows = []
    for epoch in range(1, train_cfg.epochs + 1):
        lr = lr_for_epoch(train_cfg, epoch)
        rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0xE90C, epoch]))
        order = rng.permutation(train_cfg.train_count)
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = []
            for idx in order[start : start + train_cfg.batch_size]:
                image, gt = gen_synthetic_sample(sample_seed(train_cfg.seed, int(idx)), size, size, train_cfg)
                k = int(rng.integers(1, train_cfg.max_train_clicks + 1))
                try:
                    clicks, prev_mask, o_prev = _supervised_state(
                        image, gt, model, k, rng, train_cfg.warm_pass_prob
                    )
                except NoErrorRegionError:
                    clicks, prev_mask, o_prev = sample_training_clicks(image, gt, model, 1, rng)
                batch.append((image, gt, clicks, prev_mask, o_prev))
            try:
                loss = train_step(model, batch, train_cfg.focal_gamma)
            except NonFiniteError as e:
                raise DivergenceError(
                    f"non-finite values at epoch {epoch}, batch {start // train_cfg.batch_size}: {e}"
                ) from None
            if not np.isfinite(loss):
                raise DivergenceError(f"loss diverged at epoch {epoch}")
            clip_grad_norm(params, train_cfg.max_grad_norm)
            adam.step(lr)
            model.zero_grad()
            losses.append(loss)
        row = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr}
        log_rows.append(row)
    if out_path is not None:
        save_checkpoint(out_path, model)
        if log_path is None:
            log_path = Path(str(out_path) + ".log.jsonl")
    if log_path is not None:
        with open(log_path, "w") as fh:
            for row in log_rows:
                fh.write(json.dumps(row) + "\n")
    model.train_log = log_rows
    return model


# -- config file --------------------------------------------------------------


def parse_config_text(text: str) -> tuple[TrainConfig, ModelConfig]:
    """Flat `key = value` lines, one per line, '#' comments. Keys belong to
    either the train or the model config; lists are comma-separated."""
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_kwargs, model_kwargs = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in train_fields:
            train_kwargs[key] = _parse_value(value)
        elif key in model_fields:
            model_kwargs[key] = _parse_value(value)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return TrainConfig(**train_kwargs), ModelConfig(**model_kwargs)


def _parse_value(value: str):
    if "," in value:
        return tuple(int(v.strip()) for v in value.split(","))
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value
