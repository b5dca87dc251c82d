"""One interactive session: warm-start double pass on the first click,
per-click refinement afterwards, and the temporal recurrence that threads
the previous output map into the current one.

All masks handed around here are plain numpy arrays; tensors exist only
inside a forward pass. Refinement is deterministic, so replaying a click
sequence from scratch reproduces every mask bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from . import tensor as T
from .backbone import PemedModel
from .errors import ShapeMismatchError, StateCorruptError
from .prompts import Click, assemble_input, check_bounds
from .tensor import Tensor


@dataclass(frozen=True)
class SessionState:
    """Everything one interaction sequence carries between clicks."""

    image: np.ndarray  # 1xHxW float32 in [0,1]
    clicks: tuple[Click, ...]
    prev_mask: np.ndarray  # 1xHxW soft mask in [0,1]
    o_prev: np.ndarray | None  # previous combined output (logits), when recurrence is on
    t: int
    gt: np.ndarray | None = None

    def validate(self, tsip_enabled: bool):
        if self.t != len(self.clicks):
            raise StateCorruptError(f"t={self.t} but {len(self.clicks)} clicks recorded")
        if any(c.t != i + 1 for i, c in enumerate(self.clicks)):
            raise StateCorruptError("click step indices out of order")
        if (self.o_prev is not None) != (tsip_enabled and self.t >= 1):
            raise StateCorruptError("o_prev presence inconsistent with step counter/flags")
        if self.prev_mask.min() < 0.0 or self.prev_mask.max() > 1.0:
            raise StateCorruptError("prev_mask outside [0,1]")


def tsip_combine(raw_logits: Tensor, o_prev, model: PemedModel) -> Tensor:
    """Add the gated memory of the previous output to the fresh logits.

    First pass of a session has no previous output and passes through
    unchanged. The additive term is a sigmoid, so it lies in (0,1); the
    centered variant shifts it to (-0.5, 0.5).
    """
    if o_prev is None:
        return raw_logits
    prev = o_prev if isinstance(o_prev, Tensor) else Tensor(np.asarray(o_prev, dtype=raw_logits.data.dtype))
    if prev.shape != raw_logits.shape:
        raise ShapeMismatchError(f"o_prev {prev.shape} vs logits {raw_logits.shape}")
    gate = T.sigmoid(model.tsip(prev))
    if model.config.tsip_centered:
        gate = T.sub(gate, 0.5)
    return T.add(raw_logits, gate)


def _forward_mask(model: PemedModel, image, clicks, prev_mask, o_prev):
    """No-grad forward + recurrence; returns (soft mask, combined logits)."""
    cfg = model.config
    with T.no_grad():
        maps = assemble_input(Tensor(image), clicks, Tensor(prev_mask), radius=cfg.disk_radius)
        raw = model.forward(maps)
        combined = tsip_combine(raw, o_prev if cfg.enable_tsip else None, model)
    return expit(combined.numpy()), combined.numpy()


def self_loop_init(image: np.ndarray, first_click: Click, model: PemedModel, gt=None):
    """First interaction. A cold pass over fully empty masks yields the rough
    mask; with the warm-start loop enabled a second pass consumes that mask
    (and its output memory) to produce the enhanced one.

    Returns (rough_mask, returned_mask, state); with the loop disabled both
    masks are the cold result.
    """
    cfg = model.config
    image = np.asarray(image, dtype=np.float32)
    check_bounds(first_click, image.shape[1], image.shape[2])
    zeros = np.zeros_like(image)
    clicks = (replace(first_click, t=1),)
    m0, o0 = _forward_mask(model, image, clicks, zeros, None)
    if cfg.enable_self_loop:
        m1, o1 = _forward_mask(model, image, clicks, m0, o0 if cfg.enable_tsip else None)
    else:
        m1, o1 = m0, o0
    state = SessionState(
        image=image,
        clicks=clicks,
        prev_mask=m1,
        o_prev=o1 if cfg.enable_tsip else None,
        t=1,
        gt=gt,
    )
    return m0, m1, state


def refine(state: SessionState, new_click: Click, model: PemedModel):
    """Consume one more click; returns (soft mask, advanced state)."""
    cfg = model.config
    state.validate(cfg.enable_tsip)
    if state.t < 1:
        raise StateCorruptError("refine before the first interaction")
    check_bounds(new_click, state.image.shape[1], state.image.shape[2])
    clicks = state.clicks + (replace(new_click, t=state.t + 1),)
    mask, o_t = _forward_mask(model, state.image, clicks, state.prev_mask, state.o_prev)
    new_state = replace(
        state,
        clicks=clicks,
        prev_mask=mask,
        o_prev=o_t if cfg.enable_tsip else None,
        t=state.t + 1,
    )
    return mask, new_state


def binarize(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Soft [0,1] mask to uint8 binary; values equal to the threshold count in."""
    return (np.asarray(mask) >= threshold).astype(np.uint8)


class InteractiveSession:
    """Stateful wrapper a driver (benchmark, service, CLI) can click through."""

    def __init__(self, model: PemedModel, image: np.ndarray, gt=None):
        self.model = model
        self.image = np.asarray(image, dtype=np.float32)
        self.gt = gt
        self.state: SessionState | None = None
        self.rough_mask = None  # cold-pass mask of the first interaction

    @property
    def click_count(self) -> int:
        return 0 if self.state is None else self.state.t

    def add_click(self, click: Click) -> np.ndarray:
        if self.state is None:
            m0, m1, self.state = self_loop_init(self.image, click, self.model, gt=self.gt)
            self.rough_mask = m0
            return m1
        mask, self.state = refine(self.state, click, self.model)
        return mask

    def reset(self):
        self.state = None
        self.rough_mask = None

    def replay(self, clicks) -> np.ndarray:
        """Rebuild the session from scratch over the given click sequence."""
        self.reset()
        mask = np.zeros_like(self.image)
        for c in clicks:
            mask = self.add_click(c)
        return mask

    def current_mask(self) -> np.ndarray:
        return np.zeros_like(self.image) if self.state is None else self.state.prev_mask
