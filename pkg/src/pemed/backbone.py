"""The segmentation network: a four-stage transformer encoder over the
stacked input channels, a convolutional fusion of the multi-level features,
and a per-pixel MLP decoder emitting a full-resolution logit map.

Stage s produces its feature grid at 1/2^(s+1) of the input resolution
(1/4, 1/8, 1/16, 1/32).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import BadGeometryError, DecodeError, ShapeMismatchError
from .prompts import PromptMaps
from .tensor import AttentionConfig, Tensor

CHECKPOINT_MAGIC = b"PEMD"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters plus the feature flags for the
    prompt-enhancement modules (warm-start loop, prompt attention in/out,
    temporal recurrence)."""

    input_size: int = 64
    stage_dims: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_heads: tuple[int, ...] = (1, 2, 4, 8)
    patch_strides: tuple[int, ...] = (4, 2, 2, 2)
    fusion_dim: int = 64
    decoder_hidden: int = 64
    tsip_hidden: int = 16
    disk_radius: float = 5.0
    attn_scale_mode: str = "paper_dk"
    tsip_centered: bool = False
    enable_self_loop: bool = True
    enable_palm_i: bool = True
    enable_palm_o: bool = True
    enable_tsip: bool = True

    def __post_init__(self):
        self.stage_dims = tuple(int(d) for d in self.stage_dims)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.stage_heads = tuple(int(h) for h in self.stage_heads)
        self.patch_strides = tuple(int(s) for s in self.patch_strides)
        if not (len(self.stage_dims) == len(self.stage_depths) == len(self.stage_heads) == len(self.patch_strides) == 4):
            raise ValueError("exactly four stages required")
        for d, h in zip(self.stage_dims, self.stage_heads):
            if d % h != 0:
                raise ValueError(f"heads {h} must divide width {d}")
        total = int(np.prod(self.patch_strides))
        if self.input_size % total != 0:
            raise BadGeometryError(f"input_size {self.input_size} not divisible by {total}")

    @property
    def palm_enabled(self) -> bool:
        return self.enable_palm_i or self.enable_palm_o

    def grid_sizes(self) -> list[int]:
        sizes, cur = [], self.input_size
        for s in self.patch_strides:
            cur //= s
            sizes.append(cur)
        return sizes

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DecodeError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls(input_size=256, stage_dims=(64, 128, 256, 512), fusion_dim=256, decoder_hidden=256)


# -- parameter layers ------------------------------------------------------


class LinearLayer:
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, bias_std: float = 0.0):
        std = np.sqrt(2.0 / (d_in + d_out))
        self.w = Tensor(rng.normal(0.0, std, (d_in, d_out)).astype(dtype), requires_grad=True)
        b = rng.normal(0.0, bias_std, d_out) if bias_std > 0 else np.zeros(d_out)
        self.b = Tensor(b.astype(dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Norm:
    def __init__(self, d: int, dtype=np.float32):
        self.g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.g": self.g, f"{prefix}.b": self.b}


class PatchEmbed:
    """Non-overlapping strided patch projection to tokens, then a norm.

    Equivalent to a stride-k convolution with kernel k followed by
    row-major flattening of the grid.
    """

    def __init__(self, c_in: int, stride: int, d_out: int, rng, dtype=np.float32):
        self.c_in = c_in
        self.stride = stride
        # random bias keeps all-zero patches (empty prompt maps) away from
        # the zero-variance point of the following norm
        self.proj = LinearLayer(c_in * stride * stride, d_out, rng, dtype, bias_std=0.3)
        self.norm = Norm(d_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        s = self.stride
        if c != self.c_in:
            raise ShapeMismatchError(f"expected {self.c_in} channels, got {c}")
        if h % s or w % s:
            raise BadGeometryError(f"{h}x{w} not divisible by stride {s}")
        gh, gw = h // s, w // s
        t = T.reshape(x, (c, gh, s, gw, s))
        t = T.permute(t, (1, 3, 0, 2, 4))
        t = T.reshape(t, (gh * gw, c * s * s))
        return self.norm(self.proj(t))

    def params(self, prefix: str) -> dict:
        return {**self.proj.params(f"{prefix}.proj"), **self.norm.params(f"{prefix}.norm")}


class Block:
    """Pre-norm transformer block: attention and MLP residual branches."""

    def __init__(self, d: int, heads: int, scale_mode: str, rng, dtype=np.float32):
        self.cfg = AttentionConfig(d_model=d, n_heads=heads, scale_mode=scale_mode)
        self.ln1 = Norm(d, dtype)
        self.wq = LinearLayer(d, d, rng, dtype)
        self.wk = LinearLayer(d, d, rng, dtype)
        self.wv = LinearLayer(d, d, rng, dtype)
        self.wo = LinearLayer(d, d, rng, dtype)
        self.ln2 = Norm(d, dtype)
        self.fc1 = LinearLayer(d, 4 * d, rng, dtype)
        self.fc2 = LinearLayer(4 * d, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        att = T.attention(self.wq(h), self.wk(h), self.wv(h), self.cfg)
        x = T.add(x, self.wo(att))
        h = self.ln2(x)
        return T.add(x, self.fc2(T.gelu(self.fc1(h))))

    def params(self, prefix: str) -> dict:
        out = {}
        for name in ("ln1", "wq", "wk", "wv", "wo", "ln2", "fc1", "fc2"):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        return out


class Stage:
    def __init__(self, c_in: int, stride: int, d: int, depth: int, heads: int, scale_mode: str, rng, dtype=np.float32):
        self.embed = PatchEmbed(c_in, stride, d, rng, dtype)
        self.blocks = [Block(d, heads, scale_mode, rng, dtype) for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        t = self.embed(x)
        for blk in self.blocks:
            t = blk(t)
        return t

    def params(self, prefix: str) -> dict:
        out = self.embed.params(f"{prefix}.embed")
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"{prefix}.block{i}"))
        return out


def tokens_to_grid(tokens: Tensor, grid: int) -> Tensor:
    """[g*g, d] row-major tokens -> d x g x g feature map."""
    n, d = tokens.shape
    if n != grid * grid:
        raise ShapeMismatchError(f"{n} tokens do not tile a {grid}x{grid} grid")
    return T.permute(T.reshape(tokens, (grid, grid, d)), (2, 0, 1))


class Fusion:
    """Project each stage to a common width, upsample to 1/4 resolution,
    concatenate and mix with a 1x1 convolution plus channel norm."""

    def __init__(self, stage_dims, fusion_dim: int, rng, dtype=np.float32):
        self.fusion_dim = fusion_dim
        self.projs = [LinearLayer(d, fusion_dim, rng, dtype) for d in stage_dims]
        c_cat = fusion_dim * len(stage_dims)
        std = np.sqrt(2.0 / (c_cat + fusion_dim))
        self.conv_w = Tensor(rng.normal(0.0, std, (fusion_dim, c_cat, 1, 1)).astype(dtype), requires_grad=True)
        self.conv_b = Tensor(np.zeros((fusion_dim, 1, 1), dtype=dtype), requires_grad=True)
        self.norm = Norm(fusion_dim, dtype)

    def __call__(self, feats, grids) -> Tensor:
        if len(feats) != len(self.projs):
            raise ShapeMismatchError(f"expected {len(self.projs)} stage features")
        target = grids[0]
        planes = []
        for f, g, proj in zip(feats, grids, self.projs):
            p = tokens_to_grid(proj(f), g)
            if g != target:
                p = T.bilinear_upsample(p, (target, target))
            planes.append(p)
        mixed = T.add(T.conv2d(T.concat(planes, axis=0), self.conv_w, 1, 0), self.conv_b)
        # channel-wise norm: move channels last, normalize, move back
        t = T.permute(mixed, (1, 2, 0))
        t = self.norm(t)
        return T.permute(t, (2, 0, 1))

    def params(self, prefix: str) -> dict:
        out = {f"{prefix}.conv.w": self.conv_w, f"{prefix}.conv.b": self.conv_b}
        for i, p in enumerate(self.projs):
            out.update(p.params(f"{prefix}.proj{i}"))
        out.update(self.norm.params(f"{prefix}.norm"))
        return out


class Decoder:
    """Position-free per-pixel MLP head, upsampled back to input size."""

    def __init__(self, fusion_dim: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = LinearLayer(fusion_dim, hidden, rng, dtype)
        self.fc2 = LinearLayer(hidden, 1, rng, dtype)

    def __call__(self, fused: Tensor, out_size: int) -> Tensor:
        c, h, w = fused.shape
        t = T.reshape(T.permute(fused, (1, 2, 0)), (h * w, c))
        t = self.fc2(T.gelu(self.fc1(t)))
        logits = T.permute(T.reshape(t, (h, w, 1)), (2, 0, 1))
        return T.bilinear_upsample(logits, (out_size, out_size))

    def params(self, prefix: str) -> dict:
        return {**self.fc1.params(f"{prefix}.fc1"), **self.fc2.params(f"{prefix}.fc2")}


class TsipHead:
    """Per-pixel MLP mapping the previous output map through 1 -> hidden -> 1."""

    def __init__(self, hidden: int, rng, dtype=np.float32):
        self.fc1 = LinearLayer(1, hidden, rng, dtype)
        self.fc2 = LinearLayer(hidden, 1, rng, dtype)

    def __call__(self, o_prev: Tensor) -> Tensor:
        c, h, w = o_prev.shape
        t = T.reshape(o_prev, (h * w, 1))
        t = self.fc2(T.gelu(self.fc1(t)))
        return T.reshape(t, (1, h, w))

    def params(self, prefix: str) -> dict:
        return {**self.fc1.params(f"{prefix}.fc1"), **self.fc2.params(f"{prefix}.fc2")}


class PemedModel:
    """Full parameter set plus the forward pass producing raw logits.

    forward_count tracks how many full passes have run; the warm-start
    loop and the service tests rely on it.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        from .palm import PalmModule  # local import to avoid a cycle

        self.config = config
        self.dtype = dtype
        self.forward_count = 0
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E3779B9]))
        sm = config.attn_scale_mode
        dims = config.stage_dims
        chans = [4, dims[0], dims[1], dims[2]]
        self.stages = [
            Stage(chans[i], config.patch_strides[i], dims[i], config.stage_depths[i], config.stage_heads[i], sm, rng, dtype)
            for i in range(4)
        ]
        self.palm = PalmModule(dims[0], config.stage_heads[0], sm, rng, dtype, stride=config.patch_strides[0])
        self.fusion = Fusion(dims, config.fusion_dim, rng, dtype)
        self.decoder = Decoder(config.fusion_dim, config.decoder_hidden, rng, dtype)
        self.tsip = TsipHead(config.tsip_hidden, rng, dtype)

    # -- parameters -------------------------------------------------------

    def named_params(self) -> dict:
        out = {}
        for i, st in enumerate(self.stages):
            out.update(st.params(f"stage{i + 1}"))
        out.update(self.palm.params("palm"))
        out.update(self.fusion.params("fusion"))
        out.update(self.decoder.params("decoder"))
        out.update(self.tsip.params("tsip"))
        return out

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    def load_state(self, arrays: dict):
        params = self.named_params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ShapeMismatchError(f"parameter names differ (missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})")
        for name, p in params.items():
            a = arrays[name]
            if tuple(a.shape) != p.shape:
                raise ShapeMismatchError(f"{name}: checkpoint {a.shape} vs model {p.shape}")
            p.data = np.ascontiguousarray(a, dtype=self.dtype)

    # -- forward pieces ---------------------------------------------------

    def forward_encoder(self, maps: PromptMaps, palm_hook=None):
        """Run the four stages; palm_hook, when given, replaces the stage-1
        feature before it reaches stage 2 and the fusion."""
        x = T.concat([maps.image, maps.pos, maps.neg, maps.prev], axis=0)
        grids = self.config.grid_sizes()
        feats = []
        t = self.stages[0](x)
        if palm_hook is not None:
            t = palm_hook(t)
        feats.append(t)
        for i in range(1, 4):
            t = self.stages[i](tokens_to_grid(feats[-1], grids[i - 1]))
            feats.append(t)
        return feats

    def fuse_multilevel(self, feats) -> Tensor:
        return self.fusion(feats, self.config.grid_sizes())

    def decode_mask(self, fused: Tensor) -> Tensor:
        return self.decoder(fused, self.config.input_size)

    def forward(self, maps: PromptMaps) -> Tensor:
        """Full pass: encoder (with prompt attention when enabled), fusion,
        decode. Returns raw logits 1xHxW."""
        self.forward_count += 1
        hook = None
        if self.config.palm_enabled:
            hook = lambda f1: self.palm.forward(maps, f1, self.config.enable_palm_i, self.config.enable_palm_o)
        feats = self.forward_encoder(maps, palm_hook=hook)
        return self.decode_mask(self.fuse_multilevel(feats))


# -- checkpoint io --------------------------------------------------------


def save_checkpoint(path, model: PemedModel):
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg)) + cfg
    params = model.named_params()
    blob += struct.pack("<I", len(params))
    for name, p in params.items():
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc)) + enc
        blob += struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path, seed: int = 0) -> PemedModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DecodeError("bad checkpoint magic")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise DecodeError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        cfg = ModelConfig.from_dict(json.loads(data[pos : pos + cfg_len].decode("utf-8")))
    except (ValueError, UnicodeDecodeError) as e:
        raise DecodeError(f"bad config block: {e}") from None
    pos += cfg_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        if name in arrays:
            raise DecodeError(f"duplicate parameter {name}")
        arrays[name] = arr
    if pos != len(data):
        raise DecodeError("trailing bytes in checkpoint")
    model = PemedModel(cfg, seed=seed)
    model.load_state(arrays)
    model.checkpoint_id = hashlib.sha256(data).hexdigest()[:12]
    return model
