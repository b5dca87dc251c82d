"""Click prompts, their disk-map rendering, and network input assembly.

A click is a pixel with polarity; each polarity is rasterized as a binary
disk map and bundled with the grayscale image and the previous soft mask
into the four input channels the network consumes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, OutOfBoundsClickError, ShapeMismatchError, UnsupportedFormatError
from .tensor import Tensor

POSITIVE = "positive"
NEGATIVE = "negative"

DEFAULT_DISK_RADIUS = 5.0


@dataclass(frozen=True)
class Click:
    """One user interaction: (x, y) pixel, polarity, 1-based step index."""

    x: int
    y: int
    polarity: str
    t: int = 1

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be positive/negative, got {self.polarity!r}")


@dataclass(frozen=True)
class PromptMaps:
    """The four aligned input channels: image, positive, negative, previous mask."""

    image: Tensor
    pos: Tensor
    neg: Tensor
    prev: Tensor

    def __post_init__(self):
        shapes = {self.image.shape, self.pos.shape, self.neg.shape, self.prev.shape}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"prompt map shapes differ: {shapes}")
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ShapeMismatchError(f"maps must be 1xHxW, got {self.image.shape}")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def check_bounds(click: Click, h: int, w: int):
    if not (0 <= click.x < w and 0 <= click.y < h):
        raise OutOfBoundsClickError(f"click ({click.x},{click.y}) outside {h}x{w} image")


def render_disk_map(clicks, h: int, w: int, radius: float = DEFAULT_DISK_RADIUS, dtype=np.float32) -> Tensor:
    """Union of binary disks of the given radius around each click center."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    out = np.zeros((h, w), dtype=dtype)
    if clicks:
        rr = np.arange(h, dtype=np.float64)[:, None]
        cc = np.arange(w, dtype=np.float64)[None, :]
        r2 = float(radius) * float(radius)
        for c in clicks:
            check_bounds(c, h, w)
            out[(rr - c.y) ** 2 + (cc - c.x) ** 2 <= r2] = 1.0
    return Tensor(out[None, :, :])


def assemble_input(
    image: Tensor,
    clicks,
    prev_mask: Tensor,
    radius: float = DEFAULT_DISK_RADIUS,
) -> PromptMaps:
    """Split clicks by polarity, render both disk maps, bundle the channels.

    With no clicks and a zero prev_mask this is the fully empty first-
    interaction state.
    """
    if image.shape != prev_mask.shape:
        raise ShapeMismatchError(f"image {image.shape} vs prev_mask {prev_mask.shape}")
    h, w = image.shape[1], image.shape[2]
    dt = image.dtype
    pos = render_disk_map([c for c in clicks if c.polarity == POSITIVE], h, w, radius, dtype=dt)
    neg = render_disk_map([c for c in clicks if c.polarity == NEGATIVE], h, w, radius, dtype=dt)
    return PromptMaps(image=image, pos=pos, neg=neg, prev=prev_mask)


# -- image decoding --------------------------------------------------------


def load_image(data: bytes, fmt: str) -> Tensor:
    """Decode an 8-bit grayscale PGM (P5) or PNG into a 1xHxW tensor in [0,1]."""
    if fmt == "PGM":
        arr = _decode_pgm(data)
    elif fmt == "PNG8":
        arr = _decode_png8(data)
    else:
        raise UnsupportedFormatError(f"format {fmt!r} not supported")
    return Tensor((arr.astype(np.float32) / 255.0)[None, :, :])


def _decode_pgm(data: bytes) -> np.ndarray:
    if not data.startswith(b"P5"):
        raise UnsupportedFormatError("not a binary PGM (P5) file")
    # header tokens may be separated by whitespace and '#' comments
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError("truncated PGM header")
        fields.append(data[start:pos])
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise DecodeError(f"bad PGM header: {e}") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"PGM maxval must be 255, got {maxval}")
    if w <= 0 or h <= 0:
        raise DecodeError("non-positive PGM dimensions")
    pos += 1  # single whitespace after maxval
    raster = data[pos : pos + w * h]
    if len(raster) < w * h:
        raise DecodeError(f"PGM raster truncated: {len(raster)} < {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def write_pgm(pixels: np.ndarray) -> bytes:
    """Encode a HxW uint8 array (or [0,1] floats) as binary PGM."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _decode_png8(data: bytes) -> np.ndarray:
    if not data.startswith(_PNG_SIG):
        raise UnsupportedFormatError("not a PNG file")
    pos = len(_PNG_SIG)
    width = height = None
    idat = bytearray()
    seen_end = False
    while pos + 8 <= len(data):
        length, ctype = struct.unpack(">I4s", data[pos : pos + 8])
        pos += 8
        chunk = data[pos : pos + length]
        if len(chunk) < length:
            raise DecodeError("truncated PNG chunk")
        pos += length + 4  # skip CRC
        if ctype == b"IHDR":
            if length != 13:
                raise DecodeError("bad IHDR length")
            width, height, depth, color, comp, filt, interlace = struct.unpack(
                ">IIBBBBB", chunk
            )
            if depth != 8 or color != 0:
                raise UnsupportedFormatError(
                    f"only 8-bit grayscale PNG supported (depth={depth}, color={color})"
                )
            if interlace != 0:
                raise UnsupportedFormatError("interlaced PNG not supported")
        elif ctype == b"IDAT":
            idat.extend(chunk)
        elif ctype == b"IEND":
            seen_end = True
            break
    if width is None or not seen_end or not idat:
        raise DecodeError("PNG missing IHDR/IDAT/IEND")
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as e:
        raise DecodeError(f"PNG inflate failed: {e}") from None
    stride = width + 1
    if len(raw) != stride * height:
        raise DecodeError(f"PNG scanline data has {len(raw)} bytes, expected {stride * height}")
    out = np.zeros((height, width), dtype=np.uint8)
    prev = np.zeros(width, dtype=np.int32)
    for r in range(height):
        row = raw[r * stride : (r + 1) * stride]
        ftype, line = row[0], np.frombuffer(row[1:], dtype=np.uint8).astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for i in range(1, width):
                cur[i] = (cur[i] + cur[i - 1]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            cur[0] = (cur[0] + prev[0] // 2) & 0xFF
            for i in range(1, width):
                cur[i] = (cur[i] + (cur[i - 1] + prev[i]) // 2) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for i in range(width):
                a = cur[i - 1] if i else 0
                b = prev[i]
                c = prev[i - 1] if i else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                cur[i] = (cur[i] + pred) & 0xFF
        else:
            raise DecodeError(f"unknown PNG filter {ftype}")
        out[r] = cur.astype(np.uint8)
        prev = cur
    return out
