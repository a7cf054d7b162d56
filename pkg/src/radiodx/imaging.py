"""Raster codecs, bilinear resizing, model-input conversion and mean/difference images.

A float image is a float32 array shaped ``[C, H, W]`` with samples in ``[0, 1]``.
8-bit results are rounded half-to-even (``numpy.rint``).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor_core import ShapeError

MODEL_SIZE = 224

# ImageNet channel statistics, for backbones converted from pretrained weights
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class Raster:
    width: int
    height: int
    channels: int
    samples: np.ndarray  # uint8, shape (height, width, channels)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeError(f"raster dims must be positive, got {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise ShapeError(f"raster must have 1 or 3 channels, got {self.channels}")
        samples = np.asarray(self.samples, dtype=np.uint8)
        expected = self.width * self.height * self.channels
        if samples.size != expected:
            raise ShapeError(f"raster needs {expected} samples, got {samples.size}")
        self.samples = samples.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Raster":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(w, h, c, arr)

    def to_float(self) -> np.ndarray:
        """``[C, H, W]`` float32 in ``[0, 1]``."""
        return (self.samples.transpose(2, 0, 1).astype(np.float32) / np.float32(255))

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (self.width, self.height, self.channels) == (other.width, other.height, other.channels) \
            and np.array_equal(self.samples, other.samples)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def float_to_raster(img: np.ndarray) -> Raster:
    """Inverse of :meth:`Raster.to_float` (x255, rounded half-to-even)."""
    return Raster.from_array(to_uint8(np.asarray(img, dtype=np.float64).transpose(1, 2, 0) * 255))


# -- PGM / PPM --------------------------------------------------------------

class PnmError(ValueError):
    """Base class for codec failures; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class PnmHeaderError(PnmError):
    pass


class PnmTruncatedError(PnmError):
    pass


class PnmMaxvalError(PnmError):
    pass


_WS = b" \t\n\r\v\f"


def _header_token(data: bytes, pos: int) -> tuple[bytes, int, int]:
    """Return (token, token_start, position after token)."""
    n = len(data)
    while pos < n:
        if data[pos] in _WS:
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WS and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PnmHeaderError("unexpected end of header", start)
    return data[start:pos], start, pos


def decode_pnm(data: bytes) -> Raster:
    """Decode a binary PGM (P5) or PPM (P6) image with maxval 255."""
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise PnmHeaderError(f"unsupported magic {magic!r}", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _header_token(data, pos)
        if not tok.isdigit():
            raise PnmHeaderError(f"{name} is not a decimal integer: {tok!r}", start)
        fields.append((int(tok), start))
    (width, wpos), (height, hpos), (maxval, mpos) = fields
    if width < 1:
        raise PnmHeaderError("width must be positive", wpos)
    if height < 1:
        raise PnmHeaderError("height must be positive", hpos)
    if maxval != 255:
        raise PnmMaxvalError(f"maxval {maxval} unsupported, only 255", mpos)
    if pos >= len(data) or data[pos] not in _WS:
        raise PnmHeaderError("missing whitespace after maxval", pos)
    pos += 1
    size = width * height * channels
    payload = data[pos:pos + size]
    if len(payload) < size:
        raise PnmTruncatedError(f"payload needs {size} bytes, found {len(payload)}", pos + len(payload))
    if len(data) > pos + size:
        raise PnmHeaderError("trailing bytes after payload", pos + size)
    return Raster(width, height, channels, np.frombuffer(payload, dtype=np.uint8).copy())


def encode_pnm(raster: Raster) -> bytes:
    magic = b"P5" if raster.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (raster.width, raster.height)
    return header + np.ascontiguousarray(raster.samples, dtype=np.uint8).tobytes()


# Extension -> decoder(bytes) -> Raster. Anything beyond PGM/PPM plugs in here.
DECODERS: dict[str, Callable[[bytes], Raster]] = {".pgm": decode_pnm, ".ppm": decode_pnm, ".pnm": decode_pnm}


def register_decoder(extension: str, decoder: Callable[[bytes], Raster]) -> None:
    DECODERS[extension.lower()] = decoder


def _pillow_decode(data: bytes) -> Raster:
    import io

    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        im = im.convert("L" if im.mode in ("1", "L", "I", "I;16", "F") else "RGB")
        return Raster.from_array(np.asarray(im))


def load_raster(path: str | os.PathLike) -> Raster:
    ext = os.path.splitext(os.fspath(path))[1].lower()
    with open(path, "rb") as fh:
        data = fh.read()
    decoder = DECODERS.get(ext)
    if decoder is None:
        if ext not in (".jpg", ".jpeg", ".png"):
            raise ValueError(f"no decoder registered for {ext!r}")
        try:
            import PIL  # noqa: F401
        except ImportError as exc:
            raise ValueError(f"decoding {ext} needs Pillow (pip install artifact[jpeg])") from exc
        decoder = _pillow_decode
    return decoder(data)


def save_raster(raster: Raster, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(raster))


# -- resizing -----------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def _resize_chw(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    c, h, w = img.shape
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    src = img.astype(np.float64)
    rows = src[:, y0, :] * (1 - fy)[None, :, None] + src[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def resize_bilinear(img, out_w: int, out_h: int):
    """Bilinear resize with pixel-centre alignment, clamped at borders.

    Accepts a :class:`Raster` (rounded back to 8 bits) or a ``[C, H, W]`` float array.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output dims must be >= 1, got {out_w}x{out_h}")
    if isinstance(img, Raster):
        if (img.width, img.height) == (out_w, out_h):
            return Raster(img.width, img.height, img.channels, img.samples.copy())
        out = _resize_chw(img.samples.transpose(2, 0, 1), out_w, out_h)
        return Raster.from_array(to_uint8(out.transpose(1, 2, 0)))
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise ShapeError(f"float image must be [C,H,W], got {arr.shape}", arr.shape)
    if arr.shape[1:] == (out_h, out_w):
        return arr.copy()
    return _resize_chw(arr, out_w, out_h).astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def to_model_input(img: Raster, size: int = MODEL_SIZE) -> np.ndarray:
    """Resize to ``size x size``, replicate grey to three channels and scale by 1/255."""
    resized = resize_bilinear(img, size, size)
    chw = resized.to_float()
    if chw.shape[0] == 1:
        chw = np.repeat(chw, 3, axis=0)
    return chw


def normalize(batch: np.ndarray, scheme: str = "unit") -> np.ndarray:
    """Optional post-scaling normalization applied before the network."""
    if scheme == "unit":
        return batch
    if scheme == "imagenet":
        shape = (3, 1, 1) if batch.ndim == 3 else (1, 3, 1, 1)
        return ((batch - IMAGENET_MEAN.reshape(shape)) / IMAGENET_STD.reshape(shape)).astype(np.float32)
    raise ValueError(f"unknown normalization {scheme!r}")


# -- class analysis -----------------------------------------------------------

def mean_image(images: Sequence[np.ndarray]) -> np.ndarray:
    if len(images) == 0:
        raise ValueError("mean_image needs at least one image")
    shape = np.shape(images[0])
    for im in images:
        if np.shape(im) != shape:
            raise ShapeError(f"mixed image shapes {shape} and {np.shape(im)}", shape, np.shape(im))
    total = np.zeros(shape, dtype=np.float64)
    for im in images:
        total += im
    return (total / len(images)).astype(np.float32)


def diff_image(mean_a: np.ndarray, mean_b: np.ndarray) -> Raster:
    """Map ``b - a`` onto blue (-1) / white (0) / red (+1)."""
    a = np.asarray(mean_a, dtype=np.float64)
    b = np.asarray(mean_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mean images differ in shape: {a.shape} vs {b.shape}", a.shape, b.shape)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ShapeError(f"diff_image needs single-channel means, got {a.shape}", a.shape)
        a, b = a[0], b[0]
    d = np.clip(b - a, -1, 1)
    neg = np.minimum(d, 0)
    pos = np.maximum(d, 0)
    r = 255 * (1 + neg)
    g = 255 * (1 + neg - pos)
    bl = 255 * (1 - pos)
    return Raster.from_array(to_uint8(np.stack([r, g, bl], axis=-1)))
