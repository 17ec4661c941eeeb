"""Image/flow containers, PGM and .flo file IO, Gaussian smoothing, resampling.

Conventions used throughout the toolkit:

* intensities are float64 in [0, 1], row-major, single channel;
* flow components (u, v) are pixels/frame, u along x (columns), v along y (rows);
* all filtering and sampling uses replicate borders so the ROI edge does not
  generate spurious gradients.

Containers are frozen dataclasses wrapping read-only numpy arrays; they are
safe to share across threads.
"""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidParameter, TruncatedFile, UnsupportedFormat

FLO_MAGIC = b"PIEH"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Image:
    """One grayscale frame; ``data`` is (height, width) float64 in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2 or d.size == 0:
            raise InvalidParameter(f"image data must be non-empty 2-D, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise InvalidParameter("image intensities must be finite")
        if d.min() < -1e-9 or d.max() > 1.0 + 1e-9:
            raise InvalidParameter("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _readonly(np.clip(d, 0.0, 1.0)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class ImageSequence:
    """Ordered frames of one cardiac cycle plus the frame period metadata."""

    frames: tuple
    frame_period_ms: float = 45.1

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise InvalidParameter("an image sequence needs at least 2 frames")
        w, h = frames[0].width, frames[0].height
        if any(f.width != w or f.height != h for f in frames):
            raise InvalidParameter("all frames in a sequence must share dimensions")
        if not (math.isfinite(self.frame_period_ms) and self.frame_period_ms > 0):
            raise InvalidParameter("frame_period_ms must be positive and finite")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    def as_array(self) -> np.ndarray:
        """Stack frames into a (J, height, width) array."""
        return np.stack([f.data for f in self.frames])


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense displacement field; ``u``/``v`` are (height, width) float64.

    Non-finite entries are tolerated and mean "no estimate here"; they only
    matter to :func:`cardiomotion.varflow.flow_density`.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape or u.size == 0:
            raise InvalidParameter("u and v must be equal-shape non-empty 2-D arrays")
        object.__setattr__(self, "u", _readonly(u))
        object.__setattr__(self, "v", _readonly(v))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


@dataclass(frozen=True, eq=False)
class PixelMask:
    """Binary per-pixel labels; 0 = normal, 1 = infarct (or generic region)."""

    labels: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.labels)
        if m.ndim != 2 or m.size == 0:
            raise InvalidParameter("mask labels must be non-empty 2-D")
        if not np.isin(m, (0, 1)).all():
            raise InvalidParameter("mask labels must be 0 or 1")
        object.__setattr__(self, "labels", _readonly(m.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class GaussianParams:
    """Standard deviation of an isotropic Gaussian filter, in pixels."""

    sigma: float

    def __post_init__(self):
        if not (isinstance(self.sigma, (int, float)) and math.isfinite(self.sigma)):
            raise InvalidParameter("sigma must be a finite number")
        if self.sigma < 0:
            raise InvalidParameter("sigma must be non-negative")


# ---------------------------------------------------------------------------
# smoothing / resampling (array-level helpers are reused by the flow solver)
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian, truncated at radius ceil(3*sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth_array(a: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filtering with replicate borders; sigma=0 is a no-op."""
    if sigma == 0:
        return np.array(a, dtype=np.float64)
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.asarray(a, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        ap = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for i, g in enumerate(k):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + out.shape[axis])
            acc += g * ap[tuple(sl)]
        out = acc
    return out


def gaussian_smooth(img: Image, params: GaussianParams) -> Image:
    """Smooth an image; kernel radius ceil(3*sigma), replicate border."""
    if params.sigma == 0:
        return img
    return Image(smooth_array(img.data, params.sigma))


def downsample_array(a: np.ndarray, presmooth_sigma: float = 0.8) -> np.ndarray:
    """Half-size area average after anti-alias presmoothing; dims = ceil(dim/2)."""
    h, w = a.shape
    s = smooth_array(a, presmooth_sigma)
    # pad odd axes by replication: averaging a duplicated edge pixel equals
    # averaging the clipped one-wide block
    if h % 2:
        s = np.concatenate([s, s[-1:, :]], axis=0)
    if w % 2:
        s = np.concatenate([s, s[:, -1:]], axis=1)
    return 0.25 * (s[0::2, 0::2] + s[1::2, 0::2] + s[0::2, 1::2] + s[1::2, 1::2])


def downsample_half(img: Image) -> Image:
    if img.width < 2 or img.height < 2:
        raise InvalidParameter("cannot downsample an image smaller than 2x2")
    return Image(np.clip(downsample_array(img.data), 0.0, 1.0))


def bilinear_sample(a: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a 2-D array at float coordinates, replicating the border."""
    h, w = a.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = a[y0, x0] * (1.0 - fx) + a[y0, x1] * fx
    bot = a[y1, x0] * (1.0 - fx) + a[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def resize_bilinear(a: np.ndarray, shape: tuple) -> np.ndarray:
    """Resize by bilinear interpolation with pixel-center alignment."""
    h, w = a.shape
    nh, nw = shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(a, gx, gy)


# ---------------------------------------------------------------------------
# PGM (binary P5) IO
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"^\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pgm_tokens(raw: bytes, count: int):
    """Read whitespace/comment-separated header tokens after the magic."""
    pos = 2
    tokens = []
    for _ in range(count):
        m = _TOKEN.match(raw[pos:])
        if not m:
            raise FormatError("malformed PGM header")
        tokens.append(m.group(1))
        pos += m.end(1)
    return tokens, pos


def read_image(path) -> Image:
    """Read an 8- or 16-bit binary PGM, scaling intensities to [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < 2:
        raise FormatError("file too short for a PGM header")
    magic = raw[:2]
    if magic in (b"P3", b"P6"):
        raise UnsupportedFormat("color PPM files are not supported; expected grayscale P5")
    if magic != b"P5":
        raise FormatError(f"unrecognized magic {magic!r}; expected binary PGM (P5)")
    try:
        (w_tok, h_tok, max_tok), pos = _read_pgm_tokens(raw, 3)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (ValueError, FormatError):
        raise FormatError("malformed PGM header") from None
    if width <= 0 or height <= 0:
        raise FormatError("PGM dimensions must be positive")
    if not (0 < maxval < 65536):
        raise FormatError(f"PGM maxval {maxval} out of range")
    pos += 1  # single whitespace byte separating header and raster
    depth = 2 if maxval > 255 else 1
    need = width * height * depth
    if len(raw) - pos < need:
        raise FormatError("PGM pixel data shorter than header implies")
    dtype = ">u2" if depth == 2 else np.uint8
    px = np.frombuffer(raw[pos:pos + need], dtype=dtype).reshape(height, width)
    return Image(px.astype(np.float64) / maxval)


def write_image(img: Image, path, maxval: int = 65535) -> None:
    """Write a binary PGM; 16-bit by default so [0,1] round trips exactly."""
    if maxval not in (255, 65535):
        raise InvalidParameter("maxval must be 255 or 65535")
    q = np.rint(img.data * maxval)
    dtype = ">u2" if maxval > 255 else np.uint8
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode()
    Path(path).write_bytes(header + q.astype(dtype).tobytes())


def read_mask(path) -> PixelMask:
    """Read a mask PGM; any intensity above 0.5 counts as label 1."""
    img = read_image(path)
    return PixelMask((img.data > 0.5).astype(np.uint8))


def write_mask(mask: PixelMask, path) -> None:
    data = (mask.labels * 255).astype(np.uint8)
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


# ---------------------------------------------------------------------------
# Middlebury .flo IO
# ---------------------------------------------------------------------------

def read_flo(path) -> FlowField:
    """Read a Middlebury .flo flow field (bit-exact at 32-bit precision)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FLO_MAGIC:
        raise FormatError("bad .flo magic; expected 'PIEH'")
    if len(raw) < 12:
        raise TruncatedFile(".flo header truncated")
    width, height = struct.unpack("<ii", raw[4:12])
    if width <= 0 or height <= 0:
        raise FormatError(f".flo dimensions {width}x{height} invalid")
    need = 12 + width * height * 8
    if len(raw) != need:
        raise TruncatedFile(f".flo payload is {len(raw)} bytes, header implies {need}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width, 2)
    return FlowField(data[..., 0].astype(np.float64), data[..., 1].astype(np.float64))


def write_flo(flow: FlowField, path) -> None:
    interleaved = np.empty((flow.height, flow.width, 2), dtype="<f4")
    interleaved[..., 0] = flow.u
    interleaved[..., 1] = flow.v
    header = FLO_MAGIC + struct.pack("<ii", flow.width, flow.height)
    Path(path).write_bytes(header + interleaved.tobytes())
