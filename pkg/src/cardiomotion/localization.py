"""Heart ROI localization: fixed 64x64 crop around the strongest motion.

The detector is deliberately simple: temporal intensity variance highlights
the beating region, Otsu thresholding binarizes it, and the largest
4-connected component's centroid anchors the crop. The ROI max-pooling
operation used by proposal-driven detectors is implemented and tested here
as well, against the same fixed-grid contract.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidParameter, NoMotionDetected
from .imaging import Image, ImageSequence, PixelMask, smooth_array

ROI_SIZE = 64


@dataclass(frozen=True)
class RoiBox:
    """Top-left corner of a fixed 64x64 crop window."""

    x: int
    y: int
    width: int = ROI_SIZE
    height: int = ROI_SIZE

    def __post_init__(self):
        if self.width != ROI_SIZE or self.height != ROI_SIZE:
            raise InvalidParameter(f"ROI boxes are fixed at {ROI_SIZE}x{ROI_SIZE}")
        if self.x < 0 or self.y < 0:
            raise InvalidParameter("ROI box extends outside the image")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Channel-major activations, (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.size == 0:
            raise InvalidParameter("feature map must be (channels, height, width)")
        if not np.isfinite(d).all():
            raise InvalidParameter("feature map values must be finite")
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def roi_pool(fmap: FeatureMap, roi, bins_h: int, bins_w: int) -> FeatureMap:
    """Max-pool a rectangular region into a fixed (bins_h, bins_w) grid.

    ``roi`` is (x, y, w, h) in map coordinates. Bin i along an axis of
    length L spans [floor(i*L/B), ceil((i+1)*L/B)), which is never empty
    when L >= B.
    """
    x, y, w, h = (int(v) for v in roi)
    if bins_h < 1 or bins_w < 1:
        raise InvalidParameter("bin counts must be >= 1")
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > fmap.width or y + h > fmap.height:
        raise InvalidParameter("roi lies outside the feature map")
    if h < bins_h or w < bins_w:
        raise InvalidParameter("roi must be at least as large as the bin grid")
    region = fmap.data[:, y:y + h, x:x + w]
    out = np.empty((fmap.channels, bins_h, bins_w))
    for i in range(bins_h):
        r0 = int(np.floor(i * h / bins_h))
        r1 = int(np.ceil((i + 1) * h / bins_h))
        for j in range(bins_w):
            c0 = int(np.floor(j * w / bins_w))
            c1 = int(np.ceil((j + 1) * w / bins_w))
            out[:, i, j] = region[:, r0:r1, c0:c1].max(axis=(1, 2))
    return FeatureMap(out)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Classic maximum between-class-variance threshold."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    weight = hist.astype(np.float64)
    w0 = np.cumsum(weight)
    w1 = w0[-1] - w0
    m = np.cumsum(weight * centers)
    mean0 = np.divide(m, w0, out=np.zeros_like(m), where=w0 > 0)
    mean1 = np.divide(m[-1] - m, w1, out=np.zeros_like(m), where=w1 > 0)
    between = w0 * w1 * (mean0 - mean1) ** 2
    return float(centers[int(np.argmax(between))])


def localize_lv(seq: ImageSequence) -> RoiBox:
    """Center the 64x64 crop on the largest connected high-motion blob."""
    if seq.width < ROI_SIZE or seq.height < ROI_SIZE:
        raise InvalidParameter(f"frames must be at least {ROI_SIZE}px on each side")
    variance = seq.as_array().var(axis=0)
    if variance.max() < 1e-8:
        raise NoMotionDetected("temporal variance ceiling below 1e-8")
    smoothed = smooth_array(variance, 2.0)
    binary = smoothed > otsu_threshold(smoothed)
    four_conn = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, count = ndimage.label(binary, structure=four_conn)
    if count == 0:
        raise NoMotionDetected("no connected motion component above threshold")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, np.arange(1, count + 1))
    largest = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == largest)
    cx, cy = float(xs.mean()), float(ys.mean())
    x = int(round(cx)) - ROI_SIZE // 2
    y = int(round(cy)) - ROI_SIZE // 2
    x = min(max(x, 0), seq.width - ROI_SIZE)
    y = min(max(y, 0), seq.height - ROI_SIZE)
    return RoiBox(x=x, y=y)


def crop_sequence(seq: ImageSequence, box: RoiBox) -> ImageSequence:
    """Apply one fixed crop window to every frame."""
    if box.x + box.width > seq.width or box.y + box.height > seq.height:
        raise InvalidParameter("crop box lies outside the sequence frames")
    frames = tuple(Image(f.data[box.y:box.y + box.height, box.x:box.x + box.width])
                   for f in seq.frames)
    return ImageSequence(frames=frames, frame_period_ms=seq.frame_period_ms)


def crop_mask(mask: PixelMask, box: RoiBox) -> PixelMask:
    if box.x + box.width > mask.width or box.y + box.height > mask.height:
        raise InvalidParameter("crop box lies outside the mask")
    return PixelMask(mask.labels[box.y:box.y + box.height, box.x:box.x + box.width])
