"""Quasi-dense correspondence search via a correlation pyramid.

Bottom level: normalized cross-correlation of small patches on a half-patch
anchor grid, scored against every candidate displacement inside a search
window. Upper levels: 3x3 max-pool over candidates, candidate subsampling by
2, averaging of the four child maps that tile the doubled patch, and a
power-law rectification. Matches are recovered by backtracking each
top-level maximum to pixel-level correspondences, then keeping
reciprocal-best pairs above a confidence threshold.

Maps are indexed by *displacement*, not absolute target position, so child
maps of a rigidly shifted region peak at the same index and the aggregation
average needs no explicit shifting.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CannotAggregate, InvalidParameter
from .imaging import Image

DEFAULT_PATCH = 4
DEFAULT_NU = 1.4
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class CorrelationMapStack:
    """Similarity scores of one pyramid level.

    ``maps[ay, ax, iy, ix]`` scores the anchor at (``anchors_x[ax]``,
    ``anchors_y[ay]``) against the target patch displaced by
    (``disp[ix]``, ``disp[iy]``). Scores live in [0, 1]. ``below`` links to
    the previous level (None at the bottom).
    """

    level: int
    patch_size: int
    width: int
    height: int
    anchors_x: np.ndarray
    anchors_y: np.ndarray
    disp: np.ndarray
    maps: np.ndarray
    below: "CorrelationMapStack | None" = None

    @property
    def disp_step(self) -> int:
        return int(self.disp[1] - self.disp[0]) if len(self.disp) > 1 else 1


@dataclass(frozen=True, eq=False)
class MatchSet:
    """Pixel correspondences (x, y) -> (x', y') with confidences in (0, 1]."""

    src: np.ndarray  # (M, 2) int, columns x, y
    dst: np.ndarray  # (M, 2) int, columns x', y'
    confidence: np.ndarray  # (M,)

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).reshape(-1, 2)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1, 2)
        conf = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if not (len(src) == len(dst) == len(conf)):
            raise InvalidParameter("match arrays must have equal length")
        if len(conf) and conf.min() <= 0:
            raise InvalidParameter("match confidences must be positive")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "confidence", conf)

    def __len__(self) -> int:
        return len(self.confidence)

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.zeros((0, 2), int), np.zeros((0, 2), int), np.zeros(0))

    def displacements(self) -> np.ndarray:
        return (self.dst - self.src).astype(np.float64)

    def to_csv(self, path) -> None:
        lines = ["x,y,x',y',confidence"]
        for (x, y), (xp, yp), c in zip(self.src, self.dst, self.confidence):
            lines.append(f"{x},{y},{xp},{yp},{c!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def patch_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Mean-removed NCC of two equal-size patches, mapped from [-1,1] to [0,1].

    A patch with zero variance (exactly constant) scores 0 against anything.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameter(f"patch shapes differ: {a.shape} vs {b.shape}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    am = a - a.mean()
    bm = b - b.mean()
    ncc = float(np.vdot(am, bm) / (np.linalg.norm(am) * np.linalg.norm(bm)))
    return (min(max(ncc, -1.0), 1.0) + 1.0) / 2.0


def _normalized_patches(flat: np.ndarray) -> tuple:
    """Mean-remove and L2-normalize patch rows; returns (rows, zero_variance)."""
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    zero = np.ptp(flat, axis=1) == 0
    safe = np.where(norms > 0, norms, 1.0)
    return centered / safe[:, None], zero


def _all_patches(data: np.ndarray, patch: int) -> np.ndarray:
    """Replicate-padded patch at every pixel, flattened to (H*W, patch*patch).

    Patch centered at p covers [p - patch//2, p + patch - patch//2).
    """
    lead = patch // 2
    trail = patch - lead - 1
    padded = np.pad(data, ((lead, trail), (lead, trail)), mode="edge")
    win = sliding_window_view(padded, (patch, patch))
    h, w = data.shape
    return win.reshape(h * w, patch * patch)


def bottom_correlation(src: Image, dst: Image, patch_size: int = DEFAULT_PATCH,
                       radius: int | None = None) -> CorrelationMapStack:
    """Level-0 correlation maps on a half-patch anchor grid.

    Every anchor is scored against all integer displacements within
    ``radius`` (default: half the smaller image dimension). Displacements
    that land outside the target image score 0.
    """
    if src.width != dst.width or src.height != dst.height:
        raise InvalidParameter("source and target dimensions differ")
    if patch_size < 2 or patch_size % 2:
        raise InvalidParameter("patch_size must be an even integer >= 2")
    if min(src.width, src.height) < patch_size:
        raise InvalidParameter("image smaller than the correlation patch")
    h, w = src.height, src.width
    if radius is None:
        radius = min(w, h) // 2
    if radius < 1:
        raise InvalidParameter("search radius must be >= 1")

    stride = patch_size // 2
    ax = np.arange(0, w, stride)
    ay = np.arange(0, h, stride)

    src_rows, src_zero = _normalized_patches(_all_patches(src.data, patch_size))
    dst_rows, dst_zero = _normalized_patches(_all_patches(dst.data, patch_size))

    anchor_idx = (ay[:, None] * w + ax[None, :]).ravel()
    scores = src_rows[anchor_idx] @ dst_rows.T  # (A, H*W) in [-1, 1]
    scores = (np.clip(scores, -1.0, 1.0) + 1.0) / 2.0
    invalid = src_zero[anchor_idx][:, None] | dst_zero[None, :]
    scores[invalid] = 0.0
    score_img = scores.reshape(len(ay), len(ax), h, w)

    disp = np.arange(-radius, radius + 1)
    maps = np.zeros((len(ay), len(ax), len(disp), len(disp)))
    for iy, y in enumerate(ay):
        ty0, ty1 = max(y - radius, 0), min(y + radius, h - 1)
        dy0 = ty0 - (y - radius)
        for ix, x in enumerate(ax):
            tx0, tx1 = max(x - radius, 0), min(x + radius, w - 1)
            dx0 = tx0 - (x - radius)
            block = score_img[iy, ix, ty0:ty1 + 1, tx0:tx1 + 1]
            maps[iy, ix, dy0:dy0 + block.shape[0], dx0:dx0 + block.shape[1]] = block

    return CorrelationMapStack(level=0, patch_size=patch_size, width=w, height=h,
                               anchors_x=ax.astype(np.float64),
                               anchors_y=ay.astype(np.float64),
                               disp=disp, maps=maps)


def _maxpool3(maps: np.ndarray) -> np.ndarray:
    """3x3 max over the two trailing (displacement) axes, zero padded."""
    padded = np.pad(maps, ((0, 0), (0, 0), (1, 1), (1, 1)))
    d = maps.shape[-1]
    out = maps.copy()
    for oy in range(3):
        for ox in range(3):
            np.maximum(out, padded[:, :, oy:oy + d, ox:ox + d], out=out)
    return out


def aggregate_level(lower: CorrelationMapStack, nu: float = DEFAULT_NU) -> CorrelationMapStack:
    """Build the next pyramid level: pool, subsample, average children, rectify."""
    new_patch = lower.patch_size * 2
    if new_patch > min(lower.width, lower.height):
        raise CannotAggregate(
            f"patch size {lower.patch_size} already covers the image; cannot double")
    if nu <= 0:
        raise InvalidParameter("rectification exponent must be positive")

    pooled = _maxpool3(lower.maps)

    # subsample candidate displacements by 2, keeping d=0 on the grid
    center = int(np.flatnonzero(lower.disp == 0)[0])
    start = center % 2
    keep = np.arange(start, len(lower.disp), 2)
    disp = lower.disp[keep]
    pooled = pooled[:, :, keep][:, :, :, keep]

    # average the four child maps tiling the doubled patch (clamped at edges)
    n_ay, n_ax = pooled.shape[:2]
    py = np.arange((n_ay + 1) // 2)
    px = np.arange((n_ax + 1) // 2)
    cy0, cy1 = 2 * py, np.minimum(2 * py + 1, n_ay - 1)
    cx0, cx1 = 2 * px, np.minimum(2 * px + 1, n_ax - 1)
    avg = 0.25 * (pooled[cy0][:, cx0] + pooled[cy0][:, cx1]
                  + pooled[cy1][:, cx0] + pooled[cy1][:, cx1])

    anchors_x = 0.5 * (lower.anchors_x[cx0] + lower.anchors_x[cx1])
    anchors_y = 0.5 * (lower.anchors_y[cy0] + lower.anchors_y[cy1])

    return CorrelationMapStack(level=lower.level + 1, patch_size=new_patch,
                               width=lower.width, height=lower.height,
                               anchors_x=anchors_x, anchors_y=anchors_y,
                               disp=disp, maps=np.power(avg, nu), below=lower)


def correlation_pyramid(src: Image, dst: Image, patch_size: int = DEFAULT_PATCH,
                        radius: int | None = None, nu: float = DEFAULT_NU) -> CorrelationMapStack:
    """Aggregate from the bottom level until patches reach half the image."""
    stack = bottom_correlation(src, dst, patch_size, radius)
    min_dim = min(src.width, src.height)
    while 4 * stack.patch_size < min_dim:
        stack = aggregate_level(stack, nu)
    return stack


def _backtrack(stack: CorrelationMapStack, ay: int, ax: int, iy: int, ix: int, out: dict):
    """Descend one (anchor, displacement) cell to bottom-level candidates."""
    if stack.below is None:
        x = int(round(stack.anchors_x[ax]))
        y = int(round(stack.anchors_y[ay]))
        dx = int(stack.disp[ix])
        dy = int(stack.disp[iy])
        tx, ty = x + dx, y + dy
        if not (0 <= tx < stack.width and 0 <= ty < stack.height):
            return
        score = float(stack.maps[ay, ax, iy, ix])
        key = (x, y, tx, ty)
        if score > out.get(key, 0.0):
            out[key] = score
        return

    below = stack.below
    step = below.disp_step
    dxv = float(stack.disp[ix])
    dyv = float(stack.disp[iy])
    win_x = np.flatnonzero(np.abs(below.disp - dxv) <= step)
    win_y = np.flatnonzero(np.abs(below.disp - dyv) <= step)
    n_ay, n_ax = below.maps.shape[:2]
    for cy in {2 * ay, min(2 * ay + 1, n_ay - 1)}:
        for cx in {2 * ax, min(2 * ax + 1, n_ax - 1)}:
            sub = below.maps[cy, cx][np.ix_(win_y, win_x)]
            j, i = np.unravel_index(int(np.argmax(sub)), sub.shape)
            _backtrack(below, cy, cx, int(win_y[j]), int(win_x[i]), out)


def extract_matches(top: CorrelationMapStack, threshold: float = DEFAULT_THRESHOLD) -> MatchSet:
    """Backtrack top-level maxima to pixel matches; keep reciprocal best >= threshold."""
    if not (0.0 < threshold < 1.0):
        raise InvalidParameter("threshold must lie in (0, 1)")
    if top.maps.size == 0:
        raise InvalidParameter("correlation stack is empty")

    candidates: dict = {}
    n_ay, n_ax, nd, _ = top.maps.shape
    for ay in range(n_ay):
        for ax in range(n_ax):
            iy, ix = np.unravel_index(int(np.argmax(top.maps[ay, ax])), (nd, nd))
            _backtrack(top, ay, ax, int(iy), int(ix), candidates)

    # reciprocal-best: a candidate survives only if it is the highest-scoring
    # claim both of its source pixel and of its target pixel
    items = sorted(candidates.items())
    best_src: dict = {}
    best_dst: dict = {}
    for (x, y, tx, ty), score in items:
        if score >= threshold:
            if score > best_src.get((x, y), (0.0, None))[0]:
                best_src[(x, y)] = (score, (tx, ty))
            if score > best_dst.get((tx, ty), (0.0, None))[0]:
                best_dst[(tx, ty)] = (score, (x, y))

    src, dst, conf = [], [], []
    for (x, y), (score, (tx, ty)) in sorted(best_src.items()):
        if best_dst.get((tx, ty), (None, None))[1] == (x, y):
            src.append((x, y))
            dst.append((tx, ty))
            conf.append(score)
    if not src:
        return MatchSet.empty()
    return MatchSet(np.array(src), np.array(dst), np.array(conf))


def match_pair(src: Image, dst: Image, patch_size: int = DEFAULT_PATCH,
               radius: int | None = None, nu: float = DEFAULT_NU,
               threshold: float = DEFAULT_THRESHOLD) -> MatchSet:
    """Convenience wrapper: full pyramid on one image pair, then extraction."""
    top = correlation_pyramid(src, dst, patch_size, radius, nu)
    return extract_matches(top, threshold)
