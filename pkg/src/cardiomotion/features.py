"""Per-pixel motion features: local intensity windows through the recurrent
stack and trajectory statistics from the dense flow.

The local descriptor of a pixel is the sequence of window patches around it,
one per frame, consumed step-by-step by the LSTM stack; its learned summary
is the final top-layer hidden state. The global descriptor follows the pixel
along the flow and records 3x3 neighborhoods of displacement magnitude and
orientation at every frame transition. The classifier input is their
concatenation, optionally z-scored with training statistics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter
from .imaging import ImageSequence, bilinear_sample
from .neural import LstmStack, lstm_hidden_batch
from .varflow import FlowSequence

MODES = ("local_only", "global_only", "combined")


@dataclass(frozen=True, eq=False)
class LocalFeature:
    values: np.ndarray  # (window^2 * J,)
    pixel: tuple


@dataclass(frozen=True, eq=False)
class Trajectory:
    positions: np.ndarray  # (J, 2) float columns x, y


@dataclass(frozen=True, eq=False)
class GlobalFeature:
    values: np.ndarray  # (18 * (J-1),)
    pixel: tuple


@dataclass(frozen=True, eq=False)
class PixelFeature:
    values: np.ndarray
    pixel: tuple


def _check_pixel(p, width: int, height: int):
    x, y = int(p[0]), int(p[1])
    if not (0 <= x < width and 0 <= y < height):
        raise InvalidParameter(f"pixel {p} outside the {width}x{height} image")
    return x, y


def window_patches(seq: ImageSequence, p, window: int) -> np.ndarray:
    """(J, window^2) replicate-padded crops centered at p, row-major."""
    if window < 3 or window % 2 == 0:
        raise InvalidParameter("window must be an odd integer >= 3")
    x, y = _check_pixel(p, seq.width, seq.height)
    r = window // 2
    frames = seq.as_array()
    padded = np.pad(frames, ((0, 0), (r, r), (r, r)), mode="edge")
    crop = padded[:, y:y + window, x:x + window]
    return crop.reshape(len(seq), window * window)


def local_feature(seq: ImageSequence, p, window: int = 11) -> LocalFeature:
    """Window patches of every frame unrolled into one vector, frames in order."""
    patches = window_patches(seq, p, window)
    return LocalFeature(values=patches.reshape(-1), pixel=(int(p[0]), int(p[1])))


def patch_sequences(seq: ImageSequence, points: np.ndarray, window: int) -> np.ndarray:
    """(P, J, window^2) patch sequences for many pixels at once."""
    if window < 3 or window % 2 == 0:
        raise InvalidParameter("window must be an odd integer >= 3")
    points = np.asarray(points)
    r = window // 2
    frames = seq.as_array()
    padded = np.pad(frames, ((0, 0), (r, r), (r, r)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(1, 2))
    xs = points[:, 0].astype(np.intp)
    ys = points[:, 1].astype(np.intp)
    crops = win[:, ys, xs]  # (J, P, window, window)
    J = len(seq)
    return np.moveaxis(crops.reshape(J, len(points), window * window), 0, 1)


def _trace_positions(points: np.ndarray, flows: FlowSequence) -> np.ndarray:
    """Vectorized tracing of (P, 2) start pixels; returns (J, P, 2)."""
    w, h = flows.width, flows.height
    pos = points.astype(np.float64).copy()
    out = np.empty((len(flows) + 1, len(points), 2))
    out[0] = pos
    for j, field in enumerate(flows.flows):
        du = bilinear_sample(field.u, pos[:, 0], pos[:, 1])
        dv = bilinear_sample(field.v, pos[:, 0], pos[:, 1])
        pos = pos + np.stack([du, dv], axis=1)
        pos[:, 0] = np.clip(pos[:, 0], 0.0, w - 1.0)
        pos[:, 1] = np.clip(pos[:, 1], 0.0, h - 1.0)
        out[j + 1] = pos
    return out


def trace(p, flows: FlowSequence) -> Trajectory:
    """Follow a pixel through the flow sequence with bilinear interpolation."""
    x, y = _check_pixel(p, flows.width, flows.height)
    positions = _trace_positions(np.array([[x, y]], dtype=np.float64), flows)
    return Trajectory(positions=positions[:, 0, :])


_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def _global_matrix(flows: FlowSequence, points: np.ndarray) -> np.ndarray:
    """(P, 18*(J-1)) trajectory features for many pixels at once."""
    w, h = flows.width, flows.height
    traj = _trace_positions(points, flows)
    n = len(points)
    out = np.empty((n, 18 * len(flows)))
    for j, field in enumerate(flows.flows):
        cx = np.clip(np.rint(traj[j][:, 0]).astype(np.intp), 0, w - 1)
        cy = np.clip(np.rint(traj[j][:, 1]).astype(np.intp), 0, h - 1)
        mags = np.empty((n, 9))
        oris = np.empty((n, 9))
        for k, (dy, dx) in enumerate(_OFFSETS):
            sy = np.clip(cy + dy, 0, h - 1)
            sx = np.clip(cx + dx, 0, w - 1)
            uu = field.u[sy, sx]
            vv = field.v[sy, sx]
            mags[:, k] = np.hypot(uu, vv)
            ori = np.arctan2(vv, uu)
            ori = np.where(mags[:, k] == 0.0, 0.0, ori)   # atan2(0,0) := 0
            ori = np.where(ori == -np.pi, np.pi, ori)     # keep range (-pi, pi]
            oris[:, k] = ori
        out[:, j * 18:j * 18 + 9] = mags
        out[:, j * 18 + 9:(j + 1) * 18] = oris
    return out


def global_feature(flows: FlowSequence, p) -> GlobalFeature:
    """Magnitude and orientation 3x3 patches along the pixel's trajectory."""
    x, y = _check_pixel(p, flows.width, flows.height)
    values = _global_matrix(flows, np.array([[x, y]], dtype=np.float64))[0]
    return GlobalFeature(values=values, pixel=(x, y))


def normalize(values: np.ndarray, stats) -> np.ndarray:
    """Per-dimension z-score; ``stats`` is (mean, std) or None for identity."""
    if stats is None:
        return values
    mean, std = stats
    return (values - mean) / np.maximum(std, 1e-8)


def assemble(seq: ImageSequence, flows: FlowSequence, p, lstm: LstmStack,
             window: int = 11, mode: str = "combined", stats=None) -> PixelFeature:
    """Classifier input for one pixel: [learned local || trajectory] per mode."""
    values = feature_matrix(seq, flows, np.array([[int(p[0]), int(p[1])]]),
                            lstm, window, mode, stats)[0]
    return PixelFeature(values=values, pixel=(int(p[0]), int(p[1])))


def feature_matrix(seq: ImageSequence, flows: FlowSequence, points: np.ndarray,
                   lstm: LstmStack, window: int = 11, mode: str = "combined",
                   stats=None, batch: int = 512) -> np.ndarray:
    """Feature rows for (P, 2) pixel coordinates; batched over pixels."""
    if mode not in MODES:
        raise InvalidParameter(f"mode must be one of {MODES}")
    points = np.asarray(points)
    parts = []
    if mode in ("local_only", "combined"):
        if lstm.input_dim != window * window:
            raise InvalidParameter(
                f"LSTM input dim {lstm.input_dim} != window^2 = {window * window}")
        seqs = patch_sequences(seq, points, window)
        hidden = np.concatenate([lstm_hidden_batch(lstm, seqs[lo:lo + batch])
                                 for lo in range(0, len(points), batch)])
        parts.append(hidden)
    if mode in ("global_only", "combined"):
        parts.append(_global_matrix(flows, points.astype(np.float64)))
    values = np.concatenate(parts, axis=1)
    return normalize(values, stats)
