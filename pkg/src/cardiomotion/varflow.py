"""Variational optical flow with brightness + gradient constancy, robust
penalization, a quasi-dense matching prior, and coarse-to-fine warping.

The minimized functional is the per-pixel sum of

* data:       delta * P(w^T J0 w) + gamma * P(w^T Jxy w)
* smoothness: alpha * P(|grad u|^2 + |grad v|^2)
* matching:   beta * c(x) * P(|w - w'|^2)

with P(s2) = sqrt(s2 + eps^2), homogeneous w = (u, v, 1), J0/Jxy the
brightness and gradient-constancy motion tensors, and (w', c) the matched
displacement prior with its confidence. Each pyramid level warps the target
once, then runs fixed-point ("lazy") relinearizations of P'; every
relinearization solves its linear system with red-black successive
over-relaxation. Because P is concave in its argument, each relinearized
quadratic majorizes the level energy, so the recorded level energy never
increases across outer iterations (up to float rounding).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParameter, NumericalDivergence
from .imaging import (FlowField, Image, ImageSequence, PixelMask,
                      bilinear_sample, downsample_array, resize_bilinear,
                      smooth_array)
from .matching import MatchSet, match_pair

MIN_LEVEL_DIM = 16


@dataclass(frozen=True)
class FlowParams:
    """Weights and iteration counts of the variational solver.

    Default weights are balanced for intensities in [0, 1]: the motion
    tensors then carry entries of order |grad I|^2 ~ 1e-2, so alpha/beta
    far above that regularize sub-pixel cardiac motion into oblivion.
    """

    alpha: float = 0.05         # smoothness weight
    beta: float = 0.02          # matching-prior weight
    delta: float = 1.0          # brightness-constancy weight
    gamma: float = 0.7          # gradient-constancy weight
    sigma: float = 0.8          # presmoothing std dev, pixels
    epsilon: float = 1e-3       # robust penalizer constant
    levels: int | None = None   # pyramid depth; None = down to 16 px
    outer_iters: int = 5
    solver_iters: int = 30
    omega: float = 1.6          # SOR relaxation factor

    def __post_init__(self):
        for name in ("alpha", "beta", "delta", "gamma", "sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidParameter(f"{name} must be finite and >= 0")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise InvalidParameter("epsilon must be positive")
        if self.levels is not None and self.levels < 1:
            raise InvalidParameter("levels must be >= 1")
        if self.outer_iters < 1 or self.solver_iters < 1:
            raise InvalidParameter("iteration counts must be >= 1")
        if not (1.0 < self.omega < 2.0):
            raise InvalidParameter("omega must lie in (1, 2)")


@dataclass(frozen=True, eq=False)
class MotionTensor:
    """Per-pixel 3x3 brightness (j0) and gradient-constancy (jxy) tensors.

    ``valid`` is 1 where the warp sampled inside the target image and 0
    where the data term must be switched off.
    """

    j0: np.ndarray   # (H, W, 3, 3)
    jxy: np.ndarray  # (H, W, 3, 3)
    valid: np.ndarray  # (H, W)


@dataclass(frozen=True, eq=False)
class FlowSequence:
    """Flows between consecutive frames; flows[j] maps frame j to j+1."""

    flows: tuple

    def __post_init__(self):
        flows = tuple(self.flows)
        if not flows:
            raise InvalidParameter("a flow sequence needs at least one field")
        w, h = flows[0].width, flows[0].height
        if any(f.width != w or f.height != h for f in flows):
            raise InvalidParameter("all flow fields must share dimensions")
        object.__setattr__(self, "flows", flows)

    def __len__(self) -> int:
        return len(self.flows)

    def __getitem__(self, j: int) -> FlowField:
        return self.flows[j]

    @property
    def width(self) -> int:
        return self.flows[0].width

    @property
    def height(self) -> int:
        return self.flows[0].height


@dataclass(frozen=True, eq=False)
class FlowResult:
    """Solver output: the flow plus the finest-level energy trace."""

    flow: FlowField
    energy_trace: np.ndarray  # energies at the finest level, outer_iters+1 values


def penalize(s2, epsilon: float):
    """Robust penalizer P(s2) = sqrt(s2 + eps^2); accepts scalars or arrays."""
    s2 = np.asarray(s2, dtype=np.float64)
    if epsilon <= 0 or not math.isfinite(epsilon):
        raise InvalidParameter("epsilon must be positive and finite")
    if np.any(s2 < 0):
        raise InvalidParameter("penalizer argument must be non-negative")
    out = np.sqrt(s2 + epsilon * epsilon)
    return float(out) if out.ndim == 0 else out


def penalize_deriv(s2, epsilon: float):
    """dP/d(s2) = 1 / (2 sqrt(s2 + eps^2)), used for the lazy linearization."""
    s2 = np.asarray(s2, dtype=np.float64)
    if epsilon <= 0 or not math.isfinite(epsilon):
        raise InvalidParameter("epsilon must be positive and finite")
    if np.any(s2 < 0):
        raise InvalidParameter("penalizer argument must be non-negative")
    out = 0.5 / np.sqrt(s2 + epsilon * epsilon)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# derivatives, warping, tensors
# ---------------------------------------------------------------------------

def _dx(a: np.ndarray) -> np.ndarray:
    """Central differences along x, one-sided at the left/right borders."""
    out = np.empty_like(a)
    out[:, 1:-1] = 0.5 * (a[:, 2:] - a[:, :-2])
    out[:, 0] = a[:, 1] - a[:, 0]
    out[:, -1] = a[:, -1] - a[:, -2]
    return out


def _dy(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[1:-1, :] = 0.5 * (a[2:, :] - a[:-2, :])
    out[0, :] = a[1, :] - a[0, :]
    out[-1, :] = a[-1, :] - a[-2, :]
    return out


def warp_backward(target: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Sample target at x + w(x); returns (warped, inside-image mask)."""
    h, w = target.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    xs = gx + u
    ys = gy + v
    inside = ((xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)).astype(np.float64)
    return bilinear_sample(target, xs, ys), inside


def _outer3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    v = np.stack([a, b, c], axis=-1)
    return np.einsum("...i,...j->...ij", v, v)


def _tensor_arrays(src: np.ndarray, dst: np.ndarray, u: np.ndarray, v: np.ndarray):
    warped, inside = warp_backward(dst, u, v)
    ix1, iy1 = _dx(src), _dy(src)
    ix2, iy2 = _dx(warped), _dy(warped)
    ix = 0.5 * (ix1 + ix2)
    iy = 0.5 * (iy1 + iy2)
    it = warped - src
    ixt = ix2 - ix1
    iyt = iy2 - iy1
    j0 = _outer3(ix, iy, it)
    jxy = _outer3(_dx(ix), _dy(ix), ixt) + _outer3(_dx(iy), _dy(iy), iyt)
    return j0, jxy, inside


def build_motion_tensor(src: Image, dst: Image, w_current: FlowField) -> MotionTensor:
    """Motion tensors after warping the target by the current flow estimate."""
    if (src.width, src.height) != (dst.width, dst.height):
        raise InvalidParameter("image dimensions differ")
    if (w_current.width, w_current.height) != (src.width, src.height):
        raise InvalidParameter("flow dimensions differ from the images")
    j0, jxy, inside = _tensor_arrays(src.data, dst.data, w_current.u, w_current.v)
    return MotionTensor(j0=j0, jxy=jxy, valid=inside)


# ---------------------------------------------------------------------------
# matching prior rasterization
# ---------------------------------------------------------------------------

def _match_maps(matches: MatchSet | None, width: int, height: int,
                scale_x: float = 1.0, scale_y: float = 1.0):
    """Rasterize matches onto a grid: (u', v', confidence); c=0 where unmatched.

    Positions and displacements are scaled into the target grid; collisions
    keep the higher-confidence match.
    """
    uprime = np.zeros((height, width))
    vprime = np.zeros((height, width))
    cmap = np.zeros((height, width))
    if matches is None or len(matches) == 0:
        return uprime, vprime, cmap
    xs = np.clip(np.rint(matches.src[:, 0] * scale_x).astype(int), 0, width - 1)
    ys = np.clip(np.rint(matches.src[:, 1] * scale_y).astype(int), 0, height - 1)
    disp = matches.displacements()
    du = disp[:, 0] * scale_x
    dv = disp[:, 1] * scale_y
    order = np.argsort(matches.confidence, kind="stable")  # strongest written last
    for i in order:
        uprime[ys[i], xs[i]] = du[i]
        vprime[ys[i], xs[i]] = dv[i]
        cmap[ys[i], xs[i]] = matches.confidence[i]
    return uprime, vprime, cmap


# ---------------------------------------------------------------------------
# energy and its gradient
# ---------------------------------------------------------------------------

def _quad_form(tensor: np.ndarray, du: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """(du, dv, 1)^T J (du, dv, 1) for per-pixel symmetric 3x3 tensors."""
    q = (tensor[..., 0, 0] * du * du + tensor[..., 1, 1] * dv * dv
         + 2.0 * tensor[..., 0, 1] * du * dv
         + 2.0 * tensor[..., 0, 2] * du + 2.0 * tensor[..., 1, 2] * dv
         + tensor[..., 2, 2])
    return np.maximum(q, 0.0)


def _smooth_sq(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Forward-difference |grad u|^2 + |grad v|^2 (zero at last row/col)."""
    s = np.zeros_like(u)
    s[:, :-1] += np.diff(u, axis=1) ** 2 + np.diff(v, axis=1) ** 2
    s[:-1, :] += np.diff(u, axis=0) ** 2 + np.diff(v, axis=0) ** 2
    return s


def _smooth_sq_sym(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Half-sum of squared differences over all four incident edges.

    Rotation/flip symmetric (unlike the forward-difference form, whose edge
    ownership is anisotropic); equals the forward form for smooth fields.
    The solver regularizes with this so its minimizer is equivariant under
    90-degree rotations.
    """
    dx = np.diff(u, axis=1) ** 2 + np.diff(v, axis=1) ** 2
    dy = np.diff(u, axis=0) ** 2 + np.diff(v, axis=0) ** 2
    s = np.zeros_like(u)
    s[:, :-1] += dx
    s[:, 1:] += dx
    s[:-1, :] += dy
    s[1:, :] += dy
    return 0.5 * s


def _energy_value(tensor: MotionTensor, u0, v0, du, dv, uprime, vprime, cmap,
                  params: FlowParams, symmetric: bool = False) -> float:
    """Level energy at increment (du, dv) around warp state (u0, v0)."""
    eps = params.epsilon
    e = params.delta * tensor.valid * penalize(_quad_form(tensor.j0, du, dv), eps)
    e += params.gamma * tensor.valid * penalize(_quad_form(tensor.jxy, du, dv), eps)
    u = u0 + du
    v = v0 + dv
    smooth = _smooth_sq_sym if symmetric else _smooth_sq
    e += params.alpha * penalize(smooth(u, v), eps)
    if params.beta > 0 and cmap.any():
        m = (u - uprime) ** 2 + (v - vprime) ** 2
        e += params.beta * cmap * penalize(m, eps)
    return float(e.sum())


def energy(src: Image, dst: Image, w: FlowField, matches: MatchSet | None,
           params: FlowParams) -> float:
    """Discrete flow energy of ``w`` with tensors linearized at zero warp."""
    if (src.width, src.height) != (dst.width, dst.height):
        raise InvalidParameter("image dimensions differ")
    if (w.width, w.height) != (src.width, src.height):
        raise InvalidParameter("flow dimensions differ from the images")
    zeros = np.zeros_like(w.u)
    tensor = MotionTensor(*_tensor_arrays(src.data, dst.data, zeros, zeros))
    up, vp, cm = _match_maps(matches, src.width, src.height)
    return _energy_value(tensor, zeros, zeros, w.u, w.v, up, vp, cm, params)


def energy_gradient(src: Image, dst: Image, w: FlowField, matches: MatchSet | None,
                    params: FlowParams):
    """Analytic gradient of :func:`energy` with respect to (u, v)."""
    if (src.width, src.height) != (dst.width, dst.height):
        raise InvalidParameter("image dimensions differ")
    zeros = np.zeros_like(w.u)
    tensor = MotionTensor(*_tensor_arrays(src.data, dst.data, zeros, zeros))
    up, vp, cm = _match_maps(matches, src.width, src.height)
    u, v = w.u, w.v
    eps = params.epsilon

    gu = np.zeros_like(u)
    gv = np.zeros_like(v)

    for weight, J in ((params.delta, tensor.j0), (params.gamma, tensor.jxy)):
        q = _quad_form(J, u, v)
        f = weight * tensor.valid * penalize_deriv(q, eps)
        gu += f * 2.0 * (J[..., 0, 0] * u + J[..., 0, 1] * v + J[..., 0, 2])
        gv += f * 2.0 * (J[..., 0, 1] * u + J[..., 1, 1] * v + J[..., 1, 2])

    ps = params.alpha * penalize_deriv(_smooth_sq(u, v), eps)
    dux = np.diff(u, axis=1)
    duy = np.diff(u, axis=0)
    dvx = np.diff(v, axis=1)
    dvy = np.diff(v, axis=0)
    # d/d u(x) of P(s(x)): the two forward differences rooted at x
    gu[:, :-1] -= ps[:, :-1] * 2.0 * dux
    gu[:-1, :] -= ps[:-1, :] * 2.0 * duy
    gv[:, :-1] -= ps[:, :-1] * 2.0 * dvx
    gv[:-1, :] -= ps[:-1, :] * 2.0 * dvy
    # d/d u(x) of P(s(x - e)): x is the head of the neighbor's difference
    gu[:, 1:] += ps[:, :-1] * 2.0 * dux
    gu[1:, :] += ps[:-1, :] * 2.0 * duy
    gv[:, 1:] += ps[:, :-1] * 2.0 * dvx
    gv[1:, :] += ps[:-1, :] * 2.0 * dvy

    if params.beta > 0 and cm.any():
        m = (u - up) ** 2 + (v - vp) ** 2
        pm = params.beta * cm * penalize_deriv(m, eps)
        gu += pm * 2.0 * (u - up)
        gv += pm * 2.0 * (v - vp)

    return gu, gv


# ---------------------------------------------------------------------------
# SOR solver
# ---------------------------------------------------------------------------

def _sor_solve(tensor: MotionTensor, u0, v0, du, dv, uprime, vprime, cmap,
               params: FlowParams, sweeps: int | None = None):
    """Red-black SOR sweeps on the relinearized quadratic; mutates du, dv."""
    eps = params.epsilon
    d0 = params.delta * tensor.valid * penalize_deriv(_quad_form(tensor.j0, du, dv), eps)
    dxy = params.gamma * tensor.valid * penalize_deriv(_quad_form(tensor.jxy, du, dv), eps)

    a11 = d0 * tensor.j0[..., 0, 0] + dxy * tensor.jxy[..., 0, 0]
    a12 = d0 * tensor.j0[..., 0, 1] + dxy * tensor.jxy[..., 0, 1]
    a22 = d0 * tensor.j0[..., 1, 1] + dxy * tensor.jxy[..., 1, 1]
    bu = d0 * tensor.j0[..., 0, 2] + dxy * tensor.jxy[..., 0, 2]
    bv = d0 * tensor.j0[..., 1, 2] + dxy * tensor.jxy[..., 1, 2]

    use_match = params.beta > 0 and cmap.any()
    if use_match:
        m = (u0 + du - uprime) ** 2 + (v0 + dv - vprime) ** 2
        mw = params.beta * cmap * penalize_deriv(m, eps)
    else:
        mw = np.zeros_like(u0)

    ps = params.alpha * penalize_deriv(_smooth_sq_sym(u0 + du, v0 + dv), eps)
    h, w = u0.shape
    # symmetric edge diffusivities: average of the two incident pixels
    kx = 0.5 * (ps[:, :-1] + ps[:, 1:])   # edge (y, x) -- (y, x+1)
    ky = 0.5 * (ps[:-1, :] + ps[1:, :])   # edge (y, x) -- (y+1, x)
    ksum = np.zeros((h, w))
    ksum[:, :-1] += kx
    ksum[:, 1:] += kx
    ksum[:-1, :] += ky
    ksum[1:, :] += ky

    diag_u = a11 + mw + ksum
    diag_v = a22 + mw + ksum
    safe_u = diag_u > 1e-300
    safe_v = diag_v > 1e-300

    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    colors = ((yy + xx) % 2 == 0), ((yy + xx) % 2 == 1)
    omega = params.omega

    def neighbor_sum(f):
        acc = np.zeros((h, w))
        acc[:, :-1] += kx * f[:, 1:]
        acc[:, 1:] += kx * f[:, :-1]
        acc[:-1, :] += ky * f[1:, :]
        acc[1:, :] += ky * f[:-1, :]
        return acc

    for _ in range(params.solver_iters if sweeps is None else sweeps):
        for color in colors:
            rhs = (-a12 * dv - bu - mw * (u0 - uprime)
                   + neighbor_sum(u0 + du) - ksum * u0)
            upd = color & safe_u
            du[upd] = (1.0 - omega) * du[upd] + omega * rhs[upd] / diag_u[upd]

            rhs = (-a12 * du - bv - mw * (v0 - vprime)
                   + neighbor_sum(v0 + dv) - ksum * v0)
            upd = color & safe_v
            dv[upd] = (1.0 - omega) * dv[upd] + omega * rhs[upd] / diag_v[upd]


def _auto_levels(width: int, height: int) -> int:
    levels = 1
    w, h = width, height
    while min((w + 1) // 2, (h + 1) // 2) >= MIN_LEVEL_DIM:
        w, h = (w + 1) // 2, (h + 1) // 2
        levels += 1
    return levels


def solve_flow(src: Image, dst: Image, matches: MatchSet | None,
               params: FlowParams) -> FlowResult:
    """Coarse-to-fine solve; returns flow plus the finest-level energy trace."""
    if (src.width, src.height) != (dst.width, dst.height):
        raise InvalidParameter("image dimensions differ")
    if min(src.width, src.height) < MIN_LEVEL_DIM:
        raise InvalidParameter(
            f"images must be at least {MIN_LEVEL_DIM} px on each side")

    max_levels = _auto_levels(src.width, src.height)
    levels = max_levels if params.levels is None else min(params.levels, max_levels)

    i1 = smooth_array(src.data, params.sigma)
    i2 = smooth_array(dst.data, params.sigma)
    pyramid = [(i1, i2)]
    for _ in range(levels - 1):
        i1 = downsample_array(i1)
        i2 = downsample_array(i2)
        pyramid.append((i1, i2))
    pyramid.reverse()  # coarsest first

    full_w, full_h = src.width, src.height
    u = v = None
    trace = None
    for li, (p1, p2) in enumerate(pyramid):
        h, w = p1.shape
        if u is None:
            u = np.zeros((h, w))
            v = np.zeros((h, w))
        else:
            scale_x = w / u.shape[1]
            scale_y = h / u.shape[0]
            u = resize_bilinear(u, (h, w)) * scale_x
            v = resize_bilinear(v, (h, w)) * scale_y

        uprime, vprime, cmap = _match_maps(
            matches if params.beta > 0 else None, w, h,
            scale_x=w / full_w, scale_y=h / full_h)

        tensor = MotionTensor(*_tensor_arrays(p1, p2, u, v))
        du = np.zeros((h, w))
        dv = np.zeros((h, w))
        finest = li == len(pyramid) - 1
        # coarse grids are cheap, so give them proportionally more sweeps;
        # the finest level then starts close to converged
        scale = min(max((full_w * full_h) // (w * h), 1), 32)
        sweeps = params.solver_iters * scale
        if finest:
            trace = [_energy_value(tensor, u, v, du, dv, uprime, vprime, cmap,
                                   params, symmetric=True)]
        for _ in range(params.outer_iters):
            _sor_solve(tensor, u, v, du, dv, uprime, vprime, cmap, params,
                       sweeps=sweeps)
            if finest:
                trace.append(_energy_value(tensor, u, v, du, dv, uprime, vprime,
                                           cmap, params, symmetric=True))
        u = u + du
        v = v + dv
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise NumericalDivergence(f"non-finite flow at pyramid level {li}")

    return FlowResult(flow=FlowField(u, v), energy_trace=np.asarray(trace))


def compute_flow(src: Image, dst: Image, matches: MatchSet | None,
                 params: FlowParams) -> FlowField:
    """Estimate the dense flow from ``src`` to ``dst``."""
    return solve_flow(src, dst, matches, params).flow


def flow_sequence(seq: ImageSequence, params: FlowParams,
                  patch_size: int = 4, radius: int | None = None,
                  nu: float = 1.4, threshold: float = 0.5) -> FlowSequence:
    """Flow of every consecutive frame pair, each preceded by matching."""
    flows = []
    for j in range(len(seq) - 1):
        try:
            if params.beta > 0:
                matches = match_pair(seq.frames[j], seq.frames[j + 1],
                                     patch_size, radius, nu, threshold)
            else:
                matches = MatchSet.empty()
            flows.append(compute_flow(seq.frames[j], seq.frames[j + 1],
                                      matches, params))
        except NumericalDivergence as exc:
            raise NumericalDivergence(f"frame pair {j}->{j + 1}: {exc}") from exc
        except InvalidParameter as exc:
            raise InvalidParameter(f"frame pair {j}->{j + 1}: {exc}") from exc
    return FlowSequence(tuple(flows))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def average_angular_error(est: FlowField, gt: FlowField,
                          mask: PixelMask | None = None):
    """Mean and std of the angle (degrees) between (u, v, 1) vectors."""
    if (est.width, est.height) != (gt.width, gt.height):
        raise InvalidParameter("flow dimensions differ")
    num = 1.0 + est.u * gt.u + est.v * gt.v
    den = np.sqrt((1.0 + est.u ** 2 + est.v ** 2) * (1.0 + gt.u ** 2 + gt.v ** 2))
    ang = np.degrees(np.arccos(np.clip(num / den, -1.0, 1.0)))
    if mask is not None:
        if (mask.width, mask.height) != (est.width, est.height):
            raise InvalidParameter("mask dimensions differ from the flows")
        ang = ang[mask.labels > 0]
    return float(np.mean(ang)), float(np.std(ang))


def format_aae(mean_deg: float, std_deg: float) -> str:
    """Render an AAE pair in the conventional 'm.m°±s.s°' form."""
    return f"{mean_deg:.1f}°±{std_deg:.1f}°"


def flow_density(est: FlowField) -> float:
    """Fraction of pixels carrying a finite flow estimate."""
    finite = np.isfinite(est.u) & np.isfinite(est.v)
    return float(finite.mean())
