import math

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiomotion.errors import InvalidParameter
from cardiomotion.imaging import FlowField, Image, ImageSequence
from cardiomotion.matching import MatchSet, match_pair
from cardiomotion.synth import PhantomParams, generate
from cardiomotion.varflow import (FlowParams, FlowSequence,
                                  average_angular_error, build_motion_tensor,
                                  compute_flow, energy, energy_gradient,
                                  flow_density, flow_sequence, format_aae,
                                  penalize, penalize_deriv, solve_flow)


def shift_image(a, dx, dy):
    h, w = a.shape
    ys = np.clip(np.arange(h)[:, None] - dy, 0, h - 1)
    xs = np.clip(np.arange(w)[None, :] - dx, 0, w - 1)
    return a[ys, xs]


class TestPenalizer:
    def test_closed_forms(self):
        assert penalize(0.0, 1e-3) == pytest.approx(1e-3, abs=0)
        assert penalize(1.0, 1e-3) == pytest.approx(math.sqrt(1 + 1e-6), rel=1e-15)

    def test_derivative_matches_finite_differences(self):
        eps = 1e-3
        for s2 in (0.01, 1.0, 100.0):
            h = s2 * 1e-6
            fd = (penalize(s2 + h, eps) - penalize(s2 - h, eps)) / (2 * h)
            assert penalize_deriv(s2, eps) == pytest.approx(fd, rel=1e-6)

    def test_negative_argument_rejected(self):
        with pytest.raises(InvalidParameter):
            penalize(-0.1, 1e-3)
        with pytest.raises(InvalidParameter):
            penalize_deriv(-0.1, 1e-3)

    def test_params_validation(self):
        with pytest.raises(InvalidParameter):
            FlowParams(alpha=-1.0)
        with pytest.raises(InvalidParameter):
            FlowParams(epsilon=0.0)
        with pytest.raises(InvalidParameter):
            FlowParams(omega=2.0)
        with pytest.raises(InvalidParameter):
            FlowParams(outer_iters=0)


class TestMotionTensor:
    def test_identical_frames_zero_temporal_terms(self):
        img = Image(np.random.default_rng(0).random((12, 12)))
        zero = FlowField.zeros(12, 12)
        t = build_motion_tensor(img, img, zero)
        np.testing.assert_allclose(t.j0[..., 2, 2], 0.0, atol=1e-15)
        np.testing.assert_allclose(t.jxy[..., 2, 2], 0.0, atol=1e-15)
        assert np.all(t.valid == 1.0)

    def test_tensor_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = Image(rng.random((10, 10))), Image(rng.random((10, 10)))
        t = build_motion_tensor(a, b, FlowField.zeros(10, 10))
        for J in (t.j0, t.jxy):
            np.testing.assert_allclose(J, np.swapaxes(J, -1, -2), atol=1e-12)

    def test_ramp_pair_annihilates_true_shift(self):
        # analytic derivatives of a linear ramp: I_x = a, I_t = -a at shift (1,0)
        x = np.arange(8) / 10.0
        ramp = np.tile(x, (8, 1))
        src = Image(ramp)
        dst = Image(shift_image(ramp, 1, 0))
        t = build_motion_tensor(src, dst, FlowField.zeros(8, 8))
        u = np.ones((8, 8))
        v = np.zeros((8, 8))
        wh = np.stack([u, v, np.ones_like(u)], axis=-1)
        q = np.einsum("...i,...ij,...j->...", wh, t.j0, wh)
        assert np.abs(q[2:-2, 2:-2]).max() < 1e-6

    def test_dim_mismatch(self):
        a = Image(np.zeros((8, 8)))
        b = Image(np.zeros((8, 9)))
        with pytest.raises(InvalidParameter):
            build_motion_tensor(a, b, FlowField.zeros(8, 8))


class TestEnergy:
    def test_identity_value(self):
        img = Image(np.random.default_rng(2).random((10, 10)))
        p = FlowParams()
        e = energy(img, img, FlowField.zeros(10, 10), None, p)
        area = 100
        expected = area * (p.delta + p.gamma + p.alpha) * p.epsilon
        assert e == pytest.approx(expected, rel=1e-12)

    def test_constant_flow_raises_energy_on_identical_frames(self):
        img = Image(np.random.default_rng(3).random((10, 10)))
        p = FlowParams()
        e0 = energy(img, img, FlowField.zeros(10, 10), None, p)
        e1 = energy(img, img, FlowField(np.ones((10, 10)), np.zeros((10, 10))), None, p)
        assert e1 > e0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        src = Image(rng.random((16, 16)))
        dst = Image(rng.random((16, 16)))
        u = rng.normal(scale=0.3, size=(16, 16))
        v = rng.normal(scale=0.3, size=(16, 16))
        matches = MatchSet(np.array([[4, 5], [9, 9]]), np.array([[5, 5], [9, 10]]),
                           np.array([0.8, 0.9]))
        p = FlowParams()
        gu, gv = energy_gradient(src, dst, FlowField(u, v), matches, p)
        h = 1e-6
        for _ in range(20):
            y, x = rng.integers(0, 16, size=2)
            for comp, grad in ((0, gu), (1, gv)):
                up, vp = u.copy(), v.copy()
                um, vm = u.copy(), v.copy()
                (up if comp == 0 else vp)[y, x] += h
                (um if comp == 0 else vm)[y, x] -= h
                fd = (energy(src, dst, FlowField(up, vp), matches, p)
                      - energy(src, dst, FlowField(um, vm), matches, p)) / (2 * h)
                denom = max(abs(fd), 1e-8)
                assert abs(grad[y, x] - fd) / denom < 1e-4


class TestComputeFlow:
    def test_identical_textured_frames_zero_flow(self):
        img = Image(np.random.default_rng(5).random((64, 64)))
        flow = compute_flow(img, img, match_pair(img, img, radius=12), FlowParams())
        assert max(np.abs(flow.u).max(), np.abs(flow.v).max()) < 1e-3

    def test_one_pixel_shift_epe(self):
        rng = np.random.default_rng(6)
        base = rng.random((64, 64))
        src, dst = Image(base), Image(shift_image(base, 1, 0))
        flow = compute_flow(src, dst, match_pair(src, dst, radius=12), FlowParams())
        epe = np.hypot(flow.u - 1.0, flow.v)[8:-8, 8:-8]
        assert epe.mean() < 0.2

    def test_energy_trace_non_increasing(self):
        rng = np.random.default_rng(7)
        src = Image(rng.random((32, 32)))
        dst = Image(np.clip(shift_image(src.data, 1, 0)
                            + rng.normal(0, 0.02, (32, 32)), 0, 1))
        res = solve_flow(src, dst, match_pair(src, dst, radius=8), FlowParams())
        trace = res.energy_trace
        assert len(trace) == FlowParams().outer_iters + 1
        assert np.all(np.diff(trace) <= 1e-8 * np.abs(trace[:-1]))

    def test_beta_zero_ignores_matches_bitwise(self):
        rng = np.random.default_rng(8)
        base = rng.random((32, 32))
        src, dst = Image(base), Image(shift_image(base, 1, 1))
        p = replace(FlowParams(), beta=0.0)
        bogus = MatchSet(np.array([[3, 3]]), np.array([[9, 9]]), np.array([0.9]))
        f1 = compute_flow(src, dst, MatchSet.empty(), p)
        f2 = compute_flow(src, dst, bogus, p)
        assert np.array_equal(f1.u, f2.u) and np.array_equal(f1.v, f2.v)

    def test_rotation_equivariance(self):
        ds = generate(PhantomParams(image_size=64, radii=(10.0, 26.0), frames=3,
                                    noise_sigma=0.0, seed=5))
        src, dst = ds.sequence.frames[0], ds.sequence.frames[1]
        p = replace(FlowParams(), beta=0.0, outer_iters=8, solver_iters=60)
        f = compute_flow(src, dst, None, p)
        srcR = Image(np.rot90(src.data).copy())
        dstR = Image(np.rot90(dst.data).copy())
        fR = compute_flow(srcR, dstR, None, p)
        c = 8
        # np.rot90 is CCW: (u, v) -> (v, -u)
        assert np.abs(fR.u - np.rot90(f.v))[c:-c, c:-c].max() < 1e-3
        assert np.abs(fR.v - np.rot90(-f.u))[c:-c, c:-c].max() < 1e-3

    def test_too_small_images_rejected(self):
        img = Image(np.random.default_rng(9).random((8, 8)))
        with pytest.raises(InvalidParameter):
            compute_flow(img, img, None, FlowParams())

    def test_output_finite_dense(self):
        rng = np.random.default_rng(10)
        src, dst = Image(rng.random((32, 32))), Image(rng.random((32, 32)))
        flow = compute_flow(src, dst, match_pair(src, dst, radius=8), FlowParams())
        assert np.isfinite(flow.u).all() and np.isfinite(flow.v).all()
        assert flow_density(flow) == 1.0


class TestFlowSequence:
    def test_identical_frames_sequence(self):
        frame = Image(np.random.default_rng(11).random((32, 32)))
        seq = ImageSequence(frames=tuple([frame] * 25))
        flows = flow_sequence(seq, FlowParams(), radius=8)
        assert len(flows) == 24  # J=25 -> 24 fields
        for f in flows.flows:
            assert max(np.abs(f.u).max(), np.abs(f.v).max()) < 1e-3

    def test_rotating_disc_aae(self):
        # pure rigid rotation, 1 degree/frame
        ds = generate(PhantomParams(image_size=64, radii=(10.0, 26.0), frames=6,
                                    contraction_amplitude=0.0, noise_sigma=0.0,
                                    rotation_deg_per_frame=1.0, seed=12))
        flows = flow_sequence(ds.sequence, FlowParams(), radius=12)
        for est, gt in zip(flows.flows, ds.gt_flows.flows):
            mean_deg, _ = average_angular_error(est, gt, ds.annulus)
            assert mean_deg < 10.0


class TestAae:
    def test_identical_flows_zero(self):
        rng = np.random.default_rng(13)
        f = FlowField(rng.normal(size=(6, 6)), rng.normal(size=(6, 6)))
        mean, std = average_angular_error(f, f)
        assert mean == 0.0 and std == 0.0

    def test_orthogonal_unit_flows_sixty_degrees(self):
        ones = np.ones((5, 5))
        zeros = np.zeros((5, 5))
        mean, std = average_angular_error(FlowField(ones, zeros),
                                          FlowField(zeros, ones))
        assert abs(mean - 60.0) < 1e-9
        assert std == pytest.approx(0.0, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(14)
        a = FlowField(rng.normal(size=(7, 7)), rng.normal(size=(7, 7)))
        b = FlowField(rng.normal(size=(7, 7)), rng.normal(size=(7, 7)))
        assert average_angular_error(a, b)[0] == pytest.approx(
            average_angular_error(b, a)[0], abs=1e-12)

    def test_report_format(self):
        assert format_aae(5.7421, 2.349) == "5.7°±2.3°"

    def test_masked_evaluation(self):
        from cardiomotion.imaging import PixelMask
        est = FlowField(np.ones((4, 4)), np.zeros((4, 4)))
        gt_u = np.ones((4, 4))
        gt_u[0, 0] = -1.0  # only masked-out pixel disagrees
        gt = FlowField(gt_u, np.zeros((4, 4)))
        mask = np.ones((4, 4), int)
        mask[0, 0] = 0
        mean, _ = average_angular_error(est, gt, PixelMask(mask))
        assert mean == 0.0


class TestDensity:
    def test_dense_flow_is_one(self):
        f = FlowField(np.zeros((5, 5)), np.zeros((5, 5)))
        assert flow_density(f) == 1.0

    def test_quarter_invalid(self):
        u = np.zeros((4, 4))
        u[:1, :] = np.nan  # 4 of 16 pixels invalid
        f = FlowField(u, np.zeros((4, 4)))
        assert flow_density(f) == 0.75


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_aae_symmetry_property(seed):
    rng = np.random.default_rng(seed)
    a = FlowField(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    b = FlowField(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    m1, s1 = average_angular_error(a, b)
    m2, s2 = average_angular_error(b, a)
    assert abs(m1 - m2) < 1e-12 and abs(s1 - s2) < 1e-12
