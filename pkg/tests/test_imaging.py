import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiomotion.errors import (FormatError, InvalidParameter, TruncatedFile,
                                 UnsupportedFormat)
from cardiomotion.imaging import (FlowField, GaussianParams, Image,
                                  ImageSequence, PixelMask, downsample_half,
                                  gaussian_kernel, gaussian_smooth, read_flo,
                                  read_image, read_mask, write_flo,
                                  write_image, write_mask)


def dense_conv2d_replicate(a, kernel2d):
    """Direct dense 2-D convolution oracle with replicate borders."""
    kh, kw = kernel2d.shape
    ry, rx = kh // 2, kw // 2
    padded = np.pad(a, ((ry, ry), (rx, rx)), mode="edge")
    out = np.zeros_like(a, dtype=float)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[i, j] = np.sum(padded[i:i + kh, j:j + kw] * kernel2d)
    return out


class TestContainers:
    def test_image_validation(self):
        with pytest.raises(InvalidParameter):
            Image(np.array([1.0, 2.0]))  # 1-D
        with pytest.raises(InvalidParameter):
            Image(np.full((3, 3), 1.5))  # out of range
        with pytest.raises(InvalidParameter):
            Image(np.full((3, 3), np.nan))

    def test_image_is_readonly(self):
        img = Image(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            img.data[0, 0] = 1.0

    def test_sequence_needs_two_frames(self):
        with pytest.raises(InvalidParameter):
            ImageSequence(frames=(Image(np.zeros((4, 4))),))

    def test_sequence_rejects_mixed_dims(self):
        with pytest.raises(InvalidParameter):
            ImageSequence(frames=(Image(np.zeros((4, 4))), Image(np.zeros((4, 5)))))

    def test_mask_labels_binary(self):
        with pytest.raises(InvalidParameter):
            PixelMask(np.full((3, 3), 2))

    def test_flow_shape_mismatch(self):
        with pytest.raises(InvalidParameter):
            FlowField(np.zeros((3, 3)), np.zeros((3, 4)))


class TestGaussianSmooth:
    def test_sigma_zero_is_bit_identical(self):
        img = Image(np.random.default_rng(0).random((9, 9)))
        out = gaussian_smooth(img, GaussianParams(0.0))
        assert out is img

    def test_constant_image_unchanged(self):
        img = Image(np.full((12, 12), 0.5))
        out = gaussian_smooth(img, GaussianParams(2.0))
        np.testing.assert_allclose(out.data, 0.5, rtol=0, atol=1e-12)

    def test_impulse_matches_dense_oracle(self):
        a = np.zeros((9, 9))
        a[4, 4] = 1.0
        k = gaussian_kernel(1.0)
        expected = dense_conv2d_replicate(a, np.outer(k, k))
        out = gaussian_smooth(Image(a), GaussianParams(1.0))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        # center value equals the normalized 2-D kernel center
        assert abs(out.data[4, 4] - k[len(k) // 2] ** 2) < 1e-12

    def test_random_image_matches_dense_oracle(self):
        a = np.random.default_rng(3).random((11, 13))
        k = gaussian_kernel(1.7)
        expected = dense_conv2d_replicate(a, np.outer(k, k))
        out = gaussian_smooth(Image(a), GaussianParams(1.7))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_kernel_radius_rule(self):
        assert len(gaussian_kernel(1.0)) == 2 * 3 + 1
        assert len(gaussian_kernel(0.5)) == 2 * 2 + 1
        assert abs(gaussian_kernel(2.3).sum() - 1.0) < 1e-14

    def test_mean_preserved_on_constant_padded_image(self):
        # margins wider than the kernel radius are constant, so no mass
        # crosses the border and the mean is exact
        a = np.full((20, 20), 0.25)
        a[8:12, 8:12] = np.random.default_rng(1).random((4, 4))
        out = gaussian_smooth(Image(a), GaussianParams(1.0))
        assert abs(out.data.mean() - a.mean()) < 1e-10

    def test_peak_monotone_in_sigma(self):
        a = np.zeros((15, 15))
        a[7, 7] = 1.0
        img = Image(a)
        peaks = [gaussian_smooth(img, GaussianParams(s)).data[7, 7]
                 for s in (0.5, 1.0, 1.5, 2.0)]
        assert all(p1 >= p2 for p1, p2 in zip(peaks, peaks[1:]))

    def test_invalid_sigma(self):
        with pytest.raises(InvalidParameter):
            GaussianParams(float("nan"))
        with pytest.raises(InvalidParameter):
            GaussianParams(-1.0)


class TestPgm:
    def test_round_trip_16bit(self, tmp_path):
        img = Image(np.random.default_rng(5).random((7, 9)))
        p1 = tmp_path / "a.pgm"
        p2 = tmp_path / "b.pgm"
        write_image(img, p1)
        first = read_image(p1)
        write_image(first, p2)
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(first.data, read_image(p2).data)

    def test_maxval_scaling(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n1 1\n255\n" + bytes([255]))
        assert read_image(path).data[0, 0] == 1.0

    def test_hand_decoded_2x2(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 51, 102, 255]))
        np.testing.assert_allclose(read_image(path).data,
                                   np.array([[0.0, 0.2], [0.4, 1.0]]),
                                   atol=1e-15)

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1\n# another\n255\n" + bytes([0, 255]))
        np.testing.assert_allclose(read_image(path).data, [[0.0, 1.0]])

    def test_color_rejected(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(UnsupportedFormat):
            read_image(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\nnope\n")
        with pytest.raises(FormatError):
            read_image(path)
        path.write_bytes(b"XX\n1 1\n255\n\x00")
        with pytest.raises(FormatError):
            read_image(path)

    def test_truncated_data(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(FormatError):
            read_image(path)

    def test_mask_round_trip(self, tmp_path):
        mask = PixelMask((np.random.default_rng(0).random((6, 6)) > 0.5).astype(int))
        write_mask(mask, tmp_path / "m.pgm")
        np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm").labels, mask.labels)


class TestFlo:
    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(11)
        flow = FlowField(rng.normal(size=(5, 4)).astype(np.float32),
                         rng.normal(size=(5, 4)).astype(np.float32))
        p1, p2 = tmp_path / "a.flo", tmp_path / "b.flo"
        write_flo(flow, p1)
        write_flo(read_flo(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_1x1_exact_bytes(self, tmp_path):
        path = tmp_path / "x.flo"
        write_flo(FlowField(np.zeros((1, 1)), np.zeros((1, 1))), path)
        raw = path.read_bytes()
        assert len(raw) == 20
        assert raw == b"PIEH" + (1).to_bytes(4, "little") * 2 + b"\x00" * 8

    def test_2x1_interleaving(self, tmp_path):
        path = tmp_path / "x.flo"
        write_flo(FlowField(np.array([[1.0, 3.0]]), np.array([[2.0, 4.0]])), path)
        floats = np.frombuffer(path.read_bytes()[12:], dtype="<f4")
        np.testing.assert_array_equal(floats, [1.0, 2.0, 3.0, 4.0])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.flo"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            read_flo(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "x.flo"
        path.write_bytes(b"PIEH" + (2).to_bytes(4, "little") * 2 + b"\x00" * 8)
        with pytest.raises(TruncatedFile):
            read_flo(path)


class TestDownsample:
    def test_constant(self):
        out = downsample_half(Image(np.full((8, 8), 0.37)))
        assert (out.width, out.height) == (4, 4)
        np.testing.assert_allclose(out.data, 0.37, atol=1e-12)

    def test_matches_smooth_then_average_oracle(self):
        from cardiomotion.imaging import smooth_array
        a = np.random.default_rng(2).random((7, 5))
        s = smooth_array(a, 0.8)
        expected = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                expected[i, j] = s[2 * i:min(2 * i + 2, 7), 2 * j:min(2 * j + 2, 5)].mean()
        out = downsample_half(Image(a))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_checkerboard_blocks(self):
        # edge blocks feel the replicate border; values frozen from the
        # smooth-then-average oracle (they are NOT 0.5 at the 4x4 size)
        cb = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
        out = downsample_half(Image(cb))
        np.testing.assert_allclose(out.data,
                                   [[0.46869472, 0.53130528],
                                    [0.53130528, 0.46869472]], atol=1e-8)
        # away from borders the average is exactly one half
        cb12 = (np.indices((12, 12)).sum(axis=0) % 2).astype(float)
        interior = downsample_half(Image(cb12)).data[1:-1, 1:-1]
        np.testing.assert_allclose(interior, 0.5, atol=1e-6)

    def test_ceil_dims(self):
        out = downsample_half(Image(np.zeros((5, 5))))
        assert (out.height, out.width) == (3, 3)

    def test_degenerate_input(self):
        with pytest.raises(InvalidParameter):
            downsample_half(Image(np.zeros((1, 1))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 9), st.integers(2, 9))
def test_pgm_round_trip_property(seed, w, h):
    img = Image(np.random.default_rng(seed).random((h, w)))
    import tempfile, os
    fd, path = tempfile.mkstemp(suffix=".pgm")
    os.close(fd)
    try:
        write_image(img, path)
        again = read_image(path)
        q = np.rint(img.data * 65535) / 65535
        np.testing.assert_allclose(again.data, q, atol=1e-12)
    finally:
        os.unlink(path)
