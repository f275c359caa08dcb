"""Frequency-domain op tests.

The FFT route is checked against a direct O(N^2) DFT summation, the complex
convolution against four independent brute-force real convolutions, and all
backward passes against 64-bit central finite differences.
"""

import numpy as np
import pytest

from octafreq import spectral as S
from octafreq import tensor as T
from octafreq.gradcheck import grad_check
from .test_tensor import conv2d_reference, t64

rng = np.random.default_rng(7)


def dft2_reference(x):
    """Direct half-spectrum DFT of (H, W, C), summed per bin in float64."""
    x = np.asarray(x, dtype=np.float64)
    H, W, C = x.shape
    out = np.zeros((H, W // 2 + 1, C), dtype=np.complex128)
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    for kh in range(H):
        for kw in range(W // 2 + 1):
            phase = np.exp(-2j * np.pi * (kh * hh / H + kw * ww / W))
            out[kh, kw] = (x * phase[..., None]).sum(axis=(0, 1))
    return out


class TestRfft2:
    @pytest.mark.parametrize("shape", [(4, 6, 2), (8, 8, 3), (6, 4, 1)])
    def test_matches_direct_dft(self, shape):
        x = rng.standard_normal(shape)
        F = S.rfft2(T.Tensor(x))
        ref = dft2_reference(x)
        assert np.allclose(F.re.data, ref.real, atol=1e-9)
        assert np.allclose(F.im.data, ref.imag, atol=1e-9)

    def test_round_trip(self):
        x = rng.standard_normal((16, 16, 4)).astype(np.float32)
        y = S.irfft2(S.rfft2(T.Tensor(x)), 16)
        rel = np.abs(y.data - x).max() / np.abs(x).max()
        assert rel < 1e-6, f"round-trip rel err {rel:.2e}"

    def test_parseval(self):
        """Energy in space equals packed-spectrum energy with mirror weights."""
        H, W, C = 8, 10, 2
        x = rng.standard_normal((H, W, C))
        F = S.rfft2(T.Tensor(x)).numpy()
        w = np.full(W // 2 + 1, 2.0)
        w[0] = w[-1] = 1.0
        spec = (np.abs(F) ** 2 * w[None, :, None]).sum() / (H * W)
        assert abs(spec - (x ** 2).sum()) / (x ** 2).sum() < 1e-5

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            S.rfft2(T.Tensor(np.zeros((4, 5, 1))))

    def test_irfft2_rejects_bad_packing(self):
        F = S.rfft2(T.Tensor(np.zeros((4, 6, 1))))
        with pytest.raises(ValueError):
            S.irfft2(F, 8)

    @pytest.mark.parametrize("shape", [(4, 4, 1), (6, 8, 2), (2, 6, 3)])
    def test_rfft2_grads(self, shape):
        x = t64(rng.standard_normal(shape))
        wr = rng.standard_normal((shape[0], shape[1] // 2 + 1, shape[2]))
        wi = rng.standard_normal(wr.shape)

        def fn():
            F = S.rfft2(x)
            return T.add(T.mean_(T.mul(F.re, T.Tensor(wr))),
                         T.mean_(T.mul(F.im, T.Tensor(wi))))

        rep = grad_check(fn, [("x", x)])
        assert rep.ok, rep.summary()

    @pytest.mark.parametrize("shape", [(4, 4, 1), (6, 8, 2)])
    def test_irfft2_grads(self, shape):
        """FD through the packed inverse, including DC/Nyquist columns."""
        H, W, C = shape
        re = t64(rng.standard_normal((H, W // 2 + 1, C)))
        im = t64(rng.standard_normal((H, W // 2 + 1, C)))
        w = rng.standard_normal(shape)

        def fn():
            y = S.irfft2(S.ComplexTensor(re, im), W)
            return T.mean_(T.mul(y, T.Tensor(w)))

        rep = grad_check(fn, [("re", re), ("im", im)])
        assert rep.ok, rep.summary()

    def test_linearity(self):
        x = rng.standard_normal((6, 6, 2))
        y = rng.standard_normal((6, 6, 2))
        Fx = S.rfft2(T.Tensor(x)).numpy()
        Fy = S.rfft2(T.Tensor(y)).numpy()
        Fxy = S.rfft2(T.Tensor(2 * x + 3 * y)).numpy()
        assert np.allclose(Fxy, 2 * Fx + 3 * Fy, atol=1e-5)


class TestComplexConv:
    @pytest.mark.parametrize("shape,csz", [((5, 4, 2), 2), ((6, 7, 3), 3)])
    def test_forward_matches_four_real_convs(self, shape, csz):
        """(a + ib) * (u + iv) decomposed into brute-force real convolutions."""
        a = rng.standard_normal(shape)
        b = rng.standard_normal(shape)
        u = rng.standard_normal((3, 3, csz, csz))
        v = rng.standard_normal((3, 3, csz, csz))
        out = S.complex_conv2d(S.ComplexTensor(t64(a), t64(b)), t64(u), t64(v))
        ref_re = conv2d_reference(a, u) - conv2d_reference(b, v)
        ref_im = conv2d_reference(a, v) + conv2d_reference(b, u)
        assert np.allclose(out.re.data, ref_re, atol=1e-10)
        assert np.allclose(out.im.data, ref_im, atol=1e-10)

    @pytest.mark.parametrize("shape,csz", [((4, 3, 2), 2), ((3, 5, 1), 1), ((5, 5, 3), 3)])
    def test_kernel_and_input_grads(self, shape, csz):
        a = t64(rng.standard_normal(shape))
        b = t64(rng.standard_normal(shape))
        u = t64(rng.standard_normal((3, 3, csz, csz)) * 0.5)
        v = t64(rng.standard_normal((3, 3, csz, csz)) * 0.5)
        wr = rng.standard_normal(shape)
        wi = rng.standard_normal(shape)

        def fn():
            out = S.complex_conv2d(S.ComplexTensor(a, b), u, v)
            return T.add(T.mean_(T.mul(out.re, T.Tensor(wr))),
                         T.mean_(T.mul(out.im, T.Tensor(wi))))

        rep = grad_check(fn, [("a", a), ("b", b), ("u", u), ("v", v)])
        assert rep.ok, rep.summary()

    def test_purely_real_kernel_acts_channelwise(self):
        """v = 0 must convolve re and im independently with u."""
        a = rng.standard_normal((4, 4, 2))
        b = rng.standard_normal((4, 4, 2))
        u = rng.standard_normal((3, 3, 2, 2))
        v = np.zeros_like(u)
        out = S.complex_conv2d(S.ComplexTensor(T.Tensor(a), T.Tensor(b)),
                               T.Tensor(u), T.Tensor(v))
        assert np.allclose(out.re.data, conv2d_reference(a, u), atol=1e-10)
        assert np.allclose(out.im.data, conv2d_reference(b, u), atol=1e-10)


class TestCrelu:
    def test_halfplane_rectification(self):
        a = rng.standard_normal((5, 5, 2))
        b = rng.standard_normal((5, 5, 2))
        out = S.crelu(S.ComplexTensor(T.Tensor(a), T.Tensor(b)))
        assert np.array_equal(out.re.data, np.maximum(a, 0))
        assert np.array_equal(out.im.data, np.maximum(b, 0))

    def test_grads(self):
        a = rng.standard_normal((4, 4, 2))
        b = rng.standard_normal((4, 4, 2))
        a = np.where(np.abs(a) < 0.05, 0.2, a)
        b = np.where(np.abs(b) < 0.05, -0.2, b)
        ta, tb = t64(a), t64(b)

        def fn():
            out = S.crelu(S.ComplexTensor(ta, tb))
            return T.add(T.mean_(out.re), T.mean_(out.im))

        rep = grad_check(fn, [("re", ta), ("im", tb)])
        assert rep.ok, rep.summary()


class TestSpectrumDiffMap:
    def test_identity_gives_zero_map(self):
        x = rng.standard_normal((8, 8, 3))
        m = S.spectrum_diff_map(x, x, channel=1)
        assert m.shape == (8, 5)
        assert np.allclose(m, 0)

    def test_amplification_sign(self):
        x = rng.standard_normal((8, 8, 1))
        m = S.spectrum_diff_map(x, 2 * x, channel=0)
        assert (m > 0).all()  # doubling amplifies every bin by log 2
        assert np.allclose(m, np.log(2), atol=1e-6)
