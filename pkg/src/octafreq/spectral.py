"""Differentiable frequency-domain operations.

A half-spectrum of a real plane is carried as a :class:`ComplexTensor` -- a
pair of real tensors (re, im) of shape ``(H, W//2 + 1, C)`` -- so the tape in
:mod:`octafreq.tensor` stays real-valued throughout.

``irfft2`` is defined as the real part of the inverse full-spectrum transform
of the Hermitian extension of the packed half-spectrum.  That definition
coincides with the usual inverse for any spectrum that actually came from a
real signal, and stays well-defined (and exactly differentiable) for the
not-quite-Hermitian spectra produced by the spectral filtering layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    _conv_forward,
    _conv_input_grad,
    _conv_kernel_grad,
    _make,
    add,
    mul,
    relu,
)

__all__ = ["ComplexTensor", "rfft2", "irfft2", "complex_conv2d", "crelu",
           "spectrum_diff_map"]


@dataclass
class ComplexTensor:
    """Real/imaginary pair of equally-shaped real tensors."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ValueError(f"re/im shapes differ: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


def rfft2(x: Tensor) -> ComplexTensor:
    """Real 2-D FFT over the two leading (spatial) axes of ``(H, W, C)``.

    ``W`` must be even so that the packed width is exactly ``W//2 + 1`` and
    the Nyquist column exists.
    """
    H, W = x.data.shape[:2]
    if W % 2:
        raise ValueError(f"rfft2 requires an even width, got {W}")
    F = np.fft.rfft2(x.data, axes=(0, 1))
    rdt = x.data.dtype

    def vjp_re(g):
        return (_packed_adjoint(g.astype(np.complex128), W).astype(rdt),)

    def vjp_im(g):
        return (_packed_adjoint(1j * g.astype(np.complex128), W).astype(rdt),)

    re = _make(F.real.astype(rdt), (x,), vjp_re, "rfft2_re")
    im = _make(F.imag.astype(rdt), (x,), vjp_im, "rfft2_im")
    return ComplexTensor(re, im)


def _packed_adjoint(G: np.ndarray, width: int) -> np.ndarray:
    """Adjoint of the packed forward transform: sum of stored-bin
    sensitivities, evaluated by zero-padding to the full spectrum."""
    H, Wf = G.shape[:2]
    full = np.zeros((H, width) + G.shape[2:], dtype=np.complex128)
    full[:, :Wf] = G
    return (H * width) * np.fft.ifft2(full, axes=(0, 1)).real


def _hermitian_extend(Z: np.ndarray, width: int) -> np.ndarray:
    """Rebuild the full spectrum from the packed half; mirrored bins take the
    conjugate of their stored partner (stored DC/Nyquist columns verbatim)."""
    H, Wf = Z.shape[:2]
    full = np.empty((H, width) + Z.shape[2:], dtype=np.complex128)
    full[:, :Wf] = Z
    rows = (-np.arange(H)) % H
    full[:, Wf:] = np.conj(Z[rows][:, 1:width - Wf + 1][:, ::-1])
    return full


def irfft2(F: ComplexTensor, width: int) -> Tensor:
    """Inverse of :func:`rfft2` back to a real ``(H, width, C)`` plane."""
    H, Wf = F.shape[:2]
    if width % 2 or Wf != width // 2 + 1:
        raise ValueError(f"packed width {Wf} inconsistent with output width {width}")
    Z = F.re.data.astype(np.complex128) + 1j * F.im.data.astype(np.complex128)
    out = np.fft.ifft2(_hermitian_extend(Z, width), axes=(0, 1)).real
    rdt = F.re.data.dtype

    def vjp(g):
        G = np.fft.rfft2(g.astype(np.float64), axes=(0, 1))
        G[:, 1:width // 2] *= 2.0
        G /= H * width
        return G.real.astype(rdt), G.imag.astype(rdt)

    return _make(out.astype(rdt), (F.re, F.im), vjp, "irfft2")


def complex_conv2d(x: ComplexTensor, ku: Tensor, kv: Tensor) -> ComplexTensor:
    """Complex 2-D convolution on a packed spectrum.

    The kernel is ``ku + i*kv`` (two real ``(kh, kw, C, C)`` tensors); with
    input ``a + i*b`` the output is ``(a*ku - b*kv) + i(a*kv + b*ku)`` where
    ``*`` is the zero-padded real convolution.  Gradients are assembled from
    the four real branches: each kernel gradient is the correlation of an
    input part with an output-gradient part (a convolution against the
    180-degree-rotated input), with the re/im cross terms sign-combined.
    """
    a, b = x.re, x.im
    kh, kw = ku.data.shape[:2]
    out_re = _conv_forward(a.data, ku.data) - _conv_forward(b.data, kv.data)
    out_im = _conv_forward(a.data, kv.data) + _conv_forward(b.data, ku.data)

    def vjp_re(g):
        return (_conv_input_grad(g, ku.data),
                -_conv_input_grad(g, kv.data),
                _conv_kernel_grad(a.data, g, kh, kw),
                -_conv_kernel_grad(b.data, g, kh, kw))

    def vjp_im(g):
        return (_conv_input_grad(g, kv.data),
                _conv_input_grad(g, ku.data),
                _conv_kernel_grad(b.data, g, kh, kw),
                _conv_kernel_grad(a.data, g, kh, kw))

    re = _make(out_re, (a, b, ku, kv), vjp_re, "cconv_re")
    im = _make(out_im, (a, b, ku, kv), vjp_im, "cconv_im")
    return ComplexTensor(re, im)


def crelu(x: ComplexTensor) -> ComplexTensor:
    """ReLU applied to the real and imaginary parts independently."""
    return ComplexTensor(relu(x.re), relu(x.im))


def cadd(x: ComplexTensor, y: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(add(x.re, y.re), add(x.im, y.im))


def cscale(x: ComplexTensor, s: Tensor) -> ComplexTensor:
    """Scale a complex tensor by a real scalar tensor."""
    return ComplexTensor(mul(x.re, s), mul(x.im, s))


def spectrum_diff_map(before: np.ndarray, after: np.ndarray, channel: int,
                      eps: float = 1e-8) -> np.ndarray:
    """Log-magnitude spectrum difference of one channel of two feature maps.

    Returns ``log(|rfft2(after)[..., channel]| + eps) - log(|rfft2(before)
    [..., channel]| + eps)`` as an ``(H, W//2 + 1)`` float64 array; positive
    entries mark frequencies amplified by the layer under inspection.
    """
    if before.shape != after.shape:
        raise ValueError("feature maps must share a shape")
    fb = np.fft.rfft2(np.asarray(before, dtype=np.float64)[..., channel], axes=(0, 1))
    fa = np.fft.rfft2(np.asarray(after, dtype=np.float64)[..., channel], axes=(0, 1))
    return np.log(np.abs(fa) + eps) - np.log(np.abs(fb) + eps)
