"""Training regularizers for spatially-varying kernels.

* :func:`tv_isotropic` smooths combining-weight maps (Charbonnier-smoothed
  isotropic total variation, exact gradients everywhere).
* :func:`spectrum_penalty` discourages kernels that are hard to realize
  optically: energy above a radial frequency cutoff, and a large spread
  between the strongest and weakest spectral components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .errors import InvalidArgument


@dataclass(frozen=True)
class RegularizerWeights:
    lambda_tv: float = 1e-4
    lambda_spec_highpass: float = 1e-3
    lambda_spec_cond: float = 1e-4
    epsilon: float = 1e-8
    highpass_cutoff: float = 0.5  # fraction of Nyquist
    pad: int = 64
    tv_on_kernels: bool = False

    def __post_init__(self):
        for name in ("lambda_tv", "lambda_spec_highpass", "lambda_spec_cond", "highpass_cutoff"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidArgument(f"{name} must be finite and non-negative, got {v}")
        if not self.epsilon > 0:
            raise InvalidArgument("epsilon must be positive")

    @property
    def active(self) -> bool:
        return (self.lambda_tv + self.lambda_spec_highpass + self.lambda_spec_cond) > 0


NONE = RegularizerWeights(0.0, 0.0, 0.0)


def _forward_diffs(w: np.ndarray, periodic: bool):
    if periodic:
        return np.roll(w, -1, axis=-1) - w, np.roll(w, -1, axis=-2) - w
    dx = np.zeros_like(w)
    dy = np.zeros_like(w)
    dx[..., :, :-1] = w[..., :, 1:] - w[..., :, :-1]
    dy[..., :-1, :] = w[..., 1:, :] - w[..., :-1, :]
    return dx, dy


def tv_isotropic(maps: np.ndarray, epsilon: float = 1e-8, boundary: str = "neumann"):
    """Smoothed isotropic total variation summed over all maps in ``maps`` (..., H, W).

    Each site contributes ``sqrt(dx^2 + dy^2 + eps^2) - eps`` with forward
    differences; ``neumann`` treats differences past the last row/column as
    zero, ``periodic`` wraps around. Returns ``(value, gradient)``.
    """
    maps = np.asarray(maps)
    if maps.ndim < 2 or maps.shape[-1] < 2 or maps.shape[-2] < 2:
        raise InvalidArgument(f"total variation needs maps of at least 2x2, got {maps.shape}")
    if boundary not in ("neumann", "periodic"):
        raise InvalidArgument(f"unknown boundary {boundary!r}")
    periodic = boundary == "periodic"
    dx, dy = _forward_diffs(maps, periodic)
    mag = np.sqrt(dx * dx + dy * dy + epsilon * epsilon)
    value = float(np.sum(mag - epsilon))
    ux = dx / mag
    uy = dy / mag
    # adjoint of the forward differences
    if periodic:
        grad = (np.roll(ux, 1, axis=-1) - ux) + (np.roll(uy, 1, axis=-2) - uy)
    else:
        grad = np.zeros_like(maps)
        grad[..., :, 1:] += ux[..., :, :-1]
        grad[..., :, :-1] -= ux[..., :, :-1]
        grad[..., 1:, :] += uy[..., :-1, :]
        grad[..., :-1, :] -= uy[..., :-1, :]
    return value, grad


def _spectrum(kernel: np.ndarray, pad: int) -> np.ndarray:
    k = np.asarray(kernel)
    if k.ndim < 2 or k.shape[-1] != k.shape[-2] or k.shape[-1] % 2 == 0:
        raise InvalidArgument(f"spectrum measures need square odd kernels, got {k.shape}")
    if k.shape[-1] > pad:
        raise InvalidArgument(f"kernel extent {k.shape[-1]} exceeds DFT size {pad}")
    return sfft.fft2(k.astype(np.float64, copy=False), s=(pad, pad))


def highpass_mask(pad: int, cutoff: float) -> np.ndarray:
    """Boolean mask of DFT bins whose radial frequency exceeds ``cutoff`` x Nyquist."""
    f = sfft.fftfreq(pad)
    rho = np.hypot(f[:, None], f[None, :])
    return rho > cutoff * 0.5


def spectrum_penalty(kernel: np.ndarray, weights: RegularizerWeights):
    """Spectral penalty summed over a stack of kernels (..., k, k).

    For each kernel, with ``P = |DFT_64(kernel)|^2``::

        lambda_hp   * sum(P above cutoff) / sum(P)
      + lambda_cond * (log(max P + eps) - log(min P + eps))

    Returns ``(value, gradient)``; the gradient has the kernel's shape.
    """
    kernel = np.asarray(kernel)
    pad, eps = weights.pad, weights.epsilon
    F = _spectrum(kernel, pad)
    power = (F * np.conj(F)).real
    lead = power.shape[:-2]
    flat = power.reshape(lead + (-1,))
    coeff = np.zeros_like(power)
    value = 0.0

    if weights.lambda_spec_highpass > 0:
        mask = highpass_mask(pad, weights.highpass_cutoff)
        total = power.sum(axis=(-2, -1), keepdims=True)
        total_safe = np.where(total > 0, total, 1.0)
        frac = np.sum(power * mask, axis=(-2, -1), keepdims=True) / total_safe
        value += weights.lambda_spec_highpass * float(frac.sum())
        coeff += weights.lambda_spec_highpass * np.where(total > 0, (mask - frac) / total_safe, 0.0)

    if weights.lambda_spec_cond > 0:
        imax = np.argmax(flat, axis=-1)
        imin = np.argmin(flat, axis=-1)
        pmax = np.take_along_axis(flat, imax[..., None], -1)[..., 0]
        pmin = np.take_along_axis(flat, imin[..., None], -1)[..., 0]
        value += weights.lambda_spec_cond * float(np.sum(np.log(pmax + eps) - np.log(pmin + eps)))
        cflat = coeff.reshape(lead + (-1,))
        idx = np.indices(lead)
        cflat[(*idx, imax)] += weights.lambda_spec_cond / (pmax + eps)
        cflat[(*idx, imin)] -= weights.lambda_spec_cond / (pmin + eps)
        coeff = cflat.reshape(power.shape)

    # d/dk sum_f c_f |F_f|^2 = 2 Re(P^2 ifft2(c * F)) restricted to the kernel support
    k = kernel.shape[-1]
    back = 2.0 * (pad * pad) * sfft.ifft2(coeff * F).real
    grad = back[..., :k, :k].astype(kernel.dtype, copy=False)
    return value, grad


def highpass_fraction(kernel: np.ndarray, cutoff: float = 0.5, pad: int = 64) -> np.ndarray:
    power = np.abs(_spectrum(kernel, pad)) ** 2
    mask = highpass_mask(pad, cutoff)
    return np.sum(power * mask, axis=(-2, -1)) / np.sum(power, axis=(-2, -1))


def kernel_condition_number(kernel: np.ndarray, epsilon: float = 1e-8, pad: int = 64) -> np.ndarray:
    """``max|K| / (min|K| + eps)`` over the zero-padded DFT grid (reporting only)."""
    mag = np.abs(_spectrum(kernel, pad))
    return mag.max(axis=(-2, -1)) / (mag.min(axis=(-2, -1)) + epsilon)


def tv_assembled_kernels(basis: np.ndarray, weights: np.ndarray, epsilon: float = 1e-8):
    """TV across pixels of every tap of the assembled per-pixel kernel field.

    ``basis`` (C, R, k, k), ``weights`` (C, R, H, W). Returns
    ``(value, grad_basis, grad_weights)``.
    """
    C, R, k, _ = basis.shape
    b = basis.reshape(C, R, k * k)
    field = np.einsum("crt,crhw->cthw", b, weights, optimize=True)
    value, g_field = tv_isotropic(field, epsilon)
    g_basis = np.einsum("cthw,crhw->crt", g_field, weights, optimize=True).reshape(basis.shape)
    g_weights = np.einsum("cthw,crt->crhw", g_field, b, optimize=True)
    return value, g_basis, g_weights
