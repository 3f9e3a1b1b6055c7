"""Large-kernel spatially-varying convolution and its reparameterizations.

A spatially-varying layer with ``C`` output channels and rank ``R`` computes

    y_c(p) = sum_r w_{c,r}(p) * (B_{c,r} * x)(p)

where ``B_{c,r}`` are basis kernels (optionally composed from a stack of
small factors) and ``w_{c,r}`` are per-pixel combining weights stored on a
coarse grid and bilinearly upsampled to the feature resolution.

Layer parameters are plain dicts of arrays:

``factors``  (C, R, n, s, s) when ``factorized`` else ``basis`` (C, R, k, k)
``weights``  (C, R, gh, gw), spatially-varying variants only
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numerics
from .errors import InvalidArgument

VARIANTS = ("SKSI", "LKSI", "SKSV", "LKSV")
SMALL_KERNEL = 3
LARGE_KERNEL = 15


@dataclass(frozen=True)
class SVConvConfig:
    """Stem configuration. ``kernel_size`` and ``rank`` default per variant."""

    variant: str = "LKSV"
    channels_out: int = 25
    kernel_size: int | None = None
    rank: int | None = None
    height: int = 32
    width: int = 32
    factorized: bool = True
    factor_size: int = 3
    weight_grid: tuple[int, int] = (14, 14)

    def __post_init__(self):
        v = self.variant.upper()
        if v not in VARIANTS:
            raise InvalidArgument(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "variant", v)
        object.__setattr__(self, "weight_grid", tuple(int(g) for g in self.weight_grid))
        want_k = LARGE_KERNEL if v.startswith("LK") else SMALL_KERNEL
        if self.kernel_size is None:
            object.__setattr__(self, "kernel_size", want_k)
        elif v in ("SKSI", "SKSV") and self.kernel_size != SMALL_KERNEL:
            raise InvalidArgument(f"{v} requires kernel size {SMALL_KERNEL}, got {self.kernel_size}")
        elif v in ("LKSI", "LKSV") and self.kernel_size <= SMALL_KERNEL:
            raise InvalidArgument(f"{v} requires a large kernel, got {self.kernel_size}")
        if self.rank is None:
            object.__setattr__(self, "rank", 6 if self.spatially_varying else 1)
        if not self.spatially_varying and self.rank != 1:
            raise InvalidArgument(f"spatially-invariant variant {v} requires rank 1, got {self.rank}")
        if self.rank < 1 or self.channels_out < 1 or self.height < 1 or self.width < 1:
            raise InvalidArgument("rank, channels and extents must be positive")
        k, s = self.kernel_size, self.factor_size
        if k % 2 == 0 or s % 2 == 0:
            raise InvalidArgument("kernel and factor extents must be odd")
        if self.factorized and (k - 1) % (s - 1) != 0:
            raise InvalidArgument(f"kernel {k} cannot be composed from {s}x{s} factors")
        if min(self.weight_grid) < 1:
            raise InvalidArgument("weight grid extents must be positive")

    @property
    def spatially_varying(self) -> bool:
        return self.variant.endswith("SV")

    @property
    def n_factors(self) -> int:
        if not self.factorized:
            return 1
        return (self.kernel_size - 1) // (self.factor_size - 1)


# --------------------------------------------------------------------------
# Kernel factorization
# --------------------------------------------------------------------------


def _full_small(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched full-mode true convolution for small kernels (shift-and-add)."""
    A0, A1 = a.shape[-2:]
    s0, s1 = b.shape[-2:]
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(lead + (A0 + s0 - 1, A1 + s1 - 1), dtype=np.result_type(a, b))
    for u in range(s0):
        for v in range(s1):
            out[..., u : u + A0, v : v + A1] += b[..., u, v, None, None] * a
    return out


def _full_small_vjp(g: np.ndarray, a: np.ndarray, b: np.ndarray):
    A0, A1 = a.shape[-2:]
    s0, s1 = b.shape[-2:]
    ga = np.zeros(g.shape[:-2] + (A0, A1), dtype=g.dtype)
    gb = np.empty(g.shape[:-2] + (s0, s1), dtype=g.dtype)
    for u in range(s0):
        for v in range(s1):
            window = g[..., u : u + A0, v : v + A1]
            ga += b[..., u, v, None, None] * window
            gb[..., u, v] = np.sum(window * a, axis=(-2, -1))
    return ga, gb


def compose_factors(factors: np.ndarray) -> np.ndarray:
    """Sequentially convolve a stack of small kernels (axis -3) into one large kernel.

    ``factors`` has shape ``(..., n, s, s)``; the result has extent ``n*(s-1)+1``.
    """
    factors = np.asarray(factors)
    if factors.ndim < 3 or factors.shape[-3] < 1:
        raise InvalidArgument("factor stack must hold at least one kernel")
    kernel = factors[..., 0, :, :]
    for m in range(1, factors.shape[-3]):
        kernel = _full_small(kernel, factors[..., m, :, :])
    return kernel


def compose_factors_vjp(cotangent: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """Gradient of ``<compose_factors(factors), cotangent>`` with respect to every factor."""
    factors = np.asarray(factors)
    n = factors.shape[-3]
    partial = [factors[..., 0, :, :]]
    for m in range(1, n):
        partial.append(_full_small(partial[-1], factors[..., m, :, :]))
    grads = np.empty_like(factors, dtype=np.result_type(cotangent, factors))
    g = np.asarray(cotangent)
    for m in range(n - 1, 0, -1):
        g, grads[..., m, :, :] = _full_small_vjp(g, partial[m - 1], factors[..., m, :, :])
    grads[..., 0, :, :] = g
    return grads


# --------------------------------------------------------------------------
# Weight maps
# --------------------------------------------------------------------------


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation matrix (n_out, n_in), end points aligned."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / max(n_out - 1, 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] = frac
    return m


def upsample_weights(coarse: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of (..., gh, gw) maps to (..., height, width)."""
    uh = interp_matrix(height, coarse.shape[-2], coarse.dtype)
    uw = interp_matrix(width, coarse.shape[-1], coarse.dtype)
    return np.einsum("hi,...ij,wj->...hw", uh, coarse, uw, optimize=True)


def upsample_weights_vjp(cotangent: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    height, width = cotangent.shape[-2:]
    uh = interp_matrix(height, grid[0], cotangent.dtype)
    uw = interp_matrix(width, grid[1], cotangent.dtype)
    return np.einsum("hi,...hw,wj->...ij", uh, cotangent, uw, optimize=True)


def basis_kernels(params: dict, config: SVConvConfig) -> np.ndarray:
    """Composed basis kernels, shape (C, R, k, k)."""
    if config.factorized:
        return compose_factors(params["factors"])
    return params["basis"]


def weight_maps(params: dict, config: SVConvConfig, dtype=None) -> np.ndarray:
    """Full-resolution combining weights, shape (C, R, H, W); constant 1 for SI variants."""
    if config.spatially_varying:
        return upsample_weights(params["weights"], config.height, config.width)
    dtype = dtype or basis_kernels(params, config).dtype
    return np.ones((config.channels_out, 1, config.height, config.width), dtype=dtype)


def assemble_kernel_at(basis: np.ndarray, weights: np.ndarray, channel: int, p: tuple[int, int]) -> np.ndarray:
    """Effective kernel ``sum_r w_{c,r}(p) B_{c,r}`` at pixel ``p = (row, col)``."""
    C, R, H, W = weights.shape
    i, j = p
    if not (0 <= channel < C and 0 <= i < H and 0 <= j < W):
        raise InvalidArgument(f"channel {channel} / pixel {p} outside layer extents ({C}, {H}, {W})")
    return np.tensordot(weights[channel, :, i, j], basis[channel], axes=(0, 0))


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class SVConvCache:
    patches: np.ndarray  # (N*H*W, k*k), windows of the padded input
    responses: np.ndarray  # (N, H, W, C, R), per-basis convolutions
    basis: np.ndarray
    weights: np.ndarray  # (H, W, C, R)
    input_shape: tuple = field(default_factory=tuple)


def _as_stack(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise InvalidArgument(f"stem expects a single input channel, got {x.shape[1]}")
        x = x[:, 0]
    elif x.ndim == 2:
        x = x[None]
    elif x.ndim != 3:
        raise InvalidArgument(f"expected (N, 1, H, W), (N, H, W) or (H, W) input, got {x.shape}")
    return x


def sv_conv_forward(x: np.ndarray, basis: np.ndarray, weights: np.ndarray):
    """Spatially-varying convolution of single-channel images.

    Parameters
    ----------
    x : (N, 1, H, W), (N, H, W) or (H, W)
    basis : (C, R, k, k) basis kernels
    weights : (C, R, H, W) full-resolution combining weights

    Returns
    -------
    y : (N, C, H, W)
    cache : SVConvCache for :func:`sv_conv_vjp`
    """
    x = _as_stack(x)
    C, R, k, k2 = basis.shape
    N, H, W = x.shape
    if k != k2 or k % 2 == 0:
        raise InvalidArgument(f"basis kernels must be square with odd extent, got {(k, k2)}")
    if weights.shape != (C, R, H, W):
        raise InvalidArgument(f"weight maps {weights.shape} do not match basis/input {(C, R, H, W)}")
    dtype = np.result_type(x, basis, weights)
    c = (k - 1) // 2
    xp = np.pad(x.astype(dtype, copy=False), ((0, 0), (c, c), (c, c)))
    patches = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(N * H * W, k * k)
    kmat = np.ascontiguousarray(basis[..., ::-1, ::-1].reshape(C * R, k * k), dtype=dtype)
    responses = (patches @ kmat.T).reshape(N, H, W, C, R)
    wt = np.ascontiguousarray(weights.transpose(2, 3, 0, 1))
    y = np.einsum("nhwcr,hwcr->nchw", responses, wt, optimize=True)
    return y, SVConvCache(patches, responses, basis, wt, (N, H, W))


def sv_conv_vjp(cotangent: np.ndarray, cache: SVConvCache, need_input_grad: bool = False):
    """Cotangents of :func:`sv_conv_forward` w.r.t. input, basis kernels and weight maps.

    Returns ``(gx, g_basis, g_weights)`` with ``gx`` shaped (N, H, W) or ``None``.
    """
    N, H, W = cache.input_shape
    C, R, k, _ = cache.basis.shape
    if cotangent.shape != (N, C, H, W):
        raise InvalidArgument(f"cotangent {cotangent.shape} does not match output {(N, C, H, W)}")
    gt = cotangent.transpose(0, 2, 3, 1)
    g_resp = gt[..., None] * cache.weights  # (N, H, W, C, R)
    g_w = np.einsum("nhwc,nhwcr->crhw", gt, cache.responses, optimize=True)
    g_flat = g_resp.reshape(N * H * W, C * R)
    g_kmat = g_flat.T @ cache.patches  # (C*R, k*k), flipped layout
    g_basis = g_kmat.reshape(C, R, k, k)[..., ::-1, ::-1]
    gx = None
    if need_input_grad:
        kmat = np.ascontiguousarray(cache.basis[..., ::-1, ::-1].reshape(C * R, k * k))
        g_patch = (g_flat @ kmat).reshape(N, H, W, k, k)
        c = (k - 1) // 2
        gxp = np.zeros((N, H + 2 * c, W + 2 * c), dtype=g_patch.dtype)
        for a in range(k):
            for b in range(k):
                gxp[:, a : a + H, b : b + W] += g_patch[..., a, b]
        gx = gxp[:, c : c + H, c : c + W]
    return gx, np.ascontiguousarray(g_basis), g_w


# --------------------------------------------------------------------------
# Layer-level helpers
# --------------------------------------------------------------------------


@dataclass
class LayerCache:
    conv: SVConvCache
    config: SVConvConfig


def layer_forward(params: dict, config: SVConvConfig, x: np.ndarray):
    basis = basis_kernels(params, config)
    weights = weight_maps(params, config, dtype=basis.dtype)
    x = _as_stack(x)
    if x.shape[1:] != (config.height, config.width):
        raise InvalidArgument(f"input extents {x.shape[1:]} do not match config {(config.height, config.width)}")
    y, cache = sv_conv_forward(x, basis, weights)
    return y, LayerCache(cache, config)


def layer_backward(cotangent: np.ndarray, params: dict, cache: LayerCache, need_input_grad: bool = False):
    """Parameter gradients (same keys as ``params``) and optional input gradient."""
    config = cache.config
    gx, g_basis, g_w = sv_conv_vjp(cotangent, cache.conv, need_input_grad)
    grads = {}
    if config.factorized:
        grads["factors"] = compose_factors_vjp(g_basis, params["factors"])
    else:
        grads["basis"] = g_basis
    if config.spatially_varying:
        grads["weights"] = upsample_weights_vjp(g_w, config.weight_grid)
    return grads, gx


def make_variant(config: SVConvConfig, seed: int = 0, dtype=None) -> dict:
    """Initialize stem parameters for ``config``.

    Each small factor is drawn with per-entry standard deviation ``1/s`` so
    the composed kernel has unit expected Frobenius norm (for independent
    zero-mean factors ``E||a * b||^2 = E||a||^2 E||b||^2``). Weight maps start
    at ``1/R`` plus small noise.
    """
    dtype = np.dtype(dtype or numerics.get_dtype())
    rng = np.random.default_rng(seed)
    C, R = config.channels_out, config.rank
    params = {}
    if config.factorized:
        s = config.factor_size
        shape = (C, R, config.n_factors, s, s)
        params["factors"] = (rng.standard_normal(shape) / s).astype(dtype)
    else:
        k = config.kernel_size
        params["basis"] = (rng.standard_normal((C, R, k, k)) / k).astype(dtype)
    if config.spatially_varying:
        gh, gw = config.weight_grid
        noise = 0.01 * rng.standard_normal((C, R, gh, gw))
        params["weights"] = (1.0 / R + noise / R).astype(dtype)
    return params


def param_count(config: SVConvConfig) -> int:
    C, R = config.channels_out, config.rank
    if config.factorized:
        n = C * R * config.n_factors * config.factor_size**2
    else:
        n = C * R * config.kernel_size**2
    if config.spatially_varying:
        n += C * R * config.weight_grid[0] * config.weight_grid[1]
    return n
