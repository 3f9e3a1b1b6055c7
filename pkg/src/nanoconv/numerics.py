"""Dense array primitives: unitary FFT, 2-D convolution with exact adjoints,
and a central-difference gradient checker.

Convolution convention
----------------------
Every convolution in this package is a *true* convolution (the kernel is
flipped), ``y[i, j] = sum_{a, b} k[a, b] * x[i - a, j - b]``, with zero
padding outside the input. ``same`` mode keeps the input extent and centers
the kernel (odd extents only); ``full`` returns ``(H+h-1, W+w-1)``; ``valid``
returns ``(H-h+1, W-w+1)``.

Leading dimensions of ``x`` and ``k`` broadcast against each other, so a
stack of images can be convolved with a stack of kernels in one call.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.fft as sfft

from .errors import InvalidArgument, NumericalFailure

logger = logging.getLogger(__name__)

_MODES = ("same", "full", "valid")
_dtype = np.dtype(np.float32)


def get_dtype() -> np.dtype:
    """Return the default floating dtype used for new parameters."""
    return _dtype


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in (32, 64):
        raise InvalidArgument(f"precision must be 32 or 64 bits, got {bits}")
    _dtype = np.dtype(np.float32 if bits == 32 else np.float64)


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default dtype (64-bit is used for gradient checks)."""
    previous = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(64 if previous == np.float64 else 32)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


# --------------------------------------------------------------------------
# FFT
# --------------------------------------------------------------------------


def fft2(grid: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes.

    Both directions are scaled by ``1/sqrt(H*W)`` so the transform preserves
    the l2 norm and ``fft2(fft2(x), inverse=True) == x``.
    """
    grid = np.asarray(grid)
    if grid.ndim < 2 or grid.shape[-1] < 1 or grid.shape[-2] < 1:
        raise InvalidArgument(f"fft2 needs a non-empty grid, got shape {grid.shape}")
    if inverse:
        return sfft.ifft2(grid, norm="ortho")
    return sfft.fft2(grid, norm="ortho")


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


def _check_mode(mode: str, kshape: tuple[int, int], xshape: tuple[int, int]) -> None:
    if mode not in _MODES:
        raise InvalidArgument(f"unknown convolution mode {mode!r}")
    h, w = kshape
    H, W = xshape
    if min(h, w, H, W) < 1:
        raise InvalidArgument("convolution operands must be non-empty")
    if mode == "same" and (h % 2 == 0 or w % 2 == 0):
        raise InvalidArgument(f"same-mode convolution needs odd kernel extents, got {kshape}")
    if mode == "valid" and (h > H or w > W):
        raise InvalidArgument(f"valid-mode kernel {kshape} larger than input {xshape}")


def _full_conv(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    H, W = x.shape[-2:]
    h, w = k.shape[-2:]
    out_shape = (H + h - 1, W + w - 1)
    fshape = (next_pow2(out_shape[0]), next_pow2(out_shape[1]))
    dtype = np.result_type(x.dtype, k.dtype, np.float32)
    X = sfft.rfft2(x.astype(dtype, copy=False), s=fshape)
    K = sfft.rfft2(k.astype(dtype, copy=False), s=fshape)
    y = sfft.irfft2(X * K, s=fshape)
    return y[..., : out_shape[0], : out_shape[1]].astype(dtype, copy=False)


def _output_window(mode: str, xshape, kshape) -> tuple[int, int, int, int]:
    """Return (row offset, col offset, rows, cols) of the mode's output inside the full result."""
    H, W = xshape
    h, w = kshape
    if mode == "full":
        return 0, 0, H + h - 1, W + w - 1
    if mode == "same":
        return (h - 1) // 2, (w - 1) // 2, H, W
    return h - 1, w - 1, H - h + 1, W - w + 1


def conv2d(x: np.ndarray, k: np.ndarray, mode: str = "same") -> np.ndarray:
    """True 2-D convolution of ``x`` with ``k`` (see module docstring)."""
    x = np.asarray(x)
    k = np.asarray(k)
    _check_mode(mode, k.shape[-2:], x.shape[-2:])
    r0, c0, nr, nc = _output_window(mode, x.shape[-2:], k.shape[-2:])
    return _full_conv(x, k)[..., r0 : r0 + nr, c0 : c0 + nc]


def _sum_to_shape(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = a.ndim - len(shape)
    if extra > 0:
        a = a.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a


def conv2d_vjp(cotangent: np.ndarray, x: np.ndarray, k: np.ndarray, mode: str = "same"):
    """Vector-Jacobian products of :func:`conv2d` with respect to ``x`` and ``k``.

    Returns ``(gx, gk)`` satisfying ``<conv2d(x, k), cot> == <x, gx> == <k, gk>``.
    Broadcast leading dimensions are summed out so ``gx.shape == x.shape`` and
    ``gk.shape == k.shape``.
    """
    x = np.asarray(x)
    k = np.asarray(k)
    cot = np.asarray(cotangent)
    _check_mode(mode, k.shape[-2:], x.shape[-2:])
    H, W = x.shape[-2:]
    h, w = k.shape[-2:]
    r0, c0, nr, nc = _output_window(mode, (H, W), (h, w))
    if cot.shape[-2:] != (nr, nc):
        raise InvalidArgument(
            f"cotangent extents {cot.shape[-2:]} do not match {mode}-mode output {(nr, nc)}"
        )
    lead = np.broadcast_shapes(x.shape[:-2], k.shape[:-2])
    try:
        lead = np.broadcast_shapes(lead, cot.shape[:-2])
    except ValueError as exc:
        raise InvalidArgument(f"cotangent batch shape {cot.shape[:-2]} incompatible") from exc
    g_full = np.zeros(lead + (H + h - 1, W + w - 1), dtype=np.result_type(cot, x, k, np.float32))
    g_full[..., r0 : r0 + nr, c0 : c0 + nc] = cot
    gx = _full_conv(g_full, k[..., ::-1, ::-1])[..., h - 1 : h - 1 + H, w - 1 : w - 1 + W]
    gk = _full_conv(g_full, x[..., ::-1, ::-1])[..., H - 1 : H - 1 + h, W - 1 : W - 1 + w]
    return _sum_to_shape(gx, x.shape), _sum_to_shape(gk, k.shape)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-block relative errors of an analytic gradient against central differences."""

    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self) -> str:
        lines = [f"gradcheck tol={self.tolerance:g} {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.errors.items():
            lines.append(f"  {name:<24s} rel_err={err:.3e} coords={self.checked.get(name, 0)}")
        return "\n".join(lines)


def finite_difference_check(
    objective: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, block by block.

    ``objective`` is called with ``params`` after in-place perturbation of one
    coordinate, so it must read the arrays it is given. When ``max_coords`` is
    set, each block is checked on a random subset of that many coordinates.
    The relative error of a block is ``||g_fd - g|| / max(||g_fd||, ||g||)``
    over the checked coordinates.
    """
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    def evaluate() -> float:
        value = float(objective(params))
        if not np.isfinite(value):
            raise NumericalFailure("objective returned a non-finite value during gradient check")
        return value

    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidArgument(f"gradient block {name!r} has shape {g.shape}, expected {p.shape}")
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise InvalidArgument(f"parameter block {name!r} must be contiguous")
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        fd = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus = evaluate()
            flat[i] = orig
            fd[n] = (f_plus - f_minus) / (2.0 * epsilon)
        an = g.reshape(-1)[idx]
        scale = max(np.linalg.norm(fd), np.linalg.norm(an))
        report.errors[name] = 0.0 if scale == 0 else float(np.linalg.norm(fd - an) / scale)
        report.checked[name] = int(idx.size)
        logger.debug("gradcheck %s: %.3e over %d coords", name, report.errors[name], idx.size)
    return report
