"""Simulated incoherent capture of image features through a metalens array.

Each source pixel ``q`` spreads its intensity with the PSF of its own
incident angle. PSFs are known at the anchor pixels of an :class:`AngleGrid`
and bilinearly interpolated in between, so the capture is::

    y(p) = sum_q x(q) * sum_a beta_a(q) * PSF_a(p - q)
         = sum_a (PSF_a * (beta_a . x))(p)          (overlap-add of windowed tiles)

with bilinear hat weights ``beta_a`` that sum to one at every pixel. Lens
``2c`` carries the positive part of channel ``c`` and lens ``2c+1`` the
negative part; the feature is their difference.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidArgument
from .lens import AngleGrid, MetalensSpec, PhaseProfile, Propagator, angle_grid


def hat_weights(anchors: np.ndarray, n: int) -> np.ndarray:
    """Piecewise-linear interpolation weights (len(anchors), n), clamped past the ends."""
    anchors = np.asarray(anchors, dtype=np.float64)
    q = np.arange(n, dtype=np.float64)
    out = np.zeros((len(anchors), n))
    if len(anchors) == 1:
        out[0] = 1.0
        return out
    qc = np.clip(q, anchors[0], anchors[-1])
    seg = np.clip(np.searchsorted(anchors, qc, side="right") - 1, 0, len(anchors) - 2)
    t = (qc - anchors[seg]) / (anchors[seg + 1] - anchors[seg])
    out[seg, np.arange(n)] = 1.0 - t
    out[seg + 1, np.arange(n)] += t
    return out


def anchor_weights(grid: AngleGrid, height: int, width: int) -> np.ndarray:
    """(A, H, W) bilinear weights in the grid's row-major anchor order."""
    wy = hat_weights(grid.anchor_rows, height)
    wx = hat_weights(grid.anchor_cols, width)
    return np.einsum("ih,jw->ijhw", wy, wx).reshape(-1, height, width)


def _as_images(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    elif x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise InvalidArgument(f"expected (N, 1, H, W), (N, H, W) or (H, W) images, got {np.shape(images)}")
    return x


def render_from_psfs(psfs: np.ndarray, images: np.ndarray, grid: AngleGrid, method: str = "auto") -> np.ndarray:
    """Per-lens captured intensity images.

    Parameters
    ----------
    psfs : (L, A, k, k) non-negative PSF crops per lens and anchor angle
    images : (N, 1, H, W), (N, H, W) or (H, W)
    grid : anchor layout matching the second axis of ``psfs``
    method : ``anchor`` (one convolution per anchor), ``tap`` (one shifted
        add per kernel tap) or ``auto``; both give the same result.

    Returns
    -------
    (N, L, H, W)
    """
    x = _as_images(images)
    N, H, W = x.shape
    L, A, k, k2 = psfs.shape
    if A != len(grid) or k != k2 or k % 2 == 0:
        raise InvalidArgument(f"PSF stack {psfs.shape} does not match {len(grid)} anchors / odd square crops")
    beta = anchor_weights(grid, H, W).astype(x.dtype)
    if method == "auto":
        method = "anchor" if A <= 64 else "tap"
    c = k // 2
    dtype = np.result_type(x, psfs, np.float32)
    if method == "anchor":
        out = np.zeros((N * H * W, L), dtype=dtype)
        for a in range(A):
            xp = np.pad(x * beta[a], ((0, 0), (c, c), (c, c)))
            patches = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(N * H * W, k * k)
            kmat = np.ascontiguousarray(psfs[:, a, ::-1, ::-1].reshape(L, k * k), dtype=dtype)
            out += patches @ kmat.T
        return out.reshape(N, H, W, L).transpose(0, 3, 1, 2)
    if method != "tap":
        raise InvalidArgument(f"unknown render method {method!r}")
    field = np.einsum("ahw,laij->lhwij", beta, psfs.astype(dtype, copy=False), optimize=True)
    ypad = np.zeros((N, L, H + 2 * c, W + 2 * c), dtype=dtype)
    for i in range(k):
        for j in range(k):
            ypad[:, :, i : i + H, j : j + W] += x[:, None] * field[None, :, :, :, i, j]
    return ypad[:, :, c : c + H, c : c + W]


def simulate_psf_stacks(phases: Sequence, spec: MetalensSpec, grid: AngleGrid | None = None) -> np.ndarray:
    """(L, A, k, k) binned PSF crops for a list of phase profiles."""
    prop = Propagator(spec, grid if grid is not None else angle_grid(spec), np.complex64)
    out = []
    for ph in phases:
        phi = ph.phase if isinstance(ph, PhaseProfile) else np.asarray(ph)
        I, _, _ = prop.intensity(phi[None])
        out.append(prop.crops(I).astype(np.float64))
    return np.asarray(out)


def subtract_pairs(lens_images: np.ndarray) -> np.ndarray:
    """(N, 2C, H, W) per-lens captures -> (N, C, H, W) positive minus negative."""
    if lens_images.shape[1] % 2:
        raise InvalidArgument(f"lens count must be even (positive/negative pairs), got {lens_images.shape[1]}")
    return lens_images[:, 0::2] - lens_images[:, 1::2]


def render_features(
    phases: Sequence,
    images: np.ndarray,
    spec: MetalensSpec,
    gains: np.ndarray | None = None,
    noise_std: float = 0.0,
    seed: int = 0,
    grid: AngleGrid | None = None,
    psfs: np.ndarray | None = None,
) -> np.ndarray:
    """Simulated multichannel features (N, C, H, W) from ``2C`` phase profiles.

    ``gains`` (2C, A) rescale each lens/angle PSF (exposure calibration
    recorded at design time). ``noise_std`` adds Gaussian sensor noise to
    every lens image before the pair subtraction. Precomputed ``psfs``
    (2C, A, k, k) skip the optical simulation.
    """
    if len(phases) % 2:
        raise InvalidArgument(f"need an even number of phase profiles, got {len(phases)}")
    grid = grid if grid is not None else angle_grid(spec)
    if psfs is None:
        psfs = simulate_psf_stacks(phases, spec, grid)
    if gains is not None:
        psfs = psfs * np.asarray(gains)[:, :, None, None]
    lens_images = render_from_psfs(psfs, images, grid)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        lens_images = lens_images + noise_std * rng.standard_normal(lens_images.shape).astype(lens_images.dtype)
    return subtract_pairs(lens_images)


def feature_nrmse(optical: np.ndarray, electronic: np.ndarray) -> dict:
    """Per-channel NRMSE (N, C, H, W inputs), their mean, and the pooled value."""
    diff = (optical - electronic).astype(np.float64)
    ref = electronic.astype(np.float64)
    num = np.sqrt(np.sum(diff**2, axis=(0, 2, 3)))
    den = np.sqrt(np.sum(ref**2, axis=(0, 2, 3)))
    per = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    pooled = float(np.linalg.norm(diff) / np.linalg.norm(ref)) if np.any(ref) else float("nan")
    return {"per_channel": per, "mean": float(np.nanmean(per)), "pooled": pooled}
