"""Glue between a trained stem and its optical realization.

Lens ``2c`` realizes the positive part of channel ``c`` and lens ``2c+1`` the
negative part. Targets are the stem's effective kernels at the anchor pixels
of the angle grid.
"""

from __future__ import annotations

import logging
import time
from dataclasses import replace

import numpy as np

from . import model, svconv
from .errors import InvalidArgument
from .model import ModelConfig
from .optics.design import DesignOptions, inverse_design
from .optics.lens import AngleGrid, MetalensSpec, angle_grid
from .optics.render import feature_nrmse, render_features

logger = logging.getLogger(__name__)


def check_compatible(config: ModelConfig, spec: MetalensSpec) -> None:
    stem = config.stem
    if stem.kernel_size != spec.kernel_size:
        raise InvalidArgument(f"stem kernel {stem.kernel_size} != optics kernel {spec.kernel_size}")
    if (stem.height, stem.width) != tuple(spec.feature_shape):
        raise InvalidArgument(f"stem extents {(stem.height, stem.width)} != optics feature shape {spec.feature_shape}")


def anchor_kernels(params: dict, config: ModelConfig, grid: AngleGrid) -> np.ndarray:
    """Signed effective kernels (C, A, k, k) at every anchor pixel."""
    sp = model.stem_params(params)
    basis = svconv.basis_kernels(sp, config.stem).astype(np.float64)
    weights = svconv.weight_maps(sp, config.stem, dtype=np.float64)
    C = config.stem.channels_out
    return np.stack([
        np.stack([svconv.assemble_kernel_at(basis, weights, c, (r, q)) for r in grid.anchor_rows for q in grid.anchor_cols])
        for c in range(C)
    ])


def design_targets(params: dict, config: ModelConfig, spec: MetalensSpec, grid: AngleGrid | None = None) -> np.ndarray:
    """Non-negative per-lens targets (2C, A, k, k) in positive/negative pairing order."""
    check_compatible(config, spec)
    grid = grid if grid is not None else angle_grid(spec)
    kp, kn = model.pair_decompose(anchor_kernels(params, config, grid))
    out = np.empty((2 * kp.shape[0],) + kp.shape[1:])
    out[0::2] = kp
    out[1::2] = kn
    return out


def lens_label(index: int) -> tuple[int, str]:
    return index // 2, "+" if index % 2 == 0 else "-"


def design_stem(params: dict, config: ModelConfig, spec: MetalensSpec, options: DesignOptions,
                channels=None, grid: AngleGrid | None = None) -> dict:
    """Inverse-design every lens of the selected channels (all by default).

    Returns a dict of arrays ready for :func:`checkpoint.save_checkpoint`:
    ``phase`` (L, N, N), ``gains`` (L, A), ``psfs`` (L, A, k, k), ``targets``,
    ``nrmse`` (L, A), ``efficiency_before`` / ``efficiency_after`` (L,),
    ``iterations`` (L,) and ``lens_channel`` (L,). Lenses whose target is
    identically zero are left undesigned with zero gain.
    """
    grid = grid if grid is not None else angle_grid(spec)
    targets = design_targets(params, config, spec, grid)
    C = config.stem.channels_out
    chans = list(range(C)) if channels is None else sorted(set(int(c) for c in channels))
    if any(c < 0 or c >= C for c in chans):
        raise InvalidArgument(f"channels must lie in [0, {C})")
    lenses = [2 * c + s for c in chans for s in (0, 1)]
    L, A, k = len(lenses), len(grid), spec.kernel_size
    out = {
        "phase": np.zeros((L, spec.grid, spec.grid)),
        "gains": np.zeros((L, A)),
        "psfs": np.zeros((L, A, k, k)),
        "targets": targets[lenses],
        "nrmse": np.full((L, A), np.nan),
        "efficiency_before": np.full(L, np.nan),
        "efficiency_after": np.full(L, np.nan),
        "iterations": np.zeros(L, dtype=np.int64),
        "lens_channel": np.array(chans, dtype=np.int64).repeat(2),
    }
    for i, lens in enumerate(lenses):
        if not np.any(targets[lens] > 0):
            logger.info("lens %d has an all-zero target; skipped", lens)
            continue
        t0 = time.perf_counter()
        opts = replace(options, seed=options.seed * 1000 + lens)
        d = inverse_design(spec, targets[lens], opts, grid)
        out["phase"][i] = d.profile.phase
        out["gains"][i] = d.gains
        out["psfs"][i] = d.psf.crops
        out["nrmse"][i] = d.report.per_angle_nrmse
        out["efficiency_before"][i] = d.report.efficiency_before
        out["efficiency_after"][i] = d.report.efficiency_after
        out["iterations"][i] = d.report.iterations
        c, s = lens_label(lens)
        logger.info("lens %d (channel %d%s): NRMSE %.4f, efficiency %.3f -> %.3f in %.1fs", lens, c, s,
                    d.report.mean_nrmse, d.report.efficiency_before, d.report.efficiency_after,
                    time.perf_counter() - t0)
    return out


def design_rows(design: dict) -> list[dict]:
    rows = []
    for i, ch in enumerate(design["lens_channel"]):
        per = design["nrmse"][i]
        rows.append({
            "lens": i, "channel": int(ch), "sign": "+" if i % 2 == 0 else "-",
            "mean_nrmse": float(np.nanmean(per)) if np.any(np.isfinite(per)) else float("nan"),
            "efficiency_before": float(design["efficiency_before"][i]),
            "efficiency_after": float(design["efficiency_after"][i]),
            "iterations": int(design["iterations"][i]),
        })
    return rows


def simulate_features(design: dict, images: np.ndarray, spec: MetalensSpec, noise_std: float = 0.0,
                      seed: int = 0, batch: int = 250) -> np.ndarray:
    """Optical features (N, C, H, W) from designed PSFs, using the recorded gains."""
    grid = angle_grid(spec)
    L = design["psfs"].shape[0]
    out = []
    for s in range(0, len(images), batch):
        out.append(render_features([None] * L, images[s : s + batch], spec, gains=design["gains"],
                                   noise_std=noise_std, seed=seed + s, grid=grid, psfs=design["psfs"]))
    return np.concatenate(out).astype(np.float32)

