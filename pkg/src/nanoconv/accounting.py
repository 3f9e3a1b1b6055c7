"""Closed-form MAC and parameter counts, split into optical and electronic parts.

Per-layer formulas (one MAC per multiply-accumulate, pooling is free):

* stem (optical): ``C*H*W*k^2*R`` for the R basis convolutions plus
  ``C*H*W*R`` for the per-pixel weighted combination
* stem bias + pair subtraction (electronic): ``2*C*H*W``
* depthwise k x k: ``C*H'*W'*k^2``
* pointwise: ``P*H'*W'*C``
* head: ``classes * inputs``

Generic layers are counted as ``output elements x kernel elements``.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import svconv
from .model import ModelConfig


@dataclass(frozen=True)
class LayerSpec:
    name: str
    output_elements: int
    kernel_elements: int
    params: int = 0

    @property
    def macs(self) -> int:
        return self.output_elements * self.kernel_elements


def backend_layers(config: ModelConfig) -> list[LayerSpec]:
    s = config.stem
    C, H, W = s.channels_out, s.height, s.width
    h2, w2 = config.pooled_shape
    P, kd = config.pointwise_channels, config.depthwise_kernel
    return [
        # bias add and positive/negative subtraction after the sensor
        LayerSpec("stem-bias+pair-subtract", C * H * W, 2, C),
        LayerSpec("depthwise", C * h2 * w2, kd * kd, C * kd * kd + C),
        LayerSpec("pointwise", P * h2 * w2, C, P * C + P),
        LayerSpec("head", config.classes, config.head_inputs, config.classes * config.head_inputs + config.classes),
    ]


def stem_macs(stem: svconv.SVConvConfig) -> int:
    chw = stem.channels_out * stem.height * stem.width
    return chw * stem.kernel_size**2 * stem.rank + chw * stem.rank


def count_macs(config: ModelConfig, layers: list[LayerSpec] | None = None) -> dict[str, int]:
    """MAC breakdown ``{"optical", "electronic"}``; ``layers`` overrides the backend."""
    layers = backend_layers(config) if layers is None else layers
    return {"optical": stem_macs(config.stem), "electronic": sum(l.macs for l in layers)}


def count_params(config: ModelConfig, layers: list[LayerSpec] | None = None) -> dict[str, int]:
    layers = backend_layers(config) if layers is None else layers
    return {"optical": svconv.param_count(config.stem), "electronic": sum(l.params for l in layers)}


def ablation_table(config: ModelConfig) -> list[dict]:
    """One row per stem variant with absolute counts and optical shares."""
    rows = []
    for variant in svconv.VARIANTS:
        cfg = config.with_variant(variant)
        macs, params = count_macs(cfg), count_params(cfg)
        rows.append(
            {
                "variant": variant,
                "mac_optical": macs["optical"],
                "mac_electronic": macs["electronic"],
                "mac_optical_share": macs["optical"] / (macs["optical"] + macs["electronic"]),
                "params_optical": params["optical"],
                "params_electronic": params["electronic"],
                "params_optical_share": params["optical"] / (params["optical"] + params["electronic"]),
            }
        )
    return rows
