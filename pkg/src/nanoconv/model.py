"""Hybrid classifier: spatially-varying stem followed by a small electronic backend.

Forward pass::

    stem (svconv) -> +bias -> relu -> avgpool -> depthwise 3x3 -> pointwise
    -> relu -> avgpool to a head_grid x head_grid map -> fully-connected head

All gradients are written out by hand. Parameters live in a flat dict keyed
``"<block>.<name>"``; keys under ``stem.`` (except ``stem.bias``) belong to
the optical side.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics, svconv
from .errors import InvalidArgument
from .regularization import (
    RegularizerWeights,
    spectrum_penalty,
    tv_assembled_kernels,
    tv_isotropic,
)
from .svconv import SVConvConfig

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class ModelConfig:
    stem: SVConvConfig = field(default_factory=SVConvConfig)
    pool: int = 2
    depthwise_kernel: int = 3
    pointwise_channels: int = 29
    head_grid: int = 2
    classes: int = 10
    activation: str = "relu"
    param_budget: float = 2.18e3

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        H, W = self.stem.height, self.stem.width
        if self.pool < 1 or H % self.pool or W % self.pool:
            raise InvalidArgument(f"pool {self.pool} does not divide stem extents {(H, W)}")
        h2, w2 = H // self.pool, W // self.pool
        if self.head_grid < 1 or h2 % self.head_grid or w2 % self.head_grid:
            raise InvalidArgument(f"head grid {self.head_grid} does not divide pooled extents {(h2, w2)}")
        if self.depthwise_kernel % 2 == 0:
            raise InvalidArgument("depthwise kernel extent must be odd")

    @property
    def pooled_shape(self) -> tuple[int, int]:
        return self.stem.height // self.pool, self.stem.width // self.pool

    @property
    def head_inputs(self) -> int:
        return self.pointwise_channels * self.head_grid**2

    def with_variant(self, variant: str) -> "ModelConfig":
        stem = SVConvConfig(
            variant=variant,
            channels_out=self.stem.channels_out,
            height=self.stem.height,
            width=self.stem.width,
            factorized=self.stem.factorized,
            factor_size=self.stem.factor_size,
            weight_grid=self.stem.weight_grid,
        )
        return replace(self, stem=stem)


def preset(name: str, variant: str = "LKSV") -> ModelConfig:
    """Named model presets. ``cifar10`` is the 32x32 grayscale CIFAR-10 network."""
    name = name.lower()
    if name == "cifar10":
        base = ModelConfig()
    elif name == "imagenet64":
        stem = SVConvConfig(height=64, width=64)
        base = ModelConfig(stem=stem, head_grid=2, classes=1000)
    elif name == "toy":
        stem = SVConvConfig(channels_out=3, height=8, width=8, kernel_size=5, weight_grid=(3, 3), rank=2)
        return ModelConfig(stem=stem, pointwise_channels=4, head_grid=2, classes=3)
    else:
        raise InvalidArgument(f"unknown model preset {name!r}")
    return base.with_variant(variant)


def is_optical(name: str) -> bool:
    return name.startswith("stem.") and name != "stem.bias"


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> dict[str, np.ndarray]:
    dtype = np.dtype(dtype or numerics.get_dtype())
    params = {f"stem.{k}": v for k, v in svconv.make_variant(config.stem, seed, dtype).items()}
    rng = np.random.default_rng([seed, 1])
    C, P, kd = config.stem.channels_out, config.pointwise_channels, config.depthwise_kernel

    def normal(shape, std):
        return (std * rng.standard_normal(shape)).astype(dtype)

    params["stem.bias"] = np.zeros(C, dtype)
    params["dw.weight"] = normal((C, kd, kd), np.sqrt(2.0 / kd**2))
    params["dw.bias"] = np.zeros(C, dtype)
    params["pw.weight"] = normal((P, C), np.sqrt(2.0 / C))
    params["pw.bias"] = np.zeros(P, dtype)
    params["head.weight"] = normal((config.classes, config.head_inputs), np.sqrt(1.0 / config.head_inputs))
    params["head.bias"] = np.zeros(config.classes, dtype)
    return params


def stem_params(params: dict) -> dict:
    return {k[5:]: v for k, v in params.items() if is_optical(k)}


# --------------------------------------------------------------------------
# Layer helpers
# --------------------------------------------------------------------------


def _act(x, kind):
    return np.maximum(x, 0) if kind == "relu" else x


def _act_vjp(g, pre, kind):
    return g * (pre > 0) if kind == "relu" else g


def avgpool(x: np.ndarray, f: int) -> np.ndarray:
    N, C, H, W = x.shape
    return x.reshape(N, C, H // f, f, W // f, f).mean(axis=(3, 5))


def avgpool_vjp(g: np.ndarray, f: int) -> np.ndarray:
    return np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f)


def depthwise(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Per-channel same-mode true convolution: x (N, C, H, W), k (C, kh, kw)."""
    N, C, H, W = x.shape
    kh, kw = k.shape[1:]
    ch, cw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ch, ch), (cw, cw)))
    y = np.zeros_like(x)
    for a in range(kh):
        for b in range(kw):
            r, c = 2 * ch - a, 2 * cw - b
            y += k[None, :, a, b, None, None] * xp[:, :, r : r + H, c : c + W]
    return y


def depthwise_vjp(g: np.ndarray, x: np.ndarray, k: np.ndarray):
    N, C, H, W = x.shape
    kh, kw = k.shape[1:]
    ch, cw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ch, ch), (cw, cw)))
    gxp = np.zeros_like(xp)
    gk = np.empty_like(k)
    for a in range(kh):
        for b in range(kw):
            r, c = 2 * ch - a, 2 * cw - b
            gxp[:, :, r : r + H, c : c + W] += k[None, :, a, b, None, None] * g
            gk[:, a, b] = np.einsum("nchw,nchw->c", g, xp[:, :, r : r + H, c : c + W])
    return gxp[:, :, ch : ch + H, cw : cw + W], gk


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class StemCache:
    basis: np.ndarray
    weights: np.ndarray
    conv: svconv.SVConvCache


def stem_forward(params: dict, config: ModelConfig, images: np.ndarray):
    """Electronic stem features (before bias), shape (N, C, H, W)."""
    sp = stem_params(params)
    basis = svconv.basis_kernels(sp, config.stem)
    weights = svconv.weight_maps(sp, config.stem, dtype=basis.dtype)
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (1, config.stem.height, config.stem.width):
        raise InvalidArgument(
            f"images must be (N, 1, {config.stem.height}, {config.stem.width}), got {images.shape}"
        )
    y, cache = svconv.sv_conv_forward(images.astype(basis.dtype, copy=False), basis, weights)
    return y, StemCache(basis, weights, cache)


def backend_forward(params: dict, config: ModelConfig, features: np.ndarray):
    """Logits from stem features (N, C, H, W). Returns ``(logits, cache)``."""
    C = config.stem.channels_out
    if features.ndim != 4 or features.shape[1:] != (C, config.stem.height, config.stem.width):
        raise InvalidArgument(f"features must be (N, {C}, H, W), got {features.shape}")
    act = config.activation
    a1 = features + params["stem.bias"][None, :, None, None]
    r1 = _act(a1, act)
    p1 = avgpool(r1, config.pool)
    d = depthwise(p1, params["dw.weight"]) + params["dw.bias"][None, :, None, None]
    q = np.einsum("pc,nchw->nphw", params["pw.weight"], d, optimize=True)
    q += params["pw.bias"][None, :, None, None]
    r2 = _act(q, act)
    block = config.pooled_shape[0] // config.head_grid
    g = avgpool(r2, block)
    flat = g.reshape(g.shape[0], -1)
    logits = flat @ params["head.weight"].T + params["head.bias"]
    cache = dict(a1=a1, p1=p1, d=d, q=q, g_shape=g.shape, flat=flat, block=block)
    return logits, cache


def backend_backward(g_logits: np.ndarray, params: dict, config: ModelConfig, cache: dict, need_features=True):
    act = config.activation
    grads = {
        "head.weight": g_logits.T @ cache["flat"],
        "head.bias": g_logits.sum(axis=0),
    }
    g_flat = g_logits @ params["head.weight"]
    g_r2 = avgpool_vjp(g_flat.reshape(cache["g_shape"]), cache["block"])
    g_q = _act_vjp(g_r2, cache["q"], act)
    grads["pw.bias"] = g_q.sum(axis=(0, 2, 3))
    grads["pw.weight"] = np.einsum("nphw,nchw->pc", g_q, cache["d"], optimize=True)
    g_d = np.einsum("pc,nphw->nchw", params["pw.weight"], g_q, optimize=True)
    grads["dw.bias"] = g_d.sum(axis=(0, 2, 3))
    g_p1, grads["dw.weight"] = depthwise_vjp(g_d, cache["p1"], params["dw.weight"])
    g_r1 = avgpool_vjp(g_p1, config.pool)
    g_a1 = _act_vjp(g_r1, cache["a1"], act)
    grads["stem.bias"] = g_a1.sum(axis=(0, 2, 3))
    return grads, (g_a1 if need_features else None)


def forward(params: dict, config: ModelConfig, images: np.ndarray) -> np.ndarray:
    """Logits (N, classes) for images (N, 1, H, W)."""
    feats, _ = stem_forward(params, config, images)
    logits, _ = backend_forward(params, config, feats)
    return logits


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    prob = np.exp(z - logsum[:, None])
    prob[np.arange(n), labels] -= 1.0
    return loss, prob / n


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InvalidArgument(f"labels must lie in [0, {classes})")
    return labels.astype(np.int64, copy=False)


def regularizer_terms(params: dict, config: ModelConfig, regs: RegularizerWeights, basis, weights):
    """Regularizer value and gradients w.r.t. (basis, full-resolution weights)."""
    value = 0.0
    g_basis = np.zeros_like(basis)
    g_weights = np.zeros_like(weights)
    if regs.lambda_spec_highpass > 0 or regs.lambda_spec_cond > 0:
        v, g = spectrum_penalty(basis, regs)
        value += v
        g_basis += g
    if regs.lambda_tv > 0 and config.stem.spatially_varying:
        if regs.tv_on_kernels:
            v, gb, gw = tv_assembled_kernels(basis, weights, regs.epsilon)
            g_basis += regs.lambda_tv * gb
        else:
            v, gw = tv_isotropic(weights, regs.epsilon)
        value += regs.lambda_tv * v
        g_weights += regs.lambda_tv * gw
    return value, g_basis, g_weights


def _stem_param_grads(params: dict, config: ModelConfig, g_basis, g_weights) -> dict:
    grads = {}
    if config.stem.factorized:
        grads["stem.factors"] = svconv.compose_factors_vjp(g_basis, params["stem.factors"])
    else:
        grads["stem.basis"] = g_basis
    if config.stem.spatially_varying:
        grads["stem.weights"] = svconv.upsample_weights_vjp(g_weights, config.stem.weight_grid)
    return grads


def loss_and_grads(params: dict, config: ModelConfig, images, labels, regs: RegularizerWeights,
                   freeze_optical: bool = False):
    """Cross-entropy plus kernel regularizers, with gradients for every parameter block.

    Returns ``(loss, grads, parts)`` where ``parts`` splits the loss into
    ``ce`` and ``reg``. With ``freeze_optical`` only electronic gradients are
    computed and the regularizers are skipped.
    """
    labels = _check_labels(labels, config.classes)
    feats, scache = stem_forward(params, config, images)
    logits, bcache = backend_forward(params, config, feats)
    ce, g_logits = softmax_cross_entropy(logits, labels)
    grads, g_feats = backend_backward(g_logits, params, config, bcache, need_features=not freeze_optical)
    if freeze_optical:
        return ce, grads, {"ce": ce, "reg": 0.0}
    _, g_basis, g_w = svconv.sv_conv_vjp(g_feats, scache.conv)
    reg, rb, rw = regularizer_terms(params, config, regs, scache.basis, scache.weights)
    grads.update(_stem_param_grads(params, config, g_basis + rb, g_w + rw))
    return ce + reg, grads, {"ce": ce, "reg": reg}


def backend_loss_and_grads(params: dict, config: ModelConfig, features, labels):
    """Cross-entropy of the backend alone on precomputed stem features."""
    labels = _check_labels(labels, config.classes)
    logits, bcache = backend_forward(params, config, features)
    ce, g_logits = softmax_cross_entropy(logits, labels)
    grads, _ = backend_backward(g_logits, params, config, bcache, need_features=False)
    return ce, grads, {"ce": ce, "reg": 0.0}


def pair_decompose(kernels: np.ndarray):
    """Split signed kernels into non-negative parts with ``K = K_plus - K_minus``."""
    k = np.asarray(kernels)
    return np.maximum(k, 0), np.maximum(-k, 0)
