"""Report emission: CSV tables, 16-bit PGM galleries and matplotlib figures."""

from __future__ import annotations

import csv
import os

import numpy as np

from .errors import FormatError, InvalidArgument


def write_csv(path: str, rows: list[dict], fields: list[str] | None = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_confusion_csv(path: str, cm: np.ndarray) -> None:
    """Rows are true classes, columns predictions."""
    n = cm.shape[0]
    rows = [{"true": i, **{f"pred_{j}": int(cm[i, j]) for j in range(n)}} for i in range(n)]
    write_csv(path, rows, ["true"] + [f"pred_{j}" for j in range(n)])


# --------------------------------------------------------------------------
# PGM (binary P5, 16-bit big-endian)
# --------------------------------------------------------------------------


def to_uint16(img: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linear min/max scaling to 0..65535; a flat image maps to zeros."""
    a = np.asarray(img, dtype=np.float64)
    lo = float(a.min()) if lo is None else lo
    hi = float(a.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint16)
    return np.round(np.clip((a - lo) / (hi - lo), 0, 1) * 65535).astype(np.uint16)


def write_pgm(path: str, img: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    a = np.asarray(img)
    if a.ndim != 2 or a.size == 0:
        raise InvalidArgument(f"PGM needs a non-empty 2-D image, got shape {a.shape}")
    data = a if a.dtype == np.uint16 else to_uint16(a, lo, hi)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.astype(">u2").tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dt = ">u2" if maxval > 255 else "u1"
    body = raw[pos + 1 :]
    n = w * h * np.dtype(dt).itemsize
    if len(body) < n:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(body[:n], dtype=dt).reshape(h, w).astype(np.uint16)


def tile(images: np.ndarray, cols: int | None = None, pad: int = 1, normalize_each: bool = True) -> np.ndarray:
    """Lay out (n, h, w) images on a grid separated by ``pad`` zero pixels."""
    imgs = np.asarray(images, dtype=np.float64)
    n, h, w = imgs.shape
    if normalize_each:
        peak = np.abs(imgs).reshape(n, -1).max(axis=1)
        imgs = imgs / np.where(peak > 0, peak, 1.0)[:, None, None]
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    out = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i in range(n):
        r, c = divmod(i, cols)
        out[pad + r * (h + pad) : pad + r * (h + pad) + h, pad + c * (w + pad) : pad + c * (w + pad) + w] = imgs[i]
    return out


# --------------------------------------------------------------------------
# Figures
# --------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_confusion(path: str, cm: np.ndarray, title: str = "") -> None:
    plt = _pyplot()
    frac = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, f"{frac[i, j]:.2f}", ha="center", va="center", fontsize=6,
                    color="white" if frac[i, j] > 0.5 else "black")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_kernel_pairs(path: str, targets: np.ndarray, psfs: np.ndarray, titles=("target", "simulated")) -> None:
    """Side-by-side galleries of (n, k, k) target kernels and simulated PSFs."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, stack, t in zip(axes, (targets, psfs), titles):
        ax.imshow(tile(stack), cmap="magma")
        ax.set_title(t)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_curves(path: str, series: dict[str, list[float]], xlabel: str, ylabel: str, logy: bool = False) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_ablation(path: str, rows: list[dict]) -> None:
    """Bar chart of optical vs electronic MACs per stem variant."""
    plt = _pyplot()
    names = [r["variant"] for r in rows]
    opt = np.array([float(r["mac_optical"]) for r in rows]) / 1e6
    ele = np.array([float(r["mac_electronic"]) for r in rows]) / 1e6
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, opt, label="optical")
    ax.bar(names, ele, bottom=opt, label="electronic")
    ax.set_ylabel("MACs (millions)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
