"""Grad-CAM and attention-weight heatmaps, plus heatmap export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data
from . import functional as F
from . import models
from ._io import atomic_write
from .errors import GraphStateError
from .tensor import Tensor, backward

CLASS_NAMES = models.CLASS_NAMES


@dataclass
class Heatmap:
    grid: np.ndarray  # D x H x W, values in [0, 1]
    target_class: str | None
    source: str  # "gradcam" | "attention" | "attention-softmax"
    raw: np.ndarray | None = None


def class_index(target) -> int:
    if isinstance(target, str):
        if target.upper() not in CLASS_NAMES:
            raise ValueError(f"unknown class {target!r}; expected one of {CLASS_NAMES}")
        return CLASS_NAMES.index(target.upper())
    idx = int(target)
    if not 0 <= idx < len(CLASS_NAMES):
        raise ValueError(f"class index {idx} out of range 0..{len(CLASS_NAMES) - 1}")
    return idx


def minmax(grid: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]. A constant map carries no localisation and maps to zeros."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi <= lo:
        return np.zeros_like(g)
    return (g - lo) / (hi - lo)


def resize_grid(grid: np.ndarray, size) -> np.ndarray:
    """Trilinear resample of a D x H x W array."""
    size = tuple(int(s) for s in size)
    if grid.shape == size:
        return np.asarray(grid, dtype=np.float64)
    t = F.resize_trilinear(Tensor(np.asarray(grid, dtype=np.float64)[None, None]), size)
    return t.data[0, 0]


def gradcam_weights(gradients: np.ndarray) -> np.ndarray:
    """alpha_k = mean of dy/dA^k over the voxels of map k (Z = voxel count)."""
    g = np.asarray(gradients, dtype=np.float64)
    return g.reshape(g.shape[0], -1).mean(axis=1)


def gradcam_map(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """ReLU(sum_k alpha_k A^k) for K x D x H x W activations and matching gradients."""
    a = np.asarray(activations, dtype=np.float64)
    if a.shape != np.shape(gradients):
        raise ValueError(f"activation shape {a.shape} != gradient shape {np.shape(gradients)}")
    alpha = gradcam_weights(gradients)
    return np.maximum(np.tensordot(alpha, a, axes=(0, 0)), 0.0)


def _as_batch(volume) -> Tensor:
    v = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    if v.ndim == 4:
        v = v[None]
    if v.ndim != 5 or v.shape[0] != 1:
        raise ValueError(f"explain one volume at a time (C x D x H x W), got shape {v.shape}")
    return Tensor(v.astype(np.float32, copy=False) if v.dtype != np.float64 else v)


def grad_cam(model: models.ModelGraph, volume, target_class) -> Heatmap:
    """Grad-CAM on the activations feeding the 1x1x1 head.

    The class score is the sum of the target channel's pre-sigmoid logits. Parameter
    gradients produced on the way are cleared before returning.
    """
    c = class_index(target_class)
    x = _as_batch(volume)
    pred = models.forward(model, x, capture_grad=True)
    acts = model.captures.get("final_conv")
    if acts is None:
        raise GraphStateError("final_conv activations were not captured")
    score = pred.logits[:, c].sum()
    backward(score)
    if acts.grad is None:
        model.zero_grad()
        raise GraphStateError("no gradient reached the final_conv activations")
    raw = gradcam_map(acts.data[0], acts.grad[0])
    model.zero_grad()
    raw = resize_grid(raw, x.shape[2:])
    return Heatmap(minmax(raw), CLASS_NAMES[c], "gradcam", raw)


def softmax_attention(features: np.ndarray, query: np.ndarray) -> np.ndarray:
    """alpha_i = exp(x_i . Q) / sum_j exp(x_j . Q) for an n x d feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    scores = x @ q
    scores -= scores.max()
    e = np.exp(scores)
    return e / e.sum()


def attention_map(model: models.ModelGraph, volume, mode: str = "gate") -> Heatmap:
    """Attention heatmap from the top skip connection of an AttUNet.

    ``mode="gate"`` returns the gate's sigmoid weights as they are (already in [0, 1]).
    ``mode="softmax"`` scores every voxel's projected skip feature against the pooled
    projected gating signal and normalises with a softmax over all voxels; the grid is
    min-max scaled for display and ``raw`` keeps the weights, which sum to 1.
    """
    if model.kind != "attunet":
        raise ValueError(f"attention maps need an attunet model, got {model.kind!r}")
    if mode not in ("gate", "softmax"):
        raise ValueError(f"mode must be 'gate' or 'softmax', got {mode!r}")
    x = _as_batch(volume)
    from .tensor import no_grad

    with no_grad():
        models.forward(model, x)
    rec = model.captures.get("skip_top.attention")
    if rec is None:
        raise GraphStateError("top skip attention record missing")
    size = x.shape[2:]
    if mode == "gate":
        alpha = resize_grid(rec.weights[0], size)
        return Heatmap(np.clip(alpha, 0.0, 1.0), None, "attention", alpha)
    keys = rec.keys[0]  # F x D x H x W
    feats = keys.reshape(keys.shape[0], -1).T
    weights = softmax_attention(feats, rec.query[0]).reshape(keys.shape[1:])
    weights = resize_grid(weights, size)
    return Heatmap(minmax(weights), None, "attention-softmax", weights)


# -- export ----------------------------------------------------------------------

def _warm_cool_table() -> np.ndarray:
    """256 x 3 uint8 ramp: deep blue -> cyan -> white-ish -> yellow -> red."""
    stops = np.array([
        [0.0, 0, 0, 96],
        [0.25, 0, 128, 255],
        [0.5, 224, 224, 224],
        [0.75, 255, 192, 0],
        [1.0, 192, 0, 0],
    ])
    pos = np.linspace(0.0, 1.0, 256)
    table = np.stack([np.interp(pos, stops[:, 0], stops[:, i]) for i in (1, 2, 3)], axis=1)
    return np.round(table).astype(np.uint8)


COLORMAP = _warm_cool_table()


def levels(grid: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] values to colormap indices 0..255."""
    return np.clip(np.round(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def encode_ppm(rgb: np.ndarray) -> bytes:
    img = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def export_heatmap(h: Heatmap, path, slice_axis: int | None = None, slices: str = "mid") -> list[Path]:
    """Write the heatmap volume (VSXV) and, with ``slice_axis``, colormap-index PGM slices
    plus matching color PPM renderings.

    ``slices`` is ``"mid"`` for the central slice only or ``"all"``.
    """
    path = Path(path)
    written = []
    data.write_volume(path, h.grid.astype(np.float32))
    written.append(path)
    if slice_axis is None:
        return written
    if slice_axis not in (0, 1, 2):
        raise ValueError(f"slice_axis must be 0, 1 or 2, got {slice_axis}")
    n = h.grid.shape[slice_axis]
    indices = [n // 2] if slices == "mid" else range(n)
    lv = levels(h.grid)
    stem = path.with_suffix("")
    for i in indices:
        sl = np.take(lv, i, axis=slice_axis)
        pgm = Path(f"{stem}_axis{slice_axis}_{i:03d}.pgm")
        atomic_write(pgm, encode_pgm(sl))
        ppm = pgm.with_suffix(".ppm")
        atomic_write(ppm, encode_ppm(COLORMAP[sl]))
        written += [pgm, ppm]
    return written


def read_heatmap(path) -> np.ndarray:
    return data.read_volume(path)[0]
