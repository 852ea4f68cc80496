"""Encoder/decoder, residual, CBAM and attention-gate blocks.

Blocks are plain functions of ``(input, params)``; parameters live in a flat
:class:`BlockParams` store keyed by dotted paths such as ``enc2.conv1.kernel``.
Each block has a matching ``init_*`` function that registers its parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype

GN_GROUPS = 8
GN_EPS = 1e-5
CBAM_RATIO = 8
CBAM_SPATIAL_KERNEL = 7


class BlockParams:
    """Flat, ordered store of named parameter tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._tensors:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.asarray(value), requires_grad=True, name=path)
        self._tensors[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._tensors[path]
        except KeyError:
            raise KeyError(f"no parameter at path {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._tensors) - set(state)
            extra = set(state) - set(self._tensors)
            if missing or extra:
                raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if k not in self._tensors:
                continue
            t = self._tensors[k]
            if v.shape != t.shape:
                raise ValueError(f"{k}: shape {v.shape} != {t.shape}")
            t.data = np.array(v, dtype=t.dtype)

    def astype(self, dtype) -> None:
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)
            t.grad = None


class Scope:
    """View of a :class:`BlockParams` under a path prefix."""

    def __init__(self, params: BlockParams, prefix: str):
        self.params = params
        self.prefix = prefix

    def path(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.params[self.path(name)]

    def __contains__(self, name: str) -> bool:
        return self.path(name) in self.params

    def add(self, name: str, value: np.ndarray) -> Tensor:
        return self.params.add(self.path(name), value)

    def scope(self, name: str) -> "Scope":
        return Scope(self.params, self.path(name))


@dataclass
class AttentionRecord:
    """Attention weights in [0, 1] emitted by one attention stage.

    ``keys``/``query`` are only filled for gates: the projected skip features and the
    spatially pooled projected gating signal, used for the dot-product softmax view.
    """

    site: int
    kind: str  # "gate" | "cbam-channel" | "cbam-spatial"
    weights: np.ndarray
    keys: np.ndarray | None = field(default=None, repr=False)
    query: np.ndarray | None = field(default=None, repr=False)


def gn_groups(channels: int, preferred: int = GN_GROUPS) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


# -- initialisation --------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


def init_conv(p: Scope, name: str, cin: int, cout: int, k: int, rng: np.random.Generator) -> None:
    p.add(f"{name}.kernel", he_uniform(rng, (cout, cin, k, k, k), cin * k**3))
    p.add(f"{name}.bias", np.zeros(cout, dtype=default_dtype()))


def init_norm(p: Scope, name: str, c: int) -> None:
    p.add(f"{name}.gamma", np.ones(c, dtype=default_dtype()))
    p.add(f"{name}.beta", np.zeros(c, dtype=default_dtype()))


def init_double_conv(p: Scope, cin: int, cout: int, rng: np.random.Generator) -> None:
    init_conv(p, "conv1", cin, cout, 3, rng)
    init_norm(p, "gn1", cout)
    init_conv(p, "conv2", cout, cout, 3, rng)
    init_norm(p, "gn2", cout)


def init_residual_block(p: Scope, cin: int, cout: int, rng: np.random.Generator) -> None:
    init_double_conv(p, cin, cout, rng)
    if cin != cout:
        init_conv(p, "proj", cin, cout, 1, rng)


def cbam_hidden(channels: int, ratio: int = CBAM_RATIO) -> int:
    if channels < ratio:
        warnings.warn(f"CBAM: {channels} channels < reduction ratio {ratio}; clamping ratio to {channels}",
                      RuntimeWarning, stacklevel=2)
        ratio = channels
    return max(1, channels // ratio)


def init_cbam(p: Scope, c: int, rng: np.random.Generator, ratio: int = CBAM_RATIO,
              spatial_kernel: int = CBAM_SPATIAL_KERNEL) -> None:
    hidden = cbam_hidden(c, ratio)
    init_conv(p, "fc1", c, hidden, 1, rng)
    init_conv(p, "fc2", hidden, c, 1, rng)
    init_conv(p, "spatial", 2, 1, spatial_kernel, rng)


def init_attention_gate(p: Scope, skip_ch: int, gating_ch: int, rng: np.random.Generator) -> None:
    inter = max(1, skip_ch // 2)
    init_conv(p, "wx", skip_ch, inter, 1, rng)
    init_conv(p, "wg", gating_ch, inter, 1, rng)
    init_conv(p, "psi", inter, 1, 1, rng)


def init_decoder_block(p: Scope, up_ch: int, skip_ch: int, cout: int, rng: np.random.Generator,
                       attention: bool = False, residual: bool = False) -> None:
    p.add("up.kernel", he_uniform(rng, (up_ch, cout, 2, 2, 2), up_ch * 8))
    p.add("up.bias", np.zeros(cout, dtype=default_dtype()))
    if attention:
        init_cbam(p.scope("cbam"), skip_ch, rng)
        init_attention_gate(p.scope("gate"), skip_ch, up_ch, rng)
    if residual:
        init_residual_block(p, cout + skip_ch, cout, rng)
    else:
        init_double_conv(p, cout + skip_ch, cout, rng)


# -- forward ---------------------------------------------------------------

def conv(x: Tensor, p: Scope, name: str, padding: int | None = None) -> Tensor:
    kernel = p[f"{name}.kernel"]
    pad = kernel.shape[2] // 2 if padding is None else padding
    return F.conv3d(x, kernel, p[f"{name}.bias"], padding=pad)


def norm(x: Tensor, p: Scope, name: str) -> Tensor:
    return F.group_norm(x, gn_groups(x.shape[1]), p[f"{name}.gamma"], p[f"{name}.beta"], GN_EPS)


def conv_norm_relu(x: Tensor, p: Scope, i: int) -> Tensor:
    return F.relu(norm(conv(x, p, f"conv{i}"), p, f"gn{i}"))


def double_conv(x: Tensor, p: Scope) -> Tensor:
    return conv_norm_relu(conv_norm_relu(x, p, 1), p, 2)


def residual_block(x: Tensor, p: Scope) -> Tensor:
    """ReLU(F(x) + shortcut(x)); the shortcut is a 1x1x1 projection only when widths differ."""
    h = conv_norm_relu(x, p, 1)
    h = norm(conv(h, p, "conv2"), p, "gn2")
    shortcut = conv(x, p, "proj", padding=0) if "proj.kernel" in p else x
    return F.relu(h + shortcut)


def encoder_block(x: Tensor, p: Scope, residual: bool = False) -> tuple[Tensor, Tensor]:
    features = residual_block(x, p) if residual else double_conv(x, p)
    pooled, _ = F.maxpool3d(features, 2)
    return features, pooled


def cbam(features: Tensor, p: Scope, site: int = 0) -> tuple[Tensor, list[AttentionRecord]]:
    """Channel attention followed by spatial attention."""

    def mlp(d):
        return conv(F.relu(conv(d, p, "fc1", 0)), p, "fc2", 0)

    avg = features.mean(axis=(2, 3, 4), keepdims=True)
    mx = features.max(axis=(2, 3, 4), keepdims=True)
    channel_w = F.sigmoid(mlp(avg) + mlp(mx))
    refined = features * channel_w

    pooled = F.concat([refined.mean(axis=1, keepdims=True), refined.max(axis=1, keepdims=True)], axis=1)
    spatial_w = F.sigmoid(conv(pooled, p, "spatial"))
    refined = refined * spatial_w
    records = [
        AttentionRecord(site, "cbam-channel", channel_w.data[:, :, 0, 0, 0].copy()),
        AttentionRecord(site, "cbam-spatial", spatial_w.data[:, 0].copy()),
    ]
    return refined, records


def attention_gate(skip: Tensor, gating: Tensor, p: Scope, site: int = 0) -> tuple[Tensor, AttentionRecord]:
    """Additive attention: alpha = sigmoid(psi(ReLU(Wx skip + resize(Wg gating))))."""
    theta = conv(skip, p, "wx", 0)
    phi = conv(gating, p, "wg", 0)
    phi = F.resize_trilinear(phi, skip.shape[2:])
    alpha = F.sigmoid(conv(F.relu(theta + phi), p, "psi", 0))
    gated = skip * alpha
    record = AttentionRecord(
        site,
        "gate",
        alpha.data[:, 0].copy(),
        keys=theta.data.copy(),
        query=phi.data.mean(axis=(2, 3, 4)),
    )
    return gated, record


def decoder_block(upstream: Tensor, skip: Tensor, p: Scope, attention: bool = False,
                  residual: bool = False, site: int = 0) -> tuple[Tensor, list[AttentionRecord]]:
    up = F.conv_transpose3d(upstream, p["up.kernel"], p["up.bias"], stride=2)
    records: list[AttentionRecord] = []
    if attention:
        skip, cb = cbam(skip, p.scope("cbam"), site)
        skip, gate = attention_gate(skip, upstream, p.scope("gate"), site)
        records = cb + [gate]
    h = F.concat([up, skip], axis=1)
    out = residual_block(h, p) if residual else double_conv(h, p)
    return out, records
