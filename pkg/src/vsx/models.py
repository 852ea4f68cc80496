"""UNet, ResUNet and AttUNet assemblies plus the checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blocks as B
from . import functional as F
from ._io import atomic_write
from .tensor import Tensor, precision

KINDS = ("unet", "resunet", "attunet")
LEVELS = 4
CLASS_NAMES = ("WT", "TC", "ET")

CHECKPOINT_MAGIC = b"VSXC"
CHECKPOINT_VERSION = 1


@dataclass
class Prediction:
    probabilities: Tensor
    logits: Tensor
    binary_mask: np.ndarray | None = None


@dataclass
class ModelGraph:
    kind: str
    in_channels: int
    base_width: int
    widths: tuple[int, ...]
    bridge_width: int
    params: B.BlockParams
    out_channels: int = 3
    captures: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def __call__(self, batch) -> Tensor:
        return forward(self, batch).probabilities

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def astype(self, dtype) -> "ModelGraph":
        self.params.astype(dtype)
        return self

    @property
    def attention_records(self) -> list[B.AttentionRecord]:
        return self.records


def build(kind: str, in_channels: int = 4, base_width: int = 8, seed: int = 0,
          out_channels: int = 3, dtype=np.float32) -> ModelGraph:
    """Assemble one of the three architectures with seeded He-uniform weights."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    if base_width < 4:
        raise ValueError(f"base_width must be >= 4, got {base_width}")
    widths = tuple(base_width * 2**i for i in range(LEVELS))
    bridge = base_width * 2**LEVELS
    residual = kind == "resunet"
    attention = kind == "attunet"
    rng = np.random.default_rng(seed)
    params = B.BlockParams()
    with precision(dtype):
        cin = in_channels
        for i, w in enumerate(widths, start=1):
            scope = params.scope(f"enc{i}")
            if residual:
                B.init_residual_block(scope, cin, w, rng)
            else:
                B.init_double_conv(scope, cin, w, rng)
            cin = w
        if residual:
            B.init_residual_block(params.scope("bridge"), cin, bridge, rng)
        else:
            B.init_double_conv(params.scope("bridge"), cin, bridge, rng)
        up = bridge
        for i in range(LEVELS, 0, -1):
            w = widths[i - 1]
            B.init_decoder_block(params.scope(f"dec{i}"), up, w, w, rng, attention=attention, residual=residual)
            up = w
        B.init_conv(params.scope("head"), "conv", widths[0], out_channels, 1, rng)
    return ModelGraph(kind, in_channels, base_width, widths, bridge, params, out_channels)


def check_input(model: ModelGraph, batch: Tensor) -> None:
    if batch.ndim != 5:
        raise ValueError(f"expected N x C x D x H x W input, got shape {batch.shape}")
    if batch.shape[1] != model.in_channels:
        raise ValueError(f"model expects {model.in_channels} input channels, got {batch.shape[1]}")
    factor = 2**LEVELS
    for size, axis in zip(batch.shape[2:], "DHW"):
        if size % factor:
            raise ValueError(f"spatial extent {size} along axis {axis} is not divisible by {factor}")


def forward(model: ModelGraph, batch, capture_grad: bool = False) -> Prediction:
    """Run the network, filling ``model.captures`` and ``model.records``.

    With ``capture_grad`` the ``final_conv`` activations keep their gradient after
    backward (needed for Grad-CAM).
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    check_input(model, x)
    p = model.params
    residual = model.kind == "resunet"
    attention = model.kind == "attunet"
    model.captures = {}
    model.records = []

    skips = []
    h = x
    for i in range(1, LEVELS + 1):
        features, h = B.encoder_block(h, p.scope(f"enc{i}"), residual=residual)
        skips.append(features)
    h = B.residual_block(h, p.scope("bridge")) if residual else B.double_conv(h, p.scope("bridge"))
    for i in range(LEVELS, 0, -1):
        h, recs = B.decoder_block(h, skips[i - 1], p.scope(f"dec{i}"), attention=attention,
                                  residual=residual, site=i)
        model.records.extend(recs)
    if capture_grad:
        h.retain_grad()
    model.captures["final_conv"] = h
    if attention:
        model.captures["skip_top.attention"] = next(r for r in model.records if r.site == 1 and r.kind == "gate")
    logits = B.conv(h, p.scope("head"), "conv", 0)
    probs = F.sigmoid(logits)
    return Prediction(probs, logits)


def predict(model: ModelGraph, batch, threshold: float = 0.5, nested: bool = False) -> Prediction:
    """Forward pass plus per-channel binarisation ``p > threshold``.

    With ``nested`` the mask is made consistent with WT >= TC >= ET by intersecting
    each channel with the one above it.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pred = forward(model, batch)
    pred.binary_mask = binarize(pred.probabilities.data, threshold, nested)
    return pred


def binarize(probabilities: np.ndarray, threshold: float = 0.5, nested: bool = False) -> np.ndarray:
    mask = (probabilities > threshold).astype(np.uint8)
    if nested:
        mask = enforce_nesting(mask)
    return mask


def enforce_nesting(mask: np.ndarray, axis: int = 1) -> np.ndarray:
    """Intersect TC with WT and ET with the corrected TC along the class axis."""
    out = np.array(mask, copy=True)
    wt = np.take(out, 0, axis=axis)
    tc = np.take(out, 1, axis=axis) & wt
    et = np.take(out, 2, axis=axis) & tc
    return np.stack([wt, tc, et], axis=axis)


def open_attention(model: ModelGraph, saturation: float = 40.0) -> None:
    """Force every CBAM and gate weight to 1 (sigmoid saturates) by overwriting their parameters."""
    if model.kind != "attunet":
        raise ValueError("open_attention needs an attunet model")
    for path, t in model.params.items():
        if ".cbam." in path or ".gate." in path:
            last = path.rsplit(".", 2)
            layer, leaf = last[-2], last[-1]
            if layer in ("fc2", "spatial", "psi"):
                t.data[...] = saturation if leaf == "bias" else 0.0


def copy_shared(src: ModelGraph, dst: ModelGraph) -> int:
    """Copy every parameter whose path and shape exist in both models; returns the count."""
    n = 0
    for path, t in src.params.items():
        if path in dst.params and dst.params[path].shape == t.shape:
            dst.params[path].data = t.data.astype(dst.params[path].dtype)
            n += 1
    return n


# -- checkpoint format -----------------------------------------------------
# magic "VSXC" | u16 version | u16 len + kind | u16 in_ch | u16 out_ch | u16 n + u32 widths
# | u32 len + JSON metadata | u32 record count | records:
#   u16 len + path (utf-8) | u8 ndim | u32 dims | float32 little-endian payload

def save_checkpoint(model: ModelGraph, path, metadata: dict | None = None) -> None:
    path = Path(path)
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    kind = model.kind.encode("ascii")
    parts += [struct.pack("<H", len(kind)), kind]
    parts.append(struct.pack("<HH", model.in_channels, model.out_channels))
    widths = list(model.widths) + [model.bridge_width]
    parts.append(struct.pack("<H", len(widths)) + struct.pack(f"<{len(widths)}I", *widths))
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta]
    parts.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        key = name.encode("utf-8")
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", t.ndim)]
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> tuple[ModelGraph, dict]:
    """Rebuild the model stored at ``path``; returns (model, metadata)."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a VSXC checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<H")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (klen,) = take("<H")
    kind = buf[pos : pos + klen].decode("ascii")
    pos += klen
    in_ch, out_ch = take("<HH")
    (nw,) = take("<H")
    widths = take(f"<{nw}I")
    (mlen,) = take("<I")
    metadata = json.loads(buf[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (plen,) = take("<H")
        name = buf[pos : pos + plen].decode("utf-8")
        pos += plen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    model = build(kind, in_ch, widths[0], seed=0, out_channels=out_ch)
    if tuple(model.widths) + (model.bridge_width,) != tuple(widths):
        raise ValueError(f"{path}: widths {widths} are not a {kind} doubling ladder")
    model.params.load_state(state)
    return model, metadata
