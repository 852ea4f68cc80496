"""Volume files, preprocessing, label mapping, dataset splits and synthetic phantoms."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write
from .errors import DataError

# -- VSXV volume format ------------------------------------------------------
# magic "VSXV" | u16 version | u32 D | u32 H | u32 W | u32 channels | u8 dtype (1 = f32)
# | u8 voxel order (0 = channel-major, then D, H, W, W fastest) | payload: C*D*H*W little-endian f32

VOLUME_MAGIC = b"VSXV"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIBB")
DTYPE_F32 = 1
ORDER_CDHW = 0

MODALITIES = ("T1", "T1w", "T2", "FLAIR")
CLASS_NAMES = ("WT", "TC", "ET")
VALID_LABELS = (0, 1, 2, 4)
POOL_MULTIPLE = 16


def encode_volume(volume: np.ndarray) -> bytes:
    v = np.asarray(volume)
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4:
        raise ValueError(f"volume must be D x H x W or C x D x H x W, got shape {v.shape}")
    c, d, h, w = v.shape
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, d, h, w, c, DTYPE_F32, ORDER_CDHW)
    return header + np.ascontiguousarray(v, dtype="<f4").tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise DataError("truncated VSXV header")
    magic, version, d, h, w, c, dtype, order = _HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise DataError("not a VSXV volume")
    if version != VOLUME_VERSION or dtype != DTYPE_F32 or order != ORDER_CDHW:
        raise DataError(f"unsupported VSXV variant (version={version}, dtype={dtype}, order={order})")
    n = c * d * h * w
    if len(buf) - _HEADER.size != 4 * n:
        raise DataError(f"VSXV payload is {len(buf) - _HEADER.size} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape(c, d, h, w).astype(np.float32)


def write_volume(path, volume: np.ndarray) -> None:
    atomic_write(Path(path), encode_volume(volume))


def read_volume(path) -> np.ndarray:
    """Return the stored C x D x H x W float32 array."""
    return decode_volume(Path(path).read_bytes())


# -- NIfTI-1 import (single file, float32 only) -------------------------------

def read_nifti(path) -> np.ndarray:
    """Read a single-file NIfTI-1 float32 volume as a D x H x W array (D = NIfTI z axis)."""
    buf = Path(path).read_bytes()
    if len(buf) < 348:
        raise DataError(f"{path}: shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", buf, 0)[0] == 348:
            break
    else:
        raise DataError(f"{path}: sizeof_hdr is not 348")
    if buf[344:347] != b"n+1":
        raise DataError(f"{path}: only single-file NIfTI-1 ('n+1') is supported")
    dim = struct.unpack_from(endian + "8h", buf, 40)
    datatype, bitpix = struct.unpack_from(endian + "hh", buf, 70)
    if datatype != 16 or bitpix != 32:
        raise DataError(f"{path}: datatype {datatype} unsupported; convert to float32 (16) first")
    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4 : ndim + 1]):
        raise DataError(f"{path}: expected a 3-D volume, dim={dim}")
    nx, ny, nz = dim[1:4]
    (vox_offset,) = struct.unpack_from(endian + "f", buf, 108)
    slope, inter = struct.unpack_from(endian + "ff", buf, 112)
    off = int(vox_offset)
    n = nx * ny * nz
    data = np.frombuffer(buf, dtype=endian + "f4", count=n, offset=off).reshape((nz, ny, nx))
    data = data.astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope or 1.0) + inter
    return data


def write_nifti(path, volume: np.ndarray) -> None:
    """Minimal NIfTI-1 writer (float32, unit voxels); the inverse of :func:`read_nifti`."""
    v = np.asarray(volume, dtype="<f4")
    nz, ny, nx = v.shape
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1, 1, 1, 1, 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    atomic_write(Path(path), bytes(hdr) + np.ascontiguousarray(v).tobytes())


# -- labels -------------------------------------------------------------------

def map_labels(raw: np.ndarray) -> np.ndarray:
    """Raw labels {0, 1, 2, 4} -> 3 x D x H x W uint8 mask (WT, TC, ET).

    WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.
    """
    raw = np.asarray(raw)
    bad = ~np.isin(raw, VALID_LABELS)
    if bad.any():
        coords = np.argwhere(bad)
        shown = ", ".join(f"{tuple(int(i) for i in c)}={raw[tuple(c)]}" for c in coords[:5])
        more = f" (+{len(coords) - 5} more)" if len(coords) > 5 else ""
        raise DataError(f"unexpected label values at {shown}{more}")
    wt = np.isin(raw, (1, 2, 4))
    tc = np.isin(raw, (1, 4))
    et = raw == 4
    return np.stack([wt, tc, et]).astype(np.uint8)


def is_nested(mask: np.ndarray) -> bool:
    wt, tc, et = (np.asarray(mask[i]).astype(bool) for i in range(3))
    return bool(np.all(tc <= wt) and np.all(et <= tc))


# -- crop / pad ---------------------------------------------------------------

@dataclass(frozen=True)
class CropInfo:
    source: tuple[int, ...]
    crop_offset: tuple[int, ...]
    cropped: tuple[int, ...]
    pad_before: tuple[int, ...]
    padded: tuple[int, ...]

    def to_source(self, coords: np.ndarray) -> np.ndarray:
        """Map voxel coordinates in the output grid back to the source grid."""
        return np.asarray(coords) - np.asarray(self.pad_before) + np.asarray(self.crop_offset)

    def from_source(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords) - np.asarray(self.crop_offset) + np.asarray(self.pad_before)


def crop_and_pad(volume: np.ndarray, target: Sequence[int], multiple: int = POOL_MULTIPLE) -> tuple[np.ndarray, CropInfo]:
    """Center-crop the last three axes to ``target``, then zero-pad each up to a multiple of ``multiple``."""
    v = np.asarray(volume)
    spatial = v.shape[-3:]
    target = tuple(int(t) for t in target)
    if len(target) != 3:
        raise ValueError("target must give three extents")
    for s, t, axis in zip(spatial, target, range(3)):
        if t > s:
            raise ValueError(f"target extent {t} exceeds source extent {s} on spatial axis {axis}")
        if t <= 0:
            raise ValueError("target extents must be positive")
    offset = tuple((s - t) // 2 for s, t in zip(spatial, target))
    lead = (slice(None),) * (v.ndim - 3)
    crop = v[lead + tuple(slice(o, o + t) for o, t in zip(offset, target))]
    padded = tuple(int(math.ceil(t / multiple) * multiple) for t in target)
    before = tuple((p - t) // 2 for p, t in zip(padded, target))
    widths = [(0, 0)] * (v.ndim - 3) + [(b, p - t - b) for b, p, t in zip(before, padded, target)]
    out = np.pad(crop, widths)
    return out, CropInfo(tuple(spatial), offset, target, before, padded)


def pad_to_multiple(volume: np.ndarray, multiple: int = POOL_MULTIPLE) -> tuple[np.ndarray, CropInfo]:
    return crop_and_pad(volume, np.asarray(volume).shape[-3:], multiple)


def normalize_intensities(volume: np.ndarray) -> np.ndarray:
    """Per-channel z-score over nonzero voxels; zero voxels stay exactly zero."""
    v = np.asarray(volume, dtype=np.float32)
    single = v.ndim == 3
    if single:
        v = v[None]
    out = np.zeros_like(v)
    for c in range(v.shape[0]):
        ch = v[c]
        nz = ch != 0
        if not nz.any():
            continue
        vals = ch[nz].astype(np.float64)
        mu = vals.mean()
        sd = vals.std()
        out[c][nz] = ((vals - mu) / sd if sd > 0 else vals - mu).astype(np.float32)
    return out[0] if single else out


# -- cases, splits, manifest --------------------------------------------------

@dataclass
class CaseRecord:
    case_id: str
    image: np.ndarray  # 4 x D x H x W float32
    mask: np.ndarray  # 3 x D x H x W uint8 (WT, TC, ET)
    split: str = "train"
    labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise DataError(f"{self.case_id}: image dims {self.image.shape[1:]} != mask dims {self.mask.shape[1:]}")


SPLITS = ("train", "val", "test")


def split_counts(n: int, ratios: Sequence[float] = (0.7, 0.2, 0.1)) -> tuple[int, int, int]:
    """Validation and test sizes are n*ratio rounded half up; training takes the rest."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    val = int(math.floor(n * ratios[1] + 0.5))
    test = int(math.floor(n * ratios[2] + 0.5))
    return n - val - test, val, test


def split_dataset(cases: Sequence, ratios: Sequence[float] = (0.7, 0.2, 0.1), seed: int = 0) -> dict[str, list]:
    """Seeded shuffle, then consecutive train/val/test slices of :func:`split_counts` sizes."""
    n_train, n_val, _ = split_counts(len(cases), ratios)
    order = np.random.default_rng(seed).permutation(len(cases))
    shuffled = [cases[i] for i in order]
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train : n_train + n_val],
        "test": shuffled[n_train + n_val :],
    }


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    split: str


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    lines = [json.dumps({"id": e.id, "image_path": e.image_path, "mask_path": e.mask_path, "split": e.split})
             for e in entries]
    atomic_write(Path(path), ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = ManifestEntry(rec["id"], rec["image_path"], rec["mask_path"], rec["split"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from None
        if entry.split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {entry.split!r}")
        entries.append(entry)
    return entries


def load_case(entry: ManifestEntry, root=None) -> CaseRecord:
    root = Path(root) if root is not None else Path(".")
    image = read_volume(root / entry.image_path)
    mask = read_volume(root / entry.mask_path).astype(np.uint8)
    return CaseRecord(entry.id, image, mask, entry.split)


def load_split(manifest_path, split: str | None = None) -> list[CaseRecord]:
    """Load the cases of ``split`` (all when None); paths resolve relative to the manifest."""
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    return [load_case(e, manifest_path.parent) for e in entries if split is None or e.split == split]


# -- synthetic phantoms -------------------------------------------------------

# Mean intensity per region (columns: healthy tissue, edema, necrotic core, enhancing)
# for each modality row. One contrast unit = 1.0. Each boundary peaks at one unit in
# some channel, and the two inner boundaries (edema/core, core/enhancing) have equal
# contrast norms, so how hard a region is to segment follows from its size.
REGION_MEANS = np.array(
    [
        [1.0, 0.7, 0.4, 0.8],  # T1
        [1.0, 1.0, 0.6, 1.6],  # T1w (contrast)
        [1.0, 2.0, 1.5, 1.2],  # T2
        [1.0, 2.0, 1.0, 1.5],  # FLAIR
    ],
    dtype=np.float64,
)
NOISE_SIGMA = 0.3
MIN_PHANTOM_DIM = 16


def ellipsoid_mask(shape, center, semi_axes) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return acc <= 1.0


def phantom_geometry(dims, rng: np.random.Generator) -> dict:
    n = min(dims)
    dims_arr = np.asarray(dims, dtype=np.float64)
    brain_axes = 0.45 * dims_arr
    wt_axes = rng.uniform(0.22, 0.30, size=3) * n
    tc_axes = wt_axes * rng.uniform(0.70, 0.80, size=3)
    et_axes = tc_axes * rng.uniform(0.60, 0.70, size=3)
    # Keep the whole tumor inside the brain ellipsoid: offset bounded by the slack on each axis.
    slack = np.maximum(brain_axes - wt_axes - 1.0, 0.0) * 0.5
    center = (dims_arr - 1) / 2 + rng.uniform(-1, 1, size=3) * slack
    tc_center = center + rng.uniform(-1, 1, size=3) * (wt_axes - tc_axes) * 0.4
    et_center = tc_center + rng.uniform(-1, 1, size=3) * (tc_axes - et_axes) * 0.4
    return {
        "brain": ((dims_arr - 1) / 2, brain_axes),
        "WT": (center, wt_axes),
        "TC": (tc_center, tc_axes),
        "ET": (et_center, et_axes),
    }


def make_phantom(dims=(32, 32, 32), seed: int = 0, case_id: str | None = None) -> CaseRecord:
    """Nested-ellipsoid tumor phantom with four noisy modality channels.

    Outer ellipsoid = whole tumor (edema, label 2), middle = tumor core (label 1),
    inner = enhancing tumor (label 4); each inner region is clipped to the one
    around it so the nesting holds voxelwise.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_PHANTOM_DIM:
        raise ValueError(f"phantom dims must be three extents >= {MIN_PHANTOM_DIM}, got {dims}")
    rng = np.random.default_rng(seed)
    geo = phantom_geometry(dims, rng)
    brain = ellipsoid_mask(dims, *geo["brain"])
    wt = ellipsoid_mask(dims, *geo["WT"]) & brain
    tc = ellipsoid_mask(dims, *geo["TC"]) & wt
    et = ellipsoid_mask(dims, *geo["ET"]) & tc

    labels = np.zeros(dims, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4
    region = np.zeros(dims, dtype=np.int64)  # 0 healthy, 1 edema, 2 necrotic, 3 enhancing
    region[wt] = 1
    region[tc] = 2
    region[et] = 3

    # Smooth multiplicative ramp along a random direction, +-15% across the volume.
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    grids = np.meshgrid(*[np.linspace(-1, 1, d) for d in dims], indexing="ij")
    ramp = 1.0 + 0.15 * sum(g * c for g, c in zip(grids, direction)) / math.sqrt(3)
    image = np.zeros((4,) + dims, dtype=np.float32)
    for ch in range(4):
        vals = REGION_MEANS[ch][region] * ramp + rng.normal(0.0, NOISE_SIGMA, size=dims)
        image[ch] = np.where(brain, vals, 0.0)
    return CaseRecord(case_id or f"phantom-{seed}", image, map_labels(labels), labels=labels)


def write_phantom_set(out_dir, count: int, dims=(32, 32, 32), seed: int = 0,
                      normalize: bool = True) -> Path:
    """Generate ``count`` phantoms with a 70/20/10 split; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "cases").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(max(count, 1))[:count]
    ids = [f"case{i:04d}" for i in range(count)]
    tags = {}
    for split, members in split_dataset(ids, seed=seed).items():
        for cid in members:
            tags[cid] = split
    entries = []
    for cid, s in zip(ids, seeds):
        case = make_phantom(dims, int(s), cid)
        image = normalize_intensities(case.image) if normalize else case.image
        img_rel = f"cases/{cid}_image.vsxv"
        mask_rel = f"cases/{cid}_mask.vsxv"
        write_volume(out_dir / img_rel, image)
        write_volume(out_dir / mask_rel, case.mask)
        entries.append(ManifestEntry(cid, img_rel, mask_rel, tags[cid]))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest
