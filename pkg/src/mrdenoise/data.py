"""Volumes, the ``.vol`` container, synthetic lesion phantoms and patch datasets.

A volume is a float32 ``(H, W, C)`` numpy array of non-negative intensities,
rows outermost and slices innermost.

``.vol`` layout::

    bytes 0-3    b"VOL1"
    bytes 4-7    header length N, uint32 little-endian
    bytes 8..8+N UTF-8 JSON {"dtype":"f32","shape":[H,W,C],"order":"row-major-HWC"}
    remainder    4*H*W*C bytes of little-endian float32, nothing after
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from mrdenoise.errors import (
    BadMagicError,
    ConfigError,
    DimensionError,
    DomainError,
    PayloadLengthError,
    PlacementError,
    TruncatedPayloadError,
)
from mrdenoise.noise import NoiseSpec, add_rician, derive_seed
from mrdenoise.patches import patchify

VOL_MAGIC = b"VOL1"
LESION_SHELL_WIDTH = 2
_SHELL_STRUCT = ndimage.generate_binary_structure(3, 1)


def as_volume(arr):
    vol = np.asarray(arr, dtype=np.float32)
    if vol.ndim != 3 or min(vol.shape) < 1:
        raise DimensionError(f"a volume must be a non-empty (H, W, C) array, got shape {vol.shape}")
    if np.any(vol < 0):
        raise DomainError("volume intensities must be non-negative")
    return vol


# ---------------------------------------------------------------------------
# .vol container


def encode_volume(volume):
    vol = np.asarray(volume, dtype="<f4")
    if vol.ndim != 3:
        raise DimensionError(f"expected an (H, W, C) volume, got {vol.shape}")
    header = json.dumps(
        {"dtype": "f32", "shape": list(vol.shape), "order": "row-major-HWC"},
        separators=(",", ":"),
    ).encode("utf-8")
    return VOL_MAGIC + struct.pack("<I", len(header)) + header + np.ascontiguousarray(vol).tobytes()


def decode_volume(buf, source="<bytes>"):
    if len(buf) < 4 or buf[:4] != VOL_MAGIC:
        raise BadMagicError(f"{source}: not a VOL1 file")
    if len(buf) < 8:
        raise TruncatedPayloadError(f"{source}: header length field is truncated")
    (n,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + n:
        raise TruncatedPayloadError(f"{source}: header declares {n} bytes, file ends early")
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise PayloadLengthError(f"{source}: unreadable header ({exc})") from None
    if header.get("dtype") != "f32" or len(shape) != 3 or min(shape) < 1:
        raise PayloadLengthError(f"{source}: unsupported header {header}")
    payload = buf[8 + n:]
    expected = 4 * shape[0] * shape[1] * shape[2]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{source}: payload has {len(payload)} bytes, shape needs {expected}")
    if len(payload) > expected:
        raise PayloadLengthError(f"{source}: {len(payload) - expected} bytes beyond the declared shape {shape}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_volume(volume, path):
    Path(path).write_bytes(encode_volume(volume))


def load_volume(path):
    return decode_volume(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomSpec:
    shape: tuple = (64, 64, 6)
    smoothness: float = 4.0
    n_lesions: int = 4
    radius_range: tuple = (1, 3)
    contrast: float = 1.5
    seed: int = 0
    max_tries: int = 500

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"phantom shape must be (H, W, C) with positive sizes, got {self.shape}")
        lo, hi = self.radius_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"lesion radii must satisfy 1 <= min <= max, got {self.radius_range}")
        if self.n_lesions < 0 or self.contrast <= 0 or self.smoothness <= 0:
            raise ConfigError("n_lesions >= 0, contrast > 0 and smoothness > 0 required")
        return self


def _ellipsoid(grid, centre, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii)) <= 1.0


def lesion_shell(lesion):
    """Voxels within ``LESION_SHELL_WIDTH`` face-steps of ``lesion``, excluding it."""
    grown = ndimage.binary_dilation(lesion, _SHELL_STRUCT, iterations=LESION_SHELL_WIDTH)
    return grown & ~lesion


def generate_phantom(spec):
    """Return ``(clean, lesion_mask)`` float32 volumes.

    The clean volume is a smooth random texture inside an ellipsoidal tissue
    mask (zero outside) with ``n_lesions`` small bright ellipsoids, scaled to
    a maximum of 1. Every lesion is set to ``contrast`` times the brightest
    voxel of its surrounding shell, and lesion-plus-shell regions never touch.
    """
    spec.validate()
    H, W, C = spec.shape
    rng = np.random.default_rng(spec.seed)
    grid = np.meshgrid(np.arange(H), np.arange(W), np.arange(C), indexing="ij")

    axes = (H * rng.uniform(0.36, 0.44), W * rng.uniform(0.36, 0.44), max(C, 1) * 1.0)
    centre = ((H - 1) / 2, (W - 1) / 2, (C - 1) / 2)
    tissue = _ellipsoid(grid, centre, axes)

    field_ = ndimage.gaussian_filter(rng.standard_normal(spec.shape),
                                     sigma=(spec.smoothness, spec.smoothness, spec.smoothness / 2),
                                     mode="reflect")
    field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
    vol = np.clip(0.5 + 0.15 * field_, 0.1, 0.9) * tissue

    lesions = np.zeros(spec.shape, dtype=bool)
    occupied = np.zeros(spec.shape, dtype=bool)
    lo, hi = spec.radius_range
    rz_cap = max(1, (C - 1) // 2)
    inside = np.argwhere(tissue)
    for k in range(spec.n_lesions):
        for _ in range(spec.max_tries):
            ry, rx, rz = rng.integers(lo, hi + 1, size=3)
            radii = (ry, rx, min(rz, rz_cap))
            c = inside[rng.integers(len(inside))]
            blob = _ellipsoid(grid, c, radii)
            shell = lesion_shell(blob)
            region = blob | shell
            if np.all(tissue[region]) and not np.any(occupied[region]):
                break
        else:
            raise PlacementError(f"lesion {k} could not be placed after {spec.max_tries} attempts")
        vol[blob] = spec.contrast * vol[shell].max()
        lesions |= blob
        occupied |= region

    peak = vol.max()
    if peak > 0:
        vol = vol / peak
    return vol.astype(np.float32), lesions.astype(np.float32)


# ---------------------------------------------------------------------------
# splits and patch datasets


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if (sets[0] & sets[1]) or (sets[0] & sets[2]) or (sets[1] & sets[2]):
            raise ConfigError("dataset splits must be pairwise disjoint")

    @classmethod
    def partition(cls, ids, n_train, n_val, n_test):
        """Split sorted ``ids`` by whole volume, in order train / val / test."""
        ids = sorted(ids)
        need = n_train + n_val + n_test
        if len(ids) < need:
            raise ConfigError(f"need {need} volumes for the split, found {len(ids)}")
        return cls(ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:need])

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


@dataclass
class VolumePairs:
    """Aligned clean / noisy volumes with identifiers."""

    ids: list
    clean: list
    noisy: list

    def __len__(self):
        return len(self.ids)


def make_pairs(ids, clean_volumes, level, seed, levels=None):
    """Noise each clean volume with its own derived seed.

    With ``levels`` given (mixed-level mode) volume ``i`` uses
    ``levels[i % len(levels)]`` instead of ``level``.
    """
    noisy = []
    for i, (vid, vol) in enumerate(zip(ids, clean_volumes)):
        lv = levels[i % len(levels)] if levels else level
        noisy.append(add_rician(vol, NoiseSpec(lv, derive_seed(seed, i))))
    return VolumePairs(list(ids), list(clean_volumes), noisy)


@dataclass
class PatchPairs:
    noisy: np.ndarray
    clean: np.ndarray
    volume_index: np.ndarray
    origins: np.ndarray

    def __len__(self):
        return len(self.noisy)

    def __getitem__(self, i):
        return self.noisy[i], self.clean[i]


def build_patch_dataset(pairs, P, stride):
    """Paired patches cut at identical origins from each (noisy, clean) volume."""
    noisy, clean, vidx, origins = [], [], [], []
    for i, (nv, cv) in enumerate(zip(pairs.noisy, pairs.clean)):
        if nv.shape != cv.shape:
            raise DimensionError(f"pair {i}: noisy {nv.shape} vs clean {cv.shape}")
        pn = patchify(nv, P, stride)
        pc = patchify(cv, P, stride)
        noisy.append(pn.patches)
        clean.append(pc.patches)
        vidx.append(np.full(len(pn), i, dtype=np.int64))
        origins.append(pn.origins)
    if not noisy:
        d = 0
        return PatchPairs(np.zeros((0, d), np.float32), np.zeros((0, d), np.float32),
                          np.zeros(0, np.int64), np.zeros((0, 2), np.int64))
    return PatchPairs(np.concatenate(noisy).astype(np.float32, copy=False),
                      np.concatenate(clean).astype(np.float32, copy=False),
                      np.concatenate(vidx), np.concatenate(origins))


def epoch_permutation(n, seed, epoch):
    """Shuffle order for one epoch, reproducible from ``(seed, epoch)`` alone."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def list_volumes(directory):
    """Sorted ``{id: path}`` of the non-mask ``.vol`` files in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory not found: {directory}")
    return {p.stem: p for p in sorted(directory.glob("*.vol")) if not p.stem.endswith("_mask")}


def phantom_id(i):
    return f"phantom_{i:03d}"


def generate_phantom_set(count, seed=0, **spec_kwargs):
    """``{id: (clean, mask)}`` for ``count`` phantoms with per-index derived seeds."""
    out = {}
    for i in range(count):
        spec = PhantomSpec(seed=derive_seed(seed, i), **spec_kwargs)
        out[phantom_id(i)] = generate_phantom(spec)
    return out


def prepare_dataset(clean_by_id, n_train, n_val, n_test, level, seed, levels=None):
    """Split clean volumes by identifier and noise each split.

    Returns ``(split, {"train": VolumePairs, "val": ..., "test": ...})``.
    Noise seeds derive from ``(seed, split index, volume index)``.
    """
    split = DatasetSplit.partition(clean_by_id, n_train, n_val, n_test)
    bundles = {}
    for k, name in enumerate(("train", "val", "test")):
        ids = getattr(split, name)
        bundles[name] = make_pairs(ids, [as_volume(clean_by_id[i]) for i in ids], level,
                                   derive_seed(seed, k), levels=levels if name == "train" else None)
    return split, bundles
