"""Dataset manifests, seed/pool splitting, built-in featurization, and the
binary multi-scale feature file format.

The featurizer here is a fixed (never trained) random convolution bank so the
full pipeline can run without any external backbone; real backbone features
arrive through the same file format via the bridge extractor.
"""

import csv
import json
import math
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError

__all__ = [
    "Manifest",
    "ManifestEntry",
    "SplitResult",
    "MultiScaleFeatures",
    "PatchEmbeddings",
    "FilterBank",
    "load_manifest",
    "split_seed_pool",
    "featurize_builtin",
    "load_image",
    "write_embeddings",
    "read_embeddings",
]

LABEL_NORMAL = 0
LABEL_ANOMALY = 1

EMBEDDING_MAGIC = b"CGEM"
EMBEDDING_VERSION = 1

MIN_IMAGE_SIDE = 32


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    id: int


@dataclass
class Manifest:
    """Ordered image list with binary labels and dense integer ids."""

    entries: list[ManifestEntry]

    def __post_init__(self) -> None:
        ids = [e.id for e in self.entries]
        if sorted(ids) != list(range(len(ids))):
            raise DataError("manifest ids must be unique and dense 0..N-1")
        for e in self.entries:
            if e.label not in (LABEL_NORMAL, LABEL_ANOMALY):
                raise DataError(f"label of id {e.id} must be 0 or 1, got {e.label}")

    def __len__(self) -> int:
        return len(self.entries)

    def labels_by_id(self) -> dict[int, int]:
        return {e.id: e.label for e in self.entries}

    def ids_with_label(self, label: int) -> list[int]:
        return [e.id for e in self.entries if e.label == label]


def _parse_label(raw) -> int:
    if isinstance(raw, int):
        value = raw
    else:
        text = str(raw).strip()
        upper = text.upper()
        if upper == "NORMAL":
            return LABEL_NORMAL
        if upper == "ANOMALY":
            return LABEL_ANOMALY
        try:
            value = int(text)
        except ValueError:
            raise DataError(f"unrecognized label {raw!r}") from None
    if value not in (LABEL_NORMAL, LABEL_ANOMALY):
        raise DataError(f"label must be 0/1 or NORMAL/ANOMALY, got {raw!r}")
    return value


def load_manifest(path) -> Manifest:
    """Load a manifest from CSV (header ``path,label``) or a JSON array.

    JSON entries may carry explicit ``id`` fields; when present they must
    form a dense 0..N-1 set. CSV rows are numbered in file order.
    """
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    if p.suffix.lower() == ".json":
        items = json.loads(p.read_text())
        if not isinstance(items, list):
            raise DataError("JSON manifest must be an array of objects")
        entries = []
        for i, item in enumerate(items):
            entries.append(
                ManifestEntry(
                    path=str(item["path"]),
                    label=_parse_label(item["label"]),
                    id=int(item.get("id", i)),
                )
            )
        entries.sort(key=lambda e: e.id)
        return Manifest(entries)
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "path" not in reader.fieldnames or "label" not in reader.fieldnames:
            raise DataError("CSV manifest needs a 'path,label' header")
        entries = [
            ManifestEntry(path=row["path"], label=_parse_label(row["label"]), id=i)
            for i, row in enumerate(reader)
        ]
    return Manifest(entries)


# ---------------------------------------------------------------------------
# Seed / pool split
# ---------------------------------------------------------------------------

@dataclass
class SplitResult:
    """Disjoint seed (trusted normals) and pool (everything else) id sets."""

    seed_ids: list[int]
    pool_ids: list[int]
    seed_fraction: float
    rng_seed: int

    def to_dict(self) -> dict:
        return {
            "seed_ids": list(self.seed_ids),
            "pool_ids": list(self.pool_ids),
            "seed_fraction": self.seed_fraction,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitResult":
        return cls(
            seed_ids=[int(x) for x in d["seed_ids"]],
            pool_ids=[int(x) for x in d["pool_ids"]],
            seed_fraction=float(d["seed_fraction"]),
            rng_seed=int(d["rng_seed"]),
        )


def split_seed_pool(manifest: Manifest, seed_fraction: float = 0.30, rng_seed: int = 123) -> SplitResult:
    """Shuffle the normals and take the first ``max(1, round(f * n))`` as seed.

    Rounding is half-up, the shuffle is a seeded Fisher-Yates, and the pool is
    the remaining normals (in shuffled order) followed by all anomalies (in id
    order). The result is a partition of all manifest ids.
    """
    if not (0.0 < seed_fraction <= 1.0):
        raise ConfigError(f"invalid fraction: seed_fraction must be in (0, 1], got {seed_fraction}")
    normals = manifest.ids_with_label(LABEL_NORMAL)
    if not normals:
        raise DataError("empty normal class: cannot build a seed set")
    anomalies = manifest.ids_with_label(LABEL_ANOMALY)

    shuffled = list(normals)
    random.Random(rng_seed).shuffle(shuffled)
    n_seed = max(1, math.floor(seed_fraction * len(normals) + 0.5))
    seed_ids = shuffled[:n_seed]
    pool_ids = shuffled[n_seed:] + anomalies
    return SplitResult(seed_ids=seed_ids, pool_ids=pool_ids, seed_fraction=seed_fraction, rng_seed=rng_seed)


# ---------------------------------------------------------------------------
# Feature containers
# ---------------------------------------------------------------------------

@dataclass
class MultiScaleFeatures:
    """Per-image feature maps, one (channels, height, width) array per scale."""

    scales: tuple

    def __post_init__(self) -> None:
        if len(self.scales) < 1:
            raise DataError("MultiScaleFeatures needs at least one scale")
        normalized = []
        for arr in self.scales:
            a = np.asarray(arr, dtype=np.float32)
            if a.ndim != 3 or min(a.shape) < 1:
                raise DataError(f"each scale must be (C, H, W) with dims >= 1, got shape {a.shape}")
            if not np.all(np.isfinite(a)):
                raise DataError("non-finite values in feature scale")
            normalized.append(a)
        object.__setattr__(self, "scales", tuple(normalized))

    @property
    def channel_counts(self) -> tuple:
        return tuple(s.shape[0] for s in self.scales)


@dataclass
class PatchEmbeddings:
    """Row-major grid of per-location embedding vectors (unit rows)."""

    grid_h: int
    grid_w: int
    dim: int
    vectors: np.ndarray  # (grid_h * grid_w, dim) float32

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.shape != (self.grid_h * self.grid_w, self.dim):
            raise DataError(
                f"embedding matrix shape {v.shape} inconsistent with "
                f"grid {self.grid_h}x{self.grid_w}, dim {self.dim}"
            )
        self.vectors = v


# ---------------------------------------------------------------------------
# Built-in featurizer
# ---------------------------------------------------------------------------

@dataclass
class FilterBank:
    """Seeded random Gaussian filters: one non-overlapping patch convolution
    per scale (stride 4 and stride 8), each followed by rectification and a
    2x2 average pool, yielding total downsampling factors of 8 and 16."""

    filters: tuple  # per scale: (C_out, k, k, C_in) float32, k == stride
    rng_seed: int
    in_channels: int

    @classmethod
    def generate(cls, rng_seed: int = 0, in_channels: int = 1, channels: Sequence[int] = (32, 64)) -> "FilterBank":
        rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
        strides = (4, 8)
        if len(channels) != len(strides):
            raise ConfigError(f"need {len(strides)} channel counts, got {len(channels)}")
        filters = []
        for c_out, k in zip(channels, strides):
            fan_in = k * k * in_channels
            f = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(c_out, k, k, in_channels))
            filters.append(f.astype(np.float32))
        return cls(filters=tuple(filters), rng_seed=rng_seed, in_channels=in_channels)


def featurize_builtin(image: np.ndarray, bank: FilterBank) -> MultiScaleFeatures:
    """Apply the fixed filter bank to an (H, W, C) image in [0, 1].

    Output spatial dims are the image dims floor-divided by 8 (scale one) and
    16 (scale two). The computation is pure float32, so identical input and
    bank give bit-identical output.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise DataError(f"image must be (H, W) or (H, W, C), got shape {img.shape}")
    if img.shape[0] < MIN_IMAGE_SIDE or img.shape[1] < MIN_IMAGE_SIDE:
        raise DataError(f"minimum size is {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {img.shape[0]}x{img.shape[1]}")
    if img.shape[2] != bank.in_channels:
        raise DataError(f"image has {img.shape[2]} channels, filter bank expects {bank.in_channels}")
    if not np.all(np.isfinite(img)):
        raise DataError("invalid input: non-finite pixel values")

    scales = []
    for filt in bank.filters:
        k = filt.shape[1]
        h, w = img.shape[0] // k, img.shape[1] // k
        x = img[: h * k, : w * k, :].reshape(h, k, w, k, img.shape[2])
        conv = np.einsum("iajbc,oabc->oij", x, filt, optimize=True)
        conv = np.maximum(conv, np.float32(0.0))
        ph, pw = conv.shape[1] // 2, conv.shape[2] // 2
        pooled = conv[:, : ph * 2, : pw * 2].reshape(conv.shape[0], ph, 2, pw, 2).mean(axis=(2, 4))
        scales.append(pooled.astype(np.float32))
    return MultiScaleFeatures(scales=tuple(scales))


def load_image(path, size: int = 256, color: str = "L") -> np.ndarray:
    """Decode an image file to a float32 (size, size, C) array in [0, 1].

    ``color`` is "L" (grayscale, C=1) or "RGB" (C=3); resizing is bilinear.
    """
    from PIL import Image

    if color not in ("L", "RGB"):
        raise ConfigError(f"color must be 'L' or 'RGB', got {color!r}")
    try:
        with Image.open(path) as im:
            im = im.convert(color).resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


# ---------------------------------------------------------------------------
# Embedding file format (magic CGEM, version 1)
# ---------------------------------------------------------------------------
#
#   magic            4 bytes  b"CGEM"
#   version          u16 LE
#   record count     u32 LE
#   per record:
#     id             u32 LE
#     scale count    u16 LE
#     per scale:
#       C, H, W      u32 LE each
#       payload      C*H*W float32 LE, row-major
#
# Records are written sorted by id, so write(read(f)) reproduces f exactly.

def write_embeddings(features_by_id: Mapping[int, MultiScaleFeatures], path) -> None:
    """Serialize per-id multi-scale features; lossless float32 round-trip."""
    blob = bytearray()
    blob += EMBEDDING_MAGIC
    blob += struct.pack("<H", EMBEDDING_VERSION)
    ids = sorted(features_by_id)
    blob += struct.pack("<I", len(ids))
    for img_id in ids:
        feats = features_by_id[img_id]
        blob += struct.pack("<I", int(img_id))
        blob += struct.pack("<H", len(feats.scales))
        for scale in feats.scales:
            c, h, w = scale.shape
            blob += struct.pack("<III", c, h, w)
            blob += np.ascontiguousarray(scale, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def _take(buf: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise FormatError(f"truncated embedding file while reading {what}")
    return buf[offset : offset + n], offset + n


def read_embeddings(path) -> dict[int, MultiScaleFeatures]:
    """Read a CGEM v1 file back into per-id MultiScaleFeatures."""
    buf = Path(path).read_bytes()
    raw, off = _take(buf, 0, 4, "magic")
    if raw != EMBEDDING_MAGIC:
        raise FormatError(f"bad magic: expected {EMBEDDING_MAGIC!r}, got {raw!r}")
    raw, off = _take(buf, off, 2, "version")
    version = struct.unpack("<H", raw)[0]
    if version != EMBEDDING_VERSION:
        raise FormatError(f"version mismatch: expected {EMBEDDING_VERSION}, got {version}")
    raw, off = _take(buf, off, 4, "record count")
    count = struct.unpack("<I", raw)[0]

    out: dict[int, MultiScaleFeatures] = {}
    for _ in range(count):
        raw, off = _take(buf, off, 4, "record id")
        img_id = struct.unpack("<I", raw)[0]
        raw, off = _take(buf, off, 2, "scale count")
        n_scales = struct.unpack("<H", raw)[0]
        scales = []
        for s in range(n_scales):
            raw, off = _take(buf, off, 12, f"shape of scale {s}")
            c, h, w = struct.unpack("<III", raw)
            raw, off = _take(buf, off, 4 * c * h * w, f"payload of scale {s}")
            scales.append(np.frombuffer(raw, dtype="<f4").reshape(c, h, w).copy())
        out[img_id] = MultiScaleFeatures(scales=tuple(scales))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last record")
    return out
