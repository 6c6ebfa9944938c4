"""Wire formats shared with the scoring engine: manifests in, embeddings out.

The embedding layout (magic ``CGEM``, version 1) is the interchange
contract between the two packages:

    magic            4 bytes  b"CGEM"
    version          u16 LE
    record count     u32 LE
    per record:
      id             u32 LE
      scale count    u16 LE
      per scale:
        C, H, W      u32 LE each
        payload      C*H*W float32 LE, row-major

Records are sorted by id so identical inputs produce identical bytes.
"""

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError

EMBEDDING_MAGIC = b"CGEM"
EMBEDDING_VERSION = 1


@dataclass(frozen=True)
class ManifestEntry:
    id: int
    path: str
    label: int


def _parse_label(raw) -> int:
    text = str(raw).strip().upper()
    if text == "NORMAL":
        return 0
    if text == "ANOMALY":
        return 1
    try:
        value = int(text)
    except ValueError:
        raise DataError(f"unrecognized label {raw!r}") from None
    if value not in (0, 1):
        raise DataError(f"label must be 0/1 or NORMAL/ANOMALY, got {raw!r}")
    return value


def load_manifest(path) -> list[ManifestEntry]:
    """Load a CSV (header ``path,label``, rows numbered in order) or JSON
    array manifest; JSON entries may carry explicit dense ``id`` fields."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    if p.suffix.lower() == ".json":
        items = json.loads(p.read_text())
        if not isinstance(items, list):
            raise DataError("JSON manifest must be an array of objects")
        entries = [
            ManifestEntry(id=int(item.get("id", i)), path=str(item["path"]),
                          label=_parse_label(item["label"]))
            for i, item in enumerate(items)
        ]
        entries.sort(key=lambda e: e.id)
    else:
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
                raise DataError("CSV manifest needs a 'path,label' header")
            entries = [
                ManifestEntry(id=i, path=row["path"], label=_parse_label(row["label"]))
                for i, row in enumerate(reader)
            ]
    ids = [e.id for e in entries]
    if sorted(ids) != list(range(len(ids))):
        raise DataError("manifest ids must be unique and dense 0..N-1")
    return entries


def write_embeddings(features_by_id: Mapping[int, Sequence[np.ndarray]], path) -> None:
    """Serialize per-id multi-scale CHW float32 arrays in the v1 layout."""
    blob = bytearray()
    blob += EMBEDDING_MAGIC
    blob += struct.pack("<H", EMBEDDING_VERSION)
    ids = sorted(features_by_id)
    blob += struct.pack("<I", len(ids))
    for img_id in ids:
        scales = features_by_id[img_id]
        if not scales:
            raise DataError(f"record {img_id} has no scales")
        blob += struct.pack("<I", int(img_id))
        blob += struct.pack("<H", len(scales))
        for arr in scales:
            arr = np.asarray(arr)
            if arr.ndim != 3:
                raise DataError(f"scale of record {img_id} must be CHW, got shape {arr.shape}")
            c, h, w = arr.shape
            blob += struct.pack("<III", c, h, w)
            blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))
