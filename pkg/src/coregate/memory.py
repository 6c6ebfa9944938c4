"""Farthest-first coreset selection and the normal-patch memory bank.

The bank is the operational definition of "normal": anomaly scores are k-NN
distances to its rows. Selection is exact greedy k-center (O(N*k) with an
incrementally maintained min-distance array), which at desk scale is both
fast and reproducible.
"""

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataio import PatchEmbeddings
from .errors import ConfigError, DataError
from .interp import resize_chw

__all__ = ["MemoryBank", "coreset_greedy", "build_memory", "cap_grid"]

DEFAULT_CORESET_RATIO = 0.3
DEFAULT_GRID_CAP = 16


@dataclass
class MemoryBank:
    vectors: np.ndarray          # (M, dim) float32, unit rows
    source_ids: np.ndarray       # (M,) originating image id per vector
    built_from: str              # "seed" or "seed+accepted"
    coreset_ratio: float

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise DataError("memory bank needs at least one vector")
        if self.source_ids.shape != (self.vectors.shape[0],):
            raise DataError("source_ids must have one entry per bank vector")

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


def coreset_greedy(candidates: np.ndarray, ratio: float, start: int = 0) -> list[int]:
    """Greedy k-center (farthest-first) selection over the candidate rows.

    Picks ``k = max(1, ceil(ratio * N))`` indices: the start index first, then
    repeatedly the candidate maximizing its minimum Euclidean distance to the
    picked set. Ties break to the lowest index; the result lists indices in
    selection order.
    """
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"invalid ratio: coreset ratio must be in (0, 1], got {ratio}")
    pts = np.asarray(candidates, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise DataError("candidates must be a nonempty (N, dim) matrix")
    n = pts.shape[0]
    if not (0 <= start < n):
        raise ConfigError(f"start index {start} out of range for {n} candidates")
    k = max(1, int(np.ceil(ratio * n)))

    picked = [start]
    min_d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    min_d2[start] = -np.inf  # never re-pick; duplicates would otherwise tie at 0
    for _ in range(k - 1):
        nxt = int(np.argmax(min_d2))  # argmax returns the first (lowest) index on ties
        picked.append(nxt)
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -np.inf
    return picked


def cap_grid(emb: PatchEmbeddings, cap: int = DEFAULT_GRID_CAP) -> np.ndarray:
    """Compact an embedding grid to at most cap x cap patches.

    Grids already within the cap pass through unchanged. Larger grids are
    bilinearly resampled; the blended rows are re-normalized to unit length
    (interpolation between unit vectors shortens them).
    """
    if emb.grid_h <= cap and emb.grid_w <= cap:
        return emb.vectors.astype(np.float64)
    grid = emb.vectors.astype(np.float64).reshape(emb.grid_h, emb.grid_w, emb.dim)
    resized = resize_chw(grid.transpose(2, 0, 1), min(emb.grid_h, cap), min(emb.grid_w, cap))
    flat = resized.transpose(1, 2, 0).reshape(-1, emb.dim)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    return flat / (norms + 1e-12)


def build_memory(
    embeddings_by_id: Mapping[int, PatchEmbeddings],
    ids: Sequence[int],
    ratio: float = DEFAULT_CORESET_RATIO,
    built_from: str = "seed",
    grid_cap: int = DEFAULT_GRID_CAP,
    start: int = 0,
) -> MemoryBank:
    """Pool the patch vectors of ``ids`` (grid-capped per image) and keep a
    farthest-first coreset of ratio ``ratio``."""
    if len(ids) == 0:
        raise DataError("cannot build memory from an empty id set")
    blocks = []
    owners = []
    for img_id in ids:
        if img_id not in embeddings_by_id:
            raise DataError(f"missing embeddings for id {img_id}")
        vecs = cap_grid(embeddings_by_id[img_id], grid_cap)
        blocks.append(vecs)
        owners.append(np.full(vecs.shape[0], img_id, dtype=np.int64))
    pool = np.concatenate(blocks, axis=0)
    ids_per_vec = np.concatenate(owners, axis=0)

    picked = coreset_greedy(pool, ratio, start=start)
    return MemoryBank(
        vectors=pool[picked].astype(np.float32),
        source_ids=ids_per_vec[picked],
        built_from=built_from,
        coreset_ratio=ratio,
    )
