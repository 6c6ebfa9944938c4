"""k-NN anomaly scoring against the memory bank, plus patch heatmaps.

Per patch: the aggregate of its k nearest bank distances (arithmetic mean by
default). Per image: the mean of the largest ceil(top_q * P) patch scores.
Neighbor search is exact; distances accumulate in float64.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import PatchEmbeddings
from .errors import ConfigError, DataError
from .interp import resize_plane
from .memory import MemoryBank

__all__ = ["ScoreResult", "score_image", "score_matrix", "heatmap", "save_heatmap"]

DEFAULT_KNN = 3
DEFAULT_TOP_Q = 0.03

AGGREGATIONS = ("mean", "max", "nearest")


@dataclass
class ScoreResult:
    image_score: float
    patch_scores: np.ndarray  # (grid_h, grid_w)
    k: int
    top_q: float


def _distances(rows: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance matrix in float64.

    On unit rows this reduces to sqrt(2 - 2 * dot); the row-norm terms below
    make the same expression exact when either side is not unit length.
    """
    q = rows.astype(np.float64)
    m = bank.astype(np.float64)
    qn = np.sum(q * q, axis=1)
    mn = np.sum(m * m, axis=1)
    d2 = qn[:, None] - 2.0 * (q @ m.T) + mn[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def _patch_scores(vectors: np.ndarray, bank: MemoryBank, k: int, aggregate: str) -> np.ndarray:
    if vectors.shape[0] < 1:
        raise DataError("empty embeddings: nothing to score")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > len(bank):
        raise DataError(f"k exceeds memory: k={k} but bank holds {len(bank)} vectors")
    if aggregate not in AGGREGATIONS:
        raise ConfigError(f"aggregate must be one of {AGGREGATIONS}, got {aggregate!r}")
    d = _distances(vectors, bank.vectors)
    knn = np.sort(d, axis=1)[:, :k]
    if aggregate == "mean":
        return knn.mean(axis=1)
    if aggregate == "max":
        return knn[:, -1]
    return knn[:, 0]


def score_image(
    q: PatchEmbeddings,
    bank: MemoryBank,
    k: int = DEFAULT_KNN,
    top_q: float = DEFAULT_TOP_Q,
    aggregate: str = "mean",
) -> ScoreResult:
    """Image-level anomaly score: mean of the top-q fraction of patch scores.

    The top-patch count ceil(top_q * P) is clamped to at least one so tiny
    grids still score.
    """
    if not (0.0 < top_q <= 1.0):
        raise ConfigError(f"top_q must be in (0, 1], got {top_q}")
    patch = _patch_scores(q.vectors, bank, k, aggregate)
    n_top = max(1, int(np.ceil(top_q * patch.shape[0])))
    top = np.sort(patch)[-n_top:]
    return ScoreResult(
        image_score=float(top.mean()),
        patch_scores=patch.reshape(q.grid_h, q.grid_w),
        k=k,
        top_q=top_q,
    )


def score_matrix(vectors: np.ndarray, bank: MemoryBank, k: int = DEFAULT_KNN,
                 aggregate: str = "mean") -> np.ndarray:
    """Patch scores for a raw (P, dim) matrix; used by batched pipelines."""
    return _patch_scores(np.asarray(vectors), bank, k, aggregate)


def heatmap(q: PatchEmbeddings, bank: MemoryBank, k: int = DEFAULT_KNN,
            out_h: int = 256, out_w: int = 256, aggregate: str = "mean") -> np.ndarray:
    """Patch-score map min-max normalized to [0, 1], bilinearly upsampled to
    (out_h, out_w). A constant patch map exports as all zeros."""
    patch = _patch_scores(q.vectors, bank, k, aggregate).reshape(q.grid_h, q.grid_w)
    lo, hi = float(patch.min()), float(patch.max())
    if hi - lo <= 0.0:
        return np.zeros((out_h, out_w), dtype=np.float32)
    normed = (patch - lo) / (hi - lo)
    return resize_plane(normed, out_h, out_w).astype(np.float32)


def save_heatmap(grid: np.ndarray, path) -> None:
    """Write a heatmap as ``u32 h, u32 w`` then h*w float32 LE values."""
    grid = np.asarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise DataError("heatmap must be 2-D")
    with open(Path(path), "wb") as fh:
        fh.write(struct.pack("<II", grid.shape[0], grid.shape[1]))
        fh.write(np.ascontiguousarray(grid).tobytes())
