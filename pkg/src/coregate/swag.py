"""Diagonal weight-space posterior over the adapter (SWAG-style).

Running first and second moments of flattened trainable weights accumulate
across training snapshots; sampling perturbs the mean by the elementwise
posterior standard deviation times a configurable noise scale. Per-image
epistemic uncertainty is the population variance of an image's anomaly score
across sampled adapters.

Normalization-layer running statistics are deliberately excluded from the
posterior: they are data statistics, not weight-space mass.
"""

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterParams, flatten_trainable, forward, unflatten_trainable
from .dataio import MultiScaleFeatures
from .errors import ConfigError, DataError, NumericError
from .memory import MemoryBank
from .scoring import score_image

__all__ = ["SwagState", "snapshot", "sample_adapter", "uncertainty", "sample_seed"]

DEFAULT_NOISE_SCALE = 0.02
DEFAULT_SAMPLE_COUNT = 4


@dataclass
class SwagState:
    mean: np.ndarray
    sq_mean: np.ndarray
    snapshot_count: int = 0
    noise_scale: float = DEFAULT_NOISE_SCALE
    keep_snapshots: bool = False          # test-only: retain raw snapshots
    snapshots: list = field(default_factory=list)

    @classmethod
    def init(cls, params: AdapterParams, noise_scale: float = DEFAULT_NOISE_SCALE,
             keep_snapshots: bool = False) -> "SwagState":
        size = flatten_trainable(params).size
        return cls(mean=np.zeros(size), sq_mean=np.zeros(size),
                   noise_scale=noise_scale, keep_snapshots=keep_snapshots)

    def diag_variance(self) -> np.ndarray:
        return np.maximum(self.sq_mean - self.mean ** 2, 0.0)


def snapshot(state: SwagState, params: AdapterParams) -> SwagState:
    """Fold the current weights into the running moments (equal weighting:
    mean_n = ((n-1) * mean_{n-1} + theta) / n)."""
    theta = flatten_trainable(params)
    if not np.all(np.isfinite(theta)):
        raise NumericError("numerical failure: non-finite adapter weights in snapshot")
    n = state.snapshot_count + 1
    state.mean = ((n - 1) * state.mean + theta) / n
    state.sq_mean = ((n - 1) * state.sq_mean + theta ** 2) / n
    state.snapshot_count = n
    if state.keep_snapshots:
        state.snapshots.append(theta.copy())
    return state


def sample_seed(global_seed: int, image_id: int, sample_index: int) -> np.random.SeedSequence:
    """Deterministic per-(image, sample) seed so pool scoring order never
    changes which adapter an image sees."""
    return np.random.SeedSequence([int(global_seed), int(image_id), int(sample_index)])


def sample_adapter(state: SwagState, template: AdapterParams, rng_seed,
                   noise_scale: float | None = None) -> AdapterParams:
    """Draw adapter weights mean + s * sqrt(diag_var) * eps, eps ~ N(0, I).

    With zero posterior variance (or s = 0) this returns the mean weights
    exactly. ``rng_seed`` may be an int or a SeedSequence.
    """
    if state.snapshot_count < 1:
        raise DataError("cannot sample: no snapshots recorded")
    s = state.noise_scale if noise_scale is None else noise_scale
    std = np.sqrt(state.diag_variance())
    if s == 0.0 or not np.any(std > 0.0):
        return unflatten_trainable(state.mean.copy(), template)
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal(state.mean.size)
    return unflatten_trainable(state.mean + s * std * eps, template)


def uncertainty(
    features: MultiScaleFeatures,
    state: SwagState,
    template: AdapterParams,
    bank: MemoryBank,
    sample_count: int = DEFAULT_SAMPLE_COUNT,
    k: int = 3,
    top_q: float = 0.03,
    global_seed: int = 123,
    image_id: int = 0,
    aggregate: str = "mean",
) -> float:
    """Population variance of the image score across sampled adapters."""
    if sample_count < 1:
        raise ConfigError(f"sample_count must be >= 1, got {sample_count}")
    scores = np.empty(sample_count, dtype=np.float64)
    for j in range(sample_count):
        sampled = sample_adapter(state, template, sample_seed(global_seed, image_id, j))
        emb = forward(features, sampled, mode="eval")
        scores[j] = score_image(emb, bank, k=k, top_q=top_q, aggregate=aggregate).image_score
    return float(scores.var())
