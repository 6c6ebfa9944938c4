"""Seed-anchored z-score admission gates.

Calibration freezes the seed population's score and uncertainty moments; a
candidate is admitted only when its z-normalized score (and, when the
uncertainty statistics are non-degenerate, its z-normalized uncertainty) is
at most tau. Both comparisons are inclusive. Selection builds the safe set at
tau = 1.0, relaxes once to 1.5 if it is empty, ranks, and takes the budget.
"""

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

__all__ = ["GateCalibration", "GateVerdict", "Candidate", "calibrate", "gate", "select"]

TAU_BASE = 1.0
TAU_RELAXED = 1.5
SIGMA_FLOOR = 1e-12
USE_U_THRESHOLD = 1e-6

RANK_MODES = ("boundary", "uncert")


@dataclass
class GateCalibration:
    mu_s: float
    sigma_s: float
    mu_u: float
    sigma_u: float
    use_u: bool

    def to_dict(self) -> dict:
        return {"mu_s": self.mu_s, "sigma_s": self.sigma_s,
                "mu_u": self.mu_u, "sigma_u": self.sigma_u, "use_u": self.use_u}

    @classmethod
    def from_dict(cls, d) -> "GateCalibration":
        return cls(mu_s=float(d["mu_s"]), sigma_s=float(d["sigma_s"]),
                   mu_u=float(d["mu_u"]), sigma_u=float(d["sigma_u"]), use_u=bool(d["use_u"]))


@dataclass
class GateVerdict:
    z_s: float
    z_u: float
    admitted: bool
    tau_used: float


@dataclass(frozen=True)
class Candidate:
    id: int
    score: float
    uncert: float


def calibrate(seed_scores: Sequence[float], seed_uncerts: Sequence[float]) -> GateCalibration:
    """Population mean/std (ddof 0) of the seed score and uncertainty samples.

    A zero score spread is floored at 1e-12 (with a degeneracy warning) so
    z-scores stay finite; the uncertainty gate is enabled only when the
    uncertainty spread is numerically nonzero (> 1e-6).
    """
    scores = np.asarray(seed_scores, dtype=np.float64)
    uncerts = np.asarray(seed_uncerts, dtype=np.float64)
    if scores.size < 1 or uncerts.size < 1:
        raise DataError("calibration needs at least one seed sample")
    sigma_s = float(scores.std())
    if sigma_s <= 0.0:
        warnings.warn("degenerate seed score distribution: sigma_s floored at 1e-12")
        sigma_s = SIGMA_FLOOR
    sigma_u = float(uncerts.std())
    return GateCalibration(
        mu_s=float(scores.mean()),
        sigma_s=sigma_s,
        mu_u=float(uncerts.mean()),
        sigma_u=sigma_u,
        use_u=sigma_u > USE_U_THRESHOLD,
    )


def gate(score: float, uncert: float, calib: GateCalibration, tau: float = TAU_BASE) -> GateVerdict:
    """Dual-gate verdict: admitted iff z_s <= tau and (uncertainty gate off
    or z_u <= tau). Total on finite inputs."""
    z_s = (score - calib.mu_s) / calib.sigma_s
    z_u = (uncert - calib.mu_u) / calib.sigma_u if calib.use_u else 0.0
    admitted = (z_s <= tau) and ((not calib.use_u) or (z_u <= tau))
    return GateVerdict(z_s=z_s, z_u=z_u, admitted=admitted, tau_used=tau)


def select(
    candidates: Sequence[Candidate],
    calib: GateCalibration,
    budget: int,
    mode: str = "boundary",
    tau: float = TAU_BASE,
    tau_relaxed: float = TAU_RELAXED,
) -> tuple[list[int], float]:
    """Admit up to ``budget`` ids through the gate with one relaxation.

    The safe set is built at ``tau`` and rebuilt once at ``tau_relaxed`` if
    empty; if still empty the selection is empty at the relaxed value.
    Ranking: "boundary" sorts by raw score descending, "uncert" by
    z-normalized uncertainty descending; ties break by ascending id.
    """
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    if mode not in RANK_MODES:
        raise ConfigError(f"invalid mode: {mode!r} (expected one of {RANK_MODES})")
    if mode == "uncert" and not calib.use_u:
        warnings.warn("uncert ranking with the uncertainty gate disabled degenerates "
                      "to id order; consider boundary mode")

    safe = [(c, gate(c.score, c.uncert, calib, tau)) for c in candidates]
    safe = [(c, v) for c, v in safe if v.admitted]
    if not safe and tau_relaxed > tau:
        tau = tau_relaxed
        safe = [(c, gate(c.score, c.uncert, calib, tau)) for c in candidates]
        safe = [(c, v) for c, v in safe if v.admitted]
    if not safe:
        return [], tau

    if mode == "boundary":
        safe.sort(key=lambda cv: (-cv[0].score, cv[0].id))
    else:
        safe.sort(key=lambda cv: (-cv[1].z_u, cv[0].id))
    return [c.id for c, _ in safe[: min(budget, len(safe))]], tau
