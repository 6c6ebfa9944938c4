"""Incremental rounds: gated pool admission with memory growth and
checkpointing.

Each round resumes the adapter per policy, rebuilds the k-NN memory from
seeds plus everything accepted so far, scores the not-yet-consumed pool,
z-normalizes against the FIXED seed calibration, admits through the dual
gate (one tau relaxation when the safe set is empty), fine-tunes the adapter
for one epoch on the admitted batch, takes a posterior snapshot, and
checkpoints. Labels are consulted only in strict mode; the default is fully
oracle-free.

All per-round randomness (fine-tune shuffles, metric-subset sampling) is
derived from seeded sequences, so a resumed or replayed run reproduces the
original byte-for-byte.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import gating
from .adapter import AdamState, AdapterParams, PrototypeSet, batch_loss_gradient, forward
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataio import LABEL_ANOMALY, LABEL_NORMAL, MultiScaleFeatures, SplitResult
from .errors import ConfigError, DataError
from .gating import Candidate, GateCalibration
from .memory import MemoryBank, build_memory
from .metrics import roc_auc
from .scoring import score_image
from .swag import SwagState, snapshot, uncertainty

__all__ = [
    "RoundConfig",
    "RoundState",
    "ContaminationReport",
    "run_rounds",
    "checkpoint_metric",
    "fine_tune_epoch",
]

# Seed-derivation tags; arbitrary but frozen so replays stay bit-identical.
_TAG_FINETUNE = 0xf17e
_TAG_METRIC_SUBSET = 0x5e7
METRIC_POOL_FRACTION = 0.25


@dataclass
class RoundConfig:
    rounds: int = 5
    budget: int = 200
    strict_normal_only: bool = False
    resume_policy: str = "best_so_far"
    rank_mode: str = "boundary"
    fine_tune_lr: float = 3e-5
    tau_policy: str = "reset"
    memory_policy: str = "rebuild"
    coreset_ratio: float = 0.3
    grid_cap: int = 16
    knn_k: int = 3
    top_q: float = 0.03
    swag_samples: int = 4
    batch_size: int = 32
    tau: float = gating.TAU_BASE
    tau_relaxed: float = gating.TAU_RELAXED
    seed: int = 123

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.budget < 1:
            raise ConfigError("rounds and budget must be >= 1")
        if self.resume_policy not in ("best_so_far", "last"):
            raise ConfigError("resume_policy must be best_so_far or last")
        if self.rank_mode not in gating.RANK_MODES:
            raise ConfigError(f"rank_mode must be one of {gating.RANK_MODES}")
        if self.tau_policy not in ("reset", "persist"):
            raise ConfigError("tau_policy must be reset or persist")
        if self.memory_policy not in ("rebuild", "frozen_seed"):
            raise ConfigError("memory_policy must be rebuild or frozen_seed")

    @classmethod
    def from_run_config(cls, run: RunConfig) -> "RoundConfig":
        return cls(
            rounds=run.rounds, budget=run.budget,
            strict_normal_only=(run.label_policy == "strict"),
            resume_policy=run.resume_policy, rank_mode=run.rank_mode,
            fine_tune_lr=run.finetune_lr, tau_policy=run.tau_policy,
            memory_policy=run.memory_policy, coreset_ratio=run.coreset_ratio,
            grid_cap=run.grid_cap, knn_k=run.knn_k, top_q=run.top_q,
            swag_samples=run.swag_samples, batch_size=run.batch_size,
            tau=run.tau, tau_relaxed=run.tau_relaxed, seed=run.seed,
        )


@dataclass
class RoundState:
    used: set = field(default_factory=set)        # local pool indices
    accepted: list = field(default_factory=list)  # global ids, admission order
    round_index: int = 0
    best_metric: float = -np.inf
    best_round: int = 0
    checkpoints: dict = field(default_factory=dict)  # best_overall / last
    round_summaries: list = field(default_factory=list)


@dataclass
class ContaminationReport:
    rows: list = field(default_factory=list)
    pool_normals: int = 0
    pool_anomalies: int = 0

    @property
    def total_admitted(self) -> int:
        return sum(r["admitted"] for r in self.rows)

    @property
    def total_admitted_anomalies(self) -> int:
        return sum(r["admitted_anomalies"] for r in self.rows)

    @property
    def run_alpha(self) -> float:
        """Fraction of the pool's anomalies that slipped into the memory."""
        if self.pool_anomalies == 0:
            return 0.0
        return self.total_admitted_anomalies / self.pool_anomalies

    @property
    def run_beta(self) -> float:
        """Fraction of the pool's normals admitted into the memory."""
        if self.pool_normals == 0:
            return 0.0
        return (self.total_admitted - self.total_admitted_anomalies) / self.pool_normals

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("round,scored,scored_anomalies,admitted,admitted_anomalies,alpha,beta\n")
            for r in self.rows:
                fh.write(f"{r['round']},{r['scored']},{r['scored_anomalies']},"
                         f"{r['admitted']},{r['admitted_anomalies']},"
                         f"{r['alpha']!r},{r['beta']!r}\n")


def fine_tune_epoch(features_by_id: Mapping[int, MultiScaleFeatures],
                    ids: Sequence[int], params: AdapterParams,
                    protos: PrototypeSet, lr: float, batch_size: int,
                    rng_seed: int, round_index: int) -> AdapterParams:
    """One epoch of minibatch Adam on the prototype-coverage loss.

    Optimizer moments start fresh: the adapter may have just been reset to a
    checkpointed state, so carrying moments from another trajectory would
    apply stale momentum to the restored weights.
    """
    optimizer = AdamState.for_params(params, lr)
    order = list(ids)
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, _TAG_FINETUNE, round_index]))
    rng.shuffle(order)
    for lo in range(0, len(order), batch_size):
        batch = [features_by_id[i] for i in order[lo:lo + batch_size]]
        _, grads = batch_loss_gradient(batch, params, protos, update_running=True)
        optimizer.step(params, grads)
    return params


def metric_subset(split: SplitResult, rng_seed: int):
    """Fixed evaluation subset: every seed image plus a seeded 25% sample of
    the initial pool, chosen once before round 1."""
    pool = sorted(split.pool_ids)
    n_sample = max(1, int(np.floor(METRIC_POOL_FRACTION * len(pool) + 0.5))) if pool else 0
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, _TAG_METRIC_SUBSET]))
    sample = sorted(rng.choice(pool, size=n_sample, replace=False).tolist()) if pool else []
    return list(split.seed_ids), sample


def _scores_for(ids: Sequence[int], features_by_id, params, bank, k, top_q):
    out = []
    for img_id in ids:
        emb = forward(features_by_id[img_id], params, mode="eval")
        out.append(score_image(emb, bank, k=k, top_q=top_q).image_score)
    return np.asarray(out, dtype=np.float64)


def checkpoint_metric(params: AdapterParams, bank: MemoryBank,
                      features_by_id: Mapping[int, MultiScaleFeatures],
                      seed_subset: Sequence[int], pool_subset: Sequence[int],
                      k: int, top_q: float, validation=None) -> float:
    """Round-quality metric: validation ROC-AUC when labels exist, otherwise
    the mean pool score minus mean seed score on the fixed subset (larger
    means cleaner separation between memory members and the pool)."""
    if validation is not None:
        val_ids, val_labels = validation
        if len(val_ids) == 0:
            raise DataError("empty validation set")
        scores = _scores_for(val_ids, features_by_id, params, bank, k, top_q)
        return roc_auc(scores, np.asarray(val_labels))
    if len(seed_subset) == 0 or len(pool_subset) == 0:
        raise DataError("empty metric subset")
    s_seed = _scores_for(seed_subset, features_by_id, params, bank, k, top_q)
    s_pool = _scores_for(pool_subset, features_by_id, params, bank, k, top_q)
    return float(s_pool.mean() - s_seed.mean())


def _build_round_bank(features_by_id, split, accepted, params, cfg: RoundConfig) -> MemoryBank:
    if cfg.memory_policy == "frozen_seed" or not accepted:
        ids, origin = list(split.seed_ids), "seed"
    else:
        ids, origin = list(split.seed_ids) + list(accepted), "seed+accepted"
    embeddings = {i: forward(features_by_id[i], params, mode="eval") for i in ids}
    return build_memory(embeddings, ids, ratio=cfg.coreset_ratio,
                        built_from=origin, grid_cap=cfg.grid_cap)


def _snapshot_state(params, optimizer, swag_state, bank, calib, meta) -> CheckpointState:
    return CheckpointState(
        adapter=params.copy(),
        optimizer=optimizer,
        swag=SwagState(mean=swag_state.mean.copy(), sq_mean=swag_state.sq_mean.copy(),
                       snapshot_count=swag_state.snapshot_count,
                       noise_scale=swag_state.noise_scale),
        bank=bank,
        calibration=calib,
        meta=dict(meta),
    )


def _persist(state: CheckpointState, run_dir, name: str) -> None:
    if run_dir is None:
        return
    save_checkpoint(Path(run_dir) / "checkpoints" / f"{name}.bin", state)


def _gate_log_rows(round_index, ordered, verdicts, tau_used, selected_rank, admitted_ids):
    rows = []
    for cand, verdict in sorted(zip(ordered, verdicts), key=lambda cv: cv[0].id):
        rank = selected_rank.get(cand.id, "")
        admitted = 1 if cand.id in admitted_ids else 0
        rows.append(f"{round_index},{cand.id},{cand.score!r},{cand.uncert!r},"
                    f"{verdict.z_s!r},{verdict.z_u!r},{tau_used!r},{admitted},{rank}")
    return rows


def run_rounds(
    split: SplitResult,
    features_by_id: Mapping[int, MultiScaleFeatures],
    labels_by_id: Mapping[int, int],
    params: AdapterParams,
    swag_state: SwagState,
    calib: GateCalibration,
    cfg: RoundConfig,
    run_dir=None,
    validation=None,
):
    """Execute the incremental admission loop.

    Returns ``(final adapter, final memory bank, RoundState,
    ContaminationReport)``. The final adapter is the best-overall checkpoint;
    the final bank is rebuilt with it over seeds plus all accepted ids.
    """
    for img_id in split.pool_ids:
        if img_id not in features_by_id:
            raise DataError(f"missing features for pool id {img_id}")
    pool_ids = list(split.pool_ids)
    pool_labels = np.asarray([labels_by_id[i] for i in pool_ids])

    report = ContaminationReport(
        pool_normals=int(np.sum(pool_labels == LABEL_NORMAL)),
        pool_anomalies=int(np.sum(pool_labels == LABEL_ANOMALY)),
    )
    state = RoundState()
    seed_subset, pool_subset = metric_subset(split, cfg.seed)

    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "logs").mkdir(parents=True, exist_ok=True)
        (run_dir / "report").mkdir(parents=True, exist_ok=True)

    if not pool_ids:
        # Nothing to admit: hand back the warm-up state untouched.
        baseline = _snapshot_state(params, None, swag_state, None, calib,
                                   {"round": 0, "metric": None})
        state.checkpoints["best_overall"] = baseline
        state.checkpoints["last"] = baseline
        _persist(baseline, run_dir, "best")
        _persist(baseline, run_dir, "last")
        final_bank = _build_round_bank(features_by_id, split, [], params, cfg)
        if run_dir is not None:
            (run_dir / "logs" / "rounds.jsonl").write_text("")
            report.write_csv(run_dir / "report" / "contamination.csv")
        return params.copy(), final_bank, state, report

    def evaluate_metric(current_params):
        bank = _build_round_bank(features_by_id, split, state.accepted, current_params, cfg)
        return checkpoint_metric(current_params, bank, features_by_id,
                                 seed_subset, pool_subset,
                                 k=cfg.knn_k, top_q=cfg.top_q, validation=validation)

    # Baseline checkpoint before any admission, so an unproductive run still
    # returns the warm-up state.
    metric0 = evaluate_metric(params)
    state.best_metric = metric0
    state.best_round = 0
    best = _snapshot_state(params, None, swag_state, None, calib,
                           {"round": 0, "metric": metric0})
    state.checkpoints["best_overall"] = best
    state.checkpoints["last"] = best
    _persist(best, run_dir, "best")
    _persist(best, run_dir, "last")

    current_tau = cfg.tau
    jsonl_lines = []

    for round_index in range(1, cfg.rounds + 1):
        state.round_index = round_index
        if cfg.tau_policy == "reset":
            current_tau = cfg.tau

        source = "best_overall" if cfg.resume_policy == "best_so_far" else "last"
        params = state.checkpoints[source].adapter.copy()

        bank = _build_round_bank(features_by_id, split, state.accepted, params, cfg)

        unused = [j for j in range(len(pool_ids)) if j not in state.used]
        if not unused:
            break

        candidates = []
        for j in unused:
            img_id = pool_ids[j]
            emb = forward(features_by_id[img_id], params, mode="eval")
            s = score_image(emb, bank, k=cfg.knn_k, top_q=cfg.top_q).image_score
            u = 0.0
            if calib.use_u:
                u = uncertainty(features_by_id[img_id], swag_state, params, bank,
                                sample_count=cfg.swag_samples, k=cfg.knn_k,
                                top_q=cfg.top_q, global_seed=cfg.seed, image_id=img_id)
            candidates.append(Candidate(id=j, score=s, uncert=u))

        selected_local, tau_used = gating.select(
            candidates, calib, budget=cfg.budget, mode=cfg.rank_mode,
            tau=current_tau, tau_relaxed=cfg.tau_relaxed)
        if cfg.tau_policy == "persist" and tau_used > current_tau:
            current_tau = tau_used

        verdicts = [gating.gate(c.score, c.uncert, calib, tau=tau_used) for c in candidates]
        global_candidates = [Candidate(id=pool_ids[c.id], score=c.score, uncert=c.uncert)
                             for c in candidates]
        global_rank = {pool_ids[j]: rank for rank, j in enumerate(selected_local, start=1)}

        scored_anoms = int(np.sum(pool_labels[unused] == LABEL_ANOMALY))
        summary = {
            "round": round_index,
            "scored": len(unused),
            "tau": tau_used,
            "safe": int(sum(v.admitted for v in verdicts)),
            "selected": len(selected_local),
            "admitted": 0,
            "admitted_anomalies": 0,
            "metric": None,
            "best_metric": state.best_metric,
            "improved": False,
        }

        if not selected_local:
            gate_rows = _gate_log_rows(round_index, global_candidates, verdicts,
                                       tau_used, global_rank, set())
            _write_round_logs(run_dir, round_index, gate_rows)
            _append_round(report, summary, unused, scored_anoms, state, jsonl_lines)
            continue  # safe set empty even after relaxation

        state.used.update(selected_local)
        selected_global = [pool_ids[j] for j in selected_local]

        if cfg.strict_normal_only:
            admitted_ids = [g for g in selected_global
                            if labels_by_id[g] == LABEL_NORMAL]
        else:
            admitted_ids = list(selected_global)

        gate_rows = _gate_log_rows(round_index, global_candidates, verdicts,
                                   tau_used, global_rank, set(admitted_ids))
        _write_round_logs(run_dir, round_index, gate_rows)

        admitted_anoms = sum(1 for g in admitted_ids
                             if labels_by_id[g] == LABEL_ANOMALY)
        summary["admitted"] = len(admitted_ids)
        summary["admitted_anomalies"] = admitted_anoms

        if not admitted_ids:
            # Strict filter removed the whole batch: log, save last, move on.
            state.checkpoints["last"] = _snapshot_state(
                params, None, swag_state, bank, calib,
                {"round": round_index, "metric": None})
            _persist(state.checkpoints["last"], run_dir, "last")
            _append_round(report, summary, unused, scored_anoms, state, jsonl_lines)
            continue

        protos = PrototypeSet(bank.vectors.astype(np.float64))
        params = fine_tune_epoch(features_by_id, admitted_ids, params, protos,
                                 lr=cfg.fine_tune_lr, batch_size=cfg.batch_size,
                                 rng_seed=cfg.seed, round_index=round_index)
        swag_state = snapshot(swag_state, params)
        state.accepted.extend(admitted_ids)

        metric = evaluate_metric(params)
        summary["metric"] = metric
        last = _snapshot_state(params, None, swag_state, bank, calib,
                               {"round": round_index, "metric": metric})
        state.checkpoints["last"] = last
        _persist(last, run_dir, "last")
        if metric > state.best_metric:
            state.best_metric = metric
            state.best_round = round_index
            state.checkpoints["best_overall"] = last
            _persist(last, run_dir, "best")
            summary["improved"] = True
        summary["best_metric"] = state.best_metric
        _append_round(report, summary, unused, scored_anoms, state, jsonl_lines)

    final_params = state.checkpoints["best_overall"].adapter.copy()
    final_bank = _build_round_bank(features_by_id, split, state.accepted,
                                   final_params, cfg)
    if run_dir is not None:
        (run_dir / "logs" / "rounds.jsonl").write_text("".join(jsonl_lines))
        report.write_csv(run_dir / "report" / "contamination.csv")
    return final_params, final_bank, state, report


def _append_round(report, summary, unused, scored_anoms, state, jsonl_lines):
    admitted = summary["admitted"]
    anoms = summary["admitted_anomalies"]
    scored_normals = summary["scored"] - scored_anoms
    row = {
        "round": summary["round"],
        "scored": summary["scored"],
        "scored_anomalies": scored_anoms,
        "admitted": admitted,
        "admitted_anomalies": anoms,
        "alpha": anoms / scored_anoms if scored_anoms else 0.0,
        "beta": (admitted - anoms) / scored_normals if scored_normals else 0.0,
    }
    report.rows.append(row)
    state.round_summaries.append(summary)
    jsonl_lines.append(json.dumps(summary, sort_keys=True) + "\n")


def _write_round_logs(run_dir, round_index, gate_rows) -> None:
    if run_dir is None:
        return
    path = Path(run_dir) / "logs" / f"round_{round_index}_gates.csv"
    with open(path, "w") as fh:
        fh.write("round,id,s,u,z_s,z_u,tau,admitted,rank\n")
        for row in gate_rows:
            fh.write(row + "\n")


def resume_from_dir(run_dir) -> CheckpointState:
    """Load the last checkpoint from a run directory."""
    path = Path(run_dir) / "checkpoints" / "last.bin"
    if not path.exists():
        raise DataError(f"no checkpoint at {path}")
    return load_checkpoint(path)
