"""Command-line front-end wiring the pipeline stages together.

Stages communicate only through files in a run directory::

    prepare   manifest -> manifest.json + split.json
    featurize manifest -> features.bin (builtin filter-bank features)
    warmup    split + features -> checkpoints/warmup.bin
    calibrate warmup -> checkpoints/calibrated.bin (+ gate stats)
    rounds    calibrated -> checkpoints/{best,last,final}.bin + logs + report
    eval      final + test features -> report/eval.json, roc.csv, pr.csv
    simulate  synthetic experiments (rounds | purity | sweep | effect)
    aggregate eval.json files from several runs -> mean +/- 95% CI

Exit codes: 0 ok, 2 config error, 3 data/format error, 4 numeric error.
A lock file serializes writers per run directory. The merged effective
config is persisted into the run directory and reloaded by later stages, so
a run is reproducible from its own artifacts alone.
"""

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import dataio, gating, metrics, synthlab
from .adapter import forward, init_adapter, warmup
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config_file, make_config, write_effective
from .errors import ConfigError, CoregateError, DataError, NumericError
from .memory import build_memory
from .rounds import RoundConfig, run_rounds
from .scoring import score_image
from .swag import SwagState, snapshot, uncertainty
from .synthlab import PipelineSettings, SynthSpec

RUN_ROOT_ENV = "COREGATE_RUN_ROOT"
LOCK_TIMEOUT_S = 10.0


def _run_dir(args) -> Path:
    run = Path(args.run)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not run.is_absolute():
        run = Path(root) / run
    return run


def _config_overrides(args) -> dict:
    return {f.name: getattr(args, f.name)
            for f in fields(RunConfig) if getattr(args, f.name, None) is not None}


def _load_config(args, run: Path) -> RunConfig:
    """defaults < persisted effective config < --config file < flags."""
    values: dict = {}
    effective = run / "config.effective"
    if effective.exists():
        values.update(load_config_file(effective))
    if args.config is not None:
        values.update(load_config_file(args.config))
    for key, value in _config_overrides(args).items():
        values[key] = value
    cfg = make_config(overrides={k: str(v) for k, v in values.items()})
    run.mkdir(parents=True, exist_ok=True)
    write_effective(cfg, effective)
    return cfg


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DataError(f"{path.name} missing: run the {stage} stage first")
    return path


def _load_labels(run: Path) -> dict:
    raw = json.loads(_require(run / "manifest.json", "prepare").read_text())
    return {int(e["id"]): int(e["label"]) for e in raw}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_prepare(args, run: Path, cfg: RunConfig) -> int:
    manifest = dataio.load_manifest(args.manifest)
    split = dataio.split_seed_pool(manifest, seed_fraction=cfg.seed_fraction,
                                   rng_seed=cfg.seed)
    (run / "manifest.json").write_text(json.dumps(
        [{"id": e.id, "path": e.path, "label": e.label} for e in manifest.entries],
        indent=2, sort_keys=True) + "\n")
    (run / "split.json").write_text(json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"split: {len(split.seed_ids)} seed / {len(split.pool_ids)} pool -> {run / 'split.json'}")
    return 0


def cmd_featurize(args, run: Path, cfg: RunConfig) -> int:
    manifest = dataio.load_manifest(args.manifest)
    in_channels = 1 if args.color == "L" else 3
    bank = dataio.FilterBank.generate(rng_seed=cfg.seed, in_channels=in_channels)
    features = {}
    for entry in manifest.entries:
        image = dataio.load_image(entry.path, size=cfg.image_size, color=args.color)
        features[entry.id] = dataio.featurize_builtin(image, bank)
    out = run / args.out
    dataio.write_embeddings(features, out)
    print(f"featurized {len(features)} images -> {out}")
    return 0


def cmd_warmup(args, run: Path, cfg: RunConfig) -> int:
    split = dataio.SplitResult.from_dict(
        json.loads(_require(run / "split.json", "prepare").read_text()))
    features = dataio.read_embeddings(_require(run / args.features, "featurize"))
    first = features[split.seed_ids[0]]
    params = init_adapter(first.channel_counts, out_dim=cfg.out_dim, rng_seed=cfg.seed)
    params, _ = warmup(features, split.seed_ids, params,
                       epochs=cfg.warmup_epochs, lr=cfg.warmup_lr,
                       proto_budget=cfg.proto_budget, batch_size=cfg.batch_size,
                       rng_seed=cfg.seed)
    swag_state = SwagState.init(params, noise_scale=cfg.noise_scale)
    swag_state = snapshot(swag_state, params)
    swag_state = snapshot(swag_state, params)
    state = CheckpointState(adapter=params, swag=swag_state,
                            meta={"stage": "warmup", "epochs": cfg.warmup_epochs})
    save_checkpoint(run / "checkpoints" / "warmup.bin", state)
    print(f"warmed adapter on {len(split.seed_ids)} seeds -> checkpoints/warmup.bin")
    return 0


def cmd_calibrate(args, run: Path, cfg: RunConfig) -> int:
    split = dataio.SplitResult.from_dict(
        json.loads(_require(run / "split.json", "prepare").read_text()))
    features = dataio.read_embeddings(_require(run / args.features, "featurize"))
    state = load_checkpoint(_require(run / "checkpoints" / "warmup.bin", "warmup"))
    params, swag_state = state.adapter, state.swag

    embeddings = {i: forward(features[i], params) for i in split.seed_ids}
    bank = build_memory(embeddings, split.seed_ids, ratio=cfg.coreset_ratio,
                        built_from="seed", grid_cap=cfg.grid_cap)
    scores, uncerts = [], []
    for i in split.seed_ids:
        scores.append(score_image(embeddings[i], bank, k=cfg.knn_k, top_q=cfg.top_q).image_score)
        uncerts.append(uncertainty(features[i], swag_state, params, bank,
                                   sample_count=cfg.swag_samples, k=cfg.knn_k,
                                   top_q=cfg.top_q, global_seed=cfg.seed, image_id=i))
    calib = gating.calibrate(scores, uncerts)

    out = CheckpointState(adapter=params, swag=swag_state, bank=bank, calibration=calib,
                          meta={"stage": "calibrated"})
    save_checkpoint(run / "checkpoints" / "calibrated.bin", out)
    (run / "report").mkdir(exist_ok=True)
    (run / "report" / "calibration.json").write_text(
        json.dumps(calib.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"calibrated gates on {len(scores)} seeds (use_u={calib.use_u}) "
          f"-> checkpoints/calibrated.bin")
    return 0


def cmd_rounds(args, run: Path, cfg: RunConfig) -> int:
    calibrated = run / "checkpoints" / "calibrated.bin"
    if not calibrated.exists():
        raise DataError("calibration missing: run the calibrate stage first")
    split = dataio.SplitResult.from_dict(
        json.loads(_require(run / "split.json", "prepare").read_text()))
    features = dataio.read_embeddings(_require(run / args.features, "featurize"))
    labels = _load_labels(run)
    state = load_checkpoint(calibrated)

    rcfg = RoundConfig.from_run_config(cfg)
    final_params, final_bank, rstate, report = run_rounds(
        split, features, labels, state.adapter, state.swag, state.calibration,
        rcfg, run_dir=run)
    final = CheckpointState(adapter=final_params, swag=rstate.checkpoints["last"].swag,
                            bank=final_bank, calibration=state.calibration,
                            meta={"stage": "final", "best_round": rstate.best_round,
                                  "accepted": len(rstate.accepted)})
    save_checkpoint(run / "checkpoints" / "final.bin", final)
    print(f"rounds done: accepted {len(rstate.accepted)} "
          f"(best round {rstate.best_round}, metric {rstate.best_metric!r}) "
          f"-> checkpoints/final.bin")
    return 0


def cmd_eval(args, run: Path, cfg: RunConfig) -> int:
    ckpt_path = run / "checkpoints" / f"{args.checkpoint}.bin"
    stage = "rounds" if args.checkpoint == "final" else "calibrate"
    state = load_checkpoint(_require(ckpt_path, stage))
    if state.bank is None:
        raise DataError(f"checkpoint {args.checkpoint} has no memory bank")
    manifest = dataio.load_manifest(args.manifest)
    features = dataio.read_embeddings(_require(run / args.features, "featurize"))

    scores, labels = [], []
    for entry in manifest.entries:
        if entry.id not in features:
            raise DataError(f"no features for test id {entry.id}")
        emb = forward(features[entry.id], state.adapter)
        scores.append(score_image(emb, state.bank, k=cfg.knn_k, top_q=cfg.top_q).image_score)
        labels.append(entry.label)
    report = metrics.evaluate(scores, labels)
    metrics.write_report(report, run / "report")
    if report.skipped:
        print(f"eval: {report.skipped}")
    else:
        print(f"eval: roc_auc={report.roc_auc!r} pr_auc={report.pr_auc!r} "
              f"acc={report.acc!r} -> report/eval.json")
    return 0


def _parse_floats(text: str) -> list:
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


def _parse_ints(text: str) -> list:
    return [int(tok) for tok in text.split(",") if tok.strip() != ""]


def _synth_spec(args) -> SynthSpec:
    return SynthSpec(dim=args.dim, n_seed=args.n_seed,
                     n_pool_normal=args.n_pool_normal,
                     n_pool_anomaly=args.n_pool_anomaly,
                     margin=args.margin, noise_std=args.noise_std,
                     rng_seed=args.sim_seed,
                     n_test_normal=args.n_test_normal,
                     n_test_anomaly=args.n_test_anomaly)


def cmd_simulate(args, run: Path, cfg: RunConfig) -> int:
    pipe = PipelineSettings(out_dim=args.synth_out_dim,
                            warmup_epochs=args.synth_warmup_epochs)
    report_dir = run / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    if args.mode == "rounds":
        spec = _synth_spec(args)
        rcfg = RoundConfig.from_run_config(cfg)
        final_params, final_bank, rstate, report, data = synthlab.run_synth_rounds(
            spec, rcfg, pipe, run_dir=run)
        print(f"simulate rounds: accepted {len(rstate.accepted)} of {len(data.split.pool_ids)} "
              f"pool, run alpha {report.run_alpha!r}")
        if data.test_ids:
            labels = data.manifest.labels_by_id()
            scores = [score_image(forward(data.features_by_id[i], final_params),
                                  final_bank, k=pipe.knn_k, top_q=pipe.top_q).image_score
                      for i in data.test_ids]
            result = metrics.evaluate(scores, [labels[i] for i in data.test_ids])
            metrics.write_report(result, report_dir)
            print(f"simulate eval: roc_auc={result.roc_auc!r} -> report/eval.json")
        return 0

    if args.mode == "purity":
        margins = _parse_floats(args.margins)
        seeds = _parse_ints(args.sim_seeds)
        rows = []
        for margin in margins:
            for seed in seeds:
                spec = replace(_synth_spec(args), margin=margin, rng_seed=seed)
                rcfg = replace(RoundConfig.from_run_config(cfg),
                               strict_normal_only=True, seed=seed)
                rep = synthlab.verify_strict_purity(spec, rcfg, pipe)
                rows.append((margin, seed, rep.run_alpha, rep.total_admitted,
                             rep.total_admitted_anomalies))
        out = report_dir / "purity.csv"
        with open(out, "w") as fh:
            fh.write("margin,seed,alpha,admitted,admitted_anomalies\n")
            for margin, seed, alpha, admitted, anoms in rows:
                fh.write(f"{margin!r},{seed},{alpha!r},{admitted},{anoms}\n")
        print(f"purity grid: {len(rows)} cells, all alpha=0 -> {out}")
        return 0

    if args.mode == "sweep":
        rows = synthlab.sweep_gate_rates(
            _parse_floats(args.margins), _parse_ints(args.k_values),
            seeds=_parse_ints(args.sim_seeds))
        out = report_dir / "gate_rates.csv"
        synthlab.write_sweep_csv(rows, out)
        print(f"gate-rate sweep: {len(rows)} rows -> {out}")
        return 0

    if args.mode == "effect":
        rows = synthlab.direction_of_effect(seeds=_parse_ints(args.sim_seeds))
        out = report_dir / "effect.csv"
        with open(out, "w") as fh:
            fh.write("seed,auc_pipeline,auc_baseline\n")
            for r in rows:
                fh.write(f"{r['seed']},{r['auc_pipeline']!r},{r['auc_baseline']!r}\n")
        mean_gap = float(np.mean([r["auc_pipeline"] - r["auc_baseline"] for r in rows]))
        print(f"effect: mean AUC gap {mean_gap!r} over {len(rows)} seeds -> {out}")
        return 0

    raise ConfigError(f"unknown simulate mode: {args.mode}")


def cmd_aggregate(args, run: Path, cfg: RunConfig) -> int:
    reports = []
    for run_name in args.runs:
        path = Path(run_name) / "report" / "eval.json"
        if not path.exists():
            raise DataError(f"no eval report in {run_name}")
        reports.append(json.loads(path.read_text()))
    summary = metrics.aggregate(reports)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_HANDLERS = {
    "prepare": cmd_prepare,
    "featurize": cmd_featurize,
    "warmup": cmd_warmup,
    "calibrate": cmd_calibrate,
    "rounds": cmd_rounds,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "aggregate": cmd_aggregate,
}


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--run", default="run", help="run directory (joined to "
                     f"${RUN_ROOT_ENV} when relative and the variable is set)")
    sub.add_argument("--config", default=None, help="flat key=value config file")
    for f in fields(RunConfig):
        sub.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coregate",
                                     description="incremental anomaly-learning pipeline")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("prepare", help="split a manifest into seed and pool")
    p.add_argument("--manifest", required=True)

    p = subs.add_parser("featurize", help="extract builtin filter-bank features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="features.bin")
    p.add_argument("--color", default="L", choices=("L", "RGB"))

    p = subs.add_parser("warmup", help="warm the adapter on the seed set")
    p.add_argument("--features", default="features.bin")

    p = subs.add_parser("calibrate", help="fit the z-score gates on seed statistics")
    p.add_argument("--features", default="features.bin")

    p = subs.add_parser("rounds", help="run the gated admission rounds")
    p.add_argument("--features", default="features.bin")

    p = subs.add_parser("eval", help="score a labeled test manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", default="features_test.bin")
    p.add_argument("--checkpoint", default="final", choices=("final", "calibrated"))

    p = subs.add_parser("simulate", help="synthetic-population experiments")
    p.add_argument("--mode", default="rounds",
                   choices=("rounds", "purity", "sweep", "effect"))
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--n-seed", type=int, default=60)
    p.add_argument("--n-pool-normal", type=int, default=80)
    p.add_argument("--n-pool-anomaly", type=int, default=20)
    p.add_argument("--margin", type=float, default=2.0)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--n-test-normal", type=int, default=100)
    p.add_argument("--n-test-anomaly", type=int, default=100)
    p.add_argument("--sim-seed", type=int, default=123)
    p.add_argument("--sim-seeds", default="123,124,125,126,127")
    p.add_argument("--margins", default="0,1,2,3,4")
    p.add_argument("--k-values", default="2,4")
    p.add_argument("--synth-out-dim", type=int, default=16)
    p.add_argument("--synth-warmup-epochs", type=int, default=2)

    p = subs.add_parser("aggregate", help="mean +/- CI over several runs' eval reports")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default=None)

    for name, sub in subs.choices.items():
        _add_common(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = _HANDLERS[args.command]
    try:
        if args.command == "aggregate":
            return handler(args, None, None)
        run = _run_dir(args)
        run.mkdir(parents=True, exist_ok=True)
        lock = FileLock(run / ".lock")
        try:
            with lock.acquire(timeout=LOCK_TIMEOUT_S):
                cfg = _load_config(args, run)
                return handler(args, run, cfg)
        except Timeout:
            raise DataError(f"run directory {run} is locked by another process")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except CoregateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
