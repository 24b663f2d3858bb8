"""Command-line entry points.

Commands: synth-data, pretrain, finetune, loso, eval, equivariance,
corrupt-eval, ablate, plot.  Every run writes the fully resolved
configuration and the invocation arguments beside its outputs, so any result
is reproducible from the emitted files alone.  Input dataset directories are
never written to.

Exit codes: 0 success; 2 usage or configuration error; 3 dataset error;
4 runtime error (training, evaluation, checkpoints); 1 unexpected failure.
Environment overrides: LATENTGAZE_SEED and LATENTGAZE_DETERMINISTIC take
precedence over the config file but not over explicit --set flags.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from .augmentation import AugmentationConfigError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, save_resolved_config, validate_or_raise
from .data import DataError, ExtractionError, load_dataset, synth_generate, usable_records
from .evaluation import (
    EvalReport,
    EvaluationError,
    ablation_report,
    corruption_eval,
    equivariance_sweep,
    evaluate,
    predict_angles_batched,
)
from .geometry import GeometryError
from .plotting import render_equivariance_chart, save_gaze_overlays
from .training import TrainingError, finetune, load_gaze_model, load_samples, pretrain, run_loso

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def _write_invocation(out_dir: Path, args: argparse.Namespace, cfg: RunConfig | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": args.command, "args": {k: str(v) for k, v in vars(args).items() if k != "func"}}
    (out_dir / "invocation.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    if cfg is not None:
        save_resolved_config(cfg, out_dir / "resolved_config.yaml")


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    env_seed = os.environ.get("LATENTGAZE_SEED")
    if env_seed is not None and not _overridden(args, "seed"):
        cfg.seed = int(env_seed)
    env_det = os.environ.get("LATENTGAZE_DETERMINISTIC")
    if env_det is not None and not _overridden(args, "deterministic"):
        cfg.deterministic = env_det.strip().lower() in ("1", "true", "yes")
    return cfg


def _overridden(args: argparse.Namespace, key: str) -> bool:
    return any(item.split("=", 1)[0] == key for item in (getattr(args, "set", None) or []))


def _prepared_samples(manifest, indices, cfg: RunConfig):
    face = (cfg.architecture.face_size, cfg.architecture.face_size)
    return load_samples(manifest, indices, face)


def _usable_or_fail(manifest):
    kept, excluded = usable_records(manifest)
    if not kept:
        raise DataError("no usable samples: every record lacks workable landmarks")
    if excluded:
        print(f"excluded {len(excluded)} of {len(manifest)} records (no usable eye patches)")
    return kept


def _write_report(report, out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_json() if hasattr(report, "to_json") else json.dumps(report, indent=2, sort_keys=True)
    tagged = f"{stem}_{getattr(report, 'config_hash', '') or 'nohash'}_{_timestamp()}.json"
    (out_dir / tagged).write_text(payload)
    (out_dir / f"{stem}.json").write_text(payload)
    if hasattr(report, "render_table"):
        (out_dir / f"{stem}.txt").write_text(report.render_table() + "\n")


# --- commands ------------------------------------------------------------------


def _cmd_synth_data(args) -> int:
    out = Path(args.out)
    manifest = synth_generate(out, args.count, seed=args.seed, subjects=args.subjects, size=args.size)
    _write_invocation(out, args, None)
    print(f"wrote {len(manifest)} samples for {len(manifest.subjects())} subjects to {out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    manifest = load_dataset(args.data)
    validate_or_raise(cfg, dataset_has_landmarks=any(r.landmarks for r in manifest.records))
    out = Path(args.out)
    _write_invocation(out, args, cfg)
    kept = _usable_or_fail(manifest)
    result = pretrain(cfg, manifest, out, indices=kept)
    history = {
        "history": result.history,
        "tau_start": result.tau_trace[0],
        "tau_end": result.tau_trace[-1],
        "steps": result.steps,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
    }
    (out / "history.json").write_text(json.dumps(history, indent=2, sort_keys=True))
    print(f"pretraining done: {result.steps} steps, encoder at {result.encoder_path}")
    return EXIT_OK


def _split_samples(cfg: RunConfig, manifest, kept: list[int], subject: str | None):
    from .data import DatasetManifest, split_loso, split_random

    filtered = DatasetManifest(
        root=manifest.root, records=[manifest.records[i] for i in kept], task=manifest.task
    )
    if cfg.data.split == "loso":
        if subject is None:
            raise ConfigError("loso split needs --subject")
        split = split_loso(filtered, subject, val_fraction=cfg.data.loso_val_fraction)
    else:
        split = split_random(
            filtered,
            (cfg.data.train_fraction, cfg.data.val_fraction, cfg.data.test_fraction),
            seed=cfg.data.split_seed,
        )
    return filtered, split


def _cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    manifest = load_dataset(args.data)
    validate_or_raise(cfg, dataset_has_landmarks=any(r.landmarks for r in manifest.records))
    out = Path(args.out)
    _write_invocation(out, args, cfg)
    kept = _usable_or_fail(manifest)
    filtered, split = _split_samples(cfg, manifest, kept, args.subject)
    train = _prepared_samples(filtered, split.train, cfg)
    val = _prepared_samples(filtered, split.val, cfg)
    result = finetune(cfg, train, val, out, ssl_checkpoint=args.ssl_checkpoint)
    (out / "history.json").write_text(
        json.dumps(
            {"history": result.history, "best_val_error": result.best_val_error,
             "stopped_early": result.stopped_early, "config_hash": cfg.config_hash(),
             "config": cfg.to_dict()},
            indent=2,
            sort_keys=True,
        )
    )
    if split.test:
        model, _ = load_gaze_model(result.model_path)
        test = _prepared_samples(filtered, split.test, cfg)
        report = evaluate(model, test, config_hash=cfg.config_hash())
        _write_report(report, out, "eval_report")
        print(report.render_table())
    print(f"best validation error {result.best_val_error:.4f} deg; model at {result.model_path}")
    return EXIT_OK


def _cmd_loso(args) -> int:
    cfg = _load_run_config(args)
    manifest = load_dataset(args.data)
    validate_or_raise(cfg, dataset_has_landmarks=any(r.landmarks for r in manifest.records))
    out = Path(args.out)
    _write_invocation(out, args, cfg)
    report = run_loso(cfg, manifest, out, ssl_checkpoint=args.ssl_checkpoint)
    (out / "loso_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    mean = report["mean_error"]
    print(f"{report['completed']} folds done, {report['failed']} failed; "
          f"mean angular error {mean if mean is None else round(mean, 4)} deg")
    return EXIT_OK


def _load_model_and_samples(args):
    model, cfg = load_gaze_model(args.model)
    manifest = load_dataset(args.data)
    kept = _usable_or_fail(manifest)
    samples = _prepared_samples(manifest, kept, cfg)
    return model, cfg, samples


def _cmd_eval(args) -> int:
    model, cfg, samples = _load_model_and_samples(args)
    out = Path(args.out)
    _write_invocation(out, args, cfg)
    ranges = tuple(float(r) for r in args.ranges.split(",")) if args.ranges else (180.0, 90.0, 20.0)
    report = evaluate(model, samples, ranges_deg=ranges, config_hash=cfg.config_hash())
    _write_report(report, out, "eval_report")
    print(report.render_table())
    return EXIT_OK


def _cmd_equivariance(args) -> int:
    model, cfg, samples = _load_model_and_samples(args)
    out = Path(args.out)
    _write_invocation(out, args, cfg)
    thetas = [math.radians(float(t)) for t in args.thetas.split(",")]
    curve = equivariance_sweep(model, samples, thetas=thetas, config_hash=cfg.config_hash())
    _write_report(curve, out, "equivariance")
    chart = render_equivariance_chart([(p.theta_deg, p.mean_error) for p in curve.points])
    chart.save(out / "equivariance.png", format="PNG")
    for p in curve.points:
        err = "n/a" if p.mean_error is None else f"{p.mean_error:.4f}"
        print(f"theta {p.theta_deg:5.1f} deg  error {err} deg  n={p.count}  excluded={p.excluded}")
    return EXIT_OK


def _cmd_corrupt_eval(args) -> int:
    model, cfg, samples = _load_model_and_samples(args)
    out = Path(args.out)
    _write_invocation(out, args, cfg)
    result = corruption_eval(
        model,
        samples,
        corruption=args.corruption,
        amount=args.amount,
        illum_threshold=args.illum_threshold,
        config_hash=cfg.config_hash(),
    )
    out.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(result, indent=2, sort_keys=True)
    (out / f"corruption_{cfg.config_hash()}_{_timestamp()}.json").write_text(payload)
    (out / "corruption.json").write_text(payload)
    print(
        f"clean error {result['clean']['mean_error']:.4f} deg; "
        f"{args.corruption}({args.amount}) error {result['corrupted']['mean_error']:.4f} deg"
    )
    return EXIT_OK


def _cmd_ablate(args) -> int:
    reports = {}
    for item in args.report:
        if "=" not in item:
            raise ConfigError(f"--report {item!r} must look like name=path")
        name, path = item.split("=", 1)
        reports[name] = EvalReport.from_dict(json.loads(Path(path).read_text()))
    table = ablation_report(reports, args.reference)
    out = Path(args.out)
    _write_invocation(out, args, None)
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    print(f"reference: {table['reference']}")
    for name, row in table["variants"].items():
        print(f"  {name:<16} mean increase {row['mean_pct_increase']:+.2f}%")
    return EXIT_OK


def _cmd_plot(args) -> int:
    out = Path(args.out)
    if args.curve:
        payload = json.loads(Path(args.curve).read_text())
        chart = render_equivariance_chart(
            [(p["theta_deg"], p["mean_error"]) for p in payload["points"]]
        )
        out.mkdir(parents=True, exist_ok=True)
        chart.save(out / "equivariance.png", format="PNG")
        _write_invocation(out, args, None)
        print(f"wrote {out / 'equivariance.png'}")
        return EXIT_OK
    if args.model is None or args.data is None:
        raise ConfigError("plot needs --model and --data (or --curve for a chart)")
    model, cfg, samples = _load_model_and_samples(args)
    if args.limit:
        samples = samples[: args.limit]
    _write_invocation(out, args, cfg)
    predictions = predict_angles_batched(model, samples)
    paths = save_gaze_overlays(samples, predictions, out)
    print(f"wrote {len(paths)} overlays to {out}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentgaze",
        description="Self-supervised latent-feature gaze estimation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. --set pretrain.epochs=5")

    p = sub.add_parser("synth-data", help="render a synthetic labeled dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=15)
    p.add_argument("--size", type=int, default=112)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    add_config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised gaze fine-tuning")
    add_config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ssl-checkpoint", type=Path, default=None)
    p.add_argument("--subject", default=None, help="held-out subject for a loso split")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("loso", help="leave-one-subject-out cross-validation")
    add_config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ssl-checkpoint", type=Path, default=None)
    p.set_defaults(func=_cmd_loso)

    p = sub.add_parser("eval", help="range-sliced angular-error report")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ranges", default=None, help="comma-separated yaw limits in degrees")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("equivariance", help="rotational equivariance sweep")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--thetas", default="0,5,10,15,20,25,30",
                   help="comma-separated rotation angles in degrees")
    p.set_defaults(func=_cmd_equivariance)

    p = sub.add_parser("corrupt-eval", help="appearance-corruption evaluation")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--corruption", choices=("darken", "blur"), required=True)
    p.add_argument("--amount", type=float, required=True)
    p.add_argument("--illum-threshold", type=float, default=None)
    p.set_defaults(func=_cmd_corrupt_eval)

    p = sub.add_parser("ablate", help="compare eval reports against a reference")
    p.add_argument("--report", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--reference", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("plot", help="gaze overlay images or an equivariance chart")
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--curve", type=Path, default=None, help="equivariance JSON to chart")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, AugmentationConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ExtractionError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, EvaluationError, CheckpointError, GeometryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - safety net
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    raise SystemExit(main())
