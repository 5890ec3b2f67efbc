"""Command-line interface: train / eval / count / gradcheck / ablate.

All numeric output is emitted both as a human-readable table and as JSON
validated against the shipped schemas. Failures print a machine-readable
error JSON to stderr and exit with: 2 invalid config, 3 non-finite loss,
4 checkpoint format/version mismatch, 1 anything else (including gradcheck
failures). ``PMSS_THREADS`` caps kernel-level parallelism (default 1).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments
from .checkpoint import CheckpointError
from .config import ConfigError, load_config, validate_against_schema
from .data import load_dataset
from .pipeline import StagePipeline, TrainAbort, evaluate

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_CONFIG = 2
EXIT_NAN_ABORT = 3
EXIT_BAD_CHECKPOINT = 4


def _fail(code: int, message: str, kind: str = "", field: str = "", out_dir: str | None = None) -> int:
    doc = {"error": message, "exit_code": code}
    if kind:
        doc["kind"] = kind
    if field:
        doc["field"] = field
    validate_against_schema(doc, "error")
    text = json.dumps(doc)
    print(text, file=sys.stderr)
    if out_dir:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(text)
        except OSError:
            pass
    return code


def _emit(doc: dict, schema: str, out_path: Path | None) -> None:
    validate_against_schema(doc, schema)
    text = json.dumps(doc, indent=2)
    print(text)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text)


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = experiments.with_seed(cfg, args.seed)
    except ConfigError as e:
        return _fail(EXIT_BAD_CONFIG, str(e), kind="config", field=e.field, out_dir=args.out)
    try:
        result = experiments.run_training(cfg, out_dir=args.out, config_path=args.config)
    except TrainAbort as e:
        return _fail(EXIT_NAN_ABORT, str(e), kind="nan", out_dir=args.out)
    except CheckpointError as e:
        return _fail(EXIT_BAD_CHECKPOINT, str(e), kind=e.kind, out_dir=args.out)
    validate_against_schema(result.manifest, "manifest")
    for rec in result.report.records:
        validate_against_schema(rec, "report_record")
    last = result.report.records[-1] if result.report.records else {"step": 0, "loss": float("nan")}
    print(f"run complete: {last['step']} steps, final loss {last['loss']:.4f}")
    if result.report.final:
        print(f"val mIoU {result.report.final['miou']:.4f}")
    print(f"artifacts in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        pipe = StagePipeline.load(args.checkpoint)
    except CheckpointError as e:
        return _fail(EXIT_BAD_CHECKPOINT, str(e), kind=e.kind)
    except (OSError, KeyError, ValueError) as e:
        return _fail(EXIT_BAD_CHECKPOINT, f"cannot load checkpoint: {e}", kind="load")
    try:
        ds = load_dataset(args.data)
    except (OSError, json.JSONDecodeError) as e:
        return _fail(EXIT_FAILURE, f"cannot load dataset: {e}", kind="data")
    dice_class = 1 if ds.num_classes == 2 else None
    result = evaluate(pipe, ds, dice_class=dice_class)
    out_path = Path(args.out) / "metrics.json" if args.out else None
    _emit(result, "metrics", out_path)
    return EXIT_OK


def cmd_count(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        return _fail(EXIT_BAD_CONFIG, str(e), kind="config", field=e.field)
    table = experiments.count_table(cfg)
    print(f"{'strategy':<16} {'backbone':>12} {'prompt':>12} {'head':>12}")
    for tag, counts in table["strategies"].items():
        print(f"{tag:<16} {counts['backbone']:>12} {counts['prompt']:>12} {counts['head']:>12}")
    print("\nprompted stages -> prompt parameter sweep")
    for row in table["stage_sweep"]:
        label = f"1-{row['stages'][-1]}" if len(row["stages"]) > 1 else "1"
        print(f"  stages {label:<6} prompt params {row['prompt']:>12}")
    out_path = Path(args.out) / "counts.json" if args.out else None
    if out_path:
        validate_against_schema(table, "count")
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(table, indent=2))
    else:
        validate_against_schema(table, "count")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = [args.scope] if args.scope else ["layers", "spm", "pipeline"]
    all_ok = True
    for scope in scopes:
        ok, rows = experiments.gradcheck_scope(scope, seed=args.seed)
        worst = max((r["max_rel_err"] for r in rows), default=0.0)
        tol = rows[0]["tol"] if rows else 0.0
        status = "PASS" if ok else "FAIL"
        print(f"{scope:<9} {status}  checks={len(rows)}  max_rel_err={worst:.3e}  tol={tol:.0e}")
        if not ok:
            for r in rows:
                if not r["passed"]:
                    names = [e["name"] for e in r["entries"] if e["max_rel_err"] >= r["tol"]]
                    print(f"  seed {r['seed']}: failing gradients: {', '.join(names)}")
        all_ok &= ok
    return EXIT_OK if all_ok else EXIT_FAILURE


def cmd_ablate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        return _fail(EXIT_BAD_CONFIG, str(e), kind="config", field=e.field, out_dir=args.out)
    try:
        rows = experiments.ablate(cfg, args.axis, n_seeds=args.seeds)
    except TrainAbort as e:
        return _fail(EXIT_NAN_ABORT, str(e), kind="nan", out_dir=args.out)
    doc = {
        "axis": args.axis,
        "rows": [
            {
                "label": r.label,
                "seeds": r.seeds,
                "mean_miou": r.mean_miou,
                "std_miou": r.std_miou,
                "prompt_params": r.prompt_params,
                "per_seed_miou": r.per_seed_miou,
            }
            for r in rows
        ],
    }
    print(f"{'cell':<28} {'mean mIoU':>10} {'std':>8} {'prompt params':>14}")
    for r in rows:
        print(f"{r.label:<28} {r.mean_miou:>10.4f} {r.std_miou:>8.4f} {r.prompt_params:>14}")
    out_path = Path(args.out) / "ablation.json" if args.out else None
    _emit(doc, "ablate", out_path) if out_path else validate_against_schema(doc, "ablate")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmss",
        description="Stage-wise prompt-matched fine-tuning for segmentation at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training config end to end")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override train.seed")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a saved dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset directory")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(fn=cmd_eval)

    p_count = sub.add_parser("count", help="trainable-parameter table per strategy")
    p_count.add_argument("--config", required=True)
    p_count.add_argument("--out", default=None)
    p_count.set_defaults(fn=cmd_count)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_gc.add_argument("--scope", choices=["layers", "spm", "pipeline"], default=None)
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(fn=cmd_gradcheck)

    p_ab = sub.add_parser("ablate", help="run an ablation sweep")
    p_ab.add_argument("--config", required=True)
    p_ab.add_argument("--axis", choices=["stages", "recurrent", "spl", "lscm"], required=True)
    p_ab.add_argument("--out", default=None)
    p_ab.add_argument("--seeds", type=int, default=3)
    p_ab.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
