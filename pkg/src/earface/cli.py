"""``earface`` command line.

Subcommands: ``prepare``, ``train``, ``eval``, ``score-fuse``, ``report``
and ``synth``. Every run writes ``run_config.txt`` (the resolved settings)
into its ``--out`` directory.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, config as runconfig
from .data import AGE_GROUP_LABELS, DEFAULT_RATIOS, read_manifest, stratified_split, write_manifest
from .errors import ConfigError, DataError, DegenerateInputError, DimensionError, EarFaceError
from .model import FUSION_MODES, MODALITIES, TASKS
from .scorefuse import METHODS, first_divergent_id, fuse_score_tables, read_scores, write_fused, write_scores

logger = logging.getLogger("earface")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
SNAPSHOT = "run_config.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route it through our code 1 instead
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _task_list(text: str) -> tuple[str, ...]:
    tasks = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise argparse.ArgumentTypeError(f"tasks must be a comma list from {{{', '.join(TASKS)}}}, got {text!r}")
    return tasks


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory (created if absent)")
    p.add_argument("--config", type=Path, default=None, help="flat key=value run config")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="earface", description="Profile/ear multitask age and gender classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="assign stratified train/val/test splits to a manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ratios", type=_float_list, default=None, help="train,val,test (default 0.8,0.1,0.1)")
    p.add_argument("--stratify", choices=("age", "gender"), default=None)

    p = sub.add_parser("train", help="train a model (one or more fine-tuning stages)")
    _common(p)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--fusion", choices=FUSION_MODES, default=None)
    p.add_argument("--tasks", type=_task_list, default=None, help="comma list, e.g. age,gender")
    p.add_argument("--modality", choices=MODALITIES, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--lambda-center", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a trained model and export class posteriors")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="test", help="train, val, test or all")

    p = sub.add_parser("score-fuse", help="max-confidence fusion of two score files")
    _common(p)
    p.add_argument("--scores-a", type=Path, required=True)
    p.add_argument("--scores-b", type=Path, required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--method", choices=METHODS, default=None)
    group.add_argument("--sweep", action="store_true", help="run all five confidence methods")
    p.add_argument("--labels", type=Path, default=None, help="manifest with ground truth for accuracy")
    p.add_argument("--task", choices=TASKS, default=None, help="task the scores belong to (with --labels)")
    p.add_argument("--model-ids", default="a,b", help="names recorded for the two inputs")

    p = sub.add_parser("report", help="tabulate metrics.json files")
    _common(p)
    p.add_argument("metrics", type=Path, nargs="+")

    p = sub.add_parser("synth", help="write a synthetic paired dataset")
    _common(p)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--domain", choices=("target", "proxy"), default="target")
    p.add_argument("--ratios", type=_float_list, default=None)
    return parser


def _snapshot(out: Path, command: str, values: dict) -> Path:
    return runconfig.dump(values, out / SNAPSHOT, header=f"earface {__version__} {command}")


def _config_values(args) -> dict:
    return runconfig.load(args.config) if args.config else {}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    values = _config_values(args)
    seed = args.seed if args.seed is not None else int(values.get("seed", 0))
    ratios = args.ratios or DEFAULT_RATIOS
    manifest = read_manifest(args.manifest)
    split = stratified_split(manifest, ratios, seed=seed, stratify_by=args.stratify)
    out_path = write_manifest(split, args.out / "manifest.csv")
    task = args.stratify or ("age" if split.has_labels("age") else "gender")
    names = AGE_GROUP_LABELS if task == "age" else ("F", "M")
    print(f"{'class':<8}{'train':>7}{'val':>7}{'test':>7}")
    for cls, counts in split.split_counts(task).items():
        print(f"{names[cls]:<8}{counts['train']:>7}{counts['val']:>7}{counts['test']:>7}")
    totals = split.split_counts()
    print(f"{'total':<8}{totals['train']:>7}{totals['val']:>7}{totals['test']:>7}")
    _snapshot(
        args.out,
        "prepare",
        {"manifest": args.manifest, "ratios": ",".join(map(repr, ratios)), "seed": seed, "stratify_by": task},
    )
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_model
    from .pipeline import run_stage_plan

    overrides = {
        "manifest": args.manifest,
        "fusion": args.fusion,
        "tasks": ",".join(args.tasks) if args.tasks else None,
        "modality": args.modality,
        "beta": args.beta,
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
        "lambda_center": args.lambda_center,
        "batch_size": args.batch_size,
        "seed": args.seed,
    }
    run = runconfig.resolve(_config_values(args), overrides)
    plan = run.stage_plan()
    _snapshot(args.out, "train", run.to_flat())
    batch = run.training.batch_size_for(run.fusion)
    print(f"training {run.spec.family} fusion={run.fusion} tasks={','.join(run.tasks)} batch={batch}")
    model = run_stage_plan(plan, checkpoint_dir=args.out / "stages")
    for stage, history in zip(plan.stages, model.histories):
        history.to_csv(args.out / f"history_{stage.name}.csv")
    path = save_model(model, args.out / "model.npz")
    last = model.histories[-1].epochs[-1]
    accs = " ".join(f"{k}={last[k]:.4f}" for k in sorted(last) if k.endswith("_acc"))
    print(f"final epoch: {accs}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_model
    from .pipeline import _labels, evaluate, predict_proba

    model = load_model(args.model)
    manifest = read_manifest(args.manifest)
    split = None if args.split == "all" else args.split
    ids, probs, pairs = predict_proba(model, manifest, split)
    metrics = evaluate(model, pairs, None)
    args.out.mkdir(parents=True, exist_ok=True)
    for task, p in probs.items():
        write_scores(args.out / f"scores_{task}.csv", ids, p)
    (args.out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2) + "\n", encoding="utf-8")
    _snapshot(
        args.out,
        "eval",
        {"model": args.model, "manifest": args.manifest, "split": args.split, "seed": args.seed or 0},
    )
    for task in model.tasks:
        acc = metrics.accuracy(task)
        if acc is not None:
            print(f"{task} accuracy: {acc:.4f} ({metrics.sample_count} samples)")
    return EXIT_OK


def _truth(manifest_path: Path, task: Optional[str], ids: Sequence[str], n_classes: int) -> tuple[str, dict]:
    manifest = read_manifest(manifest_path)
    if task is None:
        task = "age" if n_classes == len(AGE_GROUP_LABELS) else "gender"
    labels = {r.sample_id: r.label(task) for r in manifest.records}
    missing = [sid for sid in ids if labels.get(sid) is None]
    if missing:
        raise DataError(f"no {task} label for sample {missing[0]!r} in {manifest_path}")
    return task, labels


def cmd_score_fuse(args) -> int:
    ids_a, probs_a = read_scores(args.scores_a)
    ids_b, probs_b = read_scores(args.scores_b)
    divergent = first_divergent_id(ids_a, ids_b)
    if divergent is not None:
        raise DataError(f"score files cover different samples; first divergent id: {divergent}")
    if probs_a.shape[1] != probs_b.shape[1]:
        raise DataError(f"class counts differ: {probs_a.shape[1]} vs {probs_b.shape[1]}")
    model_ids = tuple(args.model_ids.split(","))
    if len(model_ids) != 2:
        raise UsageError("--model-ids needs two comma-separated names")
    methods = METHODS if args.sweep else (args.method or "basic",)
    truth = _truth(args.labels, args.task, ids_a, probs_a.shape[1]) if args.labels else None

    summary = {}
    bad_rows = 0
    for method in methods:
        result = fuse_score_tables(ids_a, probs_a, probs_b, method, model_ids)
        name = f"fused_{method}.csv"
        write_fused(args.out / name, result, ids_a)
        for sid, msg in result.errors.items():
            print(f"{method}: row {sid}: {msg}", file=sys.stderr)
        bad_rows += len(result.errors)
        entry = {"file": name, "fused": len(result.decisions), "errors": len(result.errors)}
        if truth is not None and result.decisions:
            _, labels = truth
            correct = sum(d.predicted_class == labels[sid] for sid, d in result.decisions.items())
            entry["accuracy"] = correct / len(result.decisions)
            print(f"{method}: accuracy {entry['accuracy']:.4f} over {len(result.decisions)} samples")
        else:
            print(f"{method}: fused {len(result.decisions)} samples")
        summary[method] = entry
    (args.out / "fusion_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _snapshot(
        args.out,
        "score-fuse",
        {
            "scores_a": args.scores_a,
            "scores_b": args.scores_b,
            "methods": ",".join(methods),
            "labels": args.labels or "none",
            "task": (truth[0] if truth else args.task) or "none",
            "model_ids": ",".join(model_ids),
        },
    )
    if bad_rows:
        print(f"{bad_rows} row(s) could not be fused; see messages above", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import Metrics, report

    metrics = []
    for path in args.metrics:
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
        metrics.append(Metrics.from_dict(d))
    rep = report(metrics)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.txt").write_text(rep.text, encoding="utf-8")
    (args.out / "report.csv").write_text(rep.csv, encoding="utf-8")
    _snapshot(args.out, "report", {"metrics": ",".join(str(p) for p in args.metrics)})
    print(rep.text, end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import make_synthetic_dataset

    seed = args.seed if args.seed is not None else 0
    ratios = args.ratios or DEFAULT_RATIOS
    manifest = make_synthetic_dataset(args.out, args.n, seed=seed, size=args.size, domain=args.domain, ratios=ratios)
    _snapshot(
        args.out,
        "synth",
        {"n": args.n, "size": args.size, "domain": args.domain, "ratios": ",".join(map(repr, ratios)), "seed": seed},
    )
    print(f"wrote {len(manifest.records)} pairs and {args.out / 'manifest.csv'}")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "score-fuse": cmd_score_fuse,
    "report": cmd_report,
    "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"earface: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, DegenerateInputError, OSError) as exc:
        print(f"earface: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EarFaceError, RuntimeError) as exc:
        print(f"earface: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
