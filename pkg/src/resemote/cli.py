"""Command-line entry point: ``resemote plan | generate | train | eval | gradcheck``.

Every command writes its outputs under ``--out-dir`` together with ``run.json``,
which echoes the effective configuration (config files merged with flags).

Exit codes: 0 success, 1 usage error, 2 data or verification error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .augment import (
    AugmentationPlan,
    AugmentationScheme,
    GenerationError,
    PromptManifest,
    VerificationError,
    compute_plan,
    emit_manifest,
    generator_from_spec,
    merge_and_verify,
    run_generation,
)
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    NUM_CLASSES,
    DataFormatError,
    LabeledDataset,
    Split,
    carve_validation,
    class_histogram,
    load_fer2013_csv,
    load_image_folder,
)
from .evaluation import class_accuracy_table, emit_confusion_csv, emit_report_json, evaluate
from .gradcheck import run_suite
from .model import ModelConfig, build
from .netpbm import NetpbmError
from .tensor import NonFiniteError
from .training import NumericFailure, TrainConfig, fit, single_threaded

log = logging.getLogger("resemote")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for data errors here
        raise UsageError(f"{self.prog}: {message}")


def _scheme(text: str) -> AugmentationScheme:
    try:
        return AugmentationScheme.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _histogram(text: str) -> list[int]:
    try:
        counts = [int(v) for v in text.replace(" ", "").split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"histogram must be {NUM_CLASSES} comma-separated integers") from None
    if len(counts) != NUM_CLASSES or min(counts) < 0:
        raise argparse.ArgumentTypeError(f"histogram must be {NUM_CLASSES} nonnegative integers, got {text!r}")
    return counts


# ---------------------------------------------------------------- shared helpers


def load_splits(path: str | Path) -> dict[Split, LabeledDataset]:
    """A FER-style CSV, a folder with train/val/test subfolders, or a single class-folder tree (train only)."""
    path = Path(path)
    if path.is_file():
        return load_fer2013_csv(path, name=path.stem)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset {path} does not exist")
    subdirs = {p.name.lower(): p for p in path.iterdir() if p.is_dir()}
    named = {s: subdirs[s.value] for s in Split if s.value in subdirs}
    if named:
        return {s: load_image_folder(p, s, name=path.name) for s, p in named.items()}
    return {Split.TRAIN: load_image_folder(path, Split.TRAIN, name=path.name)}


def resolve_model_config(spec: str | None, seed: int | None = None) -> ModelConfig:
    """Preset name (default, desk, tiny) or path to a JSON file."""
    spec = spec or "default"
    if Path(spec).is_file():
        cfg = ModelConfig.from_dict(json.loads(Path(spec).read_text(encoding="utf-8")))
        if seed is not None:
            cfg.seed = seed
    else:
        cfg = ModelConfig.preset(spec, seed or 0)
    cfg.validate()
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_manifest(out_dir: Path, command: str, argv: Sequence[str], effective: dict, outputs: list[str], **extra) -> None:
    _write_json(out_dir / "run.json", {
        "tool": "resemote",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "effective_config": effective,
        "outputs": outputs,
        **extra,
    })


def _args_dict(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, (Path, AugmentationScheme)) else v)
            for k, v in vars(args).items() if k != "handler"}


# ---------------------------------------------------------------- commands


def cmd_plan(args, argv) -> int:
    if (args.data is None) == (args.histogram is None):
        raise UsageError("plan: give exactly one of --data or --histogram")
    if args.data is not None:
        splits = load_splits(args.data)
        if Split.TRAIN not in splits:
            raise DataFormatError(f"{args.data} has no training split")
        hist = class_histogram(splits[Split.TRAIN])
        name = args.dataset_name or splits[Split.TRAIN].name
    else:
        hist, name = args.histogram, args.dataset_name or ""
    plan = compute_plan(hist, args.scheme, name)
    manifest = emit_manifest(plan, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "plan.json", plan.to_dict())
    manifest.save(out / "manifest.json")
    _run_manifest(out, "plan", argv, _args_dict(args), ["plan.json", "manifest.json"], histogram=hist)
    print(f"{name or 'dataset'} / {args.scheme.tag}")
    print(plan.table())
    print(f"{len(manifest.entries)} prompts -> {out / 'manifest.json'}")
    return EXIT_OK


def cmd_generate(args, argv) -> int:
    try:
        generator = generator_from_spec(args.generator)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = PromptManifest.load(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth = out / "synthetic"
    report = run_generation(manifest, generator, synth, workers=args.workers)
    body = report.to_dict()
    _write_json(out / "generation_report.json", body)
    _run_manifest(out, "generate", argv, _args_dict(args), ["synthetic/", "generation_report.json"])
    print(f"requested {report.requested}, generated {report.succeeded}, skipped {report.skipped}, failed {report.failed}")
    for name, cls in report.classes.items():
        for f in cls.failed:
            print(f"  failed {name} seed {f['seed']}: {f['reason']}", file=sys.stderr)
    if report.all_failed:
        raise GenerationError("every manifest entry failed to generate")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    base = {}
    if args.train_config:
        base = json.loads(Path(args.train_config).read_text(encoding="utf-8"))
    overrides = {
        "learning_rate": args.lr, "batch_size": args.batch_size, "max_epochs": args.max_epochs,
        "early_stop_patience": args.early_stop_patience, "plateau_patience": args.plateau_patience,
        "seed": args.seed,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["deterministic"] = args.deterministic
    base["checkpoint_dir"] = str(Path(args.out_dir) / "checkpoints")
    cfg = TrainConfig.from_dict(base)
    cfg.validate()
    return cfg


def cmd_train(args, argv) -> int:
    try:
        model_cfg = resolve_model_config(args.model_config, args.seed)
        train_cfg = _train_config(args)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"train: {exc}") from None
    splits = load_splits(args.data)
    if Split.TRAIN not in splits or not len(splits[Split.TRAIN]):
        raise DataFormatError(f"{args.data} has no training samples")
    train_ds = splits[Split.TRAIN]
    if Split.VAL in splits and len(splits[Split.VAL]):
        val_ds = splits[Split.VAL]
    else:
        train_ds, val_ds = carve_validation(train_ds, args.val_fraction, train_cfg.seed)
    if args.plan is not None:
        plan = AugmentationPlan.from_dict(json.loads(Path(args.plan).read_text(encoding="utf-8")))
        train_ds = merge_and_verify(train_ds, args.synth_dir, plan)
    elif args.synth_dir is not None:
        raise UsageError("train: --synth-dir needs the --plan it was generated from")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "model_config.json", model_cfg.to_dict())
    _write_json(out / "train_config.json", train_cfg.to_dict())
    model = build(model_cfg)
    log.info("training %d parameters on %d samples (val %d)", model.num_parameters(), len(train_ds), len(val_ds))
    report = fit(model, train_ds, val_ds, train_cfg)
    (out / "train_report.json").write_text(report.to_json(), encoding="utf-8")
    effective = {"args": _args_dict(args), "model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    _run_manifest(out, "train", argv, effective,
                  ["model_config.json", "train_config.json", "train_report.json", "checkpoints/best.remn", "checkpoints/last.remn"],
                  train_samples=len(train_ds), val_samples=len(val_ds), train_histogram=class_histogram(train_ds))
    last = report.epochs[-1]
    print(f"{len(report.epochs)} epochs ({report.stop_reason}); best epoch {report.best_epoch}; "
          f"final val loss {last.val_loss:.4f}, val accuracy {100 * last.val_accuracy:.2f}%")
    return EXIT_OK


def _sibling_model_config(checkpoint: Path) -> Path | None:
    for d in (checkpoint.parent, checkpoint.parent.parent):
        if (d / "model_config.json").is_file():
            return d / "model_config.json"
    return None


def cmd_eval(args, argv) -> int:
    ckpt = Path(args.checkpoint)
    spec = args.model_config or _sibling_model_config(ckpt)
    if spec is None:
        raise UsageError("eval: no --model-config given and no model_config.json next to the checkpoint")
    try:
        model_cfg = resolve_model_config(str(spec))
    except ValueError as exc:
        raise UsageError(f"eval: {exc}") from None
    split = Split(args.split)
    splits = load_splits(args.data)
    if split in splits:
        test_ds = splits[split]
    elif list(splits) == [Split.TRAIN] and Path(args.data).is_dir():
        test_ds = splits[Split.TRAIN]  # a bare class-folder tree is evaluated as a whole
    else:
        raise DataFormatError(f"{args.data} has no {split.value} split")
    model = load_checkpoint(ckpt, model_cfg)
    report = evaluate(model, test_ds, args.batch_size, args.dataset_name, args.augmentation, str(ckpt))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.notes["split"] = split.value
    emit_report_json(report, out / "eval_report.json")
    emit_confusion_csv(report.confusion, out / "confusion.csv")
    _run_manifest(out, "eval", argv, {"args": _args_dict(args), "model": model_cfg.to_dict()},
                  ["eval_report.json", "confusion.csv"])
    print(class_accuracy_table([report]), end="")
    print(f"{report.dataset} {report.augmentation}: {100 * report.overall_accuracy:.2f}% on {report.sample_count} samples")
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    start = time.perf_counter()
    entries = run_suite(args.seeds, args.model_coords, args.composite_coords, args.eps)
    elapsed = time.perf_counter() - start
    width = max(len(e.name) for e in entries)
    print(f"{'layer':<{width}}  {'worst rel err':>13}  {'tol':>7}  {'coords':>7}  {'kinks':>5}  status")
    for e in entries:
        print(f"{e.name:<{width}}  {e.worst:>13.3e}  {e.tol:>7.0e}  {e.checked:>7}  {e.excluded:>5}  "
              f"{'pass' if e.passed else 'FAIL'}")
    ok = all(e.passed for e in entries)
    print(f"{'all layers pass' if ok else 'gradient check FAILED'} ({args.seeds} seeds, {elapsed:.1f}s)")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck.json", {
            "passed": ok, "seconds": elapsed,
            "layers": [{"name": e.name, "worst": e.worst, "tol": e.tol, "checked": e.checked,
                        "excluded": e.excluded, "passed": e.passed} for e in entries],
        })
        _run_manifest(out, "gradcheck", argv, _args_dict(args), ["gradcheck.json"])
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out-dir", default="runs", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, default=None, help="seed for manifests, init and shuffling")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                        help="pin numerics to a single thread")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = _Parser(prog="resemote", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("plan", parents=[common], help="compute per-class targets and the prompt manifest")
    sp.add_argument("--data", help="FER-style CSV or image-folder dataset")
    sp.add_argument("--histogram", type=_histogram, help="comma-separated class counts instead of --data")
    sp.add_argument("--dataset-name", default=None)
    sp.add_argument("--scheme", type=_scheme, required=True, help="equalize | fixed:N | aug1..aug4")
    sp.set_defaults(handler=cmd_plan)

    sg = sub.add_parser("generate", parents=[common], help="render manifest prompts into <out-dir>/synthetic")
    sg.add_argument("--manifest", required=True)
    sg.add_argument("--generator", default="stub", help="stub | cmd:<command> (called as <command> PROMPT SEED)")
    sg.add_argument("--workers", type=int, default=1)
    sg.set_defaults(handler=cmd_generate)

    st = sub.add_parser("train", parents=[common], help="train a model, optionally on plan-verified synthetic data")
    st.add_argument("--data", required=True)
    st.add_argument("--synth-dir", default=None, help="generated images (<Class>/<seed>.ppm)")
    st.add_argument("--plan", default=None, help="plan.json the synthetic images must satisfy")
    st.add_argument("--model-config", default="default", help="preset (default, desk, tiny) or JSON file")
    st.add_argument("--train-config", default=None, help="JSON file; flags below override it")
    st.add_argument("--lr", type=float, default=None)
    st.add_argument("--batch-size", type=int, default=None)
    st.add_argument("--max-epochs", type=int, default=None)
    st.add_argument("--early-stop-patience", type=int, default=None)
    st.add_argument("--plateau-patience", type=int, default=None)
    st.add_argument("--val-fraction", type=float, default=0.1, help="hold-out when the data has no validation split")
    st.set_defaults(handler=cmd_train)

    se = sub.add_parser("eval", parents=[common], help="score a checkpoint on a test split")
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--data", required=True)
    se.add_argument("--model-config", default=None, help="defaults to model_config.json beside the checkpoint")
    se.add_argument("--split", default="test", choices=[s.value for s in Split])
    se.add_argument("--dataset-name", default=None)
    se.add_argument("--augmentation", default="Original", help="label for the report (Original, Aug1, ...)")
    se.add_argument("--batch-size", type=int, default=16)
    se.set_defaults(handler=cmd_eval)

    sc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer")
    sc.add_argument("--seeds", type=int, default=20)
    sc.add_argument("--eps", type=float, default=1e-4)
    sc.add_argument("--model-coords", type=int, default=100, help="sampled coordinates per seed, end-to-end model")
    sc.add_argument("--composite-coords", type=int, default=400, help="sampled coordinates per seed, SE/residual blocks")
    sc.set_defaults(handler=cmd_gradcheck, out_dir=None)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None and args.command in ("plan", "train"):
        args.seed = 0
    try:
        with single_threaded(args.deterministic):
            return args.handler(args, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, VerificationError, GenerationError, CheckpointError, NetpbmError,
            FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
