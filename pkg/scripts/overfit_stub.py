"""Overfit a small network on stub-generated faces; a smoke test for the whole training stack.

    python3 scripts/overfit_stub.py --per-class 10 --max-epochs 300 --out /tmp/overfit
"""

from __future__ import annotations

import argparse
import tempfile
import time
from pathlib import Path

from resemote.augment import AugmentationScheme, StubGenerator, compute_plan, emit_manifest, run_generation
from resemote.data import NUM_CLASSES, Split, load_image_folder
from resemote.model import ModelConfig, build
from resemote.training import TrainConfig, evaluate_loss, fit, single_threaded


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--per-class", type=int, default=10)
    ap.add_argument("--max-epochs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None, help="keep images and checkpoints here")
    args = ap.parse_args()

    out = args.out or Path(tempfile.mkdtemp(prefix="overfit-"))
    plan = compute_plan([0] * NUM_CLASSES, AugmentationScheme.fixed(args.per_class), "stub")
    run_generation(emit_manifest(plan, seed=args.seed), StubGenerator(), out / "images")
    ds = load_image_folder(out / "images", Split.TRAIN, name="stub")

    model = build(ModelConfig.desk(seed=args.seed))
    cfg = TrainConfig(max_epochs=args.max_epochs, seed=args.seed, checkpoint_dir=str(out / "checkpoints"))
    start = time.perf_counter()
    with single_threaded():
        report = fit(model, ds, ds, cfg)
        _, accuracy = evaluate_loss(model, ds, cfg.batch_size)
    for e in report.epochs[:: max(1, len(report.epochs) // 20)]:
        print(f"epoch {e.epoch:>3}  train {e.train_loss:.4f}  val {e.val_loss:.4f}  acc {e.val_accuracy:.3f}  lr {e.lr:g}")
    print(f"{len(report.epochs)} epochs ({report.stop_reason}) in {time.perf_counter() - start:.0f}s; "
          f"train accuracy {100 * accuracy:.1f}%; outputs in {out}")


if __name__ == "__main__":
    main()
