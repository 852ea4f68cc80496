"""Desk-scale overfit run: every model kind on 10 phantoms at 32^3 with the desk preset.

Writes, per model, the training log, best checkpoint and a per-class score CSV over all
phantoms, then prints one summary line per model.

    python scripts/overfit_run.py --out runs/overfit
"""

import argparse
import collections
import time
from pathlib import Path

import numpy as np

from vsx import data, metrics, models, train
from vsx.config import preset


def lowest_class_counts(rows):
    by_volume = collections.defaultdict(dict)
    for r in rows:
        by_volume[r["volume_id"]][r["class"]] = r["dice"]
    return collections.Counter(min(scores, key=scores.get) for scores in by_volume.values())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--models", nargs="+", default=list(models.KINDS), choices=models.KINDS)
    ap.add_argument("--count", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    manifest = data.write_phantom_set(out / "phantoms", args.count, (32, 32, 32), seed=args.seed)
    splits = {s: data.load_split(manifest, s) for s in data.SPLITS}
    cfg = preset("desk").trainer

    for kind in args.models:
        run = out / kind
        run.mkdir(parents=True, exist_ok=True)
        model = models.build(kind, 4, 8, seed=args.seed)
        t0 = time.perf_counter()
        result = train.train(model, splits["train"], splits["val"], cfg, seed=args.seed,
                             log_path=run / "train_log.csv", checkpoint_path=run / "best.vsxc")
        minutes = (time.perf_counter() - t0) / 60
        rows = []
        for split, cases in splits.items():
            rows += train.evaluation_rows(model, cases, split)
        metrics.write_report_csv(rows + metrics.summary_rows(rows), run / "scores.csv")
        last = result.history[-1]
        low = lowest_class_counts(rows)
        print(f"{kind}: {result.epochs} epochs in {minutes:.1f} min, train dice {last['train_dice']:.4f}, "
              f"val dice {last['val_dice']:.4f}, lowest class per phantom {dict(low)}")
        per_class = {c: np.mean([r["dice"] for r in rows if r["class"] == c]) for c in metrics.CLASS_NAMES}
        print("  mean dice " + " ".join(f"{c}={v:.4f}" for c, v in per_class.items()))


if __name__ == "__main__":
    main()
