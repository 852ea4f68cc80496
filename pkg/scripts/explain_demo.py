"""Grad-CAM and attention heatmaps for one phantom from a trained checkpoint.

    python scripts/explain_demo.py runs/overfit/attunet/best.vsxc runs/overfit/phantoms/manifest.jsonl

Prints the mean heatmap value inside and outside the ground-truth region of each class
and writes the volumes plus mid-slice PGM/PPM images under --out.
"""

import argparse
from pathlib import Path

from vsx import data, models, xai


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("manifest")
    ap.add_argument("--case", default=None, help="case id (default: first test case)")
    ap.add_argument("--out", default="runs/heatmaps")
    args = ap.parse_args()

    model, _ = models.load_checkpoint(args.checkpoint)
    entries = data.read_manifest(args.manifest)
    entry = next((e for e in entries if e.id == args.case), None) if args.case else \
        next((e for e in entries if e.split == "test"), entries[0])
    case = data.load_case(entry, Path(args.manifest).parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    for i, cls in enumerate(xai.CLASS_NAMES):
        heat = xai.grad_cam(model, case.image, cls)
        inside = case.mask[i].astype(bool)
        print(f"gradcam {cls}: inside {heat.grid[inside].mean():.3f} outside {heat.grid[~inside].mean():.3f}")
        xai.export_heatmap(heat, out / f"{case.case_id}_gradcam_{cls}.vsxv", slice_axis=0)
    if model.kind == "attunet":
        for mode in ("gate", "softmax"):
            heat = xai.attention_map(model, case.image, mode=mode)
            wt = case.mask[0].astype(bool)
            print(f"attention ({mode}): inside WT {heat.grid[wt].mean():.3f} outside {heat.grid[~wt].mean():.3f}")
            xai.export_heatmap(heat, out / f"{case.case_id}_attention_{mode}.vsxv", slice_axis=0)
    print(f"wrote heatmaps to {out}")


if __name__ == "__main__":
    main()
