"""``vsx`` command line: phantom, train, eval, explain.

Errors print one line to stderr, ``vsx: error: <Kind>: <message>``, and exit nonzero
(2 for bad arguments, 1 for everything else).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from . import config as C
from . import data, metrics, models, train, xai
from .errors import DataError, GraphStateError, ShapeError

log = logging.getLogger("vsx")


class ArgumentError(ValueError):
    pass


def _threads():
    raw = os.environ.get("VSX_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ArgumentError(f"VSX_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ArgumentError(f"VSX_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _parse_set(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise ArgumentError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> C.RunConfig:
    """Preset, then config file, then explicit flags; later sources win."""
    if args.config:
        text = Path(args.config).read_text()
        cfg = C.loads(text, base=C.preset(args.preset) if args.preset else None)
    else:
        cfg = C.preset(args.preset or "desk")
    overrides = _parse_set(args.set or [])
    for flag, key in (("model", "model.kind"), ("width", "model.base_width"), ("manifest", "manifest"),
                      ("seed", "seed"), ("out", "out"), ("max_epochs", "trainer.max_epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    cfg = C.apply_overrides(cfg, overrides)
    if cfg.model.kind not in models.KINDS:
        raise ArgumentError(f"unknown model {cfg.model.kind!r}; expected one of {models.KINDS}")
    return cfg


# -- commands ----------------------------------------------------------------------

def cmd_phantom(args) -> int:
    if args.count < 0:
        raise ArgumentError("--count must be >= 0")
    manifest = data.write_phantom_set(args.out, args.count, tuple(args.dims), seed=args.seed)
    counts = {s: 0 for s in data.SPLITS}
    for e in data.read_manifest(manifest):
        counts[e.split] += 1
    print(f"{manifest} train={counts['train']} val={counts['val']} test={counts['test']}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    manifest = Path(cfg.manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    train_cases = data.load_split(manifest, "train")
    val_cases = data.load_split(manifest, "val")
    start_epoch = 0
    if args.resume:
        model, meta = models.load_checkpoint(args.resume)
        cfg.model.kind, cfg.model.base_width = model.kind, model.base_width
        start_epoch = int(meta.get("epoch", -1)) + 1
        cfg.trainer.lr = float(meta.get("lr", cfg.trainer.lr))
    else:
        in_ch = train_cases[0].image.shape[0] if train_cases else 4
        model = models.build(cfg.model.kind, in_ch, cfg.model.base_width, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, out / "config.txt")
    result = train.train(model, train_cases, val_cases, cfg.trainer, seed=cfg.seed,
                         log_path=out / "train_log.csv", checkpoint_path=out / "best.vsxc",
                         start_epoch=start_epoch)
    last = result.history[-1]
    print(f"{out / 'best.vsxc'} epochs={result.epochs} best_epoch={result.best_epoch} "
          f"best_val_loss={result.best_val_loss:.6g} train_dice={last['train_dice']:.4f} "
          f"val_dice={last['val_dice']:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, _ = models.load_checkpoint(args.checkpoint)
    cases = data.load_split(args.manifest, args.split)
    if not cases:
        log.warning("split %r of %s has no cases; writing header only", args.split, args.manifest)
    rows = train.evaluation_rows(model, cases, args.split, args.threshold)
    out = Path(args.out)
    if out.suffix != ".csv":
        out = out / f"eval_{args.split}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(rows + metrics.summary_rows(rows), out)
    print(out)
    return 0


def cmd_explain(args) -> int:
    model, _ = models.load_checkpoint(args.checkpoint)
    if args.method == "attention" and model.kind != "attunet":
        raise ArgumentError(f"attention maps need an attunet checkpoint, got {model.kind}")
    entries = [e for e in data.read_manifest(args.manifest) if e.id == args.case]
    if not entries:
        raise DataError(f"case {args.case!r} not in {args.manifest}")
    case = data.load_case(entries[0], Path(args.manifest).parent)
    if args.method == "gradcam":
        heat = xai.grad_cam(model, case.image, args.target_class)
    else:
        heat = xai.attention_map(model, case.image, mode=args.attention_mode)
        heat.target_class = xai.CLASS_NAMES[xai.class_index(args.target_class)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{case.case_id}_{args.method}_{heat.target_class}.vsxv"
    files = xai.export_heatmap(heat, path, slice_axis=args.slice_axis, slices=args.slices)
    for f in files:
        print(f)
    return 0


# -- parser ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # argparse prints usage plus a message over two lines; keep failures to one.
    def error(self, message):
        raise ArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vsx", description="Volumetric tumor segmentation on a from-scratch autodiff engine.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="generate synthetic phantom cases and a manifest")
    ph.add_argument("--count", type=int, default=10)
    ph.add_argument("--dims", type=int, nargs=3, default=(32, 32, 32), metavar=("D", "H", "W"))
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out", default="phantoms")
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train a model; writes best.vsxc, train_log.csv, config.txt")
    tr.add_argument("--config")
    tr.add_argument("--preset", choices=("desk", "paper"))
    tr.add_argument("--model", choices=models.KINDS)
    tr.add_argument("--width", type=int)
    tr.add_argument("--manifest")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out")
    tr.add_argument("--max-epochs", type=int, dest="max_epochs")
    tr.add_argument("--resume", metavar="CHECKPOINT")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="per-volume, per-class scores with mean and SE rows")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--split", choices=data.SPLITS, default="test")
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--out", default="eval.csv")
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("explain", help="Grad-CAM or attention heatmap for one case")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--manifest", required=True)
    ex.add_argument("--case", required=True)
    ex.add_argument("--class", dest="target_class", default="WT")
    ex.add_argument("--method", choices=("gradcam", "attention"), default="gradcam")
    ex.add_argument("--attention-mode", choices=("gate", "softmax"), default="gate")
    ex.add_argument("--slice-axis", type=int, choices=(0, 1, 2), default=0)
    ex.add_argument("--slices", choices=("mid", "all"), default="mid")
    ex.add_argument("--out", default="heatmaps")
    ex.set_defaults(func=cmd_explain)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"vsx: error: {kind}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ArgumentError as exc:
        return _fail("ArgumentError", exc, 2)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _threads():
            return args.func(args)
    except (ArgumentError, KeyError) as exc:
        return _fail("ArgumentError", exc.args[0] if exc.args else exc, 2)
    except (DataError, ShapeError, GraphStateError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    except OSError as exc:
        return _fail("IOError", exc, 1)
    except ValueError as exc:
        return _fail("ValueError", exc, 2)


if __name__ == "__main__":
    sys.exit(main())
