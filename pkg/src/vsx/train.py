"""Training and evaluation loops."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as M
from . import models
from ._io import atomic_write
from .config import TrainerConfig
from .data import CaseRecord
from .errors import DataError
from .optim import Adam, EarlyStopping, GradientAccumulator, ReduceLROnPlateau
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "train_dice", "val_dice",
               "train_jaccard", "val_jaccard", "lr", "seconds")


def stack_cases(cases: Sequence[CaseRecord]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([c.image for c in cases]).astype(np.float32)
    y = np.stack([c.mask for c in cases]).astype(np.float32)
    return x, y


def check_cases(cases: Sequence[CaseRecord]) -> None:
    for c in cases:
        for size, axis in zip(c.image.shape[1:], "DHW"):
            if size % 2**models.LEVELS:
                raise DataError(f"case {c.case_id}: extent {size} along {axis} is not a multiple of "
                                f"{2 ** models.LEVELS}; pad it first")


def volume_scores(probabilities: np.ndarray, truth: np.ndarray, threshold: float) -> tuple[float, float]:
    """Mean hard dice and jaccard over classes for one volume (C x D x H x W)."""
    mask = probabilities > threshold
    dice = [M.dice_score(mask[c], truth[c]) for c in range(truth.shape[0])]
    jac = [M.jaccard_score(mask[c], truth[c]) for c in range(truth.shape[0])]
    return float(np.mean(dice)), float(np.mean(jac))


def evaluate(model: models.ModelGraph, cases: Sequence[CaseRecord], batch_size: int = 2,
             threshold: float = 0.5) -> dict:
    """Loss and mean per-volume dice/jaccard without recording a graph."""
    if not cases:
        return {"loss": math.nan, "dice": math.nan, "jaccard": math.nan}
    losses, dices, jacs = [], [], []
    with no_grad():
        for i in range(0, len(cases), batch_size):
            chunk = cases[i : i + batch_size]
            x, y = stack_cases(chunk)
            probs = models.forward(model, Tensor(x)).probabilities
            losses.append(M.bce_dice_loss(probs, y, per_channel=True).item() * len(chunk))
            for p, t in zip(probs.data, y):
                d, j = volume_scores(p, t, threshold)
                dices.append(d)
                jacs.append(j)
    return {"loss": sum(losses) / len(cases), "dice": float(np.mean(dices)), "jaccard": float(np.mean(jacs))}


@dataclass
class TrainResult:
    epochs: int
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def format_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(r[k])) if k != "epoch" else r[k]) for k in LOG_COLUMNS})
    return buf.getvalue()


def train(model: models.ModelGraph, train_cases: Sequence[CaseRecord], val_cases: Sequence[CaseRecord],
          cfg: TrainerConfig, seed: int = 0, log_path=None, checkpoint_path=None,
          start_epoch: int = 0) -> TrainResult:
    """Minibatch training on BCE + per-class Dice loss with Adam, plateau decay and early stopping.

    The training columns of the log are measured on the minibatches as they are
    trained (before each update), validation columns after the epoch. ``max_epochs``
    caps the epoch index, so a run resumed at ``start_epoch`` stops where an
    uninterrupted one would.
    """
    check_cases(list(train_cases) + list(val_cases))
    if not train_cases:
        raise DataError("no training cases")
    if start_epoch >= cfg.max_epochs:
        raise ValueError(f"resuming at epoch {start_epoch} leaves nothing to do with max_epochs={cfg.max_epochs}")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    sched = ReduceLROnPlateau(opt, cfg.plateau_factor, cfg.plateau_patience)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)
    acc = GradientAccumulator(opt, cfg.grad_accum_steps)
    result = TrainResult(0, -1, math.inf)
    cases = list(train_cases)

    for epoch in range(start_epoch, cfg.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(cases))
        losses, dices, jacs = [], [], []
        for i in range(0, len(order), cfg.batch_size):
            chunk = [cases[j] for j in order[i : i + cfg.batch_size]]
            x, y = stack_cases(chunk)
            probs = models.forward(model, Tensor(x)).probabilities
            loss = M.bce_dice_loss(probs, y, per_channel=True)
            losses.append(loss.item() * len(chunk))
            for p, t in zip(probs.data, y):
                d, j = volume_scores(p, t, cfg.threshold)
                dices.append(d)
                jacs.append(j)
            acc.accumulate(loss)
        acc.flush()
        val = evaluate(model, val_cases, cfg.batch_size, cfg.threshold)
        monitored = val["loss"] if val_cases else sum(losses) / len(cases)
        row = {
            "epoch": epoch,
            "train_loss": sum(losses) / len(cases),
            "val_loss": val["loss"],
            "train_dice": float(np.mean(dices)),
            "val_dice": val["dice"],
            "train_jaccard": float(np.mean(jacs)),
            "val_jaccard": val["jaccard"],
            "lr": opt.lr,
            "seconds": time.perf_counter() - t0,
        }
        result.history.append(row)
        result.epochs += 1
        log.info("epoch %d train_loss %.4f val_loss %.4f train_dice %.4f val_dice %.4f lr %.2e",
                 epoch, row["train_loss"], row["val_loss"], row["train_dice"], row["val_dice"], opt.lr)
        stop = stopper.step(monitored)
        if stopper.improved:
            result.best_epoch = epoch
            result.best_val_loss = monitored
            if checkpoint_path is not None:
                models.save_checkpoint(model, checkpoint_path, {
                    "epoch": epoch, "val_loss": monitored, "lr": opt.lr, "seed": seed})
        sched.step(monitored)
        if log_path is not None:
            atomic_write(Path(log_path), format_log(result.history).encode("utf-8"))
        if stop:
            result.stopped_early = True
            break
    return result


def evaluation_rows(model: models.ModelGraph, cases: Sequence[CaseRecord], phase: str,
                    threshold: float = 0.5) -> list[dict]:
    """Per-volume, per-class metric rows for CSV export."""
    rows = []
    with no_grad():
        for case in cases:
            pred = models.predict(model, Tensor(case.image[None].astype(np.float32)), threshold)
            report = M.per_class_report(pred, case.mask)
            rows.extend(M.report_rows(model.kind, phase, case.case_id, report))
    return rows
