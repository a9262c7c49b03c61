"""Three-phase training: encoder-decoder, then refinement, then everything."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetConfig, regenerate_epoch
from .losses import LossConfig, alpha_prediction_loss, overall_loss
from .model import (
    full_backward,
    full_forward,
    stage1_backward,
    stage1_forward,
    stage2_backward,
    stage2_forward,
    to_nchw,
    trimap_channel,
)
from .tensor_core import Adam
from .trimap import UNKNOWN

logger = logging.getLogger(__name__)

PHASES = ("stage1", "stage2", "finetune")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainPlan:
    stage1_steps: int = 1000
    stage2_steps: int = 500
    finetune_steps: int = 500
    batch_size: int = 4
    lr: float = 1e-5
    seed: int = 0
    # a phase also ends once the mean loss over the last window improved by
    # less than this fraction relative to the window before it
    convergence_window: int = 100
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if min(self.stage1_steps, self.stage2_steps, self.finetune_steps) < 0:
            raise ValueError("step budgets must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def steps(self, phase):
        return {"stage1": self.stage1_steps, "stage2": self.stage2_steps,
                "finetune": self.finetune_steps}[phase]


def stack_batch(samples):
    """Stack composite samples into the NCHW arrays the model and losses consume."""
    alpha = np.stack([s.alpha for s in samples])[:, None].astype(np.float32)
    return {
        "image": to_nchw(np.stack([s.image for s in samples])).astype(np.float32),
        "fg": to_nchw(np.stack([s.fg for s in samples])).astype(np.float32),
        "bg": to_nchw(np.stack([s.bg for s in samples])).astype(np.float32),
        "alpha": alpha,
        "trimap": trimap_channel(np.stack([s.trimap for s in samples])),
        "mask": np.stack([s.trimap == UNKNOWN for s in samples])[:, None],
    }


def iter_batches(dataset, data_cfg, batch_size, phase_index, random_dilation):
    """Endless stream of training batches, one regenerated epoch after another."""
    epoch = 0
    while True:
        buf = []
        key = phase_index * 1_000_000 + epoch
        for sample in regenerate_epoch(dataset, key, data_cfg, random_dilation=random_dilation):
            if not (sample.trimap == UNKNOWN).any():
                continue
            buf.append(sample)
            if len(buf) == batch_size:
                yield stack_batch(buf)
                buf = []
        if buf:
            yield stack_batch(buf)
        epoch += 1


def _converged(losses, window, tol):
    if window <= 0 or len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window:-window]))
    cur = float(np.mean(losses[-window:]))
    return prev > 0 and (prev - cur) / prev < tol


def train_step(model, optimizer, batch, phase, loss_cfg):
    """One optimizer update; returns the history record fields for the step."""
    if phase == "stage1":
        alpha, cache = stage1_forward(model, batch["image"], batch["trimap"])
        loss, grad, parts = overall_loss(alpha, batch, loss_cfg)
        grads = stage1_backward(grad, cache)
    elif phase == "stage2":
        alpha_raw, _ = stage1_forward(model, batch["image"], batch["trimap"])
        refined, cache = stage2_forward(model, batch["image"], alpha_raw)
        loss, grad = alpha_prediction_loss(refined, batch["alpha"], batch["mask"], loss_cfg)
        grads, _ = stage2_backward(grad, cache)
        parts = {"alpha": loss, "comp": None}
    elif phase == "finetune":
        refined, cache = full_forward(model, batch["image"], batch["trimap"])
        loss, grad, parts = overall_loss(refined, batch, loss_cfg)
        grads = full_backward(grad, cache)
    else:
        raise ValueError(f"unknown phase {phase!r}")
    if not math.isfinite(loss):
        return loss, parts, None
    grads = {k: g for k, g in grads.items() if k.split(".")[0] not in model.frozen}
    optimizer.step(model.params, grads)
    return loss, parts, grads


def train(model, dataset, plan, data_cfg=None, loss_cfg=None, optimizer=None,
          phases=PHASES, callback=None):
    """Run the requested phases in order, updating ``model.params`` in place.

    Phase ``stage1`` trains the encoder-decoder on the overall loss with all
    augmentations; ``stage2`` freezes stage 1 and trains the refinement on the
    alpha loss alone, without random trimap dilation; ``finetune`` trains both
    stages on the overall loss of the refined output.

    Returns ``(model, history, optimizer)``; ``history`` has one dict per step
    with keys ``step, phase, L_alpha, L_c, L_overall``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    data_cfg = data_cfg or DatasetConfig(seed=plan.seed)
    loss_cfg = loss_cfg or LossConfig()
    optimizer = optimizer or Adam(lr=plan.lr)
    unknown = [p for p in phases if p not in PHASES]
    if unknown:
        raise ValueError(f"unknown phases {unknown}")
    history = []
    step = 0
    for phase in PHASES:
        if phase not in phases or plan.steps(phase) == 0:
            continue
        model.frozen = {"s1"} if phase == "stage2" else set()
        batches = iter_batches(dataset, data_cfg, plan.batch_size, PHASES.index(phase),
                               random_dilation=phase != "stage2")
        phase_losses = []
        for _ in range(plan.steps(phase)):
            loss, parts, _ = train_step(model, optimizer, next(batches), phase, loss_cfg)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at step {step} ({phase})")
            record = {"step": step, "phase": phase, "L_alpha": parts["alpha"],
                      "L_c": parts["comp"], "L_overall": loss}
            history.append(record)
            phase_losses.append(loss)
            if callback is not None:
                callback(record)
            step += 1
            if _converged(phase_losses, plan.convergence_window, plan.convergence_tol):
                logger.info("%s converged after %d steps", phase, len(phase_losses))
                break
    model.frozen = set()
    return model, history, optimizer


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "phase", "L_alpha", "L_c", "L_overall"])
        writer.writeheader()
        for rec in history:
            writer.writerow({k: ("" if v is None else v) for k, v in rec.items()})
