"""Experiment orchestration: config to trained checkpoint plus metrics files.

The train loop emits one metrics row per evaluation interval and writes
metrics.csv with full-precision floats, so a repeated run with the same
config produces a byte-identical file.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import pipeline as pl
from . import synthesis as syn
from . import tensor as T
from . import training as tr
from .config import ExperimentConfig
from .data import Dataset, generate_synthetic, load_cifar10, load_mnist

METRICS_COLUMNS = (
    "step", "train_loss", "lm_loss", "synth_loss",
    "eval_acc_lm", "eval_acc_full", "epsilon", "skip_rate_at_default_threshold",
)


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    kind = cfg.dataset["kind"]
    if kind == "synthetic":
        return generate_synthetic(cfg.dataset["spec"])
    if kind == "mnist":
        return load_mnist(cfg.dataset["path"])
    return load_cifar10(cfg.dataset["path"])


def teacher_from_checkpoint(path) -> tr.DistillConfig:
    """A teacher is a single-basis checkpoint; its bank is a plain backbone."""
    state, _ = ck.load_checkpoint(path)
    if state.bank.n_bases != 1:
        raise ValueError(f"teacher checkpoint must hold a single-basis model, got {state.bank.n_bases}")
    params = syn.select_params(state.bank, [0] * state.bank.n_coefficient_rows)
    return tr.DistillConfig(teacher_spec=state.bank.spec, teacher_params=params)


def build_state(cfg: ExperimentConfig) -> tuple[tr.TrainState, tr.LossConfig]:
    state = tr.init_state(cfg.lm, cfg.bank_spec, cfg.n_bases, cfg.shared_layers,
                          cfg.synth_cfg, seed=cfg.seed)
    loss = cfg.loss
    if cfg.teacher_checkpoint is not None:
        distill = teacher_from_checkpoint(cfg.teacher_checkpoint)
        distill = tr.DistillConfig(
            teacher_spec=distill.teacher_spec, teacher_params=distill.teacher_params,
            policy=cfg.distill_policy, soft_weight=cfg.distill_soft_weight)
        loss = tr.LossConfig(lm_weight=loss.lm_weight, l2_weight=loss.l2_weight,
                             distill=distill)
    return state, loss


# ---------------------------------------------------------------------------
# evaluation


def lm_accuracy(state: tr.TrainState, dataset: Dataset) -> float:
    initial, _ = pl.lm_forward(state.lm, state.lm_params, T.Tensor(dataset.images))
    return float(np.mean(np.argmax(initial.data, axis=1) == dataset.labels))


def pipeline_accuracy(state: tr.TrainState, dataset: Dataset, threshold: float) -> float:
    hits = 0
    for i in range(len(dataset)):
        res = pl.infer(state.lm, state.lm_params, state.bank, state.synth_cfg,
                       dataset.images[i:i + 1], threshold)
        hits += res.prediction == dataset.labels[i]
    return hits / len(dataset)


def full_accuracy(state: tr.TrainState, dataset: Dataset) -> float:
    """Specialist accuracy with termination disabled."""
    return pipeline_accuracy(state, dataset, threshold=1.01)


def skip_rate(state: tr.TrainState, dataset: Dataset, threshold: float) -> float:
    initial, _ = pl.lm_forward(state.lm, state.lm_params, T.Tensor(dataset.images))
    skips = sum(
        pl.confidence(initial.data[i]) >= threshold for i in range(len(dataset)))
    return skips / len(dataset)


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def run_train(cfg: ExperimentConfig, log=None) -> dict:
    """Train per config; writes metrics.csv and checkpoint/ under output_dir."""
    train, evalset = load_dataset(cfg)
    state, loss_cfg = build_state(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)

    rows = []

    def record(metrics):
        rows.append({
            "step": state.step,
            "train_loss": metrics["loss"],
            "lm_loss": metrics["lm_loss"],
            "synth_loss": metrics["synth_loss"],
            "eval_acc_lm": lm_accuracy(state, evalset),
            "eval_acc_full": full_accuracy(state, evalset),
            "epsilon": metrics["epsilon"],
            "skip_rate_at_default_threshold": skip_rate(state, evalset, cfg.default_threshold),
        })
        if log is not None:
            log(rows[-1])

    schedule = cfg.schedule
    metrics = None
    while state.step < schedule.total_steps:
        batch = tr.sample_batch(train, schedule, state.step)
        state, metrics = tr.train_step(state, batch, schedule, loss_cfg)
        if schedule.eval_interval > 0 and state.step % schedule.eval_interval == 0:
            record(metrics)
    if metrics is not None and (not rows or rows[-1]["step"] != state.step):
        record(metrics)

    if cfg.finetune_steps > 0:
        finetune_schedule = tr.TrainSchedule(
            total_steps=cfg.finetune_steps,  # additional steps past state.step
            lr_base=schedule.lr_base, lr_decay_factor=schedule.lr_decay_factor,
            lr_decay_interval=schedule.lr_decay_interval,
            batch_size=schedule.batch_size, seed=schedule.seed,
            optimizer=schedule.optimizer, clip_norm=schedule.clip_norm,
            eval_interval=schedule.eval_interval)
        state = tr.finetune_one_hot(state, train, finetune_schedule, loss_cfg)

    metrics_path = cfg.output_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])

    ckpt_path = cfg.output_dir / "checkpoint"
    ck.save_checkpoint(state, ckpt_path, config=cfg.raw)

    return {
        "steps": state.step,
        "metrics_csv": str(metrics_path),
        "checkpoint": str(ckpt_path),
        "final_eval_acc_full": rows[-1]["eval_acc_full"] if rows else None,
        "final_eval_acc_lm": rows[-1]["eval_acc_lm"] if rows else None,
    }


# ---------------------------------------------------------------------------
# coefficient export


def export_coefficients(state: tr.TrainState, dataset: Dataset, out_path) -> int:
    """Write one CSV row per (image, non-shared layer, basis); returns rows written."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    bank = state.bank
    nonshared = bank.nonshared_indices()
    _, raw = pl.lm_forward(state.lm, state.lm_params, T.Tensor(dataset.images))
    count = 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "label", "layer", "basis", "coefficient"])
        for i in range(len(dataset)):
            alpha = pl.coefficients_from_raw(
                T.row(raw, i), state.synth_cfg, bank.n_coefficient_rows, bank.n_bases)
            for r, layer in enumerate(nonshared):
                for n in range(bank.n_bases):
                    writer.writerow([
                        i, int(dataset.labels[i]), layer, n,
                        repr(float(alpha.values.data[r, n])),
                    ])
                    count += 1
    return count
