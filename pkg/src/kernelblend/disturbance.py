"""Coefficient corruption study: how much does the right blend matter?

Each disturbance replaces the predicted coefficients before synthesis -
with their argmax one-hot, the dataset mean, a uniform blend, or a random
within-row shuffle - either at every non-shared layer or at a single one.
Early termination is disabled throughout; the question is about the
specialist, not the gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import pipeline as pl
from . import synthesis as syn
from . import tensor as T
from .data import Dataset

KINDS = ("correct", "top1", "mean", "uniform", "shuffled")


@dataclass(frozen=True)
class Disturbance:
    kind: str
    layer: int | None = None  # bank layer index; None disturbs all layers
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}")


def mean_coefficients(lm: pl.LightweightModel, params: pl.LMParams,
                      bank: syn.BasisBank, cfg: syn.SynthesisConfig,
                      dataset: Dataset) -> np.ndarray:
    """Per-layer mean coefficient rows over an evaluation set."""
    total = np.zeros((bank.n_coefficient_rows, bank.n_bases))
    _, raw = pl.lm_forward(lm, params, T.Tensor(dataset.images))
    for b in range(len(dataset)):
        alpha = pl.coefficients_from_raw(
            T.row(raw, b), cfg, bank.n_coefficient_rows, bank.n_bases)
        total += alpha.values.data
    return total / len(dataset)


def disturb(alpha: syn.CoefficientMatrix, disturbance: Disturbance,
            rows: list[int] | None = None,
            mean_table: np.ndarray | None = None,
            rng: np.random.Generator | None = None) -> syn.CoefficientMatrix:
    """Corrupt the selected rows (all by default) of one coefficient matrix."""
    if disturbance.kind == "correct":
        return alpha
    v = alpha.values.data.copy()
    targets = range(v.shape[0]) if rows is None else rows
    if disturbance.kind == "top1":
        for r in targets:
            hard = np.zeros_like(v[r])
            hard[np.argmax(v[r])] = 1.0
            v[r] = hard
    elif disturbance.kind == "uniform":
        for r in targets:
            v[r] = 1.0 / alpha.n_bases
    elif disturbance.kind == "mean":
        if mean_table is None:
            raise ValueError("mean disturbance requires a precomputed mean table")
        for r in targets:
            v[r] = mean_table[r]
    elif disturbance.kind == "shuffled":
        if rng is None:
            rng = np.random.default_rng(disturbance.seed)
        for r in targets:
            v[r] = v[r, rng.permutation(alpha.n_bases)]
    return syn.CoefficientMatrix(values=T.Tensor(v), mode=alpha.mode)


def _rows_for_layer(bank: syn.BasisBank, layer: int | None) -> list[int] | None:
    """Map a bank layer index to coefficient rows; a shared layer maps to none."""
    if layer is None:
        return None
    if not 0 <= layer < bank.spec.num_layers:
        raise ValueError(f"layer {layer} out of range [0, {bank.spec.num_layers})")
    nonshared = bank.nonshared_indices()
    return [nonshared.index(layer)] if layer in nonshared else []


def evaluate_disturbed(lm: pl.LightweightModel, params: pl.LMParams,
                       bank: syn.BasisBank, cfg: syn.SynthesisConfig,
                       dataset: Dataset, disturbance: Disturbance,
                       mean_table: np.ndarray | None = None) -> float:
    """Specialist accuracy with disturbed coefficients, no early termination."""
    if disturbance.kind == "mean" and mean_table is None:
        mean_table = mean_coefficients(lm, params, bank, cfg, dataset)
    rows = _rows_for_layer(bank, disturbance.layer)
    rng = np.random.default_rng([disturbance.seed, 0x5F])
    correct = 0
    _, raw = pl.lm_forward(lm, params, T.Tensor(dataset.images))
    for b in range(len(dataset)):
        alpha = pl.coefficients_from_raw(
            T.row(raw, b), cfg, bank.n_coefficient_rows, bank.n_bases)
        alpha = disturb(alpha, disturbance, rows=rows, mean_table=mean_table, rng=rng)
        logits = bb.forward(syn.synthesize(bank, alpha), bank.spec,
                            T.Tensor(dataset.images[b:b + 1]))
        correct += int(np.argmax(logits.data[0])) == dataset.labels[b]
    return correct / len(dataset)


def layer_sweep(lm: pl.LightweightModel, params: pl.LMParams, bank: syn.BasisBank,
                cfg: syn.SynthesisConfig, dataset: Dataset,
                kind: str = "shuffled", seeds: int = 5) -> list[dict]:
    """Disturb one layer at a time; report mean and std accuracy over seeds."""
    results = []
    for layer in range(bank.spec.num_layers):
        accs = [
            evaluate_disturbed(lm, params, bank, cfg, dataset,
                               Disturbance(kind=kind, layer=layer, seed=s))
            for s in range(seeds)
        ]
        results.append({
            "layer": layer,
            "shared": bool(bank.share_mask[layer]),
            "accuracy_mean": float(np.mean(accs)),
            "accuracy_std": float(np.std(accs)),
        })
    return results
