"""Analytic cost accounting and the early-termination trade-off sweep.

All numbers are multiplies per single image. The expected average cost
under a skip rate p is the two-point mixture p*c_lm + (1-p)*c_total, which
is also exactly what averaging per-sample spend gives, so the sweep checks
one against the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import pipeline as pl
from . import synthesis as syn
from .data import Dataset


@dataclass(frozen=True)
class CostReport:
    lm_madds: int
    stage2_madds: int
    synthesis_madds: int
    total_madds: int
    params_total: int
    params_shared: int
    params_per_basis: int

    def to_dict(self) -> dict:
        return {
            "lm_madds": self.lm_madds,
            "stage2_madds": self.stage2_madds,
            "synthesis_madds": self.synthesis_madds,
            "total_madds": self.total_madds,
            "params_total": self.params_total,
            "params_shared": self.params_shared,
            "params_per_basis": self.params_per_basis,
        }


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    skip_rate: float
    avg_madds: float
    accuracy: float


def expected_cost(p_skip: float, c_lm: float, c_total: float) -> float:
    """Average cost when a fraction p_skip of inputs stop after stage one."""
    if not 0.0 <= p_skip <= 1.0:
        raise ValueError(f"p_skip must be in [0, 1], got {p_skip}")
    if c_lm > c_total:
        raise ValueError(f"stage-one cost {c_lm} exceeds total cost {c_total}")
    return p_skip * c_lm + (1.0 - p_skip) * c_total


def lm_param_count(lm: pl.LightweightModel) -> int:
    trunk = bb.count_params(lm.trunk)
    coeff_head = lm.trunk.feature_channels * lm.coeff_width + lm.coeff_width
    return trunk + coeff_head


def bank_param_counts(bank: syn.BasisBank) -> tuple[int, int]:
    """(shared, per_basis): shared covers shared kernels, biases, and head."""
    shared = 0
    per_basis = 0
    for k, layer in enumerate(bank.spec.layers):
        kcount = syn.kernel_param_count(layer)
        if bank.share_mask[k]:
            shared += kcount
        else:
            per_basis += kcount
        shared += layer.out_channels  # bias
    feat = bank.spec.feature_channels
    shared += feat * bank.spec.num_classes + bank.spec.num_classes
    return shared, per_basis


def full_cost(lm: pl.LightweightModel | None, bank: syn.BasisBank) -> CostReport:
    """Itemized per-image cost; ``lm=None`` prices the bare second stage."""
    lm_madds = pl.lm_madds(lm) if lm is not None else 0
    stage2 = bb.count_madds(bank.spec)
    synth = syn.synthesis_madds(bank)
    shared, per_basis = bank_param_counts(bank)
    params_lm = lm_param_count(lm) if lm is not None else 0
    return CostReport(
        lm_madds=lm_madds,
        stage2_madds=stage2,
        synthesis_madds=synth,
        total_madds=lm_madds + synth + stage2,
        params_total=params_lm + shared + bank.n_bases * per_basis,
        params_shared=shared,
        params_per_basis=per_basis,
    )


def sweep(lm: pl.LightweightModel, params: pl.LMParams, bank: syn.BasisBank,
          cfg: syn.SynthesisConfig, dataset: Dataset, thresholds) -> list[SweepPoint]:
    """Measure skip rate, accuracy, and average spend at each threshold.

    Accuracy uses the initial prediction where the pipeline terminated and
    the specialist prediction elsewhere. The measured average spend must
    agree with expected_cost at the measured skip rate; this function
    asserts that contract rather than trusting it.
    """
    if len(dataset) == 0:
        raise ValueError("sweep needs a non-empty dataset")
    report = full_cost(lm, bank)
    points = []
    for threshold in thresholds:
        skips = 0
        correct = 0
        spent = 0
        for i in range(len(dataset)):
            res = pl.infer(lm, params, bank, cfg, dataset.images[i:i + 1], threshold)
            skips += res.terminated
            correct += res.prediction == dataset.labels[i]
            spent += res.madds_spent
        p = skips / len(dataset)
        avg = spent / len(dataset)
        closed_form = expected_cost(p, report.lm_madds, report.total_madds)
        if not np.isclose(avg, closed_form, rtol=1e-9, atol=1e-9):
            raise AssertionError(
                f"measured average {avg} disagrees with closed form {closed_form}")
        points.append(SweepPoint(
            threshold=float(threshold), skip_rate=float(p),
            avg_madds=float(avg), accuracy=float(correct / len(dataset)),
        ))
    return points
