"""Two-stage inference: preview, maybe terminate, otherwise synthesize and run.

The lightweight model shares one trunk pass between two linear heads: an
initial class prediction and the raw combination coefficients. If the
initial prediction's max-softmax confidence clears the threshold, stage two
is skipped entirely. Otherwise every layer's coefficients are activated and
the whole specialist is synthesized up front, before stage-two layer L0
executes - unlike the per-layer router baseline below, where layer k's
coefficients only exist after layer k-1 has run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import synthesis as syn
from . import tensor as T


@dataclass(frozen=True)
class LightweightModel:
    """Trunk spec (its classifier head is the initial-prediction head) plus
    the coefficient head geometry and the input transform."""

    trunk: bb.BackboneSpec
    n_bases: int
    coeff_rows: int  # non-shared layer count, or 1 in per-model mode
    downsample: int = 1

    def __post_init__(self):
        if self.n_bases < 1 or self.coeff_rows < 1:
            raise ValueError("n_bases and coeff_rows must be positive")
        if self.downsample < 1:
            raise ValueError(f"downsample factor must be >= 1, got {self.downsample}")

    @property
    def coeff_width(self) -> int:
        return self.coeff_rows * self.n_bases


@dataclass
class LMParams:
    trunk: bb.BackboneParams
    coeff_w: T.Tensor
    coeff_b: T.Tensor

    def all_tensors(self) -> list[T.Tensor]:
        return self.trunk.all_tensors() + [self.coeff_w, self.coeff_b]


@dataclass
class PipelineResult:
    initial_logits: np.ndarray
    confidence: float
    terminated: bool
    madds_spent: int
    coefficients: syn.CoefficientMatrix | None = None
    final_logits: np.ndarray | None = None

    def __post_init__(self):
        if self.terminated and self.final_logits is not None:
            raise ValueError("terminated results must not carry final logits")
        if not self.terminated and self.final_logits is None:
            raise ValueError("non-terminated results must carry final logits")

    @property
    def prediction(self) -> int:
        logits = self.initial_logits if self.terminated else self.final_logits
        return int(np.argmax(logits))


def build_lm(lm: LightweightModel, seed: int) -> LMParams:
    rng = np.random.default_rng(seed)
    trunk = bb.build(lm.trunk, seed)
    feat = lm.trunk.feature_channels
    coeff_w = T.Tensor(bb.init_kernel(rng, (feat, lm.coeff_width), feat), requires_grad=True)
    coeff_b = T.Tensor(np.zeros(lm.coeff_width), requires_grad=True)
    return LMParams(trunk=trunk, coeff_w=coeff_w, coeff_b=coeff_b)


def downsample_input(x: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool HxW by an integer factor (the lightweight preview input)."""
    if factor == 1:
        return x
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise T.ShapeError(f"spatial size {h}x{w} not divisible by downsample factor {factor}")
    return x.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def lm_forward(lm: LightweightModel, params: LMParams, x: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
    """One trunk pass, two heads: (initial logits (B, C), raw coefficients (B, rows*N)).

    Coefficient activation is deliberately not applied here; that belongs to
    the synthesis stage.
    """
    xd = T.Tensor(downsample_input(x.data, lm.downsample))
    if xd.shape[1:] != lm.trunk.input_shape:
        raise T.ShapeError(
            f"transformed input {xd.shape[1:]} does not match trunk input {lm.trunk.input_shape}")
    feats = bb.forward_features(params.trunk, lm.trunk, xd)
    initial = T.linear(feats, params.trunk.head_w, params.trunk.head_b)
    raw = T.linear(feats, params.coeff_w, params.coeff_b)
    return initial, raw


def lm_madds(lm: LightweightModel) -> int:
    """Analytic multiplies for one image: trunk once, both heads counted.

    The trunk spec's input shape is the post-transform size, so no
    downsample correction is applied here.
    """
    trunk_and_class_head = bb.count_madds(lm.trunk)
    coeff_head = lm.trunk.feature_channels * lm.coeff_width
    return trunk_and_class_head + coeff_head


def confidence(logits) -> float:
    """Max softmax probability of a single logits vector."""
    v = np.asarray(logits.data if isinstance(logits, T.Tensor) else logits, dtype=np.float64).reshape(-1)
    if v.shape[0] < 2:
        raise T.ShapeError("confidence needs at least 2 classes")
    shifted = v - v.max()
    e = np.exp(shifted)
    return float(e.max() / e.sum())


def coefficients_from_raw(raw_row: T.Tensor, cfg: syn.SynthesisConfig,
                          n_rows: int, n_bases: int) -> syn.CoefficientMatrix:
    """Activate one sample's raw head output and apply the configured mode."""
    if cfg.mode == "per_model":
        alpha = syn.activate(T.reshape(raw_row, (1, n_bases)), cfg.activation)
        return syn.per_model_matrix(T.row(alpha.values, 0), n_rows)
    alpha = syn.activate(T.reshape(raw_row, (n_rows, n_bases)), cfg.activation)
    if cfg.mode == "one_hot":
        return syn.to_one_hot(alpha)
    return alpha


def stage2_madds(bank: syn.BasisBank) -> int:
    return syn.synthesis_madds(bank) + bb.count_madds(bank.spec)


def infer(lm: LightweightModel, params: LMParams, bank: syn.BasisBank,
          cfg: syn.SynthesisConfig, x, threshold: float,
          trace: list | None = None) -> PipelineResult:
    """Run the full two-stage pipeline on a single image (1, C, H, W).

    Terminates after stage one when confidence >= threshold. Thresholds
    above 1 are legal and mean "never terminate". The uniform-blend
    stabilizer is a training device, so the config must carry epsilon 0.
    """
    if not isinstance(x, T.Tensor):
        x = T.Tensor(x)
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise T.ShapeError(f"infer expects a single (1, C, H, W) image, got {x.shape}")
    if math.isnan(threshold) or threshold < 0:
        raise ValueError(f"threshold must be a number >= 0, got {threshold}")
    if cfg.epsilon != 0.0:
        raise ValueError("inference requires epsilon 0; the blend schedule ends at 0")

    initial, raw = lm_forward(lm, params, x)
    conf = confidence(T.row(initial, 0))
    cost = lm_madds(lm)

    if conf >= threshold:
        return PipelineResult(
            initial_logits=initial.data[0].copy(), confidence=conf,
            terminated=True, madds_spent=cost,
        )

    alpha = coefficients_from_raw(T.row(raw, 0), cfg, bank.n_coefficient_rows, bank.n_bases)
    if trace is not None:
        for r, k in enumerate(bank.nonshared_indices()):
            trace.append(("coefficients", k, alpha.values.data[r].copy()))
    specialist = syn.synthesize(bank, alpha)
    final = bb.forward(specialist, bank.spec, x, trace)
    return PipelineResult(
        initial_logits=initial.data[0].copy(), confidence=conf,
        terminated=False, madds_spent=cost + stage2_madds(bank),
        coefficients=alpha, final_logits=final.data[0].copy(),
    )


# ---------------------------------------------------------------------------
# per-layer router baseline


@dataclass
class RouterParams:
    w: T.Tensor
    b: T.Tensor


def build_routers(bank: syn.BasisBank, seed: int) -> list[RouterParams]:
    """One pooled-feature router per non-shared layer."""
    rng = np.random.default_rng(seed)
    routers = []
    for k in bank.nonshared_indices():
        in_c = bank.spec.layers[k].in_channels
        routers.append(RouterParams(
            w=T.Tensor(bb.init_kernel(rng, (in_c, bank.n_bases), in_c), requires_grad=True),
            b=T.Tensor(np.zeros(bank.n_bases), requires_grad=True),
        ))
    return routers


def condconv_forward(bank: syn.BasisBank, routers: list[RouterParams], x,
                     activation: str = "softmax", trace: list | None = None) -> T.Tensor:
    """Layer-by-layer dynamic baseline: each non-shared layer blends its
    kernels from coefficients computed off the previous layer's pooled
    output, so synthesis cannot run ahead of execution. No early exit is
    possible - there is no standalone preview prediction to gate on.
    """
    if not isinstance(x, T.Tensor):
        x = T.Tensor(x)
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise T.ShapeError(f"condconv_forward expects a single (1, C, H, W) image, got {x.shape}")
    if len(routers) != bank.n_coefficient_rows:
        raise T.ShapeError(
            f"{len(routers)} routers for {bank.n_coefficient_rows} non-shared layers")

    out = x
    r = 0
    for k, (layer, shared) in enumerate(zip(bank.spec.layers, bank.share_mask)):
        if shared:
            kernel = bank.kernels[k][0]
        else:
            pooled = T.global_avg_pool(out)
            logits = T.linear(pooled, routers[r].w, routers[r].b)
            if activation == "softmax":
                coeffs = T.row(T.softmax(logits, axis=1), 0)
            elif activation == "sigmoid":
                coeffs = T.row(T.sigmoid(logits), 0)
            elif activation == "identity":
                coeffs = T.row(logits, 0)
            else:
                raise ValueError(f"unknown router activation {activation!r}")
            if trace is not None:
                trace.append(("coefficients", k, coeffs.data.copy()))
            kernel = T.weighted_sum(coeffs, bank.kernels[k])
            r += 1
        if trace is not None:
            trace.append(("execute", k))
        out = bb.run_layer(out, layer, bb.LayerParams(kernel=kernel, bias=bank.biases[k]))
    feats = T.global_avg_pool(out)
    return T.linear(feats, bank.head_w, bank.head_b)
