"""Basis kernel banks and input-conditioned kernel synthesis.

A bank stores N candidate kernel sets per non-shared layer (shared layers
keep a single tensor referenced by every basis). A coefficient matrix, one
row per non-shared layer, blends the candidates into one specialist kernel
per layer: W_k = sum_n alpha[k, n] * W_k_n. Biases and the classifier head
are always shared, so blending touches kernels only.

Also here: the coefficient post-processing used during training - row-wise
activation, the uniform-blend stabilizer, basis dropout masking, and one-hot
hardening for selection mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneParams, BackboneSpec, LayerParams, init_kernel

MODES = ("per_layer", "per_model", "one_hot")
ACTIVATIONS = ("softmax", "sigmoid")


@dataclass(frozen=True)
class SynthesisConfig:
    activation: str = "softmax"
    mode: str = "per_layer"
    epsilon: float = 0.0
    bmd_rate: float = 0.0
    bmd_renormalize: bool = True
    stabilizer_order: str = "epsilon_then_bmd"  # or "bmd_then_epsilon"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.bmd_rate < 1.0:
            raise ValueError(f"bmd_rate must be in [0, 1), got {self.bmd_rate}")
        if self.stabilizer_order not in ("epsilon_then_bmd", "bmd_then_epsilon"):
            raise ValueError(f"unknown stabilizer_order {self.stabilizer_order!r}")


@dataclass
class CoefficientMatrix:
    """Per-layer combination weights: one row per non-shared layer, N columns."""

    values: T.Tensor
    mode: str = "per_layer"

    def __post_init__(self):
        if self.values.data.ndim != 2:
            raise T.ShapeError(f"coefficients must be 2-D, got shape {self.values.shape}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def n_bases(self) -> int:
        return self.values.shape[1]

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def validate(self) -> None:
        v = self.values.data
        if self.mode == "per_model" and not np.all(v == v[0]):
            raise ValueError("per_model coefficients must repeat one row for all layers")
        if self.mode == "one_hot":
            ok = np.all(np.isin(v, (0.0, 1.0))) and np.all(v.sum(axis=1) == 1.0)
            if not ok:
                raise ValueError("one_hot coefficients must have exactly one 1 per row")


@dataclass
class BasisBank:
    """N same-architecture kernel sets with per-layer sharing.

    ``kernels[k]`` holds one tensor when layer k is shared, otherwise N.
    Biases and the classifier head are single shared tensors.
    """

    spec: BackboneSpec
    n_bases: int
    share_mask: tuple[bool, ...]
    kernels: list[list[T.Tensor]]
    biases: list[T.Tensor]
    head_w: T.Tensor
    head_b: T.Tensor

    def __post_init__(self):
        if self.n_bases < 1:
            raise ValueError("a bank needs at least one basis")
        if len(self.share_mask) != self.spec.num_layers:
            raise ValueError("share_mask length must equal the layer count")
        for k, (shared, bank) in enumerate(zip(self.share_mask, self.kernels)):
            expected = 1 if shared else self.n_bases
            if len(bank) != expected:
                raise ValueError(f"layer L{k} holds {len(bank)} kernel sets, expected {expected}")

    def nonshared_indices(self) -> list[int]:
        return [k for k, shared in enumerate(self.share_mask) if not shared]

    @property
    def n_coefficient_rows(self) -> int:
        return len(self.nonshared_indices())

    def all_tensors(self) -> list[T.Tensor]:
        out = []
        for bank in self.kernels:
            out.extend(bank)
        out.extend(self.biases)
        out.extend([self.head_w, self.head_b])
        return out


def build_bank(spec: BackboneSpec, n_bases: int, shared_layers, seed: int) -> BasisBank:
    """Initialize a bank; ``shared_layers`` is an iterable of layer indices."""
    shared = set(int(i) for i in shared_layers)
    for i in shared:
        if not 0 <= i < spec.num_layers:
            raise ValueError(f"shared layer index {i} out of range [0, {spec.num_layers})")
    if n_bases < 1:
        raise ValueError("n_bases must be >= 1")

    rng = np.random.default_rng(seed)
    kernels: list[list[T.Tensor]] = []
    biases: list[T.Tensor] = []
    for k, layer in enumerate(spec.layers):
        shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
        fan_in = layer.in_channels * layer.kernel_size ** 2
        copies = 1 if k in shared else n_bases
        kernels.append([
            T.Tensor(init_kernel(rng, shape, fan_in), requires_grad=True) for _ in range(copies)
        ])
        biases.append(T.Tensor(np.zeros(layer.out_channels), requires_grad=True))
    feat = spec.feature_channels
    head_w = T.Tensor(init_kernel(rng, (feat, spec.num_classes), feat), requires_grad=True)
    head_b = T.Tensor(np.zeros(spec.num_classes), requires_grad=True)
    return BasisBank(
        spec=spec,
        n_bases=n_bases,
        share_mask=tuple(k in shared for k in range(spec.num_layers)),
        kernels=kernels,
        biases=biases,
        head_w=head_w,
        head_b=head_b,
    )


def bank_from_backbone(spec: BackboneSpec, params: BackboneParams) -> BasisBank:
    """Wrap plain backbone parameters as a degenerate single-basis bank."""
    return BasisBank(
        spec=spec,
        n_bases=1,
        share_mask=tuple(False for _ in spec.layers),
        kernels=[[lp.kernel] for lp in params.layers],
        biases=[lp.bias for lp in params.layers],
        head_w=params.head_w,
        head_b=params.head_b,
    )


# ---------------------------------------------------------------------------
# coefficient pipeline


def activate(raw: T.Tensor, activation: str) -> CoefficientMatrix:
    """Turn raw head outputs into coefficients: row-wise softmax or elementwise sigmoid."""
    if raw.data.ndim != 2:
        raise T.ShapeError(f"raw coefficients must be 2-D, got shape {raw.shape}")
    if activation == "softmax":
        values = T.softmax(raw, axis=1)
    elif activation == "sigmoid":
        values = T.sigmoid(raw)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return CoefficientMatrix(values=values, mode="per_layer")


def blend_epsilon(alpha: CoefficientMatrix, epsilon: float) -> CoefficientMatrix:
    """Interpolate toward the uniform combination: eps/N + (1-eps)*alpha."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    if alpha.mode == "one_hot":
        raise ValueError("uniform blending does not apply to one_hot coefficients")
    n = alpha.n_bases
    uniform = T.Tensor(np.full(alpha.values.shape, epsilon / n))
    values = T.add(uniform, T.scale(alpha.values, 1.0 - epsilon))
    return CoefficientMatrix(values=values, mode=alpha.mode)


def apply_bmd(alpha: CoefficientMatrix, drop_mask: np.ndarray, renormalize: bool = True) -> CoefficientMatrix:
    """Zero dropped bases' coefficients in every row; optionally rescale rows to sum 1."""
    drop = np.asarray(drop_mask, dtype=bool)
    if drop.shape != (alpha.n_bases,):
        raise T.ShapeError(f"drop mask shape {drop.shape} does not match {alpha.n_bases} bases")
    if drop.all():
        raise ValueError("all bases dropped; at least one must survive")
    if not drop.any():
        return alpha
    keep = T.Tensor(np.tile((~drop).astype(np.float64), (alpha.n_rows, 1)))
    values = T.mul(alpha.values, keep)
    if renormalize:
        values = T.normalize_rows(values)
    return CoefficientMatrix(values=values, mode=alpha.mode)


def to_one_hot(alpha: CoefficientMatrix) -> CoefficientMatrix:
    """Harden each row to its argmax (ties go to the lowest basis index)."""
    if alpha.mode not in ("per_layer", "per_model"):
        raise ValueError(f"cannot harden {alpha.mode} coefficients")
    v = alpha.values.data
    hard = np.zeros_like(v)
    hard[np.arange(v.shape[0]), np.argmax(v, axis=1)] = 1.0
    return CoefficientMatrix(values=T.Tensor(hard), mode="one_hot")


def per_model_matrix(row_values: T.Tensor, n_rows: int) -> CoefficientMatrix:
    """Repeat a single activated coefficient row for every non-shared layer."""
    if row_values.data.ndim != 1:
        raise T.ShapeError(f"per-model coefficients must be 1-D, got {row_values.shape}")
    return CoefficientMatrix(values=T.tile_rows(row_values, n_rows), mode="per_model")


# ---------------------------------------------------------------------------
# synthesis


def synthesize(bank: BasisBank, alpha: CoefficientMatrix) -> BackboneParams:
    """Blend per-layer kernels into one specialist parameter set.

    Shared layers pass their single kernel through untouched; biases and the
    head are the bank's shared tensors. Differentiable w.r.t. both the
    coefficients and every basis kernel.
    """
    if alpha.n_bases != bank.n_bases:
        raise T.ShapeError(f"coefficients have {alpha.n_bases} bases, bank has {bank.n_bases}")
    rows = bank.n_coefficient_rows
    if alpha.n_rows != rows:
        raise T.ShapeError(f"coefficients have {alpha.n_rows} rows, bank has {rows} non-shared layers")
    alpha.validate()

    params = BackboneParams(head_w=bank.head_w, head_b=bank.head_b)
    r = 0
    for k, shared in enumerate(bank.share_mask):
        if shared:
            kernel = bank.kernels[k][0]
        else:
            kernel = T.weighted_sum(T.row(alpha.values, r), bank.kernels[k])
            r += 1
        params.layers.append(LayerParams(kernel=kernel, bias=bank.biases[k]))
    return params


def select_params(bank: BasisBank, choices) -> BackboneParams:
    """Pick one basis index per non-shared layer, no blending (oracle path)."""
    choices = list(choices)
    if len(choices) != bank.n_coefficient_rows:
        raise T.ShapeError(f"{len(choices)} choices for {bank.n_coefficient_rows} non-shared layers")
    params = BackboneParams(head_w=bank.head_w, head_b=bank.head_b)
    it = iter(choices)
    for k, shared in enumerate(bank.share_mask):
        kernel = bank.kernels[k][0] if shared else bank.kernels[k][next(it)]
        params.layers.append(LayerParams(kernel=kernel, bias=bank.biases[k]))
    return params


# ---------------------------------------------------------------------------
# accounting


def kernel_param_count(layer) -> int:
    return layer.out_channels * layer.in_channels * layer.kernel_size ** 2


def synthesis_madds(bank: BasisBank) -> int:
    """Multiplies to blend a full specialist: one per basis kernel parameter."""
    return bank.n_bases * sum(
        kernel_param_count(bank.spec.layers[k]) for k in bank.nonshared_indices()
    )


def effective_synthesis_madds(bank: BasisBank, alpha: CoefficientMatrix) -> int:
    """Multiplies given actual coefficients: zero entries cost nothing and a
    one-hot row is pure selection (no multiplies at all)."""
    total = 0
    v = alpha.values.data
    for r, k in enumerate(bank.nonshared_indices()):
        nonzero = np.flatnonzero(v[r])
        if nonzero.size == 1 and v[r, nonzero[0]] == 1.0:
            continue
        total += int(nonzero.size) * kernel_param_count(bank.spec.layers[k])
    return total
