"""Joint end-to-end training of the lightweight model and the basis bank.

One step: sample a batch, run the shared lightweight trunk once, then per
sample activate coefficients, apply the uniform-blend stabilizer at the
scheduled strength, mask dropped bases, synthesize the specialist, and run
stage two. The loss is CE(specialist) + lm_weight * CE(initial) + L2. The
gradient routing the design calls for falls out of the graph itself: the
initial-prediction term never touches basis kernels, while the specialist
term reaches the lightweight model through the coefficient path.

All per-step randomness (batch choice, augmentation, dropout masks) derives
from (seed, step), so any run is reproducible and resumable bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import pipeline as pl
from . import synthesis as syn
from . import tensor as T
from .data import Dataset, augment_batch


class TrainingDiverged(RuntimeError):
    """Loss or activations went non-finite; carries step diagnostics."""


@dataclass(frozen=True)
class DistillConfig:
    teacher_spec: bb.BackboneSpec
    teacher_params: bb.BackboneParams
    policy: str = "both"  # "both" heads distilled, or "bases_only"
    soft_weight: float = 1.0

    def __post_init__(self):
        if self.policy not in ("both", "bases_only"):
            raise ValueError(f"unknown distillation policy {self.policy!r}")
        if not 0.0 <= self.soft_weight <= 1.0:
            raise ValueError("soft_weight must be in [0, 1]")


@dataclass(frozen=True)
class LossConfig:
    lm_weight: float = 1.0
    l2_weight: float = 0.0
    distill: DistillConfig | None = None

    def __post_init__(self):
        if self.lm_weight < 0 or self.l2_weight < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainSchedule:
    total_steps: int
    epsilon_hold_steps: int = 0
    epsilon_decay_steps: int = 0
    lr_base: float = 0.1
    lr_decay_factor: float = 1.0
    lr_decay_interval: int = 100
    bmd_rate: float = 0.0
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "sgd"  # or "rmsprop"
    clip_norm: float | None = None
    bmd_per_sample: bool = False
    flip: bool = False
    crop_pad: int = 0
    eval_interval: int = 100

    def __post_init__(self):
        if self.epsilon_hold_steps + self.epsilon_decay_steps > self.total_steps:
            raise ValueError("epsilon hold + decay cannot exceed total_steps")
        if self.optimizer not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.bmd_rate < 1.0:
            raise ValueError("bmd_rate must be in [0, 1)")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size and total_steps must be positive")


@dataclass
class TrainState:
    lm: pl.LightweightModel
    lm_params: pl.LMParams
    bank: syn.BasisBank
    synth_cfg: syn.SynthesisConfig
    step: int = 0
    opt_state: dict = field(default_factory=dict)
    lm_frozen: bool = False
    harden_one_hot: bool = False


def named_parameters(state: TrainState) -> list[tuple[str, T.Tensor]]:
    """Stable (name, tensor) listing; checkpoint blob order follows it."""
    out: list[tuple[str, T.Tensor]] = []
    for i, lp in enumerate(state.lm_params.trunk.layers):
        out.append((f"lm.trunk.L{i}.kernel", lp.kernel))
        out.append((f"lm.trunk.L{i}.bias", lp.bias))
    out.append(("lm.class_head.w", state.lm_params.trunk.head_w))
    out.append(("lm.class_head.b", state.lm_params.trunk.head_b))
    out.append(("lm.coeff_head.w", state.lm_params.coeff_w))
    out.append(("lm.coeff_head.b", state.lm_params.coeff_b))
    for k, kernels in enumerate(state.bank.kernels):
        if state.bank.share_mask[k]:
            out.append((f"bank.L{k}.kernel", kernels[0]))
        else:
            for n, kern in enumerate(kernels):
                out.append((f"bank.L{k}.basis{n}.kernel", kern))
        out.append((f"bank.L{k}.bias", state.bank.biases[k]))
    out.append(("bank.head.w", state.bank.head_w))
    out.append(("bank.head.b", state.bank.head_b))
    return out


def trainable_parameters(state: TrainState) -> list[tuple[str, T.Tensor]]:
    params = named_parameters(state)
    if state.lm_frozen:
        params = [(name, p) for name, p in params if not name.startswith("lm.")]
    return params


# ---------------------------------------------------------------------------
# schedules and sampling


def epsilon_at(step: int, schedule: TrainSchedule) -> float:
    """1 during the hold window, then linear to 0 over the decay window."""
    if step < 0:
        raise ValueError("step must be >= 0")
    hold, decay = schedule.epsilon_hold_steps, schedule.epsilon_decay_steps
    if step < hold:
        return 1.0
    if decay > 0 and step < hold + decay:
        return 1.0 - (step - hold) / decay
    return 0.0


def learning_rate_at(step: int, schedule: TrainSchedule) -> float:
    return schedule.lr_base * schedule.lr_decay_factor ** (step // schedule.lr_decay_interval)


def sample_bmd_mask(n_bases: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Independent per-basis drops at ``rate``, resampled until one survives."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must be in [0, 1)")
    if rate == 0.0:
        return np.zeros(n_bases, dtype=bool)
    drops = rng.random(n_bases) < rate
    while drops.all():
        drops = rng.random(n_bases) < rate
    return drops


def step_rng(schedule: TrainSchedule, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([schedule.seed, step, stream])


def sample_batch(dataset: Dataset, schedule: TrainSchedule, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic batch for a step: uniform indices, then augmentation."""
    rng = step_rng(schedule, step, stream=1)
    idx = rng.integers(0, len(dataset), size=schedule.batch_size)
    images = dataset.images[idx]
    if schedule.flip or schedule.crop_pad > 0:
        images = augment_batch(images, rng, flip=schedule.flip, crop_pad=schedule.crop_pad)
    return images, dataset.labels[idx]


# ---------------------------------------------------------------------------
# forward and loss


def forward_training(state: TrainState, batch_x: np.ndarray, epsilon: float,
                     drop_masks: np.ndarray | None):
    """Batched stage-one pass, per-sample synthesis and stage-two pass.

    ``drop_masks`` is (N,) to share one mask across the batch or (B, N) for
    per-sample masks; None disables basis dropout. Returns (final logits,
    initial logits, per-sample coefficient matrices).
    """
    cfg = state.synth_cfg
    x = T.Tensor(batch_x)
    initial, raw = pl.lm_forward(state.lm, state.lm_params, x)

    batch = batch_x.shape[0]
    if drop_masks is not None and drop_masks.ndim == 1:
        drop_masks = np.tile(drop_masks, (batch, 1))

    final_rows = []
    alphas = []
    for b in range(batch):
        alpha = pl.coefficients_from_raw(
            T.row(raw, b), cfg, state.bank.n_coefficient_rows, state.bank.n_bases)
        if state.harden_one_hot and alpha.mode != "one_hot":
            alpha = syn.to_one_hot(alpha)

        if alpha.mode != "one_hot":
            stages = []
            if epsilon > 0.0:
                stages.append(lambda a: syn.blend_epsilon(a, epsilon))
            if drop_masks is not None and drop_masks[b].any():
                mask = drop_masks[b]
                stages.append(lambda a: syn.apply_bmd(a, mask, cfg.bmd_renormalize))
            if cfg.stabilizer_order == "bmd_then_epsilon":
                stages.reverse()
            for stage in stages:
                alpha = stage(alpha)

        specialist = syn.synthesize(state.bank, alpha)
        logits = bb.forward(specialist, state.bank.spec, T.Tensor(batch_x[b:b + 1]))
        final_rows.append(T.row(logits, 0))
        alphas.append(alpha)
    return T.stack_rows(final_rows), initial, alphas


def distill_targets(teacher_spec: bb.BackboneSpec, teacher_params: bb.BackboneParams,
                    batch_x: np.ndarray) -> np.ndarray:
    """Frozen-teacher softmax outputs (temperature 1); rows sum to 1."""
    logits = bb.forward(teacher_params, teacher_spec, T.Tensor(batch_x)).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _head_target(hard: np.ndarray, soft: np.ndarray | None, num_classes: int,
                 soft_weight: float):
    """Blend soft teacher rows into the hard one-hot targets for one head."""
    if soft is None:
        return hard
    onehot = np.zeros((len(hard), num_classes))
    onehot[np.arange(len(hard)), hard] = 1.0
    return soft_weight * soft + (1.0 - soft_weight) * onehot


def total_loss(final_logits: T.Tensor, initial_logits: T.Tensor, target: np.ndarray,
               params: list[T.Tensor], cfg: LossConfig,
               distill_soft: np.ndarray | None = None):
    """CE(final) + lm_weight * CE(initial) + l2_weight * sum ||p||^2.

    With distillation on, the teacher's soft rows replace (or blend into)
    the hard targets for the heads the policy selects.
    """
    num_classes = final_logits.shape[1]
    final_target: np.ndarray = target
    initial_target: np.ndarray = target
    if cfg.distill is not None and distill_soft is not None:
        final_target = _head_target(target, distill_soft, num_classes, cfg.distill.soft_weight)
        if cfg.distill.policy == "both":
            initial_target = _head_target(target, distill_soft, num_classes, cfg.distill.soft_weight)

    synth_loss = T.cross_entropy(final_logits, final_target)
    lm_loss = T.cross_entropy(initial_logits, initial_target)
    loss = T.add(synth_loss, T.scale(lm_loss, cfg.lm_weight))
    l2_value = 0.0
    if cfg.l2_weight > 0.0:
        reg = None
        for p in params:
            sq = T.sum_squares(p)
            reg = sq if reg is None else T.add(reg, sq)
        loss = T.add(loss, T.scale(reg, cfg.l2_weight))
        l2_value = cfg.l2_weight * reg.data.item()
    parts = {
        "synth_loss": synth_loss.data.item(),
        "lm_loss": lm_loss.data.item(),
        "l2": l2_value,
    }
    return loss, parts


# ---------------------------------------------------------------------------
# optimizer step


def _clip_gradients(grads: dict[T.Tensor, np.ndarray], params, clip_norm: float):
    total = 0.0
    for _, p in params:
        g = grads.get(p)
        if g is not None:
            total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm > clip_norm and norm > 0:
        factor = clip_norm / norm
        for _, p in params:
            if p in grads:
                grads[p] = grads[p] * factor
    return norm


def _apply_updates(state: TrainState, grads, params, lr: float, schedule: TrainSchedule):
    for name, p in params:
        g = grads.get(p)
        if g is None:
            continue
        if schedule.optimizer == "rmsprop":
            acc = state.opt_state.get(name)
            if acc is None:
                acc = np.zeros_like(p.data)
            acc = 0.9 * acc + 0.1 * g * g
            state.opt_state[name] = acc
            p.apply_update(p.data - lr * g / (np.sqrt(acc) + 1e-8))
        else:
            p.apply_update(p.data - lr * g)


def train_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray],
               schedule: TrainSchedule, loss_cfg: LossConfig) -> tuple[TrainState, dict]:
    """One serialized optimization transaction; returns (state, metrics)."""
    batch_x, batch_y = batch
    step = state.step
    eps = epsilon_at(step, schedule)

    drop_masks = None
    if schedule.bmd_rate > 0.0 and not state.harden_one_hot:
        rng = step_rng(schedule, step, stream=2)
        if schedule.bmd_per_sample:
            drop_masks = np.stack([
                sample_bmd_mask(state.bank.n_bases, schedule.bmd_rate, rng)
                for _ in range(len(batch_x))
            ])
        else:
            drop_masks = sample_bmd_mask(state.bank.n_bases, schedule.bmd_rate, rng)

    distill_soft = None
    if loss_cfg.distill is not None:
        distill_soft = distill_targets(
            loss_cfg.distill.teacher_spec, loss_cfg.distill.teacher_params, batch_x)

    params = trainable_parameters(state)
    lr = learning_rate_at(step, schedule)
    try:
        tape = T.GradTape()
        with T.recording(tape):
            final, initial, _ = forward_training(state, batch_x, eps, drop_masks)
            loss, parts = total_loss(
                final, initial, batch_y, [p for _, p in params], loss_cfg, distill_soft)
        grads = T.backward(loss)
        if schedule.clip_norm is not None:
            _clip_gradients(grads, params, schedule.clip_norm)
        _apply_updates(state, grads, params, lr, schedule)
    except T.NonFiniteError as err:
        raise TrainingDiverged(
            f"training went non-finite at step {step} (lr={lr}): {err}"
        ) from err

    state.step = step + 1
    metrics = {"step": step, "loss": loss.data.item(), "epsilon": eps, "lr": lr, **parts}
    return state, metrics


def finetune_one_hot(state: TrainState, dataset: Dataset, schedule: TrainSchedule,
                     loss_cfg: LossConfig) -> TrainState:
    """Selection fine-tuning: freeze the lightweight model, harden each
    input's coefficients to one-hot, and keep training the stage-two
    parameters for ``schedule.total_steps`` further steps."""
    if state.step == 0:
        raise ValueError("fine-tuning requires a trained state (step > 0)")
    state.lm_frozen = True
    state.harden_one_hot = True
    end = state.step + schedule.total_steps
    while state.step < end:
        batch = sample_batch(dataset, schedule, state.step)
        state, _ = train_step(state, batch, schedule, loss_cfg)
    return state


# ---------------------------------------------------------------------------
# state construction


def init_state(lm: pl.LightweightModel, bank_spec: bb.BackboneSpec, n_bases: int,
               shared_layers, synth_cfg: syn.SynthesisConfig, seed: int) -> TrainState:
    """Build a fresh trainable state with deterministic initialization."""
    bank = syn.build_bank(bank_spec, n_bases, shared_layers, seed)
    lm_params = pl.build_lm(lm, seed + 1)
    expected_rows = 1 if synth_cfg.mode == "per_model" else bank.n_coefficient_rows
    if lm.coeff_rows != expected_rows or lm.n_bases != n_bases:
        raise ValueError(
            f"lightweight coefficient head emits {lm.coeff_rows}x{lm.n_bases}, "
            f"bank needs {expected_rows}x{n_bases}")
    return TrainState(lm=lm, lm_params=lm_params, bank=bank, synth_cfg=synth_cfg)
