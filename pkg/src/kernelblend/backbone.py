"""Plain convolutional stacks with exact parameter and multiply accounting.

The network is a sequence of conv+bias+activation layers followed by global
average pooling and a linear classifier head. Layers are numbered L0..L(K-1).
Analytic multiply counts follow the usual convention: one MAdd per
kernel-times-input multiply, biases and pooling uncounted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size) < 1:
            raise ValueError(f"layer dimensions must be positive: {self}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class BackboneSpec:
    """Input shape (C, H, W), ordered conv layers L0..L(K-1), and a classifier head."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 1:
            raise ValueError("a backbone needs at least one conv layer")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        chain = self.input_shape[0]
        for i, layer in enumerate(self.layers):
            if layer.in_channels != chain:
                raise ValueError(
                    f"layer L{i} expects {layer.in_channels} input channels but receives {chain}"
                )
            chain = layer.out_channels
        self.spatial_sizes()  # raises if any layer shrinks the map below 1x1

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def feature_channels(self) -> int:
        return self.layers[-1].out_channels

    def spatial_sizes(self, input_hw: tuple[int, int] | None = None) -> list[tuple[int, int]]:
        """Per-layer output (H, W), starting from the spec input or an override."""
        h, w = input_hw if input_hw is not None else self.input_shape[1:]
        sizes = []
        for i, layer in enumerate(self.layers):
            h = (h + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
            w = (w + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
            if h < 1 or w < 1:
                raise ValueError(f"layer L{i} reduces the spatial map to {h}x{w}")
            sizes.append((h, w))
        return sizes


@dataclass
class LayerParams:
    kernel: T.Tensor
    bias: T.Tensor


@dataclass
class BackboneParams:
    layers: list[LayerParams] = field(default_factory=list)
    head_w: T.Tensor | None = None
    head_b: T.Tensor | None = None

    def all_tensors(self) -> list[T.Tensor]:
        out = []
        for lp in self.layers:
            out.extend([lp.kernel, lp.bias])
        out.extend([self.head_w, self.head_b])
        return out


def init_kernel(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # uniform with std = 1/sqrt(fan_in)
    bound = np.sqrt(3.0) / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build(spec: BackboneSpec, seed: int) -> BackboneParams:
    """Initialize parameters: fan-in-scaled uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = BackboneParams()
    for layer in spec.layers:
        shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
        fan_in = layer.in_channels * layer.kernel_size ** 2
        params.layers.append(LayerParams(
            kernel=T.Tensor(init_kernel(rng, shape, fan_in), requires_grad=True),
            bias=T.Tensor(np.zeros(layer.out_channels), requires_grad=True),
        ))
    feat = spec.feature_channels
    params.head_w = T.Tensor(init_kernel(rng, (feat, spec.num_classes), feat), requires_grad=True)
    params.head_b = T.Tensor(np.zeros(spec.num_classes), requires_grad=True)
    return params


def run_layer(x: T.Tensor, layer: LayerSpec, lp: LayerParams) -> T.Tensor:
    out = T.conv2d(x, lp.kernel, stride=layer.stride, padding=layer.padding)
    out = T.add_channel_bias(out, lp.bias)
    if layer.activation == "relu":
        out = T.relu(out)
    return out


def forward_features(params: BackboneParams, spec: BackboneSpec, x: T.Tensor,
                     trace: list | None = None) -> T.Tensor:
    """Conv stack plus global average pooling: NCHW -> (B, feature_channels).

    When ``trace`` is given, an ("execute", k) event is appended as each
    layer runs, so tests can check execution order against coefficient
    availability.
    """
    if x.data.ndim != 4 or x.shape[1] != spec.input_shape[0]:
        raise T.ShapeError(f"input {x.shape} does not match spec channels {spec.input_shape[0]}")
    out = x
    for k, (layer, lp) in enumerate(zip(spec.layers, params.layers)):
        if trace is not None:
            trace.append(("execute", k))
        out = run_layer(out, layer, lp)
    return T.global_avg_pool(out)


def forward(params: BackboneParams, spec: BackboneSpec, x: T.Tensor,
            trace: list | None = None) -> T.Tensor:
    """Full forward to logits of shape (B, num_classes)."""
    feats = forward_features(params, spec, x, trace)
    return T.linear(feats, params.head_w, params.head_b)


def count_params(spec: BackboneSpec) -> int:
    total = 0
    for layer in spec.layers:
        total += layer.out_channels * layer.in_channels * layer.kernel_size ** 2
        total += layer.out_channels  # bias
    total += spec.feature_channels * spec.num_classes + spec.num_classes
    return total


def madds_per_layer(spec: BackboneSpec, input_hw: tuple[int, int] | None = None) -> list[int]:
    """Multiplies per conv layer for one image; the classifier is appended last."""
    sizes = spec.spatial_sizes(input_hw)
    counts = []
    for layer, (h, w) in zip(spec.layers, sizes):
        counts.append(h * w * layer.out_channels * layer.in_channels * layer.kernel_size ** 2)
    counts.append(spec.feature_channels * spec.num_classes)
    return counts


def count_madds(spec: BackboneSpec, input_hw: tuple[int, int] | None = None) -> int:
    return sum(madds_per_layer(spec, input_hw))
