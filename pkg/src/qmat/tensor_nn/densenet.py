"""Dense CNN regressor: stem conv, dense blocks joined by pooling transitions,
global average pooling and a linear head with one raw output per estimated step.

Each dense layer is BN -> ReLU -> 3x3 conv (``k`` filters) -> dropout, fed with
the concatenation of the block input and every earlier layer's output.
Transitions only pool (no 1x1 compression), so with the default 40-layer,
k = 12 configuration the pooled feature vector has 24 + 3 * 144 = 456 entries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from qmat.tensor_nn.autograd import Tensor
from qmat.tensor_nn.functional import (
    BatchNormState,
    avg_pool2x2,
    batch_norm_relu,
    concat,
    conv2d_3x3,
    dropout,
    global_avg_pool,
    linear,
)


@dataclass(frozen=True)
class DenseNetConfig:
    depth: int = 40
    num_blocks: int = 3
    growth_rate: int = 12
    layers_per_block: int | None = None
    stem_channels: int | None = None
    dropout_rate: float = 0.2
    nc_outputs: int = 15
    input_size: int = 64
    in_channels: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.num_blocks < 1 or self.growth_rate < 1:
            raise ValueError("num_blocks and growth_rate must be positive")
        if self.layers_per_block is None:
            # depth counts the stem, one weighted layer per transition slot and the head
            body = self.depth - self.num_blocks - 1
            if body < self.num_blocks or body % self.num_blocks:
                raise ValueError(
                    f"depth {self.depth} does not split into {self.num_blocks} equal blocks; "
                    "set layers_per_block explicitly"
                )
            object.__setattr__(self, "layers_per_block", body // self.num_blocks)
        if self.layers_per_block < 1:
            raise ValueError("layers_per_block must be >= 1")
        if self.stem_channels is None:
            object.__setattr__(self, "stem_channels", 2 * self.growth_rate)
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 1 <= self.nc_outputs <= 64:
            raise ValueError("nc_outputs must be in [1, 64]")
        if self.input_size % (2 ** (self.num_blocks - 1)):
            raise ValueError("input_size must survive the transition poolings")

    @property
    def feature_width(self) -> int:
        return self.stem_channels + self.num_blocks * self.layers_per_block * self.growth_rate

    def block_input_width(self, block: int) -> int:
        return self.stem_channels + block * self.layers_per_block * self.growth_rate

    def layer_input_widths(self, block: int = 0) -> list[int]:
        """Input channels of layers 1..L of ``block``: block input + k(l - 1)."""
        base = self.block_input_width(block)
        return [base + self.growth_rate * l for l in range(self.layers_per_block)]

    @property
    def connections_per_block(self) -> int:
        l = self.layers_per_block
        return l * (l - 1) // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def small(cls, **overrides) -> "DenseNetConfig":
        """Desk-scale variant: depth 16 (4 layers per block), k = 8."""
        return cls(**{"depth": 16, "growth_rate": 8, **overrides})


def param_shapes(config: DenseNetConfig) -> dict[str, tuple]:
    """Every trainable array's name and shape, in declaration order."""
    k = config.growth_rate
    shapes = {"stem.weight": (config.stem_channels, config.in_channels, 3, 3)}
    for b in range(config.num_blocks):
        for l, cin in enumerate(config.layer_input_widths(b)):
            p = f"block{b}.layer{l}"
            shapes[f"{p}.bn.gamma"] = (cin,)
            shapes[f"{p}.bn.beta"] = (cin,)
            shapes[f"{p}.conv.weight"] = (k, cin, 3, 3)
    f = config.feature_width
    shapes["final_bn.gamma"] = (f,)
    shapes["final_bn.beta"] = (f,)
    shapes["head.weight"] = (f, config.nc_outputs)
    shapes["head.bias"] = (config.nc_outputs,)
    return shapes


def bn_layer_names(config: DenseNetConfig) -> list[str]:
    names = [
        f"block{b}.layer{l}.bn"
        for b in range(config.num_blocks)
        for l in range(config.layers_per_block)
    ]
    return names + ["final_bn"]


class DenseNetModel:
    """Parameters, normalization statistics and config of one network."""

    def __init__(self, config: DenseNetConfig, params: dict, bn_states: dict, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = params
        self.bn_states = bn_states
        self.check_shapes()

    @classmethod
    def init(cls, config: DenseNetConfig | None = None, seed: int = 0, dtype=np.float32) -> "DenseNetModel":
        """He-normal kernels, zero offsets/biases, unit scales."""
        config = config or DenseNetConfig()
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xD3])))
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".gamma"):
                a = np.ones(shape)
            elif name.endswith((".beta", ".bias")):
                a = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                a = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            params[name] = a.astype(dtype)
        states = {}
        for name in bn_layer_names(config):
            states[name] = BatchNormState.fresh(params[f"{name}.gamma"].shape[0])
        return cls(config, params, states, dtype)

    def check_shapes(self):
        expected = param_shapes(self.config)
        if list(expected) != list(self.params):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")
        if sorted(self.bn_states) != sorted(bn_layer_names(self.config)):
            raise ValueError("normalization states do not match the configuration")

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Fresh leaf tensors sharing this model's arrays."""
        return {n: Tensor(a, requires_grad=requires_grad, name=n) for n, a in self.params.items()}

    def copy(self) -> "DenseNetModel":
        return DenseNetModel(
            self.config,
            {n: a.copy() for n, a in self.params.items()},
            {n: BatchNormState(s.running_mean.copy(), s.running_var.copy()) for n, s in self.bn_states.items()},
            self.dtype,
        )

    def astype(self, dtype) -> "DenseNetModel":
        m = self.copy()
        m.dtype = np.dtype(dtype)
        m.params = {n: a.astype(dtype) for n, a in m.params.items()}
        return m


def dense_layer(x: Tensor, p: dict, state: BatchNormState, prefix: str, config: DenseNetConfig,
                training: bool, rng) -> Tensor:
    h = batch_norm_relu(x, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"], state, training,
                        config.bn_momentum, config.bn_eps, pad=1)
    h = conv2d_3x3(h, p[f"{prefix}.conv.weight"], padded=True)
    return dropout(h, config.dropout_rate, rng, training)


def dense_block(x: Tensor, model: DenseNetModel, block: int, p: dict, training: bool, rng=None) -> Tensor:
    """Run one dense block; output has ``input + L * k`` channels."""
    config = model.config
    expected = config.block_input_width(block)
    if x.shape[1] != expected:
        raise ValueError(f"block {block} expects {expected} channels, got {x.shape[1]}")
    features = [x]
    for l in range(config.layers_per_block):
        prefix = f"block{block}.layer{l}"
        inp = features[0] if len(features) == 1 else concat(features, axis=1)
        features.append(dense_layer(inp, p, model.bn_states[f"{prefix}.bn"], prefix, config, training, rng))
    return concat(features, axis=1)


def transition(x: Tensor) -> Tensor:
    """Halve the spatial size with 2x2 average pooling; channels unchanged."""
    return avg_pool2x2(x)


def forward(model: DenseNetModel, x, mode: str = "eval", rng=None, params: dict | None = None,
            return_features: bool = False):
    """Raw regression outputs ``(N, nc)`` for inputs ``(N, 3, 64, 64)`` in [0, 1].

    ``mode="train"`` uses batch statistics and dropout (``rng`` required when
    dropout is enabled). Pass ``params`` from :meth:`DenseNetModel.leaves` to
    collect gradients. With ``return_features`` also returns the pooled
    feature tensor fed to the head.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    config = model.config
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    want = (config.in_channels, config.input_size, config.input_size)
    if xt.ndim != 4 or tuple(xt.shape[1:]) != want:
        raise ValueError(f"input must be (N, {want[0]}, {want[1]}, {want[2]}), got {xt.shape}")
    if xt.dtype != model.dtype:
        xt = Tensor(xt.data.astype(model.dtype))
    p = params if params is not None else model.leaves(requires_grad=False)

    h = conv2d_3x3(xt, p["stem.weight"])
    for b in range(config.num_blocks):
        h = dense_block(h, model, b, p, training, rng)
        if b < config.num_blocks - 1:
            h = transition(h)
    h = batch_norm_relu(h, p["final_bn.gamma"], p["final_bn.beta"], model.bn_states["final_bn"],
                        training, config.bn_momentum, config.bn_eps)
    feats = global_avg_pool(h)
    out = linear(feats, p["head.weight"], p["head.bias"])
    return (out, feats) if return_features else out


def to_input(pixels) -> np.ndarray:
    """``(N, 64, 64, 3)`` uint8 patches -> ``(N, 3, 64, 64)`` floats in [0, 1]."""
    a = np.asarray(pixels)
    if a.ndim == 3:
        a = a[None]
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2), dtype=np.float32) / np.float32(255.0)
