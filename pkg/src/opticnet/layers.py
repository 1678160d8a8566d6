"""Stateful layer objects wrapping :mod:`opticnet.ops`.

Modules form a tree; every Variable and running-statistics buffer gets a
stable slash-separated path (``stage2/block/unit0/c3/w_depth``) used by
checkpoints and the audit report.  ``trace`` walks the tree on shapes alone
so the 224x224 architecture can be inspected without running convolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Literal

import numpy as np

from opticnet import ops
from opticnet.tensor import ContractError, DimensionError, Tensor, Variable

ConvKind = Literal["regular", "atrous", "depthwise", "separable", "atrous_separable"]
CONV_KINDS = ("regular", "atrous", "depthwise", "separable", "atrous_separable")


class ConfigurationError(ValueError):
    pass


@dataclass
class LayerRecord:
    path: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    weights: int = 0
    macs: int = 0


class Module:
    training = True

    def children(self) -> dict[str, "Module"]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Module)}

    def own_variables(self) -> dict[str, Variable]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_variables(self, prefix: str = "") -> Iterator[tuple[str, Variable]]:
        for name, v in self.own_variables().items():
            yield prefix + name, v
        for name, child in self.children().items():
            yield from child.named_variables(f"{prefix}{name}/")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self.own_buffers().items():
            yield prefix + name, b
        for name, child in self.children().items():
            yield from child.named_buffers(f"{prefix}{name}/")

    def variables(self) -> list[Variable]:
        return [v for _, v in self.named_variables()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children().values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def trace(self, shape: tuple, path: str, records: list[LayerRecord]) -> tuple:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int]
    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    padding: str = "same"
    kind: ConvKind = "regular"

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ContractError(f"unknown convolution kind {self.kind!r}")
        if min(self.kernel) < 1 or self.stride < 1 or self.dilation < 1:
            raise ContractError("kernel, stride and dilation must be positive")
        if self.kind == "depthwise" and self.out_channels != self.in_channels:
            raise ContractError("depthwise convolution preserves the channel count")

    @property
    def receptive_field(self) -> tuple[int, int]:
        return tuple((f - 1) * self.dilation + 1 for f in self.kernel)

    @property
    def weight_count(self) -> int:
        fh, fw = self.kernel
        if self.kind in ("regular", "atrous"):
            return fh * fw * self.in_channels * self.out_channels
        if self.kind == "depthwise":
            return fh * fw * self.in_channels
        return fh * fw * self.in_channels + self.in_channels * self.out_channels

    def output_shape(self, shape: tuple) -> tuple:
        n, h, w, c = shape
        if c != self.in_channels:
            raise DimensionError(f"conv expects {self.in_channels} channels, got shape {shape}")
        fh, fw = self.kernel
        return (n, ops.conv_output_size(h, fh, self.stride, self.dilation, self.padding),
                ops.conv_output_size(w, fw, self.stride, self.dilation, self.padding), self.out_channels)

    def macs(self, out_shape: tuple) -> int:
        n, ho, wo, _ = out_shape
        fh, fw = self.kernel
        per_pos = {
            "regular": fh * fw * self.in_channels * self.out_channels,
            "atrous": fh * fw * self.in_channels * self.out_channels,
            "depthwise": fh * fw * self.in_channels,
        }.get(self.kind, fh * fw * self.in_channels + self.in_channels * self.out_channels)
        return n * ho * wo * per_pos


class Conv2D(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        fh, fw = spec.kernel
        cin, cout = spec.in_channels, spec.out_channels
        if spec.kind in ("regular", "atrous"):
            self.w = Variable(he_normal(rng, (fh, fw, cin, cout), fh * fw * cin, dtype))
        else:
            self.w_depth = Variable(he_normal(rng, (fh, fw, cin, 1), fh * fw, dtype))
            if spec.kind != "depthwise":
                self.w_point = Variable(he_normal(rng, (1, 1, cin, cout), cin, dtype))

    def own_variables(self):
        return {k: getattr(self, k) for k in ("w", "w_depth", "w_point") if hasattr(self, k)}

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        if s.kind in ("regular", "atrous"):
            return ops.conv2d(x, self.w, stride=s.stride, dilation=s.dilation, padding=s.padding)
        if s.kind == "depthwise":
            return ops.depthwise_conv2d(x, self.w_depth, stride=s.stride, dilation=s.dilation, padding=s.padding)
        return ops.separable_conv2d(x, self.w_depth, self.w_point, stride=s.stride,
                                    dilation=s.dilation, padding=s.padding)

    def trace(self, shape, path, records):
        out = self.spec.output_shape(shape)
        records.append(LayerRecord(path, f"conv:{self.spec.kind}", shape, out,
                                   self.spec.weight_count, self.spec.macs(out)))
        return out


@dataclass
class BatchNormState:
    gamma: Variable
    beta: Variable
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-3

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.99, epsilon: float = 1e-3):
        if epsilon <= 0:
            raise ContractError(f"batch-norm epsilon must be > 0, got {epsilon}")
        return cls(Variable(np.ones(channels, dtype)), Variable(np.zeros(channels, dtype)),
                   np.zeros(channels, dtype), np.ones(channels, dtype), momentum, epsilon)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.99, epsilon: float = 1e-3):
        self.state = BatchNormState.create(channels, dtype, momentum, epsilon)

    def own_variables(self):
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def own_buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def forward(self, x: Tensor) -> Tensor:
        s = self.state
        return ops.batch_norm(x, s.gamma, s.beta, s.running_mean, s.running_var,
                              training=self.training, momentum=s.momentum, eps=s.epsilon)

    def trace(self, shape, path, records):
        if shape[-1] != self.state.gamma.shape[0]:
            raise DimensionError(f"{path}: batch norm over {self.state.gamma.shape[0]} channels got {shape}")
        records.append(LayerRecord(path, "batch_norm", shape, shape))
        return shape


class PreActConv(Module):
    """BN -> ReLU -> convolution."""

    def __init__(self, spec: ConvSpec, rng, dtype=np.float32):
        self.bn = BatchNorm(spec.in_channels, dtype)
        self.conv = Conv2D(spec, rng, dtype)

    def forward(self, x):
        return self.conv(ops.relu(self.bn(x)))

    def trace(self, shape, path, records):
        shape = self.bn.trace(shape, path + "bn", records)
        return self.conv.trace(shape, path + "conv", records)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng, dtype=np.float32, bias: bool = True):
        limit = math.sqrt(6.0 / (in_features + out_features))
        self.w = Variable(rng.uniform(-limit, limit, (in_features, out_features)).astype(dtype))
        self.b = Variable(np.zeros(out_features, dtype)) if bias else None

    def own_variables(self):
        return {"w": self.w} | ({"b": self.b} if self.b is not None else {})

    def forward(self, x):
        return ops.dense(x, self.w, self.b)

    def trace(self, shape, path, records):
        feats = int(np.prod(shape[1:]))
        if feats != self.w.shape[0]:
            raise DimensionError(f"{path}: dense expects {self.w.shape[0]} features, got {shape}")
        out = (shape[0], self.w.shape[1])
        records.append(LayerRecord(path, "dense", shape, out, self.w.size, shape[0] * self.w.size))
        return out
