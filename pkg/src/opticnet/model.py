"""The Optic-Net family: branched residual unit, building block, full network."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from opticnet import ops
from opticnet.layers import (BatchNorm, ConfigurationError, Conv2D, ConvSpec, Dense,
                             LayerRecord, Module, PreActConv)
from opticnet.tensor import Tensor

VARIANT_REPEATS = {
    "opticnet47": (2, 2, 2, 2),
    "opticnet63": (3, 3, 3, 3),
    "opticnet71": (4, 4, 3, 3),
}


def normalize_variant(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in VARIANT_REPEATS:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANT_REPEATS)}")
    return key


@dataclass(frozen=True)
class ResidualUnitConfig:
    """Widths of one branched residual unit: C1 -> (C2 atrous | C3 atrous-separable) -> C4."""

    w1: int
    w_branch: int
    w4: int
    kernel: int = 2
    dilation: int = 2
    pre_activation: bool = True


@dataclass(frozen=True)
class StageConfig:
    res_conv_widths: tuple[int, int, int]
    unit: ResidualUnitConfig
    repeats: int
    downsample: bool

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigurationError(f"a stage needs at least one residual unit, got {self.repeats}")
        if self.unit.w4 != self.res_conv_widths[2]:
            raise ConfigurationError(
                f"residual unit output {self.unit.w4} must equal stage width {self.res_conv_widths[2]}")


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    stages: tuple[StageConfig, ...]
    classes: int = 4
    input_size: int = 224
    in_channels: int = 3
    stem_channels: int = 64
    stem_kernel: int = 7
    dense_hidden: int = 256
    res_conv_kernel: int = 2
    pool_window: int = 2

    @classmethod
    def from_variant(cls, variant: str, classes: int = 4, input_size: int = 224,
                     width_divisor: int = 1, num_stages: int = 4, **overrides) -> "ModelConfig":
        """layer-table widths; ``width_divisor``/``num_stages`` only for tiny test models."""
        key = normalize_variant(variant)
        repeats = VARIANT_REPEATS[key]
        d = width_divisor
        stages = []
        for k in range(num_stages):
            m = 2 ** k
            a = 64 * m // d
            unit = ResidualUnitConfig(32 * m // d, 32 * m // d, 256 * m // d)
            stages.append(StageConfig((a, a, 4 * a), unit, repeats[k], downsample=k > 0))
        return cls(key, tuple(stages), classes=classes, input_size=input_size,
                   stem_channels=64 // d, dense_hidden=256 // d, **overrides)

    @property
    def repeats(self) -> list[int]:
        return [s.repeats for s in self.stages]

    def validate(self):
        if self.classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.classes}")
        for k, s in enumerate(self.stages):
            if s.downsample != (k > 0):
                raise ConfigurationError("only stages 2, 3 and 4 downsample")
        factor = 2 ** len(self.stages)
        if self.input_size % factor:
            raise ConfigurationError(
                f"input size {self.input_size} is not divisible by the stride plan factor {factor}")
        if self.input_size // factor < self.pool_window:
            raise ConfigurationError(
                f"input size {self.input_size} leaves the last stage smaller than the pooling window")


class Sequence(Module):
    def __init__(self, modules: list[Module], prefix: str = "unit"):
        self.items = list(modules)
        self.prefix = prefix

    def children(self):
        return {f"{self.prefix}{i}": m for i, m in enumerate(self.items)}

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


class ResidualUnit(Module):
    """x + C4(relu(bn(C2(h) + C3(h)))), h = relu(bn(C1(relu(bn(x)))))."""

    def __init__(self, cfg: ResidualUnitConfig, in_channels: int, rng, dtype=np.float32):
        if in_channels != cfg.w4:
            raise ConfigurationError(
                f"identity skip needs input channels ({in_channels}) == unit output ({cfg.w4})")
        self.cfg = cfg
        self.c1 = PreActConv(ConvSpec((1, 1), cfg.w4, cfg.w1), rng, dtype)
        self.bn_mid = BatchNorm(cfg.w1, dtype)
        k, r = cfg.kernel, cfg.dilation
        self.c2 = Conv2D(ConvSpec((k, k), cfg.w1, cfg.w_branch, dilation=r, kind="atrous"), rng, dtype)
        self.c3 = Conv2D(ConvSpec((k, k), cfg.w1, cfg.w_branch, dilation=r, kind="atrous_separable"), rng, dtype)
        self.c4 = PreActConv(ConvSpec((1, 1), cfg.w_branch, cfg.w4), rng, dtype)

    def residual(self, x: Tensor) -> Tensor:
        h = self.c1(x)
        h = ops.relu(self.bn_mid(h))
        return self.c4(ops.add(self.c2(h), self.c3(h)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.w4:
            raise ConfigurationError(f"residual unit expects {self.cfg.w4} channels, got {x.shape}")
        return ops.add(x, self.residual(x))

    def middle_weight_count(self) -> int:
        return self.c2.spec.weight_count + self.c3.spec.weight_count

    def trace(self, shape, path, records):
        if shape[-1] != self.cfg.w4:
            raise ConfigurationError(f"{path}: residual unit expects {self.cfg.w4} channels, got {shape}")
        h = self.c1.trace(shape, path + "c1/", records)
        h = self.bn_mid.trace(h, path + "bn_mid", records)
        a = self.c2.trace(h, path + "c2", records)
        b = self.c3.trace(h, path + "c3", records)
        if a != b:
            raise ConfigurationError(f"{path}: branch shapes differ {a} vs {b}")
        out = self.c4.trace(a, path + "c4/", records)
        if out != shape:
            raise ConfigurationError(f"{path}: skip shape {shape} vs residual {out}")
        return out


class ResidualConvUnit(Module):
    """Pre-activation bottleneck with a 1x1 projection shortcut.

    When downsampling, stride 2 sits on the last 1x1 conv and the projection.
    """

    def __init__(self, widths: tuple[int, int, int], in_channels: int, downsample: bool, rng,
                 dtype=np.float32, middle_kernel: int = 2, stride_placement: str = "final"):
        if stride_placement != "final":
            raise ConfigurationError(f"stride placement must be 'final', got {stride_placement!r}")
        a, b, c = widths
        if in_channels == c and not downsample:
            raise ConfigurationError("residual conv unit needs a projection (channel or size change)")
        s = 2 if downsample else 1
        self.widths = widths
        self.stride = s
        self.bn_in = BatchNorm(in_channels, dtype)
        self.conv1 = Conv2D(ConvSpec((1, 1), in_channels, a), rng, dtype)
        self.conv2 = PreActConv(ConvSpec((middle_kernel, middle_kernel), a, b), rng, dtype)
        self.conv3 = PreActConv(ConvSpec((1, 1), b, c, stride=s), rng, dtype)
        self.proj = Conv2D(ConvSpec((1, 1), in_channels, c, stride=s), rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        pre = ops.relu(self.bn_in(x))
        main = self.conv3(self.conv2(self.conv1(pre)))
        return ops.add(main, self.proj(pre))

    def trace(self, shape, path, records):
        pre = self.bn_in.trace(shape, path + "bn_in", records)
        h = self.conv1.trace(pre, path + "conv1", records)
        h = self.conv2.trace(h, path + "conv2/", records)
        h = self.conv3.trace(h, path + "conv3/", records)
        p = self.proj.trace(pre, path + "proj", records)
        if h != p:
            raise ConfigurationError(f"{path}: main path {h} vs projection {p}")
        return h


def signal_propagation(alpha: Tensor, beta: Tensor) -> Tensor:
    """alpha + beta + alpha * beta."""
    return ops.add(ops.add(alpha, beta), ops.mul(alpha, beta))


class BuildingBlock(Module):
    """Stacked residual units (alpha) fused with the pooled-and-reinflated sigmoid signal (beta)."""

    def __init__(self, stage: StageConfig, rng, dtype=np.float32, pool_window: int = 2):
        self.units = Sequence([ResidualUnit(stage.unit, stage.unit.w4, rng, dtype)
                               for _ in range(stage.repeats)])
        self.pool_window = pool_window
        self.captured: dict[str, Tensor] | None = None

    def alpha(self, x: Tensor) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x

    def beta(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        pooled = ops.max_pool2d(x, self.pool_window, self.pool_window)
        return ops.sigmoid(ops.bilinear_upsample(pooled, h, w))

    def forward(self, x: Tensor, capture: bool = False, zero_alpha: bool = False,
                zero_beta: bool = False) -> Tensor:
        a = self.alpha(x)
        b = self.beta(x)
        if zero_alpha:
            a = ops.scale(a, 0.0)
        if zero_beta:
            b = ops.scale(b, 0.0)
        if a.shape != b.shape:
            raise RuntimeError(f"alpha {a.shape} and beta {b.shape} disagree")
        tau = signal_propagation(a, b)
        self.captured = {"alpha": a, "beta": b, "tau": tau} if capture else None
        return tau

    def trace(self, shape, path, records):
        a = shape
        for name, unit in self.units.children().items():
            a = unit.trace(a, f"{path}units/{name}/", records)
        _, h, w, c = shape
        pooled = (shape[0], (h - self.pool_window) // self.pool_window + 1,
                  (w - self.pool_window) // self.pool_window + 1, c)
        records.append(LayerRecord(path + "exhaust/max_pool", "max_pool", shape, pooled))
        records.append(LayerRecord(path + "exhaust/upsample", "bilinear_upsample", pooled, shape))
        records.append(LayerRecord(path + "exhaust/sigmoid", "sigmoid", shape, shape))
        if a != shape:
            raise RuntimeError(f"{path}: alpha {a} and beta {shape} disagree")
        return a


class Stage(Module):
    def __init__(self, cfg: StageConfig, in_channels: int, rng, dtype, middle_kernel: int, pool_window: int):
        self.cfg = cfg
        self.res_conv = ResidualConvUnit(cfg.res_conv_widths, in_channels, cfg.downsample, rng,
                                         dtype, middle_kernel=middle_kernel)
        self.block = BuildingBlock(cfg, rng, dtype, pool_window)

    def forward(self, x, capture=False):
        return self.block(self.res_conv(x), capture=capture)

    def trace(self, shape, path, records):
        h = self.res_conv.trace(shape, path + "res_conv/", records)
        return self.block.trace(h, path + "block/", records)


class OpticNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        k = cfg.stem_kernel
        self.stem = Conv2D(ConvSpec((k, k), cfg.in_channels, cfg.stem_channels, stride=2), rng, dtype)
        self.stem_bn = BatchNorm(cfg.stem_channels, dtype)
        stages = []
        c = cfg.stem_channels
        for s in cfg.stages:
            stages.append(Stage(s, c, rng, dtype, cfg.res_conv_kernel, cfg.pool_window))
            c = s.res_conv_widths[2]
        self.stages = Sequence(stages, prefix="stage")
        self.fc1 = Dense(c, cfg.dense_hidden, rng, dtype)
        self.fc2 = Dense(cfg.dense_hidden, cfg.classes, rng, dtype)

    def children(self):
        # stage paths are 1-based to match the stage numbering used in reports
        out = {"stem": self.stem, "stem_bn": self.stem_bn}
        out.update({f"stage{i + 1}": s for i, s in enumerate(self.stages)})
        out.update({"fc1": self.fc1, "fc2": self.fc2})
        return out

    def features(self, x: Tensor, capture: bool = False) -> list[Tensor]:
        """Stage outputs, in order."""
        h = ops.relu(self.stem_bn(self.stem(x)))
        outs = []
        for stage in self.stages:
            h = stage(h, capture=capture)
            outs.append(h)
        return outs

    def forward(self, x: Tensor, capture: bool = False) -> Tensor:
        if x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        h = self.features(x, capture=capture)[-1]
        h = ops.global_avg_pool(h)
        h = ops.relu(self.fc1(h))
        return self.fc2(h)

    def trace(self, shape=None, path: str = "", records: list[LayerRecord] | None = None):
        """Shape-only walk; returns (logits shape, records)."""
        if shape is None:
            shape = (1, self.cfg.input_size, self.cfg.input_size, self.cfg.in_channels)
        records = [] if records is None else records
        h = self.stem.trace(shape, path + "stem", records)
        h = self.stem_bn.trace(h, path + "stem_bn", records)
        for i, stage in enumerate(self.stages):
            start = len(records)
            h_in = h
            h = stage.trace(h, f"{path}stage{i + 1}/", records)
            records.append(LayerRecord(f"{path}stage{i + 1}", "stage", h_in, h,
                                       sum(r.weights for r in records[start:]),
                                       sum(r.macs for r in records[start:])))
        gap = (h[0], 1, 1, h[3])
        records.append(LayerRecord(path + "global_avg_pool", "global_avg_pool", h, gap))
        h = self.fc1.trace(gap, path + "fc1", records)
        return self.fc2.trace(h, path + "fc2", records), records

    def stage_shapes(self, input_size: int | None = None) -> list[tuple[int, int, int]]:
        size = input_size or self.cfg.input_size
        _, records = self.trace((1, size, size, self.cfg.in_channels))
        return [r.out_shape[1:] for r in records if r.kind == "stage"]


def assemble_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> OpticNet:
    return OpticNet(cfg, seed=seed, dtype=dtype)


def build_residual_unit(cfg: ResidualUnitConfig, seed: int = 0, dtype=np.float32) -> ResidualUnit:
    return ResidualUnit(cfg, cfg.w4, np.random.default_rng(seed), dtype)


def build_residual_conv_unit(widths, in_channels: int, downsample: bool, seed: int = 0,
                             dtype=np.float32, middle_kernel: int = 2,
                             stride_placement: str = "final") -> ResidualConvUnit:
    return ResidualConvUnit(tuple(widths), in_channels, downsample, np.random.default_rng(seed),
                            dtype, middle_kernel=middle_kernel, stride_placement=stride_placement)


def build_building_block(stage: StageConfig, seed: int = 0, dtype=np.float32) -> BuildingBlock:
    return BuildingBlock(stage, np.random.default_rng(seed), dtype)


def tiny_config(num_stages: int = 2, input_size: int = 8, classes: int = 3, width_divisor: int = 16,
                repeats: int = 1) -> ModelConfig:
    """Scaled-down model used by gradient checks."""
    cfg = ModelConfig.from_variant("opticnet47", classes=classes, input_size=input_size,
                                   width_divisor=width_divisor, num_stages=num_stages)
    stages = tuple(replace(s, repeats=repeats) for s in cfg.stages)
    return replace(cfg, stages=stages, variant="tiny")
