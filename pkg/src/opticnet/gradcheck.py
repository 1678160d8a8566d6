"""Central finite-difference verification of the analytic gradients.

A probe draws random f64 inputs and weights, contracts the output with a
fixed random tensor to get a scalar, and compares autodiff gradients with
central differences.  Probes whose forward pass comes within ``kink_margin``
of a ReLU or max-pool kink are rejected and redrawn.

Relative error for a tensor is ``max|a - b| / max(max|a|, max|b|, 1e-12)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from opticnet import ops
from opticnet.layers import BatchNorm
from opticnet.model import (ModelConfig, OpticNet, ResidualConvUnit, ResidualUnit, ResidualUnitConfig,
                            StageConfig, BuildingBlock, tiny_config)
from opticnet.tensor import Tensor, Variable, backward, no_grad, zero_grad

DELTA = 1e-12


class ProbeError(RuntimeError):
    pass


def finite_diff(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbing ``x`` in place.

    ``coords`` restricts the probe to those flat indices; others stay 0.
    """
    if eps <= 0:
        raise ProbeError("eps must be positive")
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    idx = range(x.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ProbeError(f"non-finite function value at component {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.abs(a).max(initial=0)), float(np.abs(b).max(initial=0)), DELTA)
    return float(np.abs(a - b).max(initial=0)) / denom


@dataclass
class GradReport:
    name: str
    seed: int
    eps: float
    tol: float
    rel_errors: dict[str, float] = field(default_factory=dict)
    abs_errors: dict[str, float] = field(default_factory=dict)
    shapes: dict[str, tuple] = field(default_factory=dict)
    attempts: int = 1
    grad_norm: float = float("nan")

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values(), default=0.0)

    @property
    def worst(self) -> str:
        return max(self.rel_errors, key=self.rel_errors.get) if self.rel_errors else ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<28} seed={self.seed:<4} max_rel={self.max_rel_error:.2e}"
                f" worst={self.worst} attempts={self.attempts}")


@dataclass
class Probe:
    """A scalar function of named f64 arrays, with autodiff counterpart."""

    inputs: dict[str, np.ndarray]
    forward: Callable[[dict[str, Tensor]], Tensor]
    params: dict[str, Variable] = field(default_factory=dict)


def _scalar_readout(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(weights)))


def run_probe(name: str, build: Callable[[np.random.Generator], Probe], seed: int, tol: float = 1e-4,
              eps: float = 1e-5, kink_margin: float = 1e-3, max_attempts: int = 200,
              max_coords: int | None = None) -> GradReport:
    """Draw a kink-free probe, then compare autodiff and central differences."""
    rng = np.random.default_rng(seed)
    for attempt in range(1, max_attempts + 1):
        probe = build(rng)
        leaves = {k: Tensor(v, requires_grad=True) for k, v in probe.inputs.items()}
        with ops.kink_monitor() as mon:
            out = probe.forward(leaves)
        if mon.min_margin >= kink_margin:
            break
    else:
        raise ProbeError(f"{name}: no kink-free probe in {max_attempts} draws")
    readout = rng.standard_normal(out.shape)
    loss = _scalar_readout(out, readout)
    zero_grad(probe.params.values())
    backward(loss)

    report = GradReport(name, seed, eps, tol, attempts=attempt)
    targets: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for k, t in leaves.items():
        targets[f"input:{k}"] = (t.data, t.grad.copy())
    for k, v in probe.params.items():
        targets[k] = (v.data, v.grad.copy())

    def f() -> float:
        fresh = {k: Tensor(t.data) for k, t in leaves.items()}
        with no_grad():
            return float(_scalar_readout(probe.forward(fresh), readout).item())

    norms = []
    for key, (arr, analytic) in targets.items():
        coords = None
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, max_coords, replace=False))
        numeric = finite_diff(f, arr, eps, coords)
        a = analytic if coords is None else analytic.reshape(-1)[coords]
        n = numeric if coords is None else numeric.reshape(-1)[coords]
        report.rel_errors[key] = rel_error(a, n)
        report.abs_errors[key] = float(np.abs(a - n).max(initial=0))
        report.shapes[key] = arr.shape
        norms.append(float(np.sum(analytic.astype(np.float64) ** 2)))
    report.grad_norm = math.sqrt(sum(norms))
    return report


# ------------------------------------------------------------------ probes

def _u(rng, *shape):
    return rng.uniform(-1, 1, shape)


def _var(rng, *shape, scale=1.0):
    return Variable(rng.uniform(-1, 1, shape) * scale)


def _bn(rng, c, training=True):
    bn = BatchNorm(c, np.float64)
    bn.state.gamma.data[:] = rng.uniform(0.5, 1.5, c)
    bn.state.beta.data[:] = rng.uniform(-0.5, 0.5, c)
    bn.state.running_mean[:] = rng.uniform(-0.3, 0.3, c)
    bn.state.running_var[:] = rng.uniform(0.5, 1.5, c)
    bn.train(training)
    return bn


def _randomize(module, rng, scale=0.5):
    for path, v in module.named_variables():
        if path.endswith("gamma"):
            v.data[:] = rng.uniform(0.5, 1.5, v.shape)
        elif path.endswith("beta"):
            v.data[:] = rng.uniform(-0.3, 0.3, v.shape)
        else:
            v.data[:] = rng.uniform(-1, 1, v.shape) * scale
    return dict(module.named_variables())


def _layer_probes() -> dict[str, Callable[[np.random.Generator], Probe]]:
    def conv(kind, k, stride=1, dilation=1, padding="same"):
        def build(rng):
            w = _var(rng, k, k, 3, 4)
            return Probe({"x": _u(rng, 2, 6, 6, 3)},
                         lambda t: ops.conv2d(t["x"], w, stride=stride, dilation=dilation, padding=padding),
                         {"w": w})
        return build

    def sep(dilation):
        def build(rng):
            wd, wp = _var(rng, 2 if dilation > 1 else 3, 2 if dilation > 1 else 3, 3, 1), _var(rng, 1, 1, 3, 4)
            return Probe({"x": _u(rng, 2, 5, 5, 3)},
                         lambda t: ops.separable_conv2d(t["x"], wd, wp, dilation=dilation),
                         {"w_depth": wd, "w_point": wp})
        return build

    def bn(training):
        def build(rng):
            layer = _bn(rng, 3, training)
            return Probe({"x": _u(rng, 3, 4, 4, 3)}, lambda t: layer(t["x"]), dict(layer.named_variables()))
        return build

    def dense(rng):
        w, b = _var(rng, 12, 5), _var(rng, 5)
        return Probe({"x": _u(rng, 3, 2, 2, 3)}, lambda t: ops.dense(t["x"], w, b), {"w": w, "b": b})

    def ce(rng):
        labels = rng.integers(0, 4, 5)
        return Probe({"logits": _u(rng, 5, 4) * 3}, lambda t: ops.softmax_cross_entropy(t["logits"], labels))

    return {
        "conv2d_3x3": conv("regular", 3),
        "conv2d_3x3_stride2": conv("regular", 3, stride=2),
        "conv2d_1x1_stride2": conv("regular", 1, stride=2),
        "conv2d_valid": conv("regular", 3, padding="valid"),
        "atrous_conv2d_2x2_r2": conv("atrous", 2, dilation=2),
        "depthwise_conv2d": lambda rng: (lambda w: Probe(
            {"x": _u(rng, 2, 5, 5, 3)}, lambda t: ops.depthwise_conv2d(t["x"], w, dilation=2), {"w": w}))(
            _var(rng, 2, 2, 3, 1)),
        "separable_conv2d": sep(1),
        "atrous_separable_conv2d": sep(2),
        "max_pool2d": lambda rng: Probe({"x": _u(rng, 2, 6, 6, 3)}, lambda t: ops.max_pool2d(t["x"], 2, 2)),
        "bilinear_upsample": lambda rng: Probe({"x": _u(rng, 2, 3, 3, 2)},
                                               lambda t: ops.bilinear_upsample(t["x"], 7, 6)),
        "batch_norm_train": bn(True),
        "batch_norm_infer": bn(False),
        "relu": lambda rng: Probe({"x": _u(rng, 2, 3, 3, 2)}, lambda t: ops.relu(t["x"])),
        "sigmoid": lambda rng: Probe({"x": _u(rng, 2, 3, 3, 2) * 4}, lambda t: ops.sigmoid(t["x"])),
        "global_avg_pool": lambda rng: Probe({"x": _u(rng, 2, 3, 4, 2)}, lambda t: ops.global_avg_pool(t["x"])),
        "dense": dense,
        "softmax_cross_entropy": ce,
        "add_mul": lambda rng: Probe({"a": _u(rng, 2, 2, 2, 2), "b": _u(rng, 2, 2, 2, 2)},
                                     lambda t: ops.mul(ops.add(t["a"], t["b"]), t["a"])),
    }


LAYER_PROBES = _layer_probes()

SMALL_UNIT = ResidualUnitConfig(w1=4, w_branch=4, w4=8)
SMALL_STAGE = StageConfig((4, 4, 8), SMALL_UNIT, repeats=2, downsample=False)


def residual_unit_probe(rng, training=True) -> Probe:
    unit = ResidualUnit(SMALL_UNIT, 8, rng, np.float64).train(training)
    params = _randomize(unit, rng)
    return Probe({"x": _u(rng, 2, 4, 4, 8)}, lambda t: unit(t["x"]), params)


def residual_conv_unit_probe(rng) -> Probe:
    unit = ResidualConvUnit((3, 3, 8), 4, True, rng, np.float64)
    params = _randomize(unit, rng)
    return Probe({"x": _u(rng, 2, 4, 4, 4)}, lambda t: unit(t["x"]), params)


def building_block_probe(rng, training=True, zero_residual=False) -> Probe:
    block = BuildingBlock(SMALL_STAGE, rng, np.float64).train(training)
    params = _randomize(block, rng)
    if zero_residual:
        for path, v in params.items():
            if not path.endswith(("gamma", "beta")):
                v.data[:] = 0.0
    return Probe({"x": _u(rng, 2, 4, 4, 8)}, lambda t: block(t["x"]), params)


def full_chain_probe(rng, cfg: ModelConfig | None = None) -> Probe:
    cfg = cfg or tiny_config()
    model = OpticNet(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    params = _randomize(model, rng)
    labels = rng.integers(0, cfg.classes, 2)
    x = rng.uniform(0, 1, (2, cfg.input_size, cfg.input_size, cfg.in_channels))
    return Probe({"x": x}, lambda t: ops.softmax_cross_entropy(model(t["x"]), labels), params)


def check_layer(name: str, seed: int, tol: float = 1e-4, eps: float = 1e-5) -> GradReport:
    return run_probe(name, LAYER_PROBES[name], seed, tol, eps)


def check_building_block(seed: int, tol: float = 1e-4, eps: float = 1e-5, training: bool = True) -> GradReport:
    name = "building_block" if training else "building_block_infer_bn"
    return run_probe(name, lambda rng: building_block_probe(rng, training), seed, tol, eps)


def check_full_chain(seed: int, tol: float = 1e-4, eps: float = 1e-5, max_coords: int | None = 12,
                     cfg: ModelConfig | None = None) -> GradReport:
    return run_probe("full_chain", lambda rng: full_chain_probe(rng, cfg), seed, tol, eps,
                     max_coords=max_coords)


def chain_gradient_norm(seed: int, cfg: ModelConfig | None = None) -> float:
    """Norm of the loss gradient over input and weights, no finite differences."""
    rng = np.random.default_rng(seed)
    probe = full_chain_probe(rng, cfg)
    x = Tensor(probe.inputs["x"], requires_grad=True)
    backward(probe.forward({"x": x}))
    total = float(np.sum(x.grad ** 2)) + sum(float(np.sum(v.grad ** 2)) for v in probe.params.values())
    return math.sqrt(total)


SUITES = ("layers", "units", "block", "chain", "all")


def run_suite(suite: str = "all", seeds=range(10), chain_seeds=range(3), tol: float = 1e-4,
              eps: float = 1e-5) -> list[GradReport]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    reports: list[GradReport] = []
    if suite in ("layers", "all"):
        for name in LAYER_PROBES:
            reports += [check_layer(name, s, tol, eps) for s in seeds]
    if suite in ("units", "all"):
        reports += [run_probe("residual_unit", residual_unit_probe, s, tol, eps) for s in seeds]
        reports += [run_probe("residual_conv_unit", residual_conv_unit_probe, s, tol, eps) for s in seeds]
    if suite in ("block", "all"):
        reports += [check_building_block(s, tol, eps, training=True) for s in seeds]
        reports += [check_building_block(s, tol, eps, training=False) for s in seeds]
    if suite in ("chain", "all"):
        reports += [check_full_chain(s, tol, eps) for s in chain_seeds]
    return reports


def write_csv(reports: list[GradReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe", "name", "seed", "tensor", "shape", "rel_error", "abs_error", "tol", "passed",
                    "eps", "attempts"])
        for i, r in enumerate(reports):
            for key in r.rel_errors:
                w.writerow([i, r.name, r.seed, key, "x".join(map(str, r.shapes[key])),
                            f"{r.rel_errors[key]:.3e}", f"{r.abs_errors[key]:.3e}", r.tol,
                            int(r.rel_errors[key] < r.tol), r.eps, r.attempts])
