"""Closed-form parameter counts, depletion factors, census and FLOP estimates."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from opticnet.tensor import ContractError

MIDDLE_KINDS = ("regular", "atrous", "separable", "atrous_separable", "branched")

# Reference depletion factors, used for flagging only.
PUBLISHED_DEPLETION_PCT = {"regular": 100.0, "atrous": 44.9, "separable": 12.5,
                           "atrous_separable": 11.6, "branched": 14.4}


def middle_param_formula(kind: str, f: int = 3, d_out: int = 64, d_in: int = 64) -> int:
    """Weights of a residual unit's middle convolution, biases excluded.

    ``d_out`` is the middle depth, ``d_in`` the depth of the first operation.
    The branched form splits both into halves: an atrous and an
    atrous-separable branch of ``d_out/2`` filters over ``d_in/2`` inputs.
    """
    f, D, Din = Fraction(f), Fraction(d_out), Fraction(d_in)
    if kind == "regular":
        v = f ** 2 * D * Din
    elif kind == "atrous":
        v = (f - 1) ** 2 * D * Din
    elif kind == "separable":
        v = (f ** 2 + D) * Din
    elif kind == "atrous_separable":
        v = ((f - 1) ** 2 + D) * Din
    elif kind == "branched":
        v = Fraction(1, 2) * ((f - 1) ** 2 * (1 + D / 2) + D / 2) * Din
    else:
        raise ContractError(f"unknown convolution kind {kind!r}; expected one of {MIDDLE_KINDS}")
    if v.denominator != 1:
        raise ContractError(f"{kind} formula is not integral at f={f}, D={d_out}, D_in={d_in}")
    return int(v)


def depletion_factor(kind: str, f: int = 3, d: int = 64) -> float:
    """Parameter ratio against a regular convolution, in percent (exact formula)."""
    if f < 2 or d < 1:
        raise ContractError("need f >= 2 and D >= 1")
    f_, D = Fraction(f), Fraction(d)
    table = {
        "regular": Fraction(1),
        "atrous": (1 - 1 / f_) ** 2,
        "separable": 1 / f_ ** 2 + 1 / D,
        "atrous_separable": 1 / f_ ** 2 + (1 - 1 / f_) ** 2 / D,
        "branched": 1 / (2 * f_) ** 2 + (1 - 1 / f_) ** 2 * (Fraction(1, 4) + 1 / (2 * D)),
    }
    if kind not in table:
        raise ContractError(f"unknown convolution kind {kind!r}")
    return float(100 * table[kind])


def unit_middle_dims(unit_cfg) -> tuple[int, int]:
    """(D_out, D_in) of the branched formula for a residual unit's widths."""
    return 2 * unit_cfg.w_branch, 2 * unit_cfg.w1


@dataclass
class Census:
    weights: int          # conv kernels + dense matrices
    dense_biases: int
    bn_learnables: int    # gamma + beta
    bn_buffers: int       # running mean + var

    @property
    def trainable(self) -> int:
        return self.weights + self.dense_biases + self.bn_learnables


def count_parameters(model) -> Census:
    w = b = bn = 0
    for path, v in model.named_variables():
        leaf = path.rsplit("/", 1)[-1]
        if leaf in ("gamma", "beta"):
            bn += v.size
        elif leaf == "b":
            b += v.size
        else:
            w += v.size
    buffers = sum(a.size for _, a in model.named_buffers())
    return Census(w, b, bn, buffers)


def estimate_flops(model, input_shape=None) -> int:
    """2 x multiply-accumulates over conv and dense layers (biases, BN, pooling excluded)."""
    _, records = model.trace(input_shape)
    return 2 * sum(r.macs for r in records if r.kind.startswith("conv") or r.kind == "dense")


def middle_conv_rows(f: int = 3, d: int = 64) -> list[dict]:
    rows = []
    for kind in MIDDLE_KINDS:
        rows.append({"kind": kind, "params": middle_param_formula(kind, f, d, d),
                     "phi_exact_pct": depletion_factor(kind, f, d),
                     "phi_ratio_pct": 100.0 * middle_param_formula(kind, f, d, d)
                     / middle_param_formula("regular", f, d, d),
                     "phi_published_pct": PUBLISHED_DEPLETION_PCT[kind]})
    return rows


def layer_table(model, input_size: int | None = None) -> str:
    """Text report of the architecture, one row per stage."""
    from opticnet.checkpoint import estimate_checkpoint_bytes

    cfg = model.cfg
    size = input_size or cfg.input_size
    _, records = model.trace((1, size, size, cfg.in_channels))
    by_path = {r.path: r for r in records}
    lines = [f"{'Layer':<24}{'Widths':<26}{'Repeats':>8}{'Output shape':>20}{'Weights':>14}"]

    def row(name, widths, reps, shape, weights):
        lines.append(f"{name:<24}{widths:<26}{reps:>8}{str(tuple(shape)):>20}{weights:>14,d}")

    stem = by_path["stem"]
    row(f"Conv {cfg.stem_kernel}x{cfg.stem_kernel}", f"[{cfg.stem_channels}]", "x1",
        stem.out_shape[1:], stem.weights)
    for i, s in enumerate(cfg.stages, start=1):
        p = f"stage{i}/"
        rc = [r for r in records if r.path.startswith(p + "res_conv/")]
        row(f"Stage{i}: Res Conv", str(list(s.res_conv_widths)), "x1", rc[-1].out_shape[1:],
            sum(r.weights for r in rc))
        units = [r for r in records if r.path.startswith(p + "block/")]
        u = s.unit
        row(f"Stage{i}: Res Unit", str([u.w1, u.w_branch, u.w_branch, u.w4]), f"x{s.repeats}",
            by_path[f"stage{i}"].out_shape[1:], sum(r.weights for r in units))
    gap = by_path["global_avg_pool"]
    row("Global Avg Pool", str(gap.out_shape[-1]), "", gap.out_shape[1:], 0)
    row("Dense Layer 1", str(cfg.dense_hidden), "", by_path["fc1"].out_shape[1:], by_path["fc1"].weights)
    row("Dense Layer 2", f"K={cfg.classes}", "", by_path["fc2"].out_shape[1:], by_path["fc2"].weights)
    census = count_parameters(model)
    flops = estimate_flops(model, (1, size, size, cfg.in_channels))
    lines += [
        "",
        f"variant                 {cfg.variant}  repeats {cfg.repeats}  input {size}x{size}x{cfg.in_channels}",
        f"weights (bias-free)     {census.weights:,d}  ({census.weights / 1e6:.2f} M)",
        f"dense biases            {census.dense_biases:,d}",
        f"batch-norm gamma/beta   {census.bn_learnables:,d}",
        f"batch-norm buffers      {census.bn_buffers:,d}",
        f"total trainable         {census.trainable:,d}",
        f"FLOPs per image         {flops:,d}  ({flops:.3e})",
        f"checkpoint bytes        {estimate_checkpoint_bytes(model):,d}",
    ]
    return "\n".join(lines)


def middle_conv_report(f: int = 3, d: int = 64) -> str:
    lines = [f"middle convolution comparison, f={f}, D_in=D_out={d}",
             f"{'kind':<18}{'params':>10}{'phi exact %':>14}{'ratio %':>10}{'published %':>13}"]
    for r in middle_conv_rows(f, d):
        flag = "" if abs(r["phi_exact_pct"] - r["phi_published_pct"]) < 0.05 else "  (published value differs)"
        lines.append(f"{r['kind']:<18}{r['params']:>10,d}{r['phi_exact_pct']:>14.2f}"
                     f"{r['phi_ratio_pct']:>10.2f}{r['phi_published_pct']:>13.1f}{flag}")
    return "\n".join(lines)
