"""Accuracy, macro sensitivity/specificity and penalty-weighted error.

Confusion matrices are indexed ``[true, predicted]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from opticnet.tensor import ContractError

OCT2017_CLASSES = ("Normal", "Drusen", "CNV", "DME")


class UndefinedClassError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ContractError(f"confusion matrix must be square, got {self.counts.shape}")
        if self.counts.shape[0] < 2:
            raise ContractError("confusion matrix needs K >= 2 classes")
        if (self.counts < 0).any():
            raise ContractError("confusion counts must be non-negative")
        if not self.labels:
            self.labels = [str(i) for i in range(self.k)]
        if len(self.labels) != self.k:
            raise ContractError(f"{len(self.labels)} labels for a {self.k}x{self.k} matrix")

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(cls, y_true, y_pred, k: int, labels=None) -> "ConfusionMatrix":
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(counts, list(labels) if labels is not None else [])

    def permuted(self, order) -> "ConfusionMatrix":
        order = list(order)
        return ConfusionMatrix(self.counts[np.ix_(order, order)], [self.labels[i] for i in order])

    def format(self) -> str:
        width = max(6, *(len(l) for l in self.labels)) + 1
        head = " " * width + "".join(f"{l:>{width}}" for l in self.labels)
        rows = [f"{l:>{width}}" + "".join(f"{v:>{width}d}" for v in row)
                for l, row in zip(self.labels, self.counts)]
        return "\n".join([head, *rows])


@dataclass
class PenaltyMatrix:
    weights: np.ndarray
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ContractError(f"penalty matrix must be square, got {w.shape}")
        if (w < 0).any():
            raise ContractError("penalty weights must be non-negative")
        if np.any(np.diag(w) != 0):
            raise ContractError("penalty matrix diagonal must be zero")


def _require_samples(cm: ConfusionMatrix):
    if cm.total <= 0:
        raise ContractError("metrics need a non-empty confusion matrix")


def accuracy(cm: ConfusionMatrix) -> float:
    _require_samples(cm)
    return float(np.trace(cm.counts) / cm.total)


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    _require_samples(cm)
    positives = cm.counts.sum(axis=1)
    for i, p in enumerate(positives):
        if p == 0:
            raise UndefinedClassError(f"class {cm.labels[i]!r} has no true samples; sensitivity undefined")
    return np.diag(cm.counts) / positives


def per_class_specificity(cm: ConfusionMatrix) -> np.ndarray:
    _require_samples(cm)
    c = cm.counts
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = cm.total - tp - fp - fn
    for i in range(cm.k):
        if tn[i] + fp[i] == 0:
            raise UndefinedClassError(f"class {cm.labels[i]!r} has no negative samples; specificity undefined")
    return tn / (tn + fp)


def sensitivity(cm: ConfusionMatrix) -> float:
    return float(per_class_recall(cm).mean())


def specificity(cm: ConfusionMatrix) -> float:
    return float(per_class_specificity(cm).mean())


def weighted_error(cm: ConfusionMatrix, penalties: PenaltyMatrix) -> float:
    """Penalty-weighted misclassification rate, in percent."""
    _require_samples(cm)
    if penalties.weights.shape != cm.counts.shape:
        raise ContractError(f"penalty shape {penalties.weights.shape} != confusion shape {cm.counts.shape}")
    return float(100.0 * (penalties.weights * cm.counts).sum() / cm.total)


def default_oct2017_penalties() -> PenaltyMatrix:
    w = [[0, 1, 1, 1],
         [1, 0, 1, 1],
         [4, 2, 0, 1],
         [4, 2, 1, 0]]
    return PenaltyMatrix(np.array(w, dtype=np.float64), list(OCT2017_CLASSES))


def read_grid(path) -> tuple[list[str], np.ndarray]:
    """Parse a K x K grid: a header row of class names, then K numeric rows.

    Separators may be commas or whitespace; a row may start with its class name.
    """
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ContractError(f"{path}: empty grid file")
    split = lambda s: [t for t in s.replace(",", " ").split() if t]
    header = split(lines[0])
    k = len(header)
    rows = []
    for ln in lines[1:]:
        toks = split(ln)
        if len(toks) == k + 1:
            if toks[0] != header[len(rows)]:
                raise ContractError(f"{path}: row label {toks[0]!r} != {header[len(rows)]!r}")
            toks = toks[1:]
        if len(toks) != k:
            raise ContractError(f"{path}: expected {k} values per row, got {len(toks)}")
        rows.append([float(t) for t in toks])
    if len(rows) != k:
        raise ContractError(f"{path}: expected {k} rows, got {len(rows)}")
    return header, np.array(rows)


def load_penalties(path) -> PenaltyMatrix:
    labels, grid = read_grid(path)
    return PenaltyMatrix(grid, labels)


def load_confusion(path) -> ConfusionMatrix:
    labels, grid = read_grid(path)
    if np.any(grid != np.round(grid)):
        raise ContractError(f"{path}: confusion counts must be integers")
    return ConfusionMatrix(grid.astype(np.int64), labels)


def write_grid(path, labels, grid) -> None:
    lines = [" ".join(labels)]
    for lab, row in zip(labels, np.asarray(grid)):
        lines.append(" ".join([lab] + [f"{v:g}" for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def align_penalties(penalties: PenaltyMatrix, labels: list[str]) -> PenaltyMatrix:
    """Reorder penalty rows/cols to a confusion matrix's class order (case-insensitive names)."""
    index = {l.lower(): i for i, l in enumerate(penalties.labels)}
    if not penalties.labels or any(l.lower() not in index for l in labels):
        return penalties
    order = [index[l.lower()] for l in labels]
    return PenaltyMatrix(penalties.weights[np.ix_(order, order)], list(labels))


def report(cm: ConfusionMatrix, penalties: PenaltyMatrix | None = None) -> dict[str, float]:
    out = {"accuracy": accuracy(cm)}
    for name, fn in (("sensitivity", sensitivity), ("specificity", specificity)):
        try:
            out[name] = fn(cm)
        except UndefinedClassError:
            out[name] = float("nan")
    if penalties is not None:
        out["weighted_error_pct"] = weighted_error(cm, align_penalties(penalties, cm.labels))
    return out
