"""Confusion-matrix bookkeeping for online multiclass and multilabel prediction.

Storage conventions used throughout the package:

* multiclass: an ``(m, m)`` array of counts indexed ``[true, predicted]``;
* multilabel: an ``(m, 2, 2)`` stack of per-label binary blocks indexed
  ``[label, true, predicted]``, so within a block ``tn = [0, 0]``,
  ``fp = [0, 1]``, ``fn = [1, 0]``, ``tp = [1, 1]``.

Labels and predictions are sorted tuples of positive label indices.  A
:class:`ConfusionState` keeps unnormalized counts plus the instance count so
that repeated updates stay exact (no recursive rescaling); its regularizer
``lam`` is added once to every entry at initialization and therefore carries
weight ``lam / t`` after normalization at step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"

Labels = tuple[int, ...]


@dataclass(frozen=True)
class Task:
    """Classification task flavor: ``multiclass`` or ``multilabel`` with m labels."""

    kind: str
    m: int

    def __post_init__(self) -> None:
        if self.kind not in (MULTICLASS, MULTILABEL):
            raise ValueError(f"unknown task kind: {self.kind!r}")
        if self.kind == MULTICLASS and self.m < 2:
            raise ValueError("multiclass tasks need m >= 2")
        if self.m < 1:
            raise ValueError("need at least one label")

    @property
    def is_multiclass(self) -> bool:
        return self.kind == MULTICLASS

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.m, self.m) if self.is_multiclass else (self.m, 2, 2)


def multiclass(m: int) -> Task:
    return Task(MULTICLASS, m)


def multilabel(m: int) -> Task:
    return Task(MULTILABEL, m)


@dataclass(frozen=True)
class ProbEstimate:
    """Sparse vector of per-label probabilities; unlisted labels have probability 0."""

    m: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-d and aligned")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.m:
                raise ValueError("label index out of range")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
        if np.any(val < 0.0) or np.any(val > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")

    @classmethod
    def from_dense(cls, vec: np.ndarray) -> "ProbEstimate":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec.shape[0], np.arange(vec.shape[0], dtype=np.int64), vec.copy())

    @classmethod
    def from_pairs(cls, m: int, pairs: list[tuple[int, float]]) -> "ProbEstimate":
        pairs = sorted(pairs)
        idx = np.array([p[0] for p in pairs], dtype=np.int64)
        val = np.array([p[1] for p in pairs], dtype=np.float64)
        return cls(m, idx, val)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.m)
        out[self.indices] = self.values
        return out

    def top(self, k: int) -> "ProbEstimate":
        """Keep the k largest-probability entries (ties: smaller label index)."""
        if self.indices.size <= k:
            return self
        order = np.argsort(-self.values, kind="stable")[:k]
        keep = np.sort(self.indices[order])
        pos = np.searchsorted(self.indices, keep)
        return ProbEstimate(self.m, keep, self.values[pos])

    @property
    def total(self) -> float:
        return float(self.values.sum())


def check_labels(task: Task, labels: Labels, *, prediction: bool = False) -> Labels:
    """Validate a sorted tuple of label indices against the task."""
    prev = -1
    for j in labels:
        if not prev < j < task.m:
            raise ValueError(f"bad label set {labels!r} for m={task.m}")
        prev = j
    if task.is_multiclass and not prediction and len(labels) != 1:
        raise ValueError("multiclass labels must contain exactly one class")
    return labels


def instance_confusion(task: Task, y: Labels, yhat: Labels) -> np.ndarray:
    """Confusion contribution of a single (label, prediction) pair."""
    check_labels(task, y)
    check_labels(task, yhat, prediction=True)
    out = np.zeros(task.shape)
    if task.is_multiclass:
        out[y[0], list(yhat)] = 1.0
        return out
    pos = np.zeros(task.m, dtype=bool)
    pos[list(y)] = True
    pred = np.zeros(task.m, dtype=bool)
    pred[list(yhat)] = True
    out[np.arange(task.m), pos.astype(int), pred.astype(int)] = 1.0
    return out


def expected_instance_confusion(task: Task, eta: ProbEstimate, yhat: Labels) -> np.ndarray:
    """Expected single-instance confusion under label marginals ``eta``."""
    check_labels(task, yhat, prediction=True)
    if eta.m != task.m:
        raise ValueError("estimate size does not match the task")
    out = np.zeros(task.shape)
    p = eta.dense()
    if task.is_multiclass:
        for col in yhat:
            out[:, col] = p
        return out
    pred = np.zeros(task.m, dtype=bool)
    pred[list(yhat)] = True
    out[:, 1, 1] = p * pred
    out[:, 1, 0] = p * ~pred
    out[:, 0, 1] = (1.0 - p) * pred
    out[:, 0, 0] = (1.0 - p) * ~pred
    return out


def multiclass_to_multilabel(C: np.ndarray) -> np.ndarray:
    """Rewrite an (m, m) confusion matrix as m per-label binary blocks.

    Per label j: tp is the diagonal cell, fp the rest of column j, fn the
    rest of row j, tn everything else; each block sums to the total mass.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("expected a square matrix")
    diag = np.diagonal(C)
    row = C.sum(axis=1)
    col = C.sum(axis=0)
    total = C.sum()
    out = np.empty((C.shape[0], 2, 2))
    out[:, 1, 1] = diag
    out[:, 1, 0] = row - diag
    out[:, 0, 1] = col - diag
    out[:, 0, 0] = total - row - col + diag
    return out


@dataclass
class ConfusionState:
    """Running accumulator of confusion counts; the only memory of the online algorithms.

    ``counts`` holds lam plus the exact sum of per-instance contributions; the
    normalized matrix is ``counts / max(t, 1)``.  Single-writer: one state per
    algorithm instance.
    """

    task: Task
    lam: float
    counts: np.ndarray = field(repr=False)
    t: int = 0

    def update(self, y: Labels, yhat: Labels) -> None:
        """Fold in one observed (label, prediction) pair."""
        check_labels(self.task, y)
        check_labels(self.task, yhat, prediction=True)
        c = self.counts
        if self.task.is_multiclass:
            c[y[0], list(yhat)] += 1.0
        else:
            touched = set(y) | set(yhat)
            mask = np.ones(self.task.m, dtype=bool)
            mask[list(touched)] = False
            c[mask, 0, 0] += 1.0
            ypos = set(y)
            pred = set(yhat)
            for j in touched:
                c[j, int(j in ypos), int(j in pred)] += 1.0
        self.t += 1

    def update_semi(self, eta: ProbEstimate, yhat: Labels) -> None:
        """Fold in one expected (estimate, prediction) pair instead of a label."""
        check_labels(self.task, yhat, prediction=True)
        if eta.m != self.task.m:
            raise ValueError("estimate size does not match the task")
        c = self.counts
        if self.task.is_multiclass:
            p = eta.dense()
            for col in yhat:
                c[:, col] += p
        else:
            touched = set(eta.indices.tolist()) | set(yhat)
            mask = np.ones(self.task.m, dtype=bool)
            mask[list(touched)] = False
            c[mask, 0, 0] += 1.0
            dense = dict(zip(eta.indices.tolist(), eta.values.tolist()))
            pred = set(yhat)
            for j in touched:
                pj = dense.get(j, 0.0)
                v = int(j in pred)
                c[j, 1, v] += pj
                c[j, 0, v] += 1.0 - pj
        self.t += 1

    def normalized(self) -> np.ndarray:
        """Counts divided by t; at t=0 the raw lam-filled accumulator."""
        if self.t == 0:
            return self.counts.copy()
        return self.counts / self.t

    def normalized_blocks(self, indices: np.ndarray) -> np.ndarray:
        """Normalized per-label blocks for a label subset (multilabel only)."""
        return self.counts[indices] / max(self.t, 1)


def init_state(task: Task, lam: float) -> ConfusionState:
    if lam < 0:
        raise ValueError("regularizer must be nonnegative")
    return ConfusionState(task, lam, np.full(task.shape, float(lam)))
