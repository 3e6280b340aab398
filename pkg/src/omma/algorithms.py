"""Online learners over probability-estimate streams.

Every learner exposes ``step(eta) -> prediction`` followed by ``observe(y)``;
the two must strictly alternate.  Available algorithms:

* ``omma`` - predicts the argmax of the gradient-linearized utility at the
  current confusion matrix (a cost-sensitive rule), updates with true labels;
* ``omma-eta`` - same prediction rule, but updates its internal matrix with
  the expected confusion of the estimate, ignoring labels entirely;
* ``greedy`` - per-label maximizer of the exact expected utility including the
  current instance (macro-averaged metrics only);
* ``ofw`` / ``ofw-eta`` - periodic batch Frank-Wolfe refits over all buffered
  instances, producing a mixture of cost-sensitive classifiers;
* ``offline-fw`` - one Frank-Wolfe fit on the estimate sequence before the
  run, no updates afterwards;
* ``topk`` / ``thresh05`` - estimate-only baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import policy
from .confusion import Labels, ProbEstimate, Task, init_state, multiclass_to_multilabel
from .metrics import BINARY, MACRO, Metric


class ProtocolError(RuntimeError):
    """step/observe called out of order."""


class UnsupportedMetricError(ValueError):
    """The algorithm cannot optimize this metric/averaging combination."""


ALGORITHMS = ("omma", "omma-eta", "greedy", "ofw", "ofw-eta", "offline-fw",
              "topk", "thresh05")


@dataclass(frozen=True)
class LearnerConfig:
    """Everything needed to build a learner reproducibly."""

    algorithm: str
    task: Task
    metric: Metric
    lam: float = 0.0
    seed: int = 0
    sparse_k: int | None = None        # top-k' sparse prediction path
    fw_iterations: int = 100
    refit_mode: str = "interval"       # "interval" or "cumulative"
    deterministic_mixture: bool = False

    @property
    def budget(self) -> int | None:
        return self.metric.budget_k


class OnlineLearner:
    """Base class enforcing the strict step/observe alternation."""

    def __init__(self, cfg: LearnerConfig):
        self.cfg = cfg
        self.task = cfg.task
        self.metric = cfg.metric
        self._pending: tuple[ProbEstimate, Labels] | None = None

    def step(self, eta: ProbEstimate) -> Labels:
        if self._pending is not None:
            raise ProtocolError("step called twice without observe")
        pred = self._predict(eta)
        self._pending = (eta, pred)
        return pred

    def observe(self, y: Labels) -> None:
        if self._pending is None:
            raise ProtocolError("observe called without a pending step")
        eta, pred = self._pending
        self._pending = None
        self._update(y, eta, pred)

    def _predict(self, eta: ProbEstimate) -> Labels:
        raise NotImplementedError

    def _update(self, y: Labels, eta: ProbEstimate, pred: Labels) -> None:
        pass


class OmmaLearner(OnlineLearner):
    """Cost-sensitive argmax of the linearized utility, label-fed updates."""

    def __init__(self, cfg: LearnerConfig):
        super().__init__(cfg)
        self.state = init_state(cfg.task, cfg.lam)
        if cfg.sparse_k is not None:
            if cfg.task.is_multiclass:
                raise UnsupportedMetricError("sparse prediction is multilabel-only")
            if cfg.metric.averaging not in (MACRO, BINARY):
                raise UnsupportedMetricError(
                    "sparse prediction needs per-label (macro) gradients")

    def _predict(self, eta: ProbEstimate) -> Labels:
        if self.cfg.sparse_k is not None:
            return self._predict_sparse(eta)
        G = self.metric.gradient(self.state.normalized())
        if self.task.is_multiclass:
            return policy.decide_multiclass(G, eta, self.cfg.budget)
        g = policy.gains(policy.cost_coefficients(G), eta)
        return policy.decide_multilabel(g, self.cfg.budget)

    def _predict_sparse(self, eta: ProbEstimate) -> Labels:
        est = eta.top(self.cfg.sparse_k)
        blocks = self.state.normalized_blocks(est.indices)
        G = self.metric.block_gradient(blocks, self.task.m)
        return policy.decide_sparse(policy.cost_coefficients(G), est, self.cfg.budget)

    def _update(self, y: Labels, eta: ProbEstimate, pred: Labels) -> None:
        self.state.update(y, pred)


class OmmaEtaLearner(OmmaLearner):
    """Same rule, but the internal matrix accumulates expected confusions."""

    def _update(self, y: Labels, eta: ProbEstimate, pred: Labels) -> None:
        self.state.update_semi(eta, pred)


class GreedyLearner(OnlineLearner):
    """Maximizes the expected utility including the current instance.

    Tractable when the metric decomposes over labels, i.e. macro or binary
    averaging; each label weighs its four candidate count increments by the
    estimated label probability.
    """

    def __init__(self, cfg: LearnerConfig):
        super().__init__(cfg)
        if cfg.metric.averaging not in (MACRO, BINARY):
            raise UnsupportedMetricError(
                f"greedy supports macro/binary metrics, not {cfg.metric.averaging}")
        self.state = init_state(cfg.task, cfg.lam)

    def _label_blocks(self) -> np.ndarray:
        if self.task.is_multiclass:
            return multiclass_to_multilabel(self.state.counts)
        return self.state.counts

    def _gain_table(self, eta_dense: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Expected per-label utility for predicting 0 vs 1 on this instance."""
        S = self._label_blocks()
        tnext = self.state.t + 1
        vals = {}
        for (u, v) in ((0, 0), (0, 1), (1, 0), (1, 1)):
            upd = S.copy()
            upd[:, u, v] += 1.0
            vals[(u, v)] = self.metric.block_values(upd / tnext)
        gain0 = eta_dense * vals[(1, 0)] + (1.0 - eta_dense) * vals[(0, 0)]
        gain1 = eta_dense * vals[(1, 1)] + (1.0 - eta_dense) * vals[(0, 1)]
        return gain0, gain1

    def _predict(self, eta: ProbEstimate) -> Labels:
        gain0, gain1 = self._gain_table(eta.dense())
        delta = gain1 - gain0
        if self.task.is_multiclass:
            k = self.cfg.budget or 1
            order = np.argsort(-delta, kind="stable")[:k]
            return tuple(int(j) for j in np.sort(order))
        if self.cfg.budget is None:
            return tuple(int(j) for j in np.nonzero(delta >= 0.0)[0])
        order = np.argsort(-delta, kind="stable")[: self.cfg.budget]
        return tuple(int(j) for j in np.sort(order))

    def _update(self, y: Labels, eta: ProbEstimate, pred: Labels) -> None:
        self.state.update(y, pred)


@dataclass
class MixtureClassifier:
    """Convex combination of cost-sensitive classifiers (one gradient tensor each)."""

    tensors: list[np.ndarray]
    weights: np.ndarray
    final_cm: np.ndarray | None = field(repr=False, default=None)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be a distribution")
        self.weights = w


def refit_thresholds(mode: str = "interval", base: float = 10.0, ratio: float = 1.1):
    """Yield strictly increasing buffer sizes at which to re-run the batch fit.

    ``interval`` grows the gap between refits geometrically (cumulative sums of
    base * ratio^i); ``cumulative`` refits at base * ratio^i directly.
    """
    if mode not in ("interval", "cumulative"):
        raise ValueError(f"unknown refit mode: {mode!r}")
    total = 0.0
    term = base
    last = 0
    while True:
        if mode == "interval":
            total += term
        else:
            total = term
        term *= ratio
        nxt = int(total)
        if nxt > last:
            last = nxt
            yield nxt


def _decide_matrix(estimates: np.ndarray, G: np.ndarray, task: Task,
                   budget: int | None) -> np.ndarray:
    """Vectorized decisions of a cost-sensitive classifier over a buffer."""
    n = estimates.shape[0]
    if task.is_multiclass:
        scores = estimates @ G
        dec = np.zeros((n, task.m), dtype=bool)
        if budget is None:
            dec[np.arange(n), np.argmax(scores, axis=1)] = True
        else:
            cols = np.argsort(-scores, axis=1, kind="stable")[:, :budget]
            dec[np.arange(n)[:, None], cols] = True
        return dec
    alpha, beta = policy.cost_coefficients(G)
    g = estimates * alpha - beta
    if budget is None:
        return g >= 0.0
    dec = np.zeros((n, task.m), dtype=bool)
    cols = np.argsort(-g, axis=1, kind="stable")[:, :budget]
    dec[np.arange(n)[:, None], cols] = True
    return dec


def _buffer_confusion(task: Task, decisions: np.ndarray, labels: np.ndarray | None,
                      estimates: np.ndarray) -> np.ndarray:
    """Average confusion over the buffer, from labels or from estimates."""
    n = decisions.shape[0]
    if task.is_multiclass:
        if labels is not None:
            onehot = np.zeros((n, task.m))
            onehot[np.arange(n), labels] = 1.0
            return onehot.T @ decisions / n
        return estimates.T @ decisions / n
    ref = labels.astype(np.float64) if labels is not None else estimates
    d = decisions.astype(np.float64)
    C = np.empty((task.m, 2, 2))
    C[:, 1, 1] = (ref * d).mean(axis=0)
    C[:, 1, 0] = (ref * (1.0 - d)).mean(axis=0)
    C[:, 0, 1] = ((1.0 - ref) * d).mean(axis=0)
    C[:, 0, 0] = ((1.0 - ref) * (1.0 - d)).mean(axis=0)
    return C


def _initial_confusion(task: Task, pos_rate: np.ndarray, budget: int | None) -> np.ndarray:
    """Confusion of the trivial starting classifier.

    Multilabel: the all-negative classifier, or a uniformly random k-subset
    under a budget.  Multiclass: a uniformly random class (or k-subset).
    """
    if task.is_multiclass:
        k = budget or 1
        return np.outer(pos_rate, np.full(task.m, k / task.m))
    q = 0.0 if budget is None else budget / task.m
    C = np.empty((task.m, 2, 2))
    C[:, 1, 1] = pos_rate * q
    C[:, 1, 0] = pos_rate * (1.0 - q)
    C[:, 0, 1] = (1.0 - pos_rate) * q
    C[:, 0, 0] = (1.0 - pos_rate) * (1.0 - q)
    return C


def fw_fit(estimates: np.ndarray, labels: np.ndarray | None, task: Task,
           metric: Metric, iterations: int, use_labels: bool) -> MixtureClassifier:
    """Frank-Wolfe over the reachable confusion polytope of a buffer.

    Each iteration linearizes the utility at the current averaged confusion,
    builds the corresponding cost-sensitive classifier, measures its confusion
    on the buffer (from labels, or expected via the estimates), and moves with
    step size 2 / (q + 2).  Returns the induced classifier mixture; the first
    step has weight one, so the trivial initial classifier never survives.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    if estimates.ndim != 2 or estimates.shape[0] == 0:
        raise ValueError("need a nonempty (n, m) estimate buffer")
    if use_labels and labels is None:
        raise ValueError("use_labels requires a label buffer")
    if iterations < 1:
        raise ValueError("need at least one iteration")
    budget = metric.budget_k
    if use_labels:
        if task.is_multiclass:
            pos_rate = np.bincount(labels, minlength=task.m) / labels.shape[0]
        else:
            pos_rate = labels.mean(axis=0)
    else:
        pos_rate = estimates.mean(axis=0)
    cbar = _initial_confusion(task, pos_rate, budget)
    tensors: list[np.ndarray] = []
    weights: list[float] = []
    for q in range(iterations):
        G = metric.gradient(cbar)
        dec = _decide_matrix(estimates, G, task, budget)
        cq = _buffer_confusion(task, dec, labels if use_labels else None, estimates)
        gamma = 2.0 / (q + 2.0)
        cbar = (1.0 - gamma) * cbar + gamma * cq
        for i in range(len(weights)):
            weights[i] *= 1.0 - gamma
        tensors.append(G)
        weights.append(gamma)
    return MixtureClassifier(tensors, np.asarray(weights), final_cm=cbar)


class FrankWolfeLearner(OnlineLearner):
    """Buffers the stream and refits a classifier mixture on a growing schedule.

    Between refits each instance is served by one mixture component sampled
    with the component weights (seeded), matching the randomized-classifier
    semantics of the batch method.  Before the first refit it falls back to
    the top-k / 0.5-threshold baseline.
    """

    def __init__(self, cfg: LearnerConfig, use_labels: bool):
        super().__init__(cfg)
        self.use_labels = use_labels
        self.mixture: MixtureClassifier | None = None
        self._est_rows: list[np.ndarray] = []
        self._label_rows: list = []
        self._rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(cfg.seed)))
        self._schedule = refit_thresholds(cfg.refit_mode)
        self._next_refit = next(self._schedule)
        self._fallback = _fallback_learner(cfg)

    def _predict(self, eta: ProbEstimate) -> Labels:
        if self.mixture is None:
            return self._fallback._predict(eta)
        if self.cfg.deterministic_mixture:
            G = self.mixture.tensors[-1]
        else:
            idx = self._rng.choice(len(self.mixture.tensors), p=self.mixture.weights)
            G = self.mixture.tensors[idx]
        if self.task.is_multiclass:
            return policy.decide_multiclass(G, eta, self.cfg.budget)
        g = policy.gains(policy.cost_coefficients(G), eta)
        return policy.decide_multilabel(g, self.cfg.budget)

    def _update(self, y: Labels, eta: ProbEstimate, pred: Labels) -> None:
        self._est_rows.append(eta.dense())
        if self.task.is_multiclass:
            self._label_rows.append(y[0])
        else:
            row = np.zeros(self.task.m, dtype=bool)
            row[list(y)] = True
            self._label_rows.append(row)
        if len(self._est_rows) >= self._next_refit:
            self._refit()
            while self._next_refit <= len(self._est_rows):
                self._next_refit = next(self._schedule)

    def _refit(self) -> None:
        estimates = np.vstack(self._est_rows)
        if self.task.is_multiclass:
            labels = np.asarray(self._label_rows, dtype=np.int64)
        else:
            labels = np.vstack(self._label_rows)
        self.mixture = fw_fit(estimates, labels if self.use_labels else None,
                              self.task, self.metric, self.cfg.fw_iterations,
                              self.use_labels)


class OfflineFWLearner(OnlineLearner):
    """Frank-Wolfe mixture fitted once on the estimate sequence, then frozen."""

    def __init__(self, cfg: LearnerConfig):
        super().__init__(cfg)
        self.mixture: MixtureClassifier | None = None
        self._rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(cfg.seed)))

    def prefit(self, estimates: list[ProbEstimate]) -> None:
        rows = np.vstack([e.dense() for e in estimates])
        self.mixture = fw_fit(rows, None, self.task, self.metric,
                              self.cfg.fw_iterations, use_labels=False)

    def _predict(self, eta: ProbEstimate) -> Labels:
        if self.mixture is None:
            raise ProtocolError("offline-fw must be prefit on the estimate sequence")
        if self.cfg.deterministic_mixture:
            G = self.mixture.tensors[-1]
        else:
            idx = self._rng.choice(len(self.mixture.tensors), p=self.mixture.weights)
            G = self.mixture.tensors[idx]
        if self.task.is_multiclass:
            return policy.decide_multiclass(G, eta, self.cfg.budget)
        g = policy.gains(policy.cost_coefficients(G), eta)
        return policy.decide_multilabel(g, self.cfg.budget)


class TopKLearner(OnlineLearner):
    """Predicts the k estimate entries with the highest probabilities."""

    def __init__(self, cfg: LearnerConfig):
        super().__init__(cfg)
        if cfg.budget is None and not cfg.task.is_multiclass:
            raise UnsupportedMetricError("topk needs a budget on multilabel tasks")
        self.k = cfg.budget or 1

    def _predict(self, eta: ProbEstimate) -> Labels:
        dense = eta.dense()
        return tuple(int(j) for j in np.sort(
            np.argsort(-dense, kind="stable")[: self.k]))


class ThresholdLearner(OnlineLearner):
    """Predicts every label whose estimated probability strictly exceeds 0.5."""

    def __init__(self, cfg: LearnerConfig):
        super().__init__(cfg)
        if cfg.task.is_multiclass:
            raise UnsupportedMetricError("thresh05 applies to multilabel tasks only")

    def _predict(self, eta: ProbEstimate) -> Labels:
        return tuple(int(j) for j in eta.indices[eta.values > 0.5])


def _fallback_learner(cfg: LearnerConfig) -> OnlineLearner:
    if cfg.budget is not None or cfg.task.is_multiclass:
        return TopKLearner(cfg)
    return ThresholdLearner(cfg)


def make_learner(cfg: LearnerConfig) -> OnlineLearner:
    if cfg.algorithm == "omma":
        return OmmaLearner(cfg)
    if cfg.algorithm == "omma-eta":
        return OmmaEtaLearner(cfg)
    if cfg.algorithm == "greedy":
        return GreedyLearner(cfg)
    if cfg.algorithm == "ofw":
        return FrankWolfeLearner(cfg, use_labels=True)
    if cfg.algorithm == "ofw-eta":
        return FrankWolfeLearner(cfg, use_labels=False)
    if cfg.algorithm == "offline-fw":
        return OfflineFWLearner(cfg)
    if cfg.algorithm == "topk":
        return TopKLearner(cfg)
    if cfg.algorithm == "thresh05":
        return ThresholdLearner(cfg)
    raise ValueError(f"unknown algorithm: {cfg.algorithm!r}")
