"""Turning a utility gradient plus a probability estimate into a prediction.

The linearized objective of a candidate prediction is the dot product between
the gradient tensor and the expected single-instance confusion.  For
multilabel tasks this reduces to per-label gains ``g_j = alpha_j * eta_j -
beta_j`` with ``alpha_j = d_tp + d_tn - d_fp - d_fn`` and ``beta_j = d_tn -
d_fp``; for multiclass it reduces to per-class column scores.  Ties are broken
toward the smaller label index everywhere, and a gain of exactly zero predicts
positive.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .confusion import Labels, ProbEstimate


class CostCoefficients(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray


def cost_coefficients(G: np.ndarray) -> CostCoefficients:
    """Per-label (alpha, beta) from a multilabel gradient tensor."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 3 or G.shape[1:] != (2, 2):
        raise ValueError("expected an (m, 2, 2) gradient tensor")
    alpha = G[:, 1, 1] + G[:, 0, 0] - G[:, 0, 1] - G[:, 1, 0]
    beta = G[:, 0, 0] - G[:, 0, 1]
    return CostCoefficients(alpha, beta)


def gains(coeffs: CostCoefficients, eta: ProbEstimate | np.ndarray) -> np.ndarray:
    """Dense per-label gains; unlisted labels contribute eta_j = 0."""
    dense = eta.dense() if isinstance(eta, ProbEstimate) else np.asarray(eta, float)
    return coeffs.alpha * dense - coeffs.beta


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps the smaller index first among equal scores
    return np.sort(np.argsort(-scores, kind="stable")[:k])


def decide_multilabel(g: np.ndarray, budget: int | None = None) -> Labels:
    """Positive set from gains: thresholded at zero, or the top-k under a budget."""
    g = np.asarray(g, dtype=np.float64)
    if budget is None:
        return tuple(int(j) for j in np.nonzero(g >= 0.0)[0])
    if budget > g.shape[0]:
        raise ValueError(f"budget {budget} exceeds label count {g.shape[0]}")
    return tuple(int(j) for j in _top_k(g, budget))


def decide_multiclass(G: np.ndarray, eta: ProbEstimate | np.ndarray,
                      budget: int | None = None) -> Labels:
    """Class(es) maximizing the column scores sum_j G[j, l] * eta_j."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError("expected an (m, m) gradient matrix")
    dense = eta.dense() if isinstance(eta, ProbEstimate) else np.asarray(eta, float)
    if dense.shape[0] != G.shape[0]:
        raise ValueError("estimate length does not match the gradient")
    scores = dense @ G
    if budget is None:
        return (int(np.argmax(scores)),)
    if budget > scores.shape[0]:
        raise ValueError(f"budget {budget} exceeds class count {scores.shape[0]}")
    return tuple(int(j) for j in _top_k(scores, budget))


def decide_sparse(coeffs: CostCoefficients, eta: ProbEstimate,
                  budget: int | None = None) -> Labels:
    """Gain decision restricted to the estimate's support.

    ``coeffs`` holds (alpha, beta) for exactly the support labels, in support
    order.  Labels outside the support are treated as eta_j = 0 and are never
    predicted positive, even where a negative beta would flip the dense rule.
    """
    support = eta.indices
    if coeffs.alpha.shape[0] != support.shape[0]:
        raise ValueError("coefficients must align with the estimate support")
    g = coeffs.alpha * eta.values - coeffs.beta
    if budget is None:
        return tuple(int(j) for j in support[g >= 0.0])
    if budget > support.shape[0]:
        raise ValueError(f"budget {budget} exceeds support size {support.shape[0]}")
    return tuple(int(j) for j in np.sort(support[np.argsort(-g, kind="stable")[:budget]]))
