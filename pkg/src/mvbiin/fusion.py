"""Selective view-weight fusion.

Given per-view losses ``L``, the weights minimise ``sum_v alpha_v**gamma * L_v``
over the probability simplex with exactly ``s`` nonzero entries. The support is
the ``s`` smallest losses and on it ``alpha_v ∝ L_v ** (1 / (1 - gamma))``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .numerics import softmax, softmax_cross_entropy

LOSS_FLOOR = 1e-12


@dataclass
class ViewWeights:
    alpha: np.ndarray
    gamma: float
    s: int

    @classmethod
    def uniform(cls, M, gamma=2.0, s=None):
        return cls(np.full(M, 1.0 / M), float(gamma), int(s if s is not None else M))

    @property
    def support(self):
        return np.flatnonzero(self.alpha > 0)


@dataclass
class LossVector:
    losses: np.ndarray
    order: np.ndarray  # view indices, ascending loss


def per_view_losses(logits, labels):
    shapes = {np.shape(z) for z in logits}
    if len(shapes) != 1:
        raise ValueError(f"per-view logits disagree in shape: {sorted(shapes)}")
    return np.array([softmax_cross_entropy(z, labels)[0] for z in logits])


def sort_losses(L) -> LossVector:
    L = np.asarray(L, dtype=np.float64)
    if np.isnan(L).any():
        raise NumericError(f"NaN in per-view losses {L.tolist()}")
    return LossVector(L, np.argsort(L, kind="stable"))


def validate_gamma_s(gamma, s, M):
    if not gamma > 1:
        raise ConfigError(f"gamma must be > 1, got {gamma}")
    if not (1 <= int(s) <= M) or int(s) != s:
        raise ConfigError(f"s must be an integer in [1, {M}], got {s}")


def solve_alpha(L, gamma, s) -> ViewWeights:
    """Closed-form minimiser of the sparse simplex-constrained fused loss."""
    L = np.asarray(L, dtype=np.float64)
    M = L.shape[0]
    validate_gamma_s(gamma, s, M)
    s = int(s)
    order = sort_losses(L).order
    chosen = order[:s]
    # log-domain normalisation; exponents reach 1/(1-gamma) * log(1e-12) for tiny losses
    logw = np.log(np.maximum(L[chosen], LOSS_FLOOR)) / (1.0 - gamma)
    # selected views keep a strictly positive weight even when exp underflows
    w = np.maximum(np.exp(logw - logw.max()), np.finfo(np.float64).tiny)
    w = w / w.sum()
    # push the rounding residual into the weights, largest first, until they sum to 1
    for i in np.argsort(-w, kind="stable"):
        resid = 1.0 - math.fsum(w)
        if resid == 0.0:
            break
        w[i] = max(w[i] + resid, np.finfo(np.float64).tiny)
    alpha = np.zeros(M)
    alpha[chosen] = w
    return ViewWeights(alpha, float(gamma), s)


def fused_objective(L, weights: ViewWeights):
    L = np.asarray(L, dtype=np.float64)
    return float(np.sum(weights.alpha ** weights.gamma * L))


def combine_weights(weights: ViewWeights, mode="alpha"):
    if mode == "alpha":
        return weights.alpha
    if mode == "alpha_gamma":
        w = weights.alpha ** weights.gamma
        return w / w.sum()
    raise ConfigError(f"predict_weighting must be 'alpha' or 'alpha_gamma', got {mode!r}")


def predict(logits, weights: ViewWeights, mode="alpha"):
    """Weighted mixture of per-view softmax probabilities; returns (labels, scores)."""
    coeff = combine_weights(weights, mode)
    scores = sum(c * softmax(z) for c, z in zip(coeff, logits) if c > 0)
    return np.argmax(scores, axis=1), scores


def write_alpha_csv(path, alpha):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["view_index", "weight"])
        for v, a in enumerate(alpha):
            w.writerow([v, repr(float(a))])


def write_alpha_history(path, history):
    """``history`` is a sequence of (epoch, alpha) pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "view_index", "weight"])
        for epoch, alpha in history:
            for v, a in enumerate(alpha):
                w.writerow([epoch, v, repr(float(a))])


def read_alpha_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["weight"]) for r in sorted(rows, key=lambda r: int(r["view_index"]))])
