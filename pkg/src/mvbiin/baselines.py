"""Linear multi-view reference methods: two-view CCA, MvDA and a
concatenation + softmax-regression classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigError, NumericError
from .numerics import Node, Tape, make_rng, softmax
from .trainer import AdamState, adam_step, topk_accuracy

CCA_RIDGE = 1e-4
MVDA_RIDGE = 1e-6


@dataclass
class CcaSolution:
    w1: np.ndarray  # (d1, r)
    w2: np.ndarray  # (d2, r)
    rho: np.ndarray  # (r,)
    mean1: np.ndarray
    mean2: np.ndarray

    def transform(self, X1, X2):
        return (X1 - self.mean1) @ self.w1, (X2 - self.mean2) @ self.w2


def _inv_sqrt(S, ridge, label):
    """Symmetric inverse square root of ``S + ridge * tr(S)/dim * I``."""
    dim = S.shape[0]
    reg = ridge * np.trace(S) / dim
    evals, evecs = linalg.eigh(S + reg * np.eye(dim))
    if evals.min() <= 1e-12 * max(evals.max(), 1e-300):
        raise NumericError(f"{label} scatter is rank deficient; pass a positive ridge")
    return (evecs / np.sqrt(evals)) @ evecs.T, reg


def cca_fit(X1, X2, r=None, ridge=CCA_RIDGE) -> CcaSolution:
    """Canonical correlation analysis on row-sample matrices.

    Projections satisfy ``w^T (Xc^T Xc + reg I) w = I`` with ``Xc`` the centred
    view and ``reg = ridge * trace / dim``. ``ridge=0`` gives the exact problem.
    """
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if X1.ndim == 1:
        X1 = X1[:, None]
    if X2.ndim == 1:
        X2 = X2[:, None]
    if X1.shape[0] != X2.shape[0]:
        raise ValueError(f"views have {X1.shape[0]} and {X2.shape[0]} rows")
    r = r or min(X1.shape[1], X2.shape[1])
    m1, m2 = X1.mean(axis=0), X2.mean(axis=0)
    A, B = X1 - m1, X2 - m2
    K1, _ = _inv_sqrt(A.T @ A, ridge, "view 1")
    K2, _ = _inv_sqrt(B.T @ B, ridge, "view 2")
    T = K1 @ (A.T @ B) @ K2
    U, sv, Vt = linalg.svd(T, full_matrices=False)
    rho = np.clip(sv[:r], 0.0, 1.0)
    return CcaSolution(K1 @ U[:, :r], K2 @ Vt[:r].T, rho, m1, m2)


@dataclass
class MvdaSolution:
    transforms: list  # per view (d_v, r)
    objective: float
    eigenvalues: np.ndarray


def _stack_views(views_by_class):
    """Embed every sample into the joint space of all views (zero outside its block).

    ``views_by_class[v][k]`` is the (n_k^v, d_v) sample matrix of view v, class k.
    """
    dims = [vc[0].shape[1] for vc in views_by_class]
    offsets = np.cumsum([0] + dims)
    C = len(views_by_class[0])
    per_class = []
    for k in range(C):
        blocks = []
        for v, vc in enumerate(views_by_class):
            Z = np.zeros((vc[k].shape[0], offsets[-1]))
            Z[:, offsets[v]:offsets[v + 1]] = vc[k]
            blocks.append(Z)
        per_class.append(np.vstack(blocks))
    return per_class, offsets


def mvda_scatter(views_by_class):
    """Joint-space within- and between-class scatter matrices and block offsets."""
    per_class, offsets = _stack_views(views_by_class)
    allx = np.vstack(per_class)
    mu = allx.mean(axis=0)
    D = allx.shape[1]
    Sw = np.zeros((D, D))
    Sb = np.zeros((D, D))
    for Z in per_class:
        mk = Z.mean(axis=0)
        Zc = Z - mk
        Sw += Zc.T @ Zc
        Sb += Z.shape[0] * np.outer(mk - mu, mk - mu)
    return Sw, Sb, offsets


def trace_ratio(W, Sw, Sb):
    return float(np.trace(W.T @ Sb @ W) / np.trace(W.T @ Sw @ W))


def mvda_fit(views_by_class, r=1, ridge=MVDA_RIDGE) -> MvdaSolution:
    """Ratio-trace relaxation: top generalized eigenvectors of ``Sb u = lam Sw u``."""
    C = len(views_by_class[0])
    if C < 2:
        raise ConfigError("MvDA needs at least two classes")
    for v, vc in enumerate(views_by_class):
        if len(vc) != C:
            raise ConfigError(f"view {v} has {len(vc)} classes, expected {C}")
        if any(Xk.shape[0] < 2 for Xk in vc):
            raise ConfigError(f"view {v}: every class needs at least two samples")
    Sw, Sb, offsets = mvda_scatter(views_by_class)
    D = Sw.shape[0]
    Swr = Sw + ridge * np.trace(Sw) / D * np.eye(D)
    try:
        L = linalg.cholesky(Swr, lower=True)
    except linalg.LinAlgError:
        raise NumericError("within-class scatter is singular; increase the ridge") from None
    Linv = linalg.solve_triangular(L, np.eye(D), lower=True)
    evals, evecs = linalg.eigh(Linv @ Sb @ Linv.T)
    order = np.argsort(evals)[::-1][:r]
    U = Linv.T @ evecs[:, order]
    U /= np.linalg.norm(U, axis=0)
    transforms = [U[offsets[v]:offsets[v + 1]] for v in range(len(views_by_class))]
    return MvdaSolution(transforms, trace_ratio(U, Sw, Sb), evals[order])


def group_by_class(views, labels, num_classes):
    labels = np.asarray(labels)
    return [[X[labels == k] for k in range(num_classes)] for X in views]


@dataclass
class ConcatSoftmax:
    W: np.ndarray
    b: np.ndarray

    def scores(self, views):
        X = np.concatenate(views, axis=1)
        return softmax(X @ self.W.T + self.b)

    def evaluate(self, views, labels, k=5):
        s = self.scores(views)
        return topk_accuracy(s, labels, 1), topk_accuracy(s, labels, min(k, s.shape[1]))


def concat_softmax_fit(views, labels, num_classes, epochs=50, lr=1e-2, batch_size=64, seed=0):
    """Multinomial logistic regression on the concatenated views, trained with Adam."""
    X = np.concatenate(views, axis=1)
    y = np.asarray(labels)
    rng = make_rng(seed)
    W = Node(np.zeros((num_classes, X.shape[1])), "W")
    b = Node(np.zeros(num_classes), "b")
    params = {"W": W, "b": b}
    opt = AdamState(lr, 0.9, 0.999, 1e-8)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(y), batch_size):
            idx = order[i:i + batch_size]
            tape = Tape()
            loss = tape.cross_entropy(tape.affine(X[idx], W, b), y[idx])
            W.zero_grad()
            b.zero_grad()
            tape.backward(loss)
            adam_step(params, opt)
    return ConcatSoftmax(W.value, b.value)
