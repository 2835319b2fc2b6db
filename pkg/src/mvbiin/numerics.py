"""Differentiable matrix operations with hand-written backward rules.

Arrays are plain numpy ``ndarray`` objects. Anything that needs a gradient is
wrapped in a :class:`Node`; every operation applied through a :class:`Tape`
records a closure that maps the output gradient to input gradients, and
:meth:`Tape.backward` replays them in reverse order.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def make_rng(seed) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


class Node:
    """A value plus its accumulated gradient."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node({self.name or ''}, shape={self.value.shape})"


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x)


class BatchNormParams:
    """Learnable scale/shift plus the running statistics used in eval mode."""

    def __init__(self, width, dtype=np.float64, name="bn"):
        self.gamma = Node(np.ones(width, dtype=dtype), f"{name}.gamma")
        self.beta = Node(np.zeros(width, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)
        self.momentum = BN_MOMENTUM
        self.eps = BN_EPS


class Tape:
    """Ordered record of operations for reverse-mode differentiation.

    With ``record=False`` the ops only compute forward values.
    """

    def __init__(self, record=True):
        self.record = record
        self.ops = []

    def _push(self, op, inputs, output, backward):
        if self.record:
            self.ops.append((op, inputs, output, backward))
        return output

    def backward(self, output: Node, seed=None):
        if seed is None:
            seed = np.ones_like(output.value)
        output.grad = seed if output.grad is None else output.grad + seed
        visited = 0
        for _, inputs, out, fn in reversed(self.ops):
            visited += 1
            if out.grad is None:
                continue
            for node, g in zip(inputs, fn(out.grad)):
                if g is None or not isinstance(node, Node):
                    continue
                node.grad = g if node.grad is None else node.grad + g
        return visited

    # -- operations ---------------------------------------------------------

    def affine(self, x, W, b):
        """``x @ W.T + b`` for ``x`` (batch, m_in), ``W`` (m_out, m_in)."""
        xv, Wv, bv = _val(x), _val(W), _val(b)
        if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[1]:
            raise DimensionError(f"affine: input {xv.shape} does not conform to weight {Wv.shape}")
        if bv.shape != (Wv.shape[0],):
            raise DimensionError(f"affine: bias {bv.shape} does not conform to weight {Wv.shape}")
        out = Node(xv @ Wv.T + bv)

        def backward(g):
            return g @ Wv, g.T @ xv, g.sum(axis=0)

        return self._push("affine", (x, W, b), out, backward)

    def relu(self, x):
        xv = _val(x)
        mask = xv > 0
        out = Node(np.where(mask, xv, 0.0).astype(xv.dtype, copy=False))
        return self._push("relu", (x,), out, lambda g: (g * mask,))

    def batchnorm(self, x, params: BatchNormParams, train=True, groups=1):
        """Batch norm; in train mode ``groups`` equal row blocks are normalized independently."""
        xv = _val(x)
        gamma, beta = params.gamma.value, params.beta.value
        if xv.ndim != 2 or xv.shape[1] != gamma.shape[0]:
            raise DimensionError(f"batchnorm: input {xv.shape} vs {gamma.shape[0]} features")
        n = xv.shape[0]
        if n % groups:
            raise DimensionError(f"batchnorm: {n} rows do not split into {groups} groups")
        k = n // groups
        xg = xv.reshape(groups, k, -1)
        if train:
            if k < 2:
                raise DimensionError("batchnorm: train mode needs a batch of at least 2 rows")
            mean = xg.mean(axis=1, keepdims=True)
            var = xg.var(axis=1, keepdims=True)
            m = params.momentum
            params.running_mean = m * params.running_mean + (1 - m) * mean.mean(axis=(0, 1))
            params.running_var = m * params.running_var + (1 - m) * var.mean(axis=(0, 1))
        else:
            mean, var = params.running_mean, params.running_var
        inv_std = 1.0 / np.sqrt(var + params.eps)
        xhat = (xg - mean) * inv_std
        out = Node((gamma * xhat + beta).reshape(n, -1))

        def backward(g):
            g = g.reshape(groups, k, -1)
            dgamma = (g * xhat).sum(axis=(0, 1))
            dbeta = g.sum(axis=(0, 1))
            dxhat = g * gamma
            if train:
                dx = inv_std / k * (k * dxhat - dxhat.sum(axis=1, keepdims=True)
                                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
            else:
                dx = dxhat * inv_std
            return dx.reshape(n, -1), dgamma, dbeta

        return self._push("batchnorm", (x, params.gamma, params.beta), out, backward)

    def bilinear_form(self, x, y, B, bias):
        """``out[i, p] = x_i^T B[p] y_i + bias[p]`` with ``B`` of shape (d_B, d, d)."""
        xv, yv, Bv, biasv = _val(x), _val(y), _val(B), _val(bias)
        if xv.ndim != 2 or yv.ndim != 2 or xv.shape != yv.shape:
            raise DimensionError(f"bilinear_form: operands {xv.shape} and {yv.shape} differ")
        n, d = xv.shape
        if Bv.ndim != 3 or Bv.shape[1:] != (d, d) or Bv.shape[0] < 1:
            raise DimensionError(f"bilinear_form: metric stack {Bv.shape} does not match width {d}")
        P = Bv.shape[0]
        if biasv.shape != (P,):
            raise DimensionError(f"bilinear_form: bias {biasv.shape} vs {P} outputs")
        # xB[i, p, :] = x_i^T B[p]
        xB = (xv @ Bv.transpose(1, 0, 2).reshape(d, P * d)).reshape(n, P, d)
        out = Node(np.einsum("npj,nj->np", xB, yv) + biasv)

        def backward(g):
            dy = np.einsum("np,npj->nj", g, xB)
            By = (yv @ Bv.reshape(P * d, d).T).reshape(n, P, d)
            dx = np.einsum("np,npi->ni", g, By)
            dB = ((g[:, :, None] * xv[:, None, :]).reshape(n, P * d).T @ yv).reshape(P, d, d)
            return dx, dy, dB, g.sum(axis=0)

        return self._push("bilinear_form", (x, y, B, bias), out, backward)

    def concat(self, parts):
        """Column-wise concatenation."""
        vals = [_val(p) for p in parts]
        rows = {v.shape[0] for v in vals}
        if len(rows) != 1:
            raise DimensionError(f"concat: batch sizes differ {[v.shape for v in vals]}")
        edges = np.cumsum([0] + [v.shape[1] for v in vals])
        out = Node(np.concatenate(vals, axis=1))

        def backward(g):
            return tuple(g[:, a:b] for a, b in zip(edges[:-1], edges[1:]))

        return self._push("concat", tuple(parts), out, backward)

    def stack_rows(self, parts):
        """Row-wise concatenation; used to run one shared network over every view at once."""
        vals = [_val(p) for p in parts]
        cols = {v.shape[1] for v in vals}
        if len(cols) != 1:
            raise DimensionError(f"stack_rows: widths differ {[v.shape for v in vals]}")
        edges = np.cumsum([0] + [v.shape[0] for v in vals])
        out = Node(np.concatenate(vals, axis=0))

        def backward(g):
            return tuple(g[a:b] for a, b in zip(edges[:-1], edges[1:]))

        return self._push("stack_rows", tuple(parts), out, backward)

    def take_rows(self, x, start, stop):
        xv = _val(x)
        out = Node(xv[start:stop])

        def backward(g):
            full = np.zeros_like(xv)
            full[start:stop] = g
            return (full,)

        return self._push("take_rows", (x,), out, backward)

    def cross_entropy(self, logits, labels):
        """Batch-mean softmax cross-entropy as a scalar node."""
        loss, grad = softmax_cross_entropy(_val(logits), labels)
        out = Node(np.asarray(loss, dtype=_val(logits).dtype))
        return self._push("cross_entropy", (logits,), out, lambda g: (g * grad,))

    def weighted_sum(self, scalars, coeffs):
        """``sum_v coeffs[v] * scalars[v]`` for scalar nodes."""
        coeffs = [float(c) for c in coeffs]
        total = sum(c * float(_val(s)) for c, s in zip(coeffs, scalars))
        out = Node(np.asarray(total))
        return self._push("weighted_sum", tuple(scalars), out,
                          lambda g: tuple(c * g for c in coeffs))


def softmax(z):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Return (batch-mean loss, gradient wrt logits)."""
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=np.int64)
    n, C = z.shape
    if y.shape != (n,):
        raise DimensionError(f"cross-entropy: {y.shape[0] if y.ndim else 0} labels for {n} rows")
    if n and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"cross-entropy: labels must lie in [0, {C}), got range [{y.min()}, {y.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), y] - log_norm
    loss = float(-logp.mean())
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


# -- finite-difference checking ------------------------------------------------

def _rel_err(a, b, floor=1e-3):
    # below ``floor`` the comparison is absolute; biases feeding batch norm have exactly zero gradient
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _op_case(op, shapes, rng):
    """Build (leaf nodes, forward(tape) -> output node) for a named op."""
    if op == "affine":
        n, m_in, m_out = shapes
        leaves = [Node(rng.normal(size=(n, m_in))), Node(rng.normal(size=(m_out, m_in))),
                  Node(rng.normal(size=m_out))]
        return leaves, lambda t: t.affine(*leaves)
    if op == "relu":
        n, m = shapes
        leaves = [Node(_away_from_zero(rng, (n, m)))]
        return leaves, lambda t: t.relu(leaves[0])
    if op == "batchnorm":
        n, m = shapes
        bn = BatchNormParams(m)
        bn.gamma.value = rng.normal(size=m)
        bn.beta.value = rng.normal(size=m)
        x = Node(rng.normal(size=(n, m)))
        return [x, bn.gamma, bn.beta], lambda t: t.batchnorm(x, bn, train=True)
    if op == "bilinear_form":
        n, d, P = shapes
        leaves = [Node(rng.normal(size=(n, d))), Node(rng.normal(size=(n, d))),
                  Node(rng.normal(size=(P, d, d))), Node(rng.normal(size=P))]
        return leaves, lambda t: t.bilinear_form(*leaves)
    if op == "concat":
        n, *widths = shapes
        leaves = [Node(rng.normal(size=(n, w))) for w in widths]
        return leaves, lambda t: t.concat(leaves)
    if op == "softmax_cross_entropy":
        n, C = shapes
        z = Node(rng.normal(size=(n, C)))
        y = rng.integers(0, C, size=n)
        return [z], lambda t: t.cross_entropy(z, y)
    raise ValueError(f"unknown op {op!r}")


DEFAULT_SHAPES = {
    "affine": (4, 3, 2),
    "relu": (4, 3),
    "batchnorm": (8, 3),
    "bilinear_form": (3, 3, 2),
    "concat": (3, 1, 2, 2),
    "softmax_cross_entropy": (2, 3),
}


def numeric_grads(leaves, scalar_fn, step=1e-6):
    """Central-difference gradient of ``scalar_fn()`` wrt every leaf value."""
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.value, dtype=np.float64)
        flat = leaf.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar_fn()
            flat[i] = orig - step
            fm = scalar_fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def grad_check(op, shapes=None, seed=0, step=1e-6):
    """Max relative error between analytic and central-difference gradients.

    The op output is contracted with a fixed random weighting to form a scalar.
    """
    rng = make_rng(seed)
    shapes = shapes or DEFAULT_SHAPES[op]
    leaves, forward = _op_case(op, shapes, rng)
    probe = forward(Tape(record=False)).value
    weight = rng.normal(size=probe.shape)

    def scalar():
        return float(np.sum(weight * forward(Tape(record=False)).value))

    tape = Tape()
    out = forward(tape)
    for leaf in leaves:
        leaf.zero_grad()
    tape.backward(out, seed=weight)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]
    numeric = numeric_grads(leaves, scalar, step)
    return max(_rel_err(a, n) for a, n in zip(analytic, numeric))
