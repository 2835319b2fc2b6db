"""Per-view networks, pairwise bilinear interactions and the shared head."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .numerics import BatchNormParams, Node, Tape

CKPT_MAGIC = b"MVCKPT"
CKPT_VERSION = 1


@dataclass
class Dense:
    """Affine layer, optionally followed by batch norm and ReLU."""

    W: Node
    b: Node
    bn: BatchNormParams | None = None
    activate: bool = True

    def __call__(self, tape, x, train, groups=1):
        h = tape.affine(x, self.W, self.b)
        if self.bn is not None:
            h = tape.batchnorm(h, self.bn, train=train, groups=groups)
        if self.activate:
            h = tape.relu(h)
        return h


@dataclass
class ViewNet:
    layers: list[Dense]
    in_width: int

    @property
    def out_width(self):
        return self.layers[-1].W.value.shape[0] if self.layers else self.in_width


@dataclass
class BilinearSet:
    """One stack of ``d_B`` metric matrices and biases per unordered view pair."""

    pairs: dict[tuple[int, int], tuple[Node, Node]]
    batchnorm: dict[tuple[int, int], BatchNormParams] = field(default_factory=dict)

    def get(self, v, w):
        return self.pairs[(min(v, w), max(v, w))]

    @property
    def width(self):
        if not self.pairs:
            return 0
        return next(iter(self.pairs.values()))[0].value.shape[0]


@dataclass
class SharedHead:
    layers: list[Dense]

    @property
    def in_width(self):
        return self.layers[0].W.value.shape[1]


@dataclass
class MvNNBiInModel:
    view_nets: list[ViewNet]
    bilinear: BilinearSet
    head: SharedHead
    num_classes: int
    arch: dict

    @property
    def num_views(self):
        return len(self.view_nets)

    @property
    def d(self):
        return self.arch["d"]

    @property
    def d_B(self):
        return self.bilinear.width

    def named_parameters(self):
        out = {}
        for v, net in enumerate(self.view_nets):
            _dense_params(out, f"view{v}", net.layers)
        for (v, w), (B, bias) in sorted(self.bilinear.pairs.items()):
            out[f"bilinear.{v}-{w}.B"] = B
            out[f"bilinear.{v}-{w}.bias"] = bias
            bn = self.bilinear.batchnorm.get((v, w))
            if bn is not None:
                out[f"bilinear.{v}-{w}.bn.gamma"] = bn.gamma
                out[f"bilinear.{v}-{w}.bn.beta"] = bn.beta
        _dense_params(out, "head", self.head.layers)
        return out

    def named_batchnorms(self):
        out = {}
        for v, net in enumerate(self.view_nets):
            for i, layer in enumerate(net.layers):
                if layer.bn is not None:
                    out[f"view{v}.layer{i}.bn"] = layer.bn
        for (v, w), bn in sorted(self.bilinear.batchnorm.items()):
            out[f"bilinear.{v}-{w}.bn"] = bn
        for i, layer in enumerate(self.head.layers):
            if layer.bn is not None:
                out[f"head.layer{i}.bn"] = layer.bn
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_dict(self):
        """Copies of every parameter and running statistic."""
        state = {k: p.value.copy() for k, p in self.named_parameters().items()}
        for k, bn in self.named_batchnorms().items():
            state[f"{k}.running_mean"] = bn.running_mean.copy()
            state[f"{k}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        for k, p in params.items():
            if state[k].shape != p.value.shape:
                raise DimensionError(f"{k}: stored shape {state[k].shape} vs model {p.value.shape}")
            p.value = state[k].astype(p.value.dtype, copy=True)
        for k, bn in self.named_batchnorms().items():
            bn.running_mean = state[f"{k}.running_mean"].astype(bn.running_mean.dtype, copy=True)
            bn.running_var = state[f"{k}.running_var"].astype(bn.running_var.dtype, copy=True)


def _dense_params(out, prefix, layers):
    for i, layer in enumerate(layers):
        out[f"{prefix}.layer{i}.W"] = layer.W
        out[f"{prefix}.layer{i}.b"] = layer.b
        if layer.bn is not None:
            out[f"{prefix}.layer{i}.bn.gamma"] = layer.bn.gamma
            out[f"{prefix}.layer{i}.bn.beta"] = layer.bn.beta


# -- construction ---------------------------------------------------------------

def _glorot(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _dense(rng, m_in, m_out, dtype, name, batchnorm=True, activate=True):
    W = Node(_glorot(rng, (m_out, m_in), m_in, m_out, dtype), f"{name}.W")
    b = Node(np.zeros(m_out, dtype=dtype), f"{name}.b")
    bn = BatchNormParams(m_out, dtype, f"{name}.bn") if batchnorm else None
    return Dense(W, b, bn, activate)


def architecture(view_dims, num_classes, view_hidden=(400, 200), head_hidden=(300,), d_B=200,
                 use_view_nets=True, use_bilinear=True, bilinear_batchnorm=False):
    """Resolved widths for a model; ``d`` is the width every view is mapped to."""
    view_dims = [int(x) for x in view_dims]
    widths = list(view_dims) + [num_classes] + list(view_hidden) + list(head_hidden)
    if use_bilinear:
        widths.append(d_B)
    if any(w <= 0 for w in widths) or not view_dims:
        raise ConfigError(f"all widths must be positive: views={view_dims}, classes={num_classes}, "
                          f"view_hidden={list(view_hidden)}, head_hidden={list(head_hidden)}, d_B={d_B}")
    M = len(view_dims)
    if use_view_nets:
        if not view_hidden:
            raise ConfigError("view_hidden must name at least one layer")
        d = int(view_hidden[-1])
    else:
        d = max(view_dims)
    d_B_eff = int(d_B) if (use_bilinear and M > 1) else 0
    return {
        "view_dims": view_dims,
        "num_classes": int(num_classes),
        "view_hidden": [int(x) for x in view_hidden] if use_view_nets else [],
        "head_hidden": [int(x) for x in head_hidden],
        "d": d,
        "d_B": d_B_eff,
        "use_view_nets": bool(use_view_nets),
        "bilinear_batchnorm": bool(bilinear_batchnorm and d_B_eff > 0),
        "head_in": head_input_width(M, d, d_B_eff),
    }


def head_input_width(M, d, d_B):
    return d + (M - 1) * d_B


def init_model(arch: dict, rng, dtype=np.float64) -> MvNNBiInModel:
    """Glorot-uniform weights, zero biases, unit/zero batch-norm scale/shift."""
    M = len(arch["view_dims"])
    view_nets = []
    for v, d_v in enumerate(arch["view_dims"]):
        layers, m_in = [], d_v
        for i, m_out in enumerate(arch["view_hidden"]):
            layers.append(_dense(rng, m_in, m_out, dtype, f"view{v}.layer{i}"))
            m_in = m_out
        view_nets.append(ViewNet(layers, d_v))
    d, d_B = arch["d"], arch["d_B"]
    pairs, bns = {}, {}
    if d_B > 0:
        for v, w in combinations(range(M), 2):
            B = Node(_glorot(rng, (d_B, d, d), d * d, 1, dtype), f"bilinear.{v}-{w}.B")
            bias = Node(np.zeros(d_B, dtype=dtype), f"bilinear.{v}-{w}.bias")
            pairs[(v, w)] = (B, bias)
            if arch.get("bilinear_batchnorm"):
                bns[(v, w)] = BatchNormParams(d_B, dtype, f"bilinear.{v}-{w}.bn")
    head_layers, m_in = [], arch["head_in"]
    for i, m_out in enumerate(arch["head_hidden"]):
        head_layers.append(_dense(rng, m_in, m_out, dtype, f"head.layer{i}"))
        m_in = m_out
    n = len(arch["head_hidden"])
    head_layers.append(_dense(rng, m_in, arch["num_classes"], dtype, f"head.layer{n}",
                              batchnorm=False, activate=False))
    return MvNNBiInModel(view_nets, BilinearSet(pairs, bns), SharedHead(head_layers),
                         arch["num_classes"], dict(arch))


# -- forward --------------------------------------------------------------------

def view_forward(net: ViewNet, x, train=False, tape=None, pad_to=None):
    tape = tape or Tape(record=False)
    xv = x.value if isinstance(x, Node) else np.asarray(x)
    if xv.ndim != 2 or xv.shape[1] != net.in_width:
        raise DimensionError(f"view input has shape {xv.shape}, network expects width {net.in_width}")
    if not net.layers:
        # identity extractor; narrower views are zero-padded to the common width
        if pad_to is not None and xv.shape[1] < pad_to:
            xv = np.pad(xv, ((0, 0), (0, pad_to - xv.shape[1])))
        return Node(xv)
    h = x
    for layer in net.layers:
        h = layer(tape, h, train)
    return h


def interaction_forward(bilinear: BilinearSet, feats, v, train=False, tape=None):
    """Bilinear interactions of view ``v`` with every other view, ascending partner order.

    The lower-indexed view is always the left operand, so view pairs are undirected.
    """
    tape = tape or Tape(record=False)
    if not bilinear.pairs:
        return []
    out = []
    for w in range(len(feats)):
        if w == v:
            continue
        h = _pair(bilinear, feats, (min(v, w), max(v, w)), train, tape)
        out.append(h)
    return out


def model_forward(model: MvNNBiInModel, views, train=False, tape=None):
    """Per-view logits ``[z^1, ..., z^M]``.

    The shared head runs once over the row-stacked inputs of all views. Its
    batch norm keeps per-view statistics, so no view's rows shift another
    view's normalization.
    """
    tape = tape or Tape(record=False)
    M = model.num_views
    if len(views) != M:
        raise DataError(f"model expects {M} views, batch has {len(views)}")
    for v, x in enumerate(views):
        if x is None:
            raise DataError(f"view {v} missing from batch")
    n = np.asarray(views[0]).shape[0]
    pad = model.d if not model.arch.get("use_view_nets", True) else None
    feats = [view_forward(net, x, train, tape, pad_to=pad) for net, x in zip(model.view_nets, views)]
    # pair interactions are shared by both views of a pair; compute each once
    cache = {}
    combined = []
    for v in range(M):
        parts = [feats[v]]
        for w in range(M):
            if w == v:
                continue
            key = (min(v, w), max(v, w))
            if key not in cache and model.bilinear.pairs:
                cache[key] = _pair(model.bilinear, feats, key, train, tape)
            if key in cache:
                parts.append(cache[key])
        combined.append(tape.concat(parts) if len(parts) > 1 else parts[0])
    h = tape.stack_rows(combined) if M > 1 else combined[0]
    for layer in model.head.layers:
        h = layer(tape, h, train, groups=M)
    if M == 1:
        return [h]
    return [tape.take_rows(h, v * n, (v + 1) * n) for v in range(M)]


def _pair(bilinear, feats, key, train, tape):
    lo, hi = key
    B, bias = bilinear.pairs[key]
    h = tape.bilinear_form(feats[lo], feats[hi], B, bias)
    bn = bilinear.batchnorm.get(key)
    if bn is not None:
        h = tape.batchnorm(h, bn, train=train)
    return h


# -- checkpoint -----------------------------------------------------------------

def save_checkpoint(path, model: MvNNBiInModel, alpha, extra=None):
    """Binary container: header JSON, then named little-endian float64 matrices."""
    header = {"version": CKPT_VERSION, "arch": model.arch, "extra": extra or {}}
    tensors = dict(model.state_dict())
    tensors["alpha"] = np.asarray(alpha, dtype=np.float64)
    for k, arr in (extra or {}).get("_tensors", {}).items():
        tensors[k] = arr
    header["extra"].pop("_tensors", None)
    header["shapes"] = {k: list(np.shape(v)) for k, v in tensors.items()}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            mat = np.asarray(arr, dtype="<f8")
            mat2 = mat.reshape(1, -1) if mat.ndim <= 1 else mat.reshape(-1, mat.shape[-1])
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *mat2.shape))
            fh.write(mat2.tobytes())


def read_checkpoint(path):
    """Return (header, tensors) with tensors restored to their original shapes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != CKPT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", data, 6)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 14
    header = json.loads(data[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        mat = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).astype(np.float64)
        off += 8 * rows * cols
        tensors[name] = mat.reshape(header["shapes"][name])
    return header, tensors


def load_checkpoint(path, dtype=np.float64):
    """Return (model, alpha, header, tensors)."""
    header, tensors = read_checkpoint(path)
    model = init_model(header["arch"], np.random.default_rng(0), dtype)
    model.load_state_dict(tensors)
    return model, tensors["alpha"], header, tensors


def end_to_end_grad_check(seed=0, M=2, d=3, d_B=2, C=2, batch=4, view_dims=None, step=1e-6):
    """Finite-difference check of ``sum_v CE(z^v, y)`` wrt every model parameter.

    Returns the max per-parameter relative error.
    """
    from .numerics import _rel_err, make_rng, numeric_grads

    rng = make_rng(seed)
    view_dims = view_dims or [3 + v for v in range(M)]
    arch = architecture(view_dims, C, view_hidden=(4, d), head_hidden=(5,), d_B=d_B)
    model = init_model(arch, rng)
    views = [rng.normal(size=(batch, dv)) for dv in view_dims]
    labels = rng.integers(0, C, size=batch)

    def loss(tape):
        logits = model_forward(model, views, train=True, tape=tape)
        return tape.weighted_sum([tape.cross_entropy(z, labels) for z in logits], [1.0] * M)

    params = model.named_parameters()
    tape = Tape()
    out = loss(tape)
    model.zero_grad()
    tape.backward(out)
    leaves = list(params.values())
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in leaves]
    numeric = numeric_grads(leaves, lambda: float(loss(Tape(record=False)).value), step)
    return max(_rel_err(a, n) for a, n in zip(analytic, numeric))
