"""Alternating optimisation: Adam on the networks under fixed view weights, then
the closed-form view-weight update under fixed networks."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import MultiViewDataset, batches
from .errors import ConfigError, DataError, NumericError
from .fusion import ViewWeights, fused_objective, predict, solve_alpha, validate_gamma_s
from .model import MvNNBiInModel, architecture, init_model, model_forward
from .numerics import Tape, make_rng, softmax_cross_entropy

log = logging.getLogger(__name__)

# best (gamma, s) per benchmark; the grid these came from is the sweep command's job
BENCHMARK_GAMMA_S = {
    "caltech101": (5.0, 5),
    "caltech20": (4.0, 4),
    "awa": (2.0, 6),
    "nusobj": (10.0, 4),
    "reuters": (6.0, 5),
    "sun": (11.0, 3),
}
D_B_GRID = (50, 100, 200, 400)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    gamma: float = 5.0
    s: int | None = None  # None -> number of views
    d_B: int = 200
    view_hidden: tuple = (400, 200)
    head_hidden: tuple = (300,)
    seed: int = 0
    alpha_update_period: int = 1
    alpha_per_batch: bool = False
    predict_weighting: str = "alpha"
    standardize: bool = True
    precision: str = "float64"
    patience: int = 10
    split_ratios: tuple = (0.7, 0.2, 0.1)
    bilinear_batchnorm: bool = False
    use_view_nets: bool = True
    use_bilinear: bool = True
    selective_fusion: bool = True

    @property
    def d(self):
        return self.view_hidden[-1] if self.view_hidden else None

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def validate(self, M=None):
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.epochs < 0 or self.patience < 1 or self.alpha_update_period < 1:
            raise ConfigError("epochs must be >= 0, patience and alpha_update_period >= 1")
        if self.lr < 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("Adam settings need lr >= 0, beta1/beta2 in [0, 1), adam_eps > 0")
        if self.predict_weighting not in ("alpha", "alpha_gamma"):
            raise ConfigError(f"predict_weighting must be 'alpha' or 'alpha_gamma', got {self.predict_weighting!r}")
        if not self.gamma > 1:
            raise ConfigError(f"gamma must be > 1, got {self.gamma}")
        if M is not None:
            validate_gamma_s(self.gamma, self.resolved_s(M), M)
        return self

    def resolved_s(self, M):
        return M if self.s is None else int(self.s)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("view_hidden", "head_hidden", "split_ratios"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        for k in ("view_hidden", "head_hidden", "split_ratios"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def for_dataset(cls, name, **overrides):
        """Config with the benchmark's tuned (gamma, s); other fields default."""
        key = name.lower().replace("-", "")
        if key not in BENCHMARK_GAMMA_S:
            raise ConfigError(f"no tuned (gamma, s) for {name!r}; known: {', '.join(BENCHMARK_GAMMA_S)}")
        gamma, s = BENCHMARK_GAMMA_S[key]
        return cls(**{"gamma": gamma, "s": s, **overrides})


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState):
    """One bias-corrected Adam update of every ``Node`` in ``params`` from its ``.grad``."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value = (p.value - step).astype(p.value.dtype, copy=False)


@dataclass
class EpochReport:
    epoch: int
    losses: list
    fused_objective: float
    alpha: list
    val_top1: float | None = None
    val_top5: float | None = None
    wall_time: float = 0.0

    def to_json(self, with_time=False):
        d = dataclasses.asdict(self)
        if not with_time:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


def fused_loss_weights(weights: ViewWeights):
    return weights.alpha ** weights.gamma


def forward_loss(model, views, labels, weights: ViewWeights, train=True):
    """Build the fused loss on a fresh tape; returns (tape, loss node, per-view losses)."""
    tape = Tape()
    logits = model_forward(model, views, train=train, tape=tape)
    terms = [tape.cross_entropy(z, labels) for z in logits]
    loss = tape.weighted_sum(terms, fused_loss_weights(weights))
    return tape, loss, np.array([float(t.value) for t in terms])


def train_epoch(model: MvNNBiInModel, ds: MultiViewDataset, weights: ViewWeights, opt: AdamState,
                rng, batch_size=64, config: TrainConfig | None = None, epoch=0):
    """One pass over the train split with the view weights held fixed.

    Returns an ``EpochReport`` carrying the sample-weighted mean per-view loss.
    With ``config.alpha_per_batch`` the weights are re-solved after every batch
    and the returned weights are the last ones used.
    """
    start = time.perf_counter()
    snapshot = model.state_dict()
    params = model.named_parameters()
    totals = np.zeros(model.num_views)
    count = 0
    for batch in batches(ds, "train", batch_size, rng=rng):
        model.zero_grad()
        tape, loss, per_view = forward_loss(model, batch.views, batch.labels, weights)
        if not np.isfinite(float(loss.value)) or not np.all(np.isfinite(per_view)):
            model.load_state_dict(snapshot)
            raise NumericError(f"non-finite loss in epoch {epoch}: per-view {per_view.tolist()}")
        tape.backward(loss)
        adam_step(params, opt)
        totals += per_view * len(batch.labels)
        count += len(batch.labels)
        if config is not None and config.alpha_per_batch and config.selective_fusion:
            weights = solve_alpha(per_view, weights.gamma, weights.s)
    if count == 0:
        raise DataError("train split produced no batches")
    L = totals / count
    report = EpochReport(epoch, L.tolist(), fused_objective(L, weights), weights.alpha.tolist(),
                         wall_time=time.perf_counter() - start)
    return report, weights


def update_alpha(L, config: TrainConfig) -> ViewWeights:
    M = len(L)
    return solve_alpha(L, config.gamma, config.resolved_s(M))


def logits_for(model, views, batch_size=1024):
    """Eval-mode logits, computed in chunks."""
    n = views[0].shape[0]
    chunks = [model_forward(model, [X[i:i + batch_size] for X in views], train=False)
              for i in range(0, n, batch_size)]
    return [np.concatenate([c[v].value for c in chunks], axis=0) for v in range(model.num_views)]


def topk_accuracy(scores, labels, k):
    true = scores[np.arange(len(labels)), labels]
    rank = (scores > true[:, None]).sum(axis=1)
    return float(np.mean(rank < k))


def evaluate(model, weights: ViewWeights, views, labels, predict_weighting="alpha", k=5):
    """Return (top1, topk) with ``k`` clamped to the number of classes."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot evaluate on an empty split")
    logits = logits_for(model, views)
    _, scores = predict(logits, weights, predict_weighting)
    k = min(k, scores.shape[1])
    return topk_accuracy(scores, labels, 1), topk_accuracy(scores, labels, k)


def eval_losses(model, views, labels):
    return np.array([softmax_cross_entropy(z, labels)[0] for z in logits_for(model, views)])


@dataclass
class FitResult:
    model: MvNNBiInModel
    weights: ViewWeights
    history: list
    best_epoch: int
    alpha_history: list


def build_model(config: TrainConfig, ds: MultiViewDataset):
    arch = architecture(ds.dims, ds.num_classes, config.view_hidden, config.head_hidden, config.d_B,
                        config.use_view_nets, config.use_bilinear, config.bilinear_batchnorm)
    return init_model(arch, make_rng([config.seed, 0]), config.dtype)


def fit(config: TrainConfig, ds: MultiViewDataset, on_epoch=None) -> FitResult:
    """Alternate network training and view-weight updates, keeping the best validation model.

    ``ds`` must already carry a split assignment (and be standardised if wanted).
    """
    M = ds.num_views
    config.validate(M)
    if ds.split is None:
        raise DataError("dataset needs a split assignment before training")
    ds = dataclasses.replace(ds, views=[X.astype(config.dtype) for X in ds.views])
    model = build_model(config, ds)
    s = config.resolved_s(M)
    weights = ViewWeights.uniform(M, config.gamma, s)
    opt = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    shuffle_rng = make_rng([config.seed, 1])
    val_views, val_labels = ds.subset("val")
    has_val = val_labels.size > 0

    history, alpha_history = [], []
    best = (-1.0, model.state_dict(), copy.deepcopy(weights), 0)
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        report, weights = train_epoch(model, ds, weights, opt, shuffle_rng, config.batch_size, config, epoch)
        if config.selective_fusion and not config.alpha_per_batch and epoch % config.alpha_update_period == 0:
            weights = update_alpha(np.array(report.losses), config)
        report.alpha = weights.alpha.tolist()
        if has_val:
            report.val_top1, report.val_top5 = evaluate(model, weights, val_views, val_labels,
                                                        config.predict_weighting)
        history.append(report)
        alpha_history.append((epoch, weights.alpha.copy()))
        log.info("epoch=%d loss=%.6f val_top1=%s alpha=%s time=%.2fs", epoch, report.fused_objective,
                 report.val_top1, np.round(weights.alpha, 4).tolist(), report.wall_time)
        if on_epoch is not None:
            on_epoch(report)
        score = report.val_top1 if has_val else -report.fused_objective
        if score > best[0] or epoch == 1:
            best = (score, model.state_dict(), copy.deepcopy(weights), epoch)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    model.load_state_dict(best[1])
    return FitResult(model, best[2], history, best[3], alpha_history)
