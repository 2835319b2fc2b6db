"""Multi-view datasets: on-disk format, splitting, standardisation, batching, synthesis."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError
from .numerics import make_rng

MVBIN_MAGIC = b"MVBIN1"
SPLITS = ("train", "val", "test")


@dataclass
class MultiViewBatch:
    views: list[np.ndarray]
    labels: np.ndarray


@dataclass
class MultiViewDataset:
    views: list[np.ndarray]
    labels: np.ndarray
    num_classes: int
    view_names: list[str] = field(default_factory=list)
    split: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        for v, X in enumerate(self.views):
            if X.ndim != 2 or X.shape[0] != n:
                raise DataError(f"view {v} has shape {X.shape}, expected {n} rows")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not self.view_names:
            self.view_names = [f"view{v}" for v in range(len(self.views))]

    @property
    def n(self):
        return self.labels.shape[0]

    @property
    def num_views(self):
        return len(self.views)

    @property
    def dims(self):
        return [X.shape[1] for X in self.views]

    def indices(self, split):
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
        if self.split is None:
            raise DataError("dataset has no split assignment")
        return np.flatnonzero(self.split == split)

    def subset(self, split):
        idx = self.indices(split)
        return [X[idx] for X in self.views], self.labels[idx]


# -- file formats -----------------------------------------------------------------

def write_mvbin(path, X):
    X = np.asarray(X, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MVBIN_MAGIC)
        fh.write(struct.pack("<II", *X.shape))
        fh.write(X.tobytes())


def read_mvbin(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != MVBIN_MAGIC:
        raise DataError(f"{path}: missing MVBIN1 magic")
    rows, cols = struct.unpack_from("<II", data, 6)
    expected = 14 + 4 * rows * cols
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=14).reshape(rows, cols).astype(np.float64)


def write_csv_matrix(path, X):
    X = np.asarray(X, dtype=np.float32)
    with open(path, "w") as fh:
        for row in X:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv_matrix(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    try:
        rows = [[float(t) for t in ln.split(",")] for ln in lines]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DataError(f"{path}: ragged rows with widths {sorted(widths)}")
    return np.array(rows, dtype=np.float64).reshape(len(rows), widths.pop() if widths else 0)


def load_dataset(path) -> MultiViewDataset:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise DataError(f"{path}: no manifest.json")
    with open(mpath) as fh:
        manifest = json.load(fh)
    try:
        C = int(manifest["num_classes"])
        views_meta = manifest["views"]
        label_file = manifest.get("labels", "labels.txt")
    except (KeyError, TypeError) as exc:
        raise DataError(f"{mpath}: malformed manifest ({exc})") from None
    labels = _read_lines(os.path.join(path, label_file))
    try:
        y = np.array([int(t) for t in labels], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{label_file}: {exc}") from None
    if y.size and (y.min() < 0 or y.max() >= C):
        bad = int(y[(y < 0) | (y >= C)][0])
        raise DataError(f"{label_file}: label {bad} outside [0, {C})")
    views, names = [], []
    for meta in views_meta:
        name = meta.get("name", f"view{len(views)}")
        fpath = os.path.join(path, meta["file"])
        if not os.path.exists(fpath):
            raise DataError(f"view {name!r}: missing file {meta['file']}")
        fmt = meta.get("format", "csv")
        if fmt == "csv":
            X = read_csv_matrix(fpath)
        elif fmt == "mvbin":
            X = read_mvbin(fpath)
        else:
            raise DataError(f"view {name!r}: unknown format {fmt!r}")
        if X.shape[1] != int(meta["dim"]):
            raise DataError(f"view {name!r}: manifest dim {meta['dim']} but file has {X.shape[1]} columns")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"view {name!r}: {X.shape[0]} rows but {y.shape[0]} labels")
        views.append(X)
        names.append(name)
    split = None
    spath = os.path.join(path, "split.txt")
    if os.path.exists(spath):
        split = np.array(_read_lines(spath))
        if split.shape[0] != y.shape[0] or not np.isin(split, SPLITS).all():
            raise DataError(f"{spath}: expected {y.shape[0]} lines of train|val|test")
    return MultiViewDataset(views, y, C, names, split, manifest.get("name", os.path.basename(path)))


def _read_lines(path):
    if not os.path.exists(path):
        raise DataError(f"missing file {path}")
    with open(path) as fh:
        return [ln.strip() for ln in fh.read().splitlines() if ln.strip()]


def save_dataset(ds: MultiViewDataset, path, fmt="mvbin", write_split=False):
    os.makedirs(path, exist_ok=True)
    views_meta = []
    for name, X in zip(ds.view_names, ds.views):
        fname = f"{name}.{'bin' if fmt == 'mvbin' else 'csv'}"
        (write_mvbin if fmt == "mvbin" else write_csv_matrix)(os.path.join(path, fname), X)
        views_meta.append({"name": name, "dim": int(X.shape[1]), "file": fname, "format": fmt})
    manifest = {"name": ds.name, "num_classes": int(ds.num_classes), "labels": "labels.txt",
                "views": views_meta}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    with open(os.path.join(path, "labels.txt"), "w") as fh:
        fh.write("".join(f"{int(v)}\n" for v in ds.labels))
    if write_split and ds.split is not None:
        with open(os.path.join(path, "split.txt"), "w") as fh:
            fh.write("".join(f"{s}\n" for s in ds.split))


# -- splitting and standardisation ----------------------------------------------------

def split_dataset(ds: MultiViewDataset, ratios=(0.7, 0.2, 0.1), seed=0) -> MultiViewDataset:
    """Stratified train/val/test assignment."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or abs(ratios.sum() - 1) > 1e-9 or (ratios < 0).any():
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    rng = make_rng(seed)
    split = np.empty(ds.n, dtype="<U5")
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 3:
            raise DataError(f"class {c} has {idx.size} samples; stratified splitting needs at least 3")
        idx = rng.permutation(idx)
        n_train = max(1, int(round(ratios[0] * idx.size)))
        n_val = min(int(round(ratios[1] * idx.size)), idx.size - n_train)
        split[idx[:n_train]] = "train"
        split[idx[n_train:n_train + n_val]] = "val"
        split[idx[n_train + n_val:]] = "test"
    return replace(ds, split=split)


@dataclass
class Standardizer:
    means: list[np.ndarray]
    stds: list[np.ndarray]

    def apply(self, views):
        return [(X - m) / s for X, m, s in zip(views, self.means, self.stds)]

    def tensors(self):
        out = {}
        for v, (m, s) in enumerate(zip(self.means, self.stds)):
            out[f"standardizer.view{v}.mean"] = m
            out[f"standardizer.view{v}.std"] = s
        return out

    @classmethod
    def from_tensors(cls, tensors, M):
        try:
            return cls([tensors[f"standardizer.view{v}.mean"] for v in range(M)],
                       [tensors[f"standardizer.view{v}.std"] for v in range(M)])
        except KeyError:
            return None


def standardize_fit_apply(ds: MultiViewDataset, std_floor=1e-8):
    idx = ds.indices("train")
    if idx.size == 0:
        raise DataError("train split is empty")
    means = [X[idx].mean(axis=0) for X in ds.views]
    stds = [np.maximum(X[idx].std(axis=0), std_floor) for X in ds.views]
    st = Standardizer(means, stds)
    return replace(ds, views=st.apply(ds.views)), st


def batches(ds: MultiViewDataset, split, batch_size, seed=None, rng=None):
    """Yield shuffled batches covering the split once; a trailing batch smaller than 2 is dropped."""
    idx = ds.indices(split) if isinstance(split, str) else np.asarray(split)
    if idx.size == 0:
        raise DataError(f"split {split!r} is empty")
    if rng is None and seed is not None:
        rng = make_rng(seed)
    if rng is not None:
        idx = rng.permutation(idx)
    for start in range(0, idx.size, batch_size):
        part = idx[start:start + batch_size]
        if part.size < 2:
            break
        yield MultiViewBatch([X[part] for X in ds.views], ds.labels[part])


# -- synthetic data --------------------------------------------------------------------

def _class_means(rng, C, k, separation):
    means = rng.normal(size=(C, k))
    dist = np.linalg.norm(means[:, None] - means[None], axis=-1)
    dmin = dist[np.triu_indices(C, 1)].min()
    return means * (separation / dmin)


def synth_generate(M, C, n, dims=None, noise_views=(), seed=0, separation=4.0, latent_dim=None):
    """Gaussian class clusters seen through per-view random linear maps.

    Class means sit at minimum pairwise distance ``separation`` (unit noise).
    Views listed in ``noise_views`` are standard Gaussian and label-independent.
    """
    if M < 2 or C < 2:
        raise DataError(f"synthetic data needs M >= 2 and C >= 2, got M={M}, C={C}")
    dims = list(dims) if dims is not None else [8] * M
    if len(dims) != M:
        raise DataError(f"{len(dims)} view widths given for {M} views")
    k = latent_dim or C
    rng = make_rng(seed)
    labels = rng.permutation(np.arange(n) % C)
    means = _class_means(rng, C, k, separation)
    views = []
    for v in range(M):
        A = rng.normal(size=(k, dims[v])) / np.sqrt(k)
        eps = rng.normal(size=(n, k))
        pure = rng.normal(size=(n, dims[v]))
        views.append(pure if v in set(noise_views) else (means[labels] + eps) @ A)
    return MultiViewDataset(views, labels, C, [f"view{v}" for v in range(M)], None,
                            f"synth_M{M}_C{C}_n{n}")


def synth_product(n, dims=(6, 6), seed=0, noise=0.1):
    """Two views whose labels depend only on the sign of the product of their latents.

    Each view alone carries no label information and the task is not linearly
    separable on the concatenation.
    """
    rng = make_rng(seed)
    u = rng.normal(size=n)
    w = rng.normal(size=n)
    labels = (u * w > 0).astype(np.int64)
    views = []
    for latent, d_v in zip((u, w), dims):
        Z = np.column_stack([latent, rng.normal(size=(n, d_v - 1))])
        Q, _ = np.linalg.qr(rng.normal(size=(d_v, d_v)))
        views.append(Z @ Q + noise * rng.normal(size=(n, d_v)))
    return MultiViewDataset(views, labels, 2, ["view0", "view1"], None, f"synth_product_n{n}")
