"""Command-line entry point: ``mvbiin {train,eval,gradcheck,synth,baseline,sweep}``."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import baselines
from .data import (Standardizer, load_dataset, save_dataset, split_dataset, standardize_fit_apply,
                   synth_generate, synth_product)
from .errors import ConfigError, DataError, MvError
from .fusion import ViewWeights, write_alpha_csv, write_alpha_history
from .model import end_to_end_grad_check, init_model, read_checkpoint, save_checkpoint
from .numerics import DEFAULT_SHAPES, grad_check, make_rng
from .trainer import TrainConfig, eval_losses, evaluate, fit

log = logging.getLogger("mvbiin")

OP_TOL = 1e-5
E2E_TOL = 1e-4


def read_config(path, data=None, out=None):
    """Parse a JSON run config; returns (TrainConfig, data dir, out dir)."""
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    raw = dict(raw)
    data = data or raw.pop("data", None)
    out = out or raw.pop("out", None)
    raw.pop("data", None)
    raw.pop("out", None)
    try:
        cfg = TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate(), data, out


def prepare(ds, cfg: TrainConfig):
    """Split (unless the dataset ships one) and standardise with train statistics."""
    if ds.split is None:
        ds = split_dataset(ds, cfg.split_ratios, cfg.seed)
    st = None
    if cfg.standardize:
        ds, st = standardize_fit_apply(ds)
    return ds, st


def _best_metrics(result):
    for r in result.history:
        if r.epoch == result.best_epoch:
            return r.val_top1, r.val_top5
    return None, None


def cmd_train(args):
    cfg, data, out = read_config(args.config, args.data, args.out)
    if not data or not out:
        raise ConfigError("train needs --data and --out (or 'data'/'out' in the config)")
    ds = load_dataset(data)
    cfg.validate(ds.num_views)
    os.makedirs(out, exist_ok=True)
    resolved = {"data": data, "out": out, **cfg.to_dict()}
    with open(os.path.join(out, "resolved_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
    ds, st = prepare(ds, cfg)

    metrics = open(os.path.join(out, "metrics.jsonl"), "w")
    try:
        def on_epoch(report):
            metrics.write(report.to_json() + "\n")
            metrics.flush()
            print(report.to_json(with_time=True), file=sys.stderr)

        result = fit(cfg, ds, on_epoch)
    finally:
        metrics.close()
    tensors = st.tensors() if st else {}
    save_checkpoint(os.path.join(out, "model.ckpt"), result.model, result.weights.alpha,
                    {"config": cfg.to_dict(), "best_epoch": result.best_epoch,
                     "view_names": ds.view_names, "_tensors": tensors})
    write_alpha_csv(os.path.join(out, "alpha.csv"), result.weights.alpha)
    write_alpha_history(os.path.join(out, "alpha_history.csv"), result.alpha_history)
    top1, top5 = _best_metrics(result)
    print(json.dumps({"best_epoch": result.best_epoch, "val_top1": top1, "val_top5": top5,
                      "alpha": result.weights.alpha.tolist()}))
    return 0


def cmd_eval(args):
    header, tensors = read_checkpoint(args.model)
    cfg = TrainConfig.from_dict(header["extra"]["config"])
    ds = load_dataset(args.data)
    arch = header["arch"]
    if ds.num_views != len(arch["view_dims"]):
        raise DataError(f"checkpoint expects M={len(arch['view_dims'])} views, dataset has {ds.num_views}")
    if ds.dims != arch["view_dims"]:
        raise DataError(f"checkpoint expects view widths {arch['view_dims']}, dataset has {ds.dims}")
    if ds.num_classes != arch["num_classes"]:
        raise DataError(f"checkpoint expects C={arch['num_classes']} classes, dataset has {ds.num_classes}")
    if ds.split is None:
        ds = split_dataset(ds, cfg.split_ratios, cfg.seed)
    st = Standardizer.from_tensors(tensors, ds.num_views)
    views, labels = ds.subset(args.split)
    if st is not None:
        views = st.apply(views)
    views = [X.astype(cfg.dtype) for X in views]
    model = init_model(arch, make_rng(0), cfg.dtype)
    model.load_state_dict(tensors)
    weights = ViewWeights(tensors["alpha"], cfg.gamma, cfg.resolved_s(ds.num_views))
    top1, top5 = evaluate(model, weights, views, labels, cfg.predict_weighting)
    print(json.dumps({"split": args.split, "top1": top1, "top5": top5,
                      "per_view_losses": eval_losses(model, views, labels).tolist(),
                      "alpha": weights.alpha.tolist()}))
    return 0


def cmd_gradcheck(args):
    ok = True
    results = {}
    for op in DEFAULT_SHAPES:
        err = max(grad_check(op, seed=args.seed + i) for i in range(args.repeats))
        results[op] = err
        ok &= err <= OP_TOL
    e2e = max(end_to_end_grad_check(args.seed + i) for i in range(args.repeats))
    results["end_to_end"] = e2e
    ok &= e2e <= E2E_TOL
    print(json.dumps({"max_rel_err": results, "op_tol": OP_TOL, "end_to_end_tol": E2E_TOL, "pass": bool(ok)}))
    return 0 if ok else 4


def cmd_synth(args):
    if args.kind == "product":
        ds = synth_product(args.samples, seed=args.seed)
    else:
        dims = [int(x) for x in args.dims.split(",")] if args.dims else [8] * args.views
        noise = set(range(args.views - args.noise_views, args.views))
        ds = synth_generate(args.views, args.classes, args.samples, dims, noise, args.seed, args.separation)
    save_dataset(ds, args.out, args.format)
    print(json.dumps({"out": args.out, "n": ds.n, "views": ds.dims, "classes": ds.num_classes}))
    return 0


def _nearest_mean_scores(train_z, train_y, test_z, C):
    centroids = np.stack([train_z[train_y == k].mean(axis=0) for k in range(C)])
    return -((test_z[:, None, :] - centroids[None]) ** 2).sum(axis=-1)


def cmd_baseline(args):
    cfg, data, _ = read_config(args.config, args.data)
    if not data:
        raise ConfigError("baseline needs --data")
    ds, _ = prepare(load_dataset(data), cfg)
    (trv, try_), (tev, tey) = ds.subset("train"), ds.subset("test")
    C = ds.num_classes
    k = min(5, C)
    out = {"method": args.method}
    if args.method == "cca":
        i, j = (int(x) for x in args.views.split(","))
        ridge = baselines.CCA_RIDGE if args.ridge is None else args.ridge
        sol = baselines.cca_fit(trv[i], trv[j], args.r, ridge)
        out.update(r=len(sol.rho), views=[i, j], ridge=ridge, correlations=sol.rho.tolist())
    elif args.method == "mvda":
        ridge = baselines.MVDA_RIDGE if args.ridge is None else args.ridge
        r = args.r or max(1, C - 1)
        sol = baselines.mvda_fit(baselines.group_by_class(trv, try_, C), r, ridge)
        proj = lambda views: np.mean([X @ W for X, W in zip(views, sol.transforms)], axis=0)
        scores = _nearest_mean_scores(proj(trv), try_, proj(tev), C)
        out.update(r=r, ridge=ridge, objective=sol.objective, relaxation="ratio-trace",
                   test_top1=baselines.topk_accuracy(scores, tey, 1),
                   test_top5=baselines.topk_accuracy(scores, tey, k))
    else:
        clf = baselines.concat_softmax_fit(trv, try_, C, epochs=args.epochs, lr=args.lr, seed=cfg.seed)
        top1, top5 = clf.evaluate(tev, tey)
        out.update(r=None, classifier="multinomial softmax regression (stands in for SVMcon)",
                   test_top1=top1, test_top5=top5)
    print(json.dumps(out))
    return 0


def cmd_sweep(args):
    cfg, data, out = read_config(args.config, args.data, args.out)
    if not data or not out:
        raise ConfigError("sweep needs --data and --out")
    with open(args.grid) as fh:
        grid = json.load(fh)
    unknown = set(grid) - {"gamma", "s", "d_B"}
    if unknown:
        raise ConfigError(f"grid keys must be among gamma, s, d_B; got {sorted(unknown)}")
    ds = load_dataset(data)
    ds, _ = prepare(ds, cfg)
    gammas = grid.get("gamma", [cfg.gamma])
    ss = grid.get("s", [cfg.s])
    dbs = grid.get("d_B", [cfg.d_B])
    rows = []
    for gamma, s, d_B in itertools.product(gammas, ss, dbs):
        cell = TrainConfig.from_dict({**cfg.to_dict(), "gamma": gamma, "s": s, "d_B": d_B})
        cell.validate(ds.num_views)
        result = fit(cell, ds)
        top1, top5 = _best_metrics(result)
        rows.append({"gamma": gamma, "s": cell.resolved_s(ds.num_views), "d_B": d_B,
                     "val_top1": top1, "val_top5": top5})
        log.info("sweep cell %s", rows[-1])
    best = max(range(len(rows)), key=lambda i: (rows[i]["val_top1"] or 0.0, -i))
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["gamma", "s", "d_B", "val_top1", "val_top5", "best"], lineterminator="\n")
        w.writeheader()
        for i, row in enumerate(rows):
            w.writerow({**row, "best": int(i == best)})
    print(json.dumps({"out": path, "cells": len(rows), "best": rows[best]}))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mvbiin", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint, metrics and view weights")
    t.add_argument("--data")
    t.add_argument("--config")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--repeats", type=int, default=1)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["gaussian", "product"], default="gaussian")
    s.add_argument("--views", type=int, default=3)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--noise-views", type=int, default=0)
    s.add_argument("--dims", help="comma-separated view widths")
    s.add_argument("--separation", type=float, default=4.0)
    s.add_argument("--format", choices=["mvbin", "csv"], default="mvbin")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("baseline", help="run a linear baseline")
    b.add_argument("--method", choices=["cca", "mvda", "concat"], required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--config")
    b.add_argument("--r", type=int)
    b.add_argument("--ridge", type=float)
    b.add_argument("--views", default="0,1", help="view pair for cca")
    b.add_argument("--epochs", type=int, default=50)
    b.add_argument("--lr", type=float, default=1e-2)
    b.set_defaults(func=cmd_baseline)

    w = sub.add_parser("sweep", help="grid over gamma, s and d_B")
    w.add_argument("--data")
    w.add_argument("--grid", required=True)
    w.add_argument("--config")
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
