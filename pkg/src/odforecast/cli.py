"""Command-line pipeline: gen-data, coarsen, train, predict, evaluate, verify.

One JSON config file drives every stage; --set section.key=value overrides
individual entries. Commands take explicit output paths and are idempotent
for fixed inputs and seeds. Exit codes: 0 success, 1 usage, 2 data error,
3 numerical failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, evaluation, verification
from .coarsening import CoarseningParams, adjusted_rand_index, coarsen
from .data import (Assignment, DataError, NumericalError, load_assignment_csv,
                   load_grid_csv, load_od_csv, load_poi_csv, save_assignment_csv,
                   save_grid_csv, save_od_csv, save_poi_csv, sparsity_rate)
from .model import ForecastModel, ModelConfig
from .synth import SynthConfig, generate_synthetic
from .training import TrainConfig, make_windows, train
from .zinb import mean as zinb_mean

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY = 4

DEFAULT_CONFIG = {
    "data": {
        "synth": {"n_cells": 100, "n_communities": 10, "n_slots": 1440,
                  "slots_per_day": 24, "radius_km": 0.6, "pi": 0.6,
                  "nb_dispersion": 8.0, "hub_rate": 8.0, "spoke_rate": 3.0,
                  "member_rate": 1.0, "amp": 0.8, "family": "zinb",
                  "poi_dim": 16, "seed": 0},
    },
    "coarsening": {"m": 10, "alpha": 0.5, "beta": 0.5, "tol": 1e-6,
                   "max_iter": 1000, "l_factor": 2.1},
    "model": {"d": 64, "h": 4, "n_q": 32, "k": 8, "tau": 1},
    "train": {"lr0": 0.004, "schedule": 50, "batch": 32, "epochs": 100,
              "patience": 10, "clip": 5.0, "seed": 0,
              "split": [0.5, 0.25, 0.25], "monitor": "val_nll"},
    "eval": {"mask": "nonzero", "slots_per_day": None, "recent_days": None,
             "lam": 0.1},
}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file, then --set overrides, then validation."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise DataError("config root must be an object")
        cfg = _merge(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise DataError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise DataError(f"--set path {dotted!r} crosses a non-section")
        node[keys[-1]] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    """Reject inconsistent or out-of-range settings before any compute."""
    c = cfg.get("coarsening", {})
    if c.get("m", 1) < 1:
        raise DataError("coarsening.m must be at least 1")
    if abs(c.get("alpha", 0.5) + c.get("beta", 0.5) - 1.0) > 1e-12:
        raise DataError("coarsening.alpha + coarsening.beta must equal 1")
    m = cfg.get("model", {})
    for key in ("d", "h", "n_q", "k", "tau"):
        if m.get(key, 1) < 1:
            raise DataError(f"model.{key} must be at least 1")
    if m.get("d", 64) % m.get("h", 4) != 0:
        raise DataError("model.d must be divisible by model.h")
    t = cfg.get("train", {})
    for key in ("batch", "epochs", "schedule"):
        if t.get(key, 1) < 1:
            raise DataError(f"train.{key} must be at least 1")
    if t.get("lr0", 0.004) <= 0:
        raise DataError("train.lr0 must be positive")
    split = t.get("split", [0.5, 0.25, 0.25])
    if len(split) != 3 or any(s < 0 for s in split) or abs(sum(split) - 1.0) > 1e-9:
        raise DataError("train.split must be three non-negative fractions summing to 1")
    if t.get("monitor", "val_nll") not in ("val_nll", "val_wmape"):
        raise DataError("train.monitor must be val_nll or val_wmape")
    e = cfg.get("eval", {})
    if e.get("mask", "nonzero") != "nonzero":
        raise DataError("eval.mask supports only 'nonzero'")
    synth = cfg.get("data", {}).get("synth")
    if synth is not None and synth.get("n_cells", 1) < cfg["coarsening"]["m"]:
        raise DataError("data.synth.n_cells must be at least coarsening.m")


def _synth_config(cfg: dict) -> tuple[SynthConfig, int]:
    section = dict(cfg["data"].get("synth") or {})
    seed = int(section.pop("seed", 0))
    try:
        return SynthConfig(**section), seed
    except TypeError as exc:
        raise DataError(f"bad data.synth section: {exc}") from exc


def _load_dataset_dir(path) -> dict:
    d = Path(path)
    grid = load_grid_csv(d / "grid.csv")
    od = load_od_csv(d / "od.csv", grid)
    poi = load_poi_csv(d / "poi.csv")
    out = {"grid": grid, "od": od, "poi": poi}
    apath = d / "assignment.csv"
    if apath.exists():
        out["assignment"] = load_assignment_csv(apath)
    return out


def _coarsening_params(cfg: dict, radius_km: float) -> CoarseningParams:
    c = cfg["coarsening"]
    return CoarseningParams(alpha=float(c["alpha"]), beta=float(c["beta"]),
                            tol=float(c["tol"]), max_iter=int(c["max_iter"]),
                            l_km=float(c["l_factor"]) * radius_km)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set or ())
    synth_cfg, seed = _synth_config(cfg)
    if args.seed is not None:
        seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = generate_synthetic(synth_cfg, seed=seed)
    save_grid_csv(result["grid"], out / "grid.csv")
    save_od_csv(result["od"], out / "od.csv")
    save_poi_csv(result["poi"], out / "poi.csv")
    save_assignment_csv(result["truth"], out / "truth_assignment.csv")
    rate = sparsity_rate(result["od"])
    print(f"wrote {out}/{{grid,od,poi,truth_assignment}}.csv  "
          f"N={synth_cfg.n_cells} T={synth_cfg.n_slots} "
          f"sparsity={rate:.4f} seed={seed}")
    return EXIT_OK


def cmd_coarsen(args) -> int:
    cfg = load_config(args.config, args.set or ())
    grid = load_grid_csv(args.grid)
    od = load_od_csv(args.od, grid)
    m = args.m if args.m is not None else int(cfg["coarsening"]["m"])
    params = _coarsening_params(cfg, grid.radius_km)
    result = coarsen(od, grid, m, params)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_assignment_csv(result.assignment, out)
    coarse_path = Path(args.out_coarse) if args.out_coarse \
        else out.parent / "od_coarse.csv"
    save_od_csv(result.x_s, coarse_path)

    sizes = np.bincount(result.assignment.labels(), minlength=m)
    report = {"n_cells": od.n_cells, "n_supercells": m,
              "sparsity_before": sparsity_rate(od),
              "sparsity_after": sparsity_rate(result.x_s),
              "cluster_sizes": [int(s) for s in sizes],
              "n_iter": result.n_iter, "converged": result.converged,
              "dense_cells": [int(c) for c in result.dense_cells]}
    truth_path = Path(args.od).parent / "truth_assignment.csv"
    if truth_path.exists():
        truth = load_assignment_csv(truth_path)
        report["ari_vs_truth"] = adjusted_rand_index(
            truth.labels(), result.assignment.labels())
    report_path = Path(args.out_report) if args.out_report \
        else out.parent / "coarsen_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    line = (f"coarsened {od.n_cells}->{m} in {result.n_iter} sweeps  "
            f"sparsity {report['sparsity_before']:.4f}->"
            f"{report['sparsity_after']:.4f}")
    if "ari_vs_truth" in report:
        line += f"  ARI={report['ari_vs_truth']:.3f}"
    print(line)
    return EXIT_OK


def _model_config(cfg: dict, n_cells: int, n_supercells: int,
                  poi_dim: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(n_cells=n_cells, n_supercells=n_supercells,
                       history=int(m["k"]), horizon=int(m["tau"]),
                       d=int(m["d"]), heads=int(m["h"]),
                       n_queries=int(m["n_q"]), poi_dim=poi_dim)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set or ())
    data = _load_dataset_dir(args.data)
    od, grid, poi = data["od"], data["grid"], data["poi"]
    m = int(cfg["coarsening"]["m"])
    if "assignment" in data:
        assignment = data["assignment"]
        if assignment.n_supercells != m:
            raise DataError(f"assignment.csv has {assignment.n_supercells} "
                            f"super-cells but coarsening.m={m}")
    else:
        assignment = coarsen(od, grid, m,
                             _coarsening_params(cfg, grid.radius_km)).assignment

    t = cfg["train"]
    seed = args.seed if args.seed is not None else int(t["seed"])
    mcfg = _model_config(cfg, od.n_cells, m, poi.n_categories)
    model = ForecastModel(mcfg, assignment, poi, seed=seed)
    dataset = make_windows(od, mcfg.history, mcfg.horizon,
                           split=tuple(t["split"]))
    tcfg = TrainConfig(lr0=float(t["lr0"]), halve_every=int(t["schedule"]),
                       batch_size=int(t["batch"]), max_epochs=int(t["epochs"]),
                       patience=int(t["patience"]),
                       clip_norm=None if t["clip"] is None else float(t["clip"]),
                       seed=seed, split=tuple(t["split"]),
                       monitor=str(t.get("monitor", "val_nll")))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history_out) if args.history_out \
        else out.parent / "history.csv"
    result = train(model, dataset, tcfg, history_path=history_path,
                   checkpoint_path=out, verbose=not args.quiet)
    print(f"saved {out} (best epoch {result.best_epoch}, "
          f"val nll {result.best_val_nll:.6f}) and {history_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = ForecastModel.load(args.ckpt)
    k = model.config.history
    hist = load_od_csv(args.history, model.config.n_cells, n_slots=k)
    pred = model.predict_mean(hist.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from .data import ODTensor
    save_od_csv(ODTensor(pred), out)
    print(f"wrote {out}  shape {pred.shape}  total demand {pred.sum():.1f}")
    return EXIT_OK


def _report_rows(reports: dict) -> list:
    rows = []
    for name, rep in reports.items():
        rows.append({"method": name, "rmse": rep.rmse, "wmape": rep.wmape,
                     "cpc": rep.cpc, "n_nonzero": rep.n_nonzero})
    return rows


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.set or ())
    if args.pred is not None or args.truth is not None:
        if args.pred is None or args.truth is None:
            raise DataError("evaluate needs both --pred and --truth")
        truth = load_od_csv(args.truth, args.n_cells) if args.n_cells \
            else _load_free_od(args.truth)
        pred = load_od_csv(args.pred, truth.n_cells, n_slots=truth.n_slots)
        report = evaluation.metrics(pred, truth)
        payload = report.to_dict()
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)
                fh.write("\n")
        print(json.dumps({k: payload[k] for k in
                          ("rmse", "wmape", "cpc", "n_nonzero")}, sort_keys=True))
        return EXIT_OK

    if args.data is None:
        raise DataError("evaluate needs --pred/--truth or --baselines with --data")
    methods = [m.strip() for m in (args.baselines or "ha,ols,lasso").split(",")
               if m.strip()]
    data = _load_dataset_dir(args.data)
    od = data["od"]
    mc, tc, ec = cfg["model"], cfg["train"], cfg["eval"]
    dataset = make_windows(od, int(mc["k"]), int(mc["tau"]),
                           split=tuple(tc["split"]))
    model = ForecastModel.load(args.ckpt) if args.ckpt else None
    reports = evaluation.compare(dataset, model=model, methods=methods,
                                 slots_per_day=ec["slots_per_day"],
                                 recent_days=ec["recent_days"],
                                 lam=float(ec["lam"]))
    rows = _report_rows(reports)
    header = ["method", "rmse", "wmape", "cpc", "n_nonzero"]
    print(",".join(header))
    for row in rows:
        print(",".join(str(row[h]) for h in header))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


def _load_free_od(path):
    """Load an OD csv inferring N from the largest cell id present."""
    n = 0
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if len(row) >= 2:
                n = max(n, int(row[0]) + 1, int(row[1]) + 1)
    if n == 0:
        raise DataError(f"{path} holds no flow triples")
    return load_od_csv(path, n)


def cmd_verify(args) -> int:
    ok = verification.run_all(verbose=True)
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> _Parser:
    parser = _Parser(prog="odforecast",
                     description="Sparse OD demand forecasting pipeline")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--version", action="version",
                       version=f"odforecast {__version__}")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                       help="override one config entry (repeatable)")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic city dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)

    p = add("coarsen", cmd_coarsen, "map cells to super-cells")
    p.add_argument("--od", required=True, help="od.csv path")
    p.add_argument("--grid", required=True, help="grid.csv path")
    p.add_argument("--out", required=True, help="assignment.csv path")
    p.add_argument("--m", type=int, default=None, help="number of super-cells")
    p.add_argument("--out-coarse", default=None,
                   help="coarsened tensor path (default: sibling od_coarse.csv)")
    p.add_argument("--out-report", default=None,
                   help="report path (default: sibling coarsen_report.json)")

    p = add("train", cmd_train, "fit the forecasting model")
    p.add_argument("--data", required=True,
                   help="directory with grid/od/poi csv files")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history-out", default=None,
                   help="training log path (default: sibling history.csv)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")

    p = add("predict", cmd_predict, "forecast from a saved checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--history", required=True,
                   help="od.csv with exactly the model's history slots")
    p.add_argument("--out", required=True, help="pred.csv path")

    p = add("evaluate", cmd_evaluate, "score predictions or baselines")
    p.add_argument("--pred", default=None)
    p.add_argument("--truth", default=None)
    p.add_argument("--n-cells", type=int, default=None)
    p.add_argument("--baselines", default=None, metavar="ha,ols,lasso")
    p.add_argument("--data", default=None,
                   help="dataset directory for --baselines")
    p.add_argument("--ckpt", default=None,
                   help="optional checkpoint to add a model row")
    p.add_argument("--out", default=None, help="report.json or table csv path")

    add("verify", cmd_verify, "run the built-in numerical check suites")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "fn", None) is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.fn(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
