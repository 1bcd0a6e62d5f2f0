"""Command-line entry point: train, sweep, diagnose, synth."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .diagnostics import diagnose
from .graph import (GraphFormatError, degree_centrality, load_edge_list, synth_sbm,
                    with_self_loops, write_edge_list, write_features, write_labels)
from .training import Trainer, TrainConfig

DEFAULTS = {
    "edge_list": None,
    "features": None,
    "labels": None,
    "remap": False,
    "synth_sbm": {},
    "clusters": 4,
    "batch_clusters": 2,
    "layers": 2,
    "hidden": 16,
    "lr": 1e-3,
    "weight_decay": 0.0,
    "dropout": 0.1,
    "lambda": 0.5,
    "g_thres": None,
    "augment": "sum",
    "stale_reduction": "mean",
    "gamma_off": False,
    "stale_loss_off": False,
    "augment_off": False,
    "warm_start": False,
    "add_self_loops": False,
    "epochs": 50,
    "seed": 0,
    "out": "runs/latest",
    "diagnose_every": 0,
    "checkpoint_every": 0,
}

SYNTH_DEFAULTS = {"n": 200, "blocks": 2, "p_in": 0.3, "p_out": 0.02, "feat_dim": 16, "noise": 0.5}
SYNTH_INT_KEYS = {"n", "blocks", "feat_dim", "seed"}

SWEEP_COMPONENTS = {
    "full": {},
    "no-att": {"gamma_off": True},
    "no-loss": {"stale_loss_off": True},
    "no-emb": {"augment_off": True},
    "baseline": {"gamma_off": True, "stale_loss_off": True, "augment_off": True},
}
SWEEP_LAMBDAS = (0.1, 0.3, 0.5, 0.8)
SWEEP_BATCH_CLUSTERS = (5, 10, 20)
SWEEP_DEFAULT_CLUSTERS = 40


class CliError(Exception):
    """User-facing failure; the message is printed and the exit status is 2."""


# ---------------------------------------------------------------------------
# Configuration

def parse_synth(tokens) -> dict:
    out = {}
    for tok in tokens or []:
        key, sep, val = tok.partition("=")
        if not sep or not key:
            raise CliError(f"--synth-sbm expects key=value, got {tok!r}")
        key = key.replace("-", "_")
        if key not in SYNTH_DEFAULTS and key != "seed":
            raise CliError(f"unknown --synth-sbm key {key!r}")
        try:
            out[key] = int(val) if key in SYNTH_INT_KEYS else float(val)
        except ValueError as exc:
            raise CliError(f"--synth-sbm {key}: cannot parse {val!r}") from exc
    return out


def resolve_config(file_cfg: dict | None, flags: dict, defaults: dict | None = None) -> dict:
    """Defaults, then config file, then explicitly given flags."""
    cfg = dict(DEFAULTS if defaults is None else defaults)
    for source in (file_cfg or {}, {k: v for k, v in flags.items() if v is not None}):
        for key, val in source.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise CliError(f"unknown config key {key!r}")
            cfg[key] = val
    if isinstance(cfg["synth_sbm"], (list, tuple)):
        cfg["synth_sbm"] = parse_synth(cfg["synth_sbm"])
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    g_thres = math.inf if cfg["g_thres"] is None else float(cfg["g_thres"])
    try:
        return TrainConfig(
            lam=float(cfg["lambda"]), lr=float(cfg["lr"]), weight_decay=float(cfg["weight_decay"]),
            dropout=float(cfg["dropout"]), layers=int(cfg["layers"]), hidden=int(cfg["hidden"]),
            epochs=int(cfg["epochs"]), num_clusters=int(cfg["clusters"]),
            batch_clusters=int(cfg["batch_clusters"]), g_thres=g_thres, augment=cfg["augment"],
            stale_reduction=cfg["stale_reduction"], use_gamma=not cfg["gamma_off"],
            use_stale_loss=not cfg["stale_loss_off"], use_augment=not cfg["augment_off"],
            warm_start=bool(cfg["warm_start"]), seed=int(cfg["seed"]))
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}") from exc


def load_dataset(cfg: dict):
    if cfg["edge_list"]:
        if not (cfg["features"] and cfg["labels"]):
            raise CliError("--edge-list needs --features and --labels")
        loaded = load_edge_list(cfg["edge_list"], cfg["features"], cfg["labels"],
                                remap=bool(cfg["remap"]), add_self_loops=bool(cfg["add_self_loops"]))
        return loaded[:3]
    params = {**SYNTH_DEFAULTS, "seed": int(cfg["seed"]), **cfg["synth_sbm"]}
    g, x, y = synth_sbm(params["n"], params["blocks"], params["p_in"], params["p_out"],
                        params["feat_dim"], seed=params["seed"], noise=params["noise"])
    if cfg["add_self_loops"]:
        g = with_self_loops(g)
    return g, x, y


def _dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Commands

def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", cfg)
    g, x, y = load_dataset(cfg)
    trainer = Trainer(g, x, y, train_config(cfg))
    start = time.perf_counter()
    best_val, best_epoch = -1.0, 0
    diag_every, ckpt_every = int(cfg["diagnose_every"]), int(cfg["checkpoint_every"])
    # wall time lives in its own file so metrics.jsonl is reproducible byte for byte
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics, \
            open(out / "timing.jsonl", "w", encoding="utf-8") as timing:
        for _ in range(trainer.config.epochs):
            row = dict(trainer.train_epoch())
            wall = row.pop("wall_ms")
            metrics.write(json.dumps(row, sort_keys=True) + "\n")
            timing.write(json.dumps({"epoch": row["epoch"], "wall_ms": wall}) + "\n")
            val = row["val_acc"]
            if not math.isnan(val) and val > best_val:
                best_val, best_epoch = val, row["epoch"]
            if diag_every and row["epoch"] % diag_every == 0:
                d = out / "diagnostics"
                d.mkdir(exist_ok=True)
                tag = f"epoch_{row['epoch']:04d}"
                trainer.diagnose().write(d / f"{tag}.csv", d / f"{tag}.json")
            if ckpt_every and row["epoch"] % ckpt_every == 0:
                _save_checkpoints(trainer, out / "checkpoints", f"epoch_{row['epoch']:04d}")
    _save_checkpoints(trainer, out, "final")
    last = trainer.history[-1] if trainer.history else {}
    _dump_json(out / "summary.json", {
        "best_val_acc": best_val if best_val >= 0 else None,
        "best_epoch": best_epoch,
        "final_train_acc": last.get("train_acc"),
        "final_val_acc": last.get("val_acc"),
        "epochs": trainer.epoch,
        "wall_time_s": time.perf_counter() - start,
    })
    return 0


def _save_checkpoints(trainer: Trainer, directory: Path, tag: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    ckpt.save_parameters(directory / f"{tag}.params", trainer.params)
    ckpt.save_cache(directory / f"{tag}.cache", trainer.store, trainer.epoch)


def cmd_diagnose(cfg: dict, run_dir, params_path=None, cache_path=None) -> int:
    run_dir = Path(run_dir)
    params_path = Path(params_path or run_dir / "final.params")
    cache_path = Path(cache_path or run_dir / "final.cache")
    for p in (params_path, cache_path):
        if not p.exists():
            raise CliError(f"missing artifact {p}")
    g, x, y = load_dataset(cfg)
    trainer = Trainer(g, x, y, train_config(cfg))
    ckpt.load_parameters(params_path, trainer.params)
    store, epoch = ckpt.load_cache(cache_path)
    if store.num_nodes != g.num_nodes or store.layer_dims != trainer.dims[:-1]:
        raise CliError("cache snapshot does not match the configured model/dataset")
    if not np.array_equal(store.embeddings[0], trainer.features):
        raise CliError("cache snapshot layer 0 differs from the dataset features")
    tc = trainer.config
    report = diagnose(g, store, trainer.params, trainer.evaluation_batches(),
                      degree_centrality(g).modulation(), t=max(epoch, 1),
                      lam=tc.effective_lambda, use_gamma=tc.use_gamma)
    report.extra["epoch"] = epoch
    out = Path(cfg["out"]) if cfg.get("out") else run_dir
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "diagnostics.csv", out / "diagnostics.json")
    if report.violations:
        print(f"bound violated at {report.violations} node(s)", file=sys.stderr)
        return 1
    print(f"bound holds at all {g.num_nodes} nodes")
    return 0


def cmd_synth(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    params = {**SYNTH_DEFAULTS, "seed": int(cfg["seed"]), **cfg["synth_sbm"]}
    for key in ("p_in", "p_out"):
        if not 0.0 <= params[key] <= 1.0:
            raise CliError(f"{key} must lie in [0, 1]")
    g, x, y = load_dataset({**cfg, "edge_list": None, "add_self_loops": False})
    write_edge_list(out / "edges.txt", g)
    write_features(out / "features.bin", x)
    write_labels(out / "labels.txt", y)
    _dump_json(out / "synth.json", params)
    return 0


def sweep_cells(components, lambdas, batch_clusters):
    return list(itertools.product(components, lambdas, batch_clusters))


def _run_cell(args):
    base, comp, lam, bc, cell_dir = args
    cfg = {**base, **SWEEP_COMPONENTS[comp], "lambda": lam, "batch_clusters": bc, "out": str(cell_dir)}
    try:
        cmd_train(cfg)
        summary = json.loads((Path(cell_dir) / "summary.json").read_text())
        return comp, lam, bc, "ok", summary
    except Exception as exc:  # reported per cell
        return comp, lam, bc, f"error: {exc}", {}


def cmd_sweep(cfg: dict, components, lambdas, batch_clusters) -> int:
    cells = sweep_cells(components, lambdas, batch_clusters)
    if not cells:
        raise CliError("empty sweep")
    unknown = sorted(set(components) - set(SWEEP_COMPONENTS))
    if unknown:
        raise CliError(f"unknown sweep components {unknown}")
    too_big = [bc for bc in batch_clusters if bc > int(cfg["clusters"])]
    if too_big:
        raise CliError(f"batch clusters {too_big} exceed --clusters {cfg['clusters']}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", {**cfg, "sweep": {"components": list(components),
                                                      "lambdas": list(lambdas),
                                                      "batch_clusters": list(batch_clusters)}})
    jobs = [(cfg, c, l, b, out / f"{c}_lam{l:g}_bc{b}") for c, l, b in cells]
    workers = max(1, min(len(jobs), int(os.environ.get("STALEMP_THREADS", os.cpu_count() or 1))))
    if workers == 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    failed = 0
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "lambda", "batch_clusters", "final_train_acc",
                    "final_val_acc", "best_val_acc", "status"])
        for comp, lam, bc, status, summary in results:
            failed += status != "ok"
            w.writerow([comp, lam, bc, summary.get("final_train_acc"), summary.get("final_val_acc"),
                        summary.get("best_val_acc"), status])
    if failed:
        print(f"{failed} of {len(results)} sweep cells failed", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Argument parsing

def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _names(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    # defaults stay None so only explicit flags override the config file
    p.add_argument("--config", help="JSON config; keys mirror flag names with underscores")
    p.add_argument("--edge-list")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--remap", action="store_const", const=True,
                   help="compact sparse edge-list ids instead of rejecting gaps")
    p.add_argument("--synth-sbm", nargs="*", metavar="K=V")
    p.add_argument("--clusters", type=int)
    p.add_argument("--batch-clusters", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--g-thres", type=float)
    p.add_argument("--augment", choices=["none", "concat", "sum"])
    p.add_argument("--stale-reduction", choices=["mean", "sum"])
    for flag in ("--gamma-off", "--stale-loss-off", "--augment-off", "--warm-start",
                 "--add-self-loops"):
        p.add_argument(flag, action="store_const", const=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--diagnose-every", type=int)
    p.add_argument("--checkpoint-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stalemp",
                                     description="Staleness-aware mini-batch graph attention training.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("train", help="train one model"))
    sw = sub.add_parser("sweep", help="ablation grid over components, lambda and batch size")
    _add_run_flags(sw)
    sw.add_argument("--components", type=_names, default=list(SWEEP_COMPONENTS))
    sw.add_argument("--lambdas", type=_floats, default=list(SWEEP_LAMBDAS))
    sw.add_argument("--batch-clusters-grid", type=_ints, default=list(SWEEP_BATCH_CLUSTERS))
    dg = sub.add_parser("diagnose", help="check the cache error bound on a saved run")
    _add_run_flags(dg)
    dg.add_argument("--run", required=True, help="run directory holding config.json and checkpoints")
    dg.add_argument("--params", help="parameter checkpoint (default RUN/final.params)")
    dg.add_argument("--cache", help="cache snapshot (default RUN/final.cache)")
    _add_run_flags(sub.add_parser("synth", help="write a synthetic SBM dataset"))
    return parser


_NON_CONFIG = {"command", "config", "components", "lambdas", "batch_clusters_grid",
               "run", "params", "cache"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    try:
        if flags.get("synth_sbm") is not None:
            flags["synth_sbm"] = parse_synth(flags["synth_sbm"])
        file_cfg = None
        if args.config:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        elif args.command == "diagnose":
            run_cfg = Path(args.run) / "config.json"
            if run_cfg.exists():
                file_cfg = json.loads(run_cfg.read_text(encoding="utf-8"))
                file_cfg.pop("out", None)
        if file_cfg is not None:
            file_cfg.pop("sweep", None)
        defaults = dict(DEFAULTS)
        if args.command == "sweep":
            defaults["clusters"] = SWEEP_DEFAULT_CLUSTERS
        if args.command == "diagnose":
            defaults["out"] = None
        cfg = resolve_config(file_cfg, flags, defaults)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.components, args.lambdas, args.batch_clusters_grid)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, args.run, args.params, args.cache)
        return cmd_synth(cfg)
    except ckpt.FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 2
    except (CliError, GraphFormatError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
