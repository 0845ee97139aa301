"""Command-line entry point: generate, train, eval, scan.

Every command resolves its configuration as defaults < ``--config`` file <
command-line flags, and writes the resolved sections to the output location
so a run can be repeated with ``--config <echoed file>``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path


from . import __version__
from .evaluate import (conservation_drift, initial_conditions, rollout_rmse, write_drift_json,
                       write_report_csv)
from .models import ConfigError, ModelConfig, ParamStore
from .odeint import IntegratorConfig
from .physics import Dataset, SYSTEMS, generate_dataset, get_system
from .train import TrainConfig, TrainingDiverged, scan_ncom, train

log = logging.getLogger("comet")

CONFIG_VERSION = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

DEFAULTS = {
    "system": {"name": "mass-spring", "n_traj": 100, "n_points": 100, "t_end": 10.0,
               "noise": 0.05, "seed": 0},
    "model": {"kind": "comet", "n_c": None, "hidden_layers": 3, "hidden_width": 250, "seed": 0},
    "train": {"lr": 3e-4, "epochs": 1000, "batch_size": 32, "w1": 1.0, "w2": 1.0, "sigma": 0.1,
              "seed": 0, "data": None},
    "eval": {"n_sims": 100, "t_end": 100.0, "n_points": 1000, "seed": 12345, "rtol": 1e-8,
             "atol": 1e-8, "max_steps": 50000, "n_drift": 1},
    "scan": {"nc_max": None, "seeds": 5, "epochs": 3000, "noise": 0.0},
    "run": {"threads": None},
}

SECTIONS = {
    "generate": ("system",),
    "train": ("system", "model", "train"),
    "eval": ("system", "eval"),
    "scan": ("system", "model", "train", "scan", "run"),
}


class UsageError(Exception):
    pass


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Recursively overlay ``override`` on ``base``; unknown keys are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key == "version" and not where:
            continue
        if key not in base:
            raise UsageError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where + key!r} must be an object")
            out[key] = merge_config(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(command: str, args: argparse.Namespace, flag_map: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        cfg = merge_config(cfg, doc)
    for dest, (section, key) in flag_map.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = value
    out = {"version": CONFIG_VERSION}
    out.update({s: cfg[s] for s in SECTIONS[command]})
    return out


def echo_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _system(name: str):
    try:
        return get_system(name)
    except KeyError as exc:
        raise UsageError(str(exc)) from None


def _dataset_from(cfg: dict, noise: float | None = None) -> Dataset:
    sc = cfg["system"]
    return generate_dataset(_system(sc["name"]), sc["n_traj"], sc["n_points"], sc["t_end"],
                            sc["noise"] if noise is None else noise, sc["seed"])


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = resolve_config("generate", args, {
        "system": ("system", "name"), "n_traj": ("system", "n_traj"),
        "n_points": ("system", "n_points"), "t_end": ("system", "t_end"),
        "noise": ("system", "noise"), "seed": ("system", "seed")})
    out = Path(args.out)
    ds = _dataset_from(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    echo_config(cfg, out.with_name(out.stem + ".config.json"))
    sizes = ds.split_sizes()
    print(f"{ds.system}: {len(ds)} samples in {len(ds.trajectories)} trajectories; "
          f"train {sizes['train']}, val {sizes['val']}, test {sizes['test']}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config("train", args, {
        "system": ("system", "name"), "model": ("model", "kind"), "nc": ("model", "n_c"),
        "hidden_layers": ("model", "hidden_layers"), "hidden_width": ("model", "hidden_width"),
        "epochs": ("train", "epochs"), "lr": ("train", "lr"), "batch_size": ("train", "batch_size"),
        "w1": ("train", "w1"), "w2": ("train", "w2"), "sigma": ("train", "sigma"),
        "data": ("train", "data")})
    if args.seed is not None:
        cfg["model"]["seed"] = cfg["train"]["seed"] = args.seed
    out = Path(args.out)
    if cfg["train"]["data"]:
        ds = Dataset.load(cfg["train"]["data"])
        cfg["system"]["name"] = ds.system
    else:
        ds = _dataset_from(cfg)
    system = _system(ds.system)
    mc_cfg = cfg["model"]
    n_c = mc_cfg["n_c"]
    if mc_cfg["kind"] == "comet" and n_c is None:
        n_c = min(system.true_n_c, ds.n_s - 1)
    elif mc_cfg["kind"] != "comet":
        n_c = 0
    try:
        mc = ModelConfig(mc_cfg["kind"], ds.n_s, n_c, ds.n_x, mc_cfg["hidden_layers"],
                         mc_cfg["hidden_width"], mc_cfg["seed"])
        tc_cfg = {k: v for k, v in cfg["train"].items() if k != "data"}
        tc = TrainConfig(**tc_cfg)
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    cfg["model"]["n_c"] = n_c
    echo_config(cfg, out / "config.json")
    t0 = time.perf_counter()
    try:
        store, hist = train(mc, ds, tc)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    store.save(out / "checkpoint.json", meta={"system": ds.system})
    hist.to_csv(out / "history.csv")
    final = hist.l1[-1] if len(hist) else float("nan")
    print(f"final L1 {final:.6g}, best val L1 {min(hist.val_l1, default=float('nan')):.6g} "
          f"(epoch {hist.best_epoch}), {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config("eval", args, {
        "system": ("system", "name"), "n_sims": ("eval", "n_sims"), "t_end": ("eval", "t_end"),
        "n_points": ("eval", "n_points"), "seed": ("eval", "seed"), "rtol": ("eval", "rtol"),
        "atol": ("eval", "atol"), "max_steps": ("eval", "max_steps"),
        "n_drift": ("eval", "n_drift")})
    ec = cfg["eval"]
    if args.checkpoint is None and not args.truth:
        raise UsageError("eval needs --checkpoint or --truth")
    if args.truth:
        system = _system(cfg["system"]["name"])
        model = lambda s, x: system.dynamics(s, x)  # noqa: E731
        method = "truth"
    else:
        try:
            model = ParamStore.load(args.checkpoint)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot load checkpoint: {exc}") from None
        meta_system = model.meta.get("system")
        if args.system is None and meta_system:
            cfg["system"]["name"] = meta_system
        system = _system(cfg["system"]["name"])
        if meta_system and meta_system != system.name:
            raise UsageError(f"checkpoint was trained on {meta_system}, not {system.name}")
        if model.config.n_s != system.n_s or model.config.n_x != system.n_x:
            raise UsageError(f"checkpoint has {model.config.n_s} states / {model.config.n_x} "
                             f"inputs, {system.name} has {system.n_s} / {system.n_x}")
        method = model.config.model_kind
        if method == "comet":
            method += f"[{model.config.n_c}]"
    out = Path(args.out)
    echo_config(cfg, out / "config.json")
    integ = IntegratorConfig(rtol=ec["rtol"], atol=ec["atol"], max_steps=ec["max_steps"])
    keep: list = []
    report = rollout_rmse(model, system, ec["n_sims"], ec["t_end"], ec["n_points"], ec["seed"],
                          method=method, config=integ, keep=keep)
    write_report_csv([report], out / "report.csv")
    roll = out / "rollouts"
    roll.mkdir(parents=True, exist_ok=True)
    (roll / "report.json").write_text(report.to_json())
    for k, (t, truth, pred) in enumerate(keep):
        (roll / f"sim_{k:03d}.json").write_text(json.dumps(
            {"version": 1, "t": t.tolist(), "truth": truth.tolist(), "prediction": pred.tolist()}))
    ics = initial_conditions(system, ec["n_drift"], ec["seed"])
    for k, (s0, _) in enumerate(ics):
        series = conservation_drift(model, system, s0, ec["t_end"], ec["n_points"], config=integ)
        write_drift_json(series, roll / f"drift_{k:03d}.json")
    med, lo, hi = report.summary
    print(f"{method} on {system.name}: median RMSE {med:.4g} [{lo:.4g}, {hi:.4g}], "
          f"{report.n_fail} failed of {len(report.rmse)}")
    return 0


def cmd_scan(args) -> int:
    cfg = resolve_config("scan", args, {
        "system": ("system", "name"), "n_traj": ("system", "n_traj"),
        "nc_max": ("scan", "nc_max"), "seeds": ("scan", "seeds"), "epochs": ("scan", "epochs"),
        "noise": ("scan", "noise"), "hidden_layers": ("model", "hidden_layers"),
        "hidden_width": ("model", "hidden_width"), "batch_size": ("train", "batch_size"),
        "lr": ("train", "lr"), "threads": ("run", "threads")})
    sc = cfg["scan"]
    system = _system(cfg["system"]["name"])
    nc_max = system.n_s - 1 if sc["nc_max"] is None else sc["nc_max"]
    if not 0 <= nc_max <= system.n_s - 1:
        raise UsageError(f"--nc-max must be in [0, {system.n_s - 1}]")
    threads = cfg["run"]["threads"] or os.cpu_count() or 1
    out = Path(args.out)
    echo_config(cfg, out / "config.json")
    ds = _dataset_from(cfg, noise=sc["noise"])
    tc_cfg = {k: v for k, v in cfg["train"].items() if k != "data"}
    try:
        tc = TrainConfig(**tc_cfg)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    result = scan_ncom(ds, list(range(nc_max + 1)), sc["seeds"], sc["epochs"],
                       cfg["model"]["hidden_layers"], cfg["model"]["hidden_width"], tc,
                       workers=min(threads, (nc_max + 1) * sc["seeds"]))
    result.table_csv(out / "scan.csv")
    result.curves_csv(out / "curves.csv")
    for n_c, (m, s) in result.relative().items():
        n_bad = sum(bool(c.error) for c in result.cells if c.n_c == n_c)
        print(f"n_c={n_c}: relative val L1 {m:.3g} +- {s:.2g}" + (f" ({n_bad} failed)" if n_bad else ""))
    print(f"suggested n_c: {result.suggest_n_c()}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a benchmark system and write a dataset")
    g.add_argument("--config")
    g.add_argument("--system", choices=sorted(SYSTEMS), metavar="NAME")
    g.add_argument("--n-traj", type=int)
    g.add_argument("--n-points", type=int)
    g.add_argument("--t-end", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train COMET, NODE or HNN on a dataset")
    t.add_argument("--config")
    t.add_argument("--model", choices=("comet", "node", "hnn"))
    t.add_argument("--nc", type=int)
    t.add_argument("--data")
    t.add_argument("--system", choices=sorted(SYSTEMS), metavar="NAME")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--hidden-layers", type=int)
    t.add_argument("--hidden-width", type=int)
    t.add_argument("--w1", type=float)
    t.add_argument("--w2", type=float)
    t.add_argument("--sigma", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint against the exact dynamics")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--truth", action="store_true", help="evaluate the exact dynamics itself")
    e.add_argument("--system", choices=sorted(SYSTEMS), metavar="NAME")
    e.add_argument("--n-sims", type=int)
    e.add_argument("--t-end", type=float)
    e.add_argument("--n-points", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--rtol", type=float)
    e.add_argument("--atol", type=float)
    e.add_argument("--max-steps", type=int)
    e.add_argument("--n-drift", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("scan", help="scan the assumed number of constants of motion")
    s.add_argument("--config")
    s.add_argument("--system", choices=sorted(SYSTEMS), metavar="NAME")
    s.add_argument("--nc-max", type=int)
    s.add_argument("--seeds", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--n-traj", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--hidden-layers", type=int)
    s.add_argument("--hidden-width", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--threads", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
