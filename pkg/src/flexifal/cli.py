"""``flexifal`` command line.

Settings come from (lowest to highest priority) built-in defaults, a named
benchmark, a TOML config file, and command-line flags. Every subcommand writes
a JSON report that validates against ``report.schema.json``.

Exit codes: 0 success / falsified, 2 budget exhausted without a counterexample,
1 usage or runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from . import dtfal, stl
from .core import Box, Counterexample, PiecewiseConstantSignal, Trajectory, points_to_csv
from .dataset import (NNDataset, RobustnessDataset, difficulty_rho, generate_nn_dataset,
                      generate_robustness_dataset, load_dataset, minmax_scale, save_dataset)
from .dtree import DecisionTree, TreeParams, fit
from .nnfal import (Layout, NnfalBudget, ReachabilitySpec, Surrogate, TrainConfig, TrainingError, load_model,
                    nnfal_run, save_model, train_mlp)
from .systems import BENCHMARKS, SimulationError, get_system

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("flexifal")

EXIT_OK, EXIT_ERROR, EXIT_FAILURE = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------- arguments


def _common(p):
    g = p.add_argument_group("common")
    g.add_argument("--config", help="TOML file whose keys mirror the long flags")
    g.add_argument("--seed", type=int, help="RNG seed (default: $FLEXIFAL_SEED or 0)")
    g.add_argument("--jobs", type=int, help="worker threads (default: logical cores)")
    g.add_argument("--out", help="report JSON path (default: stdout)")
    g.add_argument("-v", "--verbose", action="store_true")


def _problem(p, spec=True):
    g = p.add_argument_group("problem")
    g.add_argument("--benchmark", choices=sorted(BENCHMARKS), help="fill in system, spec, boxes, k, T, dt")
    g.add_argument("--system", help="built-in name or exec:/path/to/simulator")
    g.add_argument("--state-dim", type=int, help="state dimension (exec: systems)")
    g.add_argument("--input-dim", type=int, help="input dimension (exec: systems)")
    g.add_argument("--var-names", help="comma-separated state names (exec: systems; default x1..xn)")
    if spec:
        g.add_argument("--spec", help="STL formula, or a file containing one")
    g.add_argument("--init", help="initial-state box: 'lo:hi,lo:hi' or JSON [[lo,hi],...]")
    g.add_argument("--input-box", help="input-value box, same format as --init")
    g.add_argument("-k", type=int, help="number of input segments")
    g.add_argument("-T", type=float, help="horizon")
    g.add_argument("--dt", type=float, help="sample period")


def _outputs(p):
    g = p.add_argument_group("outputs")
    g.add_argument("--ce-csv", help="write counterexample points here")
    g.add_argument("--plot-csv", help="write counterexample trajectories (long format) here")
    g.add_argument("--figures", help="directory for PNG figures of the counterexamples")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="flexifal", description="Surrogate-guided falsification of STL specifications.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate one run and write its trajectory CSV")
    _common(p)
    _problem(p, spec=False)
    p.add_argument("--x0", required=True, help="initial state, comma separated or JSON list")
    p.add_argument("--u", help="JSON list of k input rows")
    p.add_argument("--traj-out", help="trajectory CSV path (default: stdout)")
    p.add_argument("--figures")

    p = sub.add_parser("monitor", help="robustness of a trajectory CSV")
    _common(p)
    p.add_argument("--traj", required=True)
    p.add_argument("--spec", required=True)

    p = sub.add_parser("dod", help="degree of difficulty: percent of random runs violating the formula")
    _common(p)
    _problem(p)
    p.add_argument("-N", type=int, help="number of runs (default 1000)")
    p.add_argument("--sampling", choices=["stratified", "iid"], help="run placement (default stratified)")
    p.add_argument("--figures")

    p = sub.add_parser("gen-data", help="generate a surrogate training dataset")
    _common(p)
    _problem(p)
    p.add_argument("--mode", choices=["nn", "rob"], default=None)
    p.add_argument("-N", type=int)
    p.add_argument("--data", help="dataset CSV path (a .json sidecar is written next to it)")

    p = sub.add_parser("fit-tree", help="fit a regression tree to a robustness dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--tree", help="tree JSON output path")
    p.add_argument("--min-samples-split", type=int)
    p.add_argument("--min-samples-leaf", type=int)
    p.add_argument("--max-depth", type=int)

    p = sub.add_parser("dump-tree", help="print a tree JSON as indented text")
    _common(p)
    p.add_argument("--tree", required=True)

    p = sub.add_parser("dtfal", help="decision-tree guided falsification")
    _common(p)
    _problem(p)
    _outputs(p)
    p.add_argument("-N", type=int, help="initial dataset size")
    p.add_argument("-R", type=int, help="simulations per leaf")
    p.add_argument("--epochs", type=int)
    p.add_argument("--min-ce", type=int)
    p.add_argument("--leaf-cap", type=int)
    p.add_argument("--max-simulations", type=int)
    p.add_argument("--min-samples-split", type=int)
    p.add_argument("--min-samples-leaf", type=int)
    p.add_argument("--max-depth", type=int)

    p = sub.add_parser("train-nn", help="train an MLP surrogate on an nn dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="model output path")
    p.add_argument("--hidden", help="hidden widths, e.g. 64,64,64")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--no-early-stopping", dest="early_stopping", action="store_const", const=False)

    p = sub.add_parser("nnfal", help="attack a surrogate, validate candidates on the real system")
    _common(p)
    _problem(p, spec=False)
    _outputs(p)
    p.add_argument("--model", required=True)
    p.add_argument("--unsafe", help="unsafe output set: box 'lo:hi,...' or JSON {\"A\": [[...]], \"b\": [...]}")
    p.add_argument("--attack", choices=["pgd", "fgsm"])
    p.add_argument("--max-attacks", type=int)
    p.add_argument("--timeout-secs", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--eps", type=float, help="fgsm step size")
    p.add_argument("--delta", type=float, help="exclusion radius in scaled input space")
    p.add_argument("--mode", choices=["at_time", "any"])
    return ap


# ------------------------------------------------------------ configuration


def _merge(args, defaults: dict) -> dict:
    """defaults < benchmark < config file < flags."""
    cfg = dict(defaults)
    bench = getattr(args, "benchmark", None)
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        with open(path, "rb") as fh:
            file_cfg = {k.replace("-", "_"): v for k, v in tomllib.load(fh).items()}
        bench = args.benchmark or file_cfg.get("benchmark")
    if bench:
        if bench not in BENCHMARKS:
            raise ConfigError("benchmark", f"unknown benchmark {bench!r}")
        b = BENCHMARKS[bench]
        cfg.update(system=b.system, spec=b.spec, init=b.init.to_list(), input_box=b.inputs.to_list(), k=b.k,
                   T=b.T, dt=b.dt)
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in vars(args).items() if v is not None})
    if cfg.get("seed") is None:
        env = os.environ.get("FLEXIFAL_SEED")
        try:
            cfg["seed"] = int(env) if env else 0
        except ValueError:
            raise ConfigError("seed", f"FLEXIFAL_SEED is not an integer: {env!r}") from None
    if cfg.get("jobs") is None:
        cfg["jobs"] = os.cpu_count() or 1
    if cfg["jobs"] < 1:
        raise ConfigError("jobs", "must be >= 1")
    return cfg


def parse_box(text, field: str) -> Box:
    if text is None:
        raise ConfigError(field, "required")
    if isinstance(text, (list, tuple)):
        pairs = text
    else:
        text = text.strip()
        if text in ("", "[]"):
            return Box([], [])
        if text.startswith("["):
            pairs = json.loads(text)
        else:
            pairs = []
            for part in text.split(","):
                bits = part.split(":")
                if len(bits) != 2:
                    raise ConfigError(field, f"expected lo:hi, got {part!r}")
                pairs.append([float(bits[0]), float(bits[1])])
    try:
        return Box.from_pairs(pairs) if len(pairs) else Box([], [])
    except ValueError as e:
        raise ConfigError(field, str(e)) from None


def parse_vector(text, field: str) -> np.ndarray:
    if isinstance(text, (list, tuple)):
        return np.asarray(text, dtype=np.float64)
    text = text.strip()
    try:
        vals = json.loads(text) if text.startswith("[") else [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(field, f"not a list of numbers: {text!r}") from None
    return np.asarray(vals, dtype=np.float64)


def load_spec(cfg) -> tuple[stl.Formula, str]:
    text = cfg.get("spec")
    if not text:
        raise ConfigError("spec", "required")
    if os.path.isfile(text):
        text = Path(text).read_text().strip()
    try:
        return stl.parse(text), text
    except stl.STLSyntaxError as e:
        raise ConfigError("spec", str(e)) from None


def make_system(cfg):
    if not cfg.get("system"):
        raise ConfigError("system", "required")
    try:
        names = cfg.get("var_names")
        if isinstance(names, str):
            names = [v.strip() for v in names.split(",") if v.strip()]
        return get_system(cfg["system"], cfg.get("state_dim"), cfg.get("input_dim"), var_names=names)
    except ValueError as e:
        raise ConfigError("system", str(e)) from None


def problem(cfg, need_spec=True):
    """Validated (system, phi, spec_text, init, inputs, k, T, dt) before any simulation."""
    system = make_system(cfg)
    phi, text = load_spec(cfg) if need_spec else (None, None)
    init = parse_box(cfg.get("init"), "init")
    inputs = parse_box(cfg.get("input_box", []), "input_box")
    if init.dim != len(system.var_names):
        raise ConfigError("init", f"box has {init.dim} dimensions, system {system.name} has "
                                  f"{len(system.var_names)} states")
    if inputs.dim != system.input_dim:
        raise ConfigError("input_box", f"box has {inputs.dim} dimensions, system {system.name} takes "
                                       f"{system.input_dim} inputs")
    k, T, dt = int(cfg.get("k", 1)), cfg.get("T"), cfg.get("dt")
    if k < 1:
        raise ConfigError("k", "must be >= 1")
    if T is None or not T > 0:
        raise ConfigError("T", "required and > 0")
    if dt is None or not dt > 0:
        raise ConfigError("dt", "required and > 0")
    if phi is not None:
        missing = stl.variables(phi) - set(system.var_names)
        if missing:
            raise ConfigError("spec", f"unknown variables {sorted(missing)}; system has {list(system.var_names)}")
        try:
            stl.check_horizon(phi, int(round(T / dt)) + 1, dt)
        except stl.HorizonError as e:
            raise ConfigError("spec", str(e)) from None
    return system, phi, text, init, inputs, k, float(T), float(dt)


# ------------------------------------------------------------------ output


def fmt(x: float) -> str:
    return f"{x:.17g}"


def emit_report(cfg, command: str, status: str, result: dict) -> None:
    report = {"tool": "flexifal", "command": command, "status": status, "seed": int(cfg["seed"]),
              "result": result}
    text = json.dumps(_clean(report), indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text)
    else:
        sys.stdout.write(text)


def _clean(obj):
    # JSON has no infinities; +-inf robustness (e.g. of `true`) is reported as null
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _finite(x):
    return float(x) if np.isfinite(x) else None


def plot_rows(trajs: list[Trajectory]) -> str:
    """Long-format CSV: ``run,time,<vars>`` for every trajectory."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not trajs:
        w.writerow(["run", "time"])
        return buf.getvalue()
    w.writerow(["run", "time", *trajs[0].var_names])
    for r, tr in enumerate(trajs):
        for t, row in zip(tr.times, tr.states):
            w.writerow([r, repr(float(t)), *[repr(float(v)) for v in row]])
    return buf.getvalue()


def write_ce_outputs(cfg, ces: list[Counterexample]) -> dict:
    written = {}
    if cfg.get("ce_csv"):
        Path(cfg["ce_csv"]).write_text(points_to_csv([c.point for c in ces], [c.robustness for c in ces]))
        written["ce_csv"] = cfg["ce_csv"]
    if cfg.get("plot_csv"):
        Path(cfg["plot_csv"]).write_text(plot_rows([c.trajectory for c in ces]))
        written["plot_csv"] = cfg["plot_csv"]
    if cfg.get("figures") and ces:
        from . import figures
        written["figures"] = figures.trajectories(cfg["figures"], [c.trajectory for c in ces], "counterexamples")
    return written


# --------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = _merge(args, {"k": 1})
    system = make_system(cfg)
    x0 = parse_vector(cfg["x0"], "x0")
    if len(x0) != len(system.var_names):
        raise ConfigError("x0", f"has {len(x0)} entries, system {system.name} has {len(system.var_names)} states")
    T, dt, m = cfg.get("T"), cfg.get("dt"), system.input_dim
    if T is None or dt is None:
        raise ConfigError("T" if T is None else "dt", "required")
    if cfg.get("u"):
        u = np.asarray(json.loads(cfg["u"]) if isinstance(cfg["u"], str) else cfg["u"], dtype=np.float64)
        if m == 0:
            u = np.zeros((max(1, len(u)), 0))
        elif u.ndim != 2 or u.shape[1] != m:
            raise ConfigError("u", f"expected rows of {m} input values")
    else:
        u = np.zeros((int(cfg["k"]), m))
    traj = system.simulate(x0, PiecewiseConstantSignal(float(T), u), float(T), float(dt))
    text = traj.to_csv()
    if cfg.get("traj_out"):
        Path(cfg["traj_out"]).write_text(text)
    elif not cfg.get("out"):
        sys.stdout.write(text)
    result = {"system": system.name, "x0": x0.tolist(), "u": u.tolist(), "T": float(T), "dt": float(dt),
              "samples": len(traj), "final_state": traj.states[-1].tolist(), "trajectory_csv": cfg.get("traj_out")}
    if cfg.get("figures"):
        from . import figures
        result["figures"] = figures.trajectories(cfg["figures"], [traj], "trajectory")
    if cfg.get("out"):
        emit_report(cfg, "simulate", "ok", result)
    return EXIT_OK


def cmd_monitor(args) -> int:
    cfg = _merge(args, {})
    path = Path(cfg["traj"])
    if not path.exists():
        raise ConfigError("traj", f"file not found: {path}")
    traj = Trajectory.from_csv(path.read_text())
    phi, text = load_spec(cfg)
    v = stl.evaluate(phi, traj)
    print(fmt(v.robustness))
    if cfg.get("out"):
        emit_report(cfg, "monitor", "ok", {"spec": text, "robustness": _finite(v.robustness),
                                           "satisfied": bool(v.satisfied), "boundary": bool(v.boundary)})
    return EXIT_OK


def cmd_dod(args) -> int:
    cfg = _merge(args, {"N": 1000, "sampling": "stratified"})
    system, phi, text, init, inputs, k, T, dt = problem(cfg)
    N = int(cfg["N"])
    if N < 1:
        raise ConfigError("N", "must be >= 1")
    rho = difficulty_rho(system, init, inputs, k, T, dt, phi, N, cfg["seed"], cfg["jobs"], cfg["sampling"])
    violations = int(np.sum(rho < 0))
    dod = 100.0 * violations / N
    print(fmt(dod))
    result = {"system": system.name, "spec": text, "N": N, "sampling": cfg["sampling"], "violations": violations,
              "dod_percent": dod, "min_robustness": float(rho.min())}
    if cfg.get("figures"):
        from . import figures
        result["figures"] = figures.robustness_histogram(cfg["figures"], rho)
    if cfg.get("out"):
        emit_report(cfg, "dod", "ok", result)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _merge(args, {"mode": "rob", "N": 100})
    mode = cfg["mode"]
    system, phi, text, init, inputs, k, T, dt = problem(cfg, need_spec=(mode == "rob"))
    if not cfg.get("data"):
        raise ConfigError("data", "output path required")
    if mode == "nn":
        ds = generate_nn_dataset(system, init, inputs, k, T, dt, int(cfg["N"]), cfg["seed"], cfg["jobs"])
    else:
        ds = generate_robustness_dataset(system, init, inputs, k, T, dt, phi, int(cfg["N"]), cfg["seed"],
                                         cfg["jobs"], spec_text=text)
    save_dataset(ds, cfg["data"])
    emit_report(cfg, "gen-data", "ok", {"mode": mode, "rows": len(ds), "columns": ds.columns, "data": cfg["data"]})
    return EXIT_OK


def _load(path, kind, field="data"):
    if not Path(path).exists():
        raise ConfigError(field, f"file not found: {path}")
    ds = load_dataset(path)
    if not isinstance(ds, kind):
        raise ConfigError(field, f"{path} is not a {'robustness' if kind is RobustnessDataset else 'nn'} dataset")
    return ds


def cmd_fit_tree(args) -> int:
    cfg = _merge(args, {"min_samples_split": 2, "min_samples_leaf": 1})
    ds = _load(cfg["data"], RobustnessDataset)
    tree = fit(ds.features, ds.rho, TreeParams(cfg["min_samples_split"], cfg["min_samples_leaf"],
                                               cfg.get("max_depth")), ds.feature_names)
    if cfg.get("tree"):
        Path(cfg["tree"]).write_text(tree.dumps())
    emit_report(cfg, "fit-tree", "ok", {"nodes": len(tree), "leaves": len(tree.leaves), "depth": tree.depth,
                                        "tree": tree.to_json()})
    return EXIT_OK


def cmd_dump_tree(args) -> int:
    cfg = _merge(args, {})
    path = Path(cfg["tree"])
    if not path.exists():
        raise ConfigError("tree", f"file not found: {path}")
    tree = DecisionTree.from_json(json.loads(path.read_text()))
    print(tree.render())
    if cfg.get("out"):
        emit_report(cfg, "dump-tree", "ok", {"tree": tree.to_json(), "text": tree.render()})
    return EXIT_OK


def cmd_dtfal(args) -> int:
    cfg = _merge(args, {"N": 50, "R": 20, "epochs": 5, "min_ce": 1, "leaf_cap": 8, "min_samples_split": 2,
                        "min_samples_leaf": 1})
    system, phi, text, init, inputs, k, T, dt = problem(cfg)
    try:
        dcfg = dtfal.DtfalConfig(N=cfg["N"], epochs=cfg["epochs"], R=cfg["R"], min_ce=cfg["min_ce"], k=k, T=T,
                                 dt=dt, seed=cfg["seed"], leaf_cap=cfg["leaf_cap"],
                                 max_simulations=cfg.get("max_simulations"),
                                 min_samples_split=cfg["min_samples_split"],
                                 min_samples_leaf=cfg["min_samples_leaf"], max_depth=cfg.get("max_depth"),
                                 jobs=cfg["jobs"])
    except ValueError as e:
        raise ConfigError("dtfal", str(e)) from None
    rep = dtfal.run(system, init, inputs, phi, dcfg)
    result = rep.to_json()
    result.update(system=system.name, spec=text, outputs=write_ce_outputs(cfg, rep.counterexamples))
    status = "falsified" if rep.falsified else "failure"
    emit_report(cfg, "dtfal", status, result)
    return EXIT_OK if rep.falsified else EXIT_FAILURE


def cmd_train_nn(args) -> int:
    cfg = _merge(args, {"hidden": "64,64,64", "lr": 1e-4, "batch_size": 32, "epochs": 100, "patience": 5,
                        "val_fraction": 0.2, "early_stopping": True})
    ds = _load(cfg["data"], NNDataset)
    if not cfg.get("model"):
        raise ConfigError("model", "output path required")
    hidden = [int(h) for h in str(cfg["hidden"]).split(",") if h.strip()] if not isinstance(cfg["hidden"], list) \
        else [int(h) for h in cfg["hidden"]]
    try:
        tcfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["epochs"],
                           patience=cfg["patience"], val_fraction=cfg["val_fraction"], seed=cfg["seed"],
                           early_stopping=cfg["early_stopping"])
    except ValueError as e:
        raise ConfigError("train", str(e)) from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        Xs, scaling = minmax_scale(ds.inputs)
    for w in caught:
        log.warning("%s", w.message)
    res = train_mlp(Xs, ds.outputs, hidden, tcfg)
    meta = dict(ds.meta, input_names=ds.input_names, output_names=ds.output_names, best_epoch=res.best_epoch,
                best_loss=res.best_loss, train_seed=cfg["seed"])
    save_model(cfg["model"], Surrogate(res.mlp, scaling, meta))
    emit_report(cfg, "train-nn", "ok", {"model": cfg["model"], "widths": res.mlp.widths,
                                        "best_epoch": res.best_epoch, "best_loss": res.best_loss,
                                        "history": res.history})
    return EXIT_OK


def parse_unsafe(text, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    if text is None:
        raise ConfigError("unsafe", "required")
    if isinstance(text, dict) or text.strip().startswith("{"):
        obj = json.loads(text) if isinstance(text, str) else text
        A, b = np.atleast_2d(np.asarray(obj["A"], dtype=float)), np.asarray(obj["b"], dtype=float)
    else:
        lows, highs = [], []
        for part in text.split(","):
            lo, hi = part.split(":")
            lows.append(float(lo))
            highs.append(float(hi))
        if len(lows) != n_out:
            raise ConfigError("unsafe", f"box has {len(lows)} dimensions, model has {n_out} outputs")
        I = Box([0.0], [1.0])
        spec = ReachabilitySpec.from_output_box(I, lows, highs)
        return spec.A, spec.b
    if A.shape[1] != n_out:
        raise ConfigError("unsafe", f"A has {A.shape[1]} columns, model has {n_out} outputs")
    return A, b


def cmd_nnfal(args) -> int:
    cfg = _merge(args, {"attack": "pgd", "max_attacks": 50, "iters": 100, "step": 0.01, "restarts": 5,
                        "eps": 0.1, "delta": 1e-3, "mode": "at_time"})
    path = Path(cfg["model"])
    if not path.exists():
        raise ConfigError("model", f"file not found: {path}")
    sur = load_model(path)
    meta = sur.meta
    for key, mkey in (("system", "system"), ("init", "init"), ("input_box", "inputs"), ("k", "k"), ("T", "T"),
                      ("dt", "dt")):
        if cfg.get(key) is None and mkey in meta:
            cfg[key] = meta[mkey]
    system, _, _, init, inputs, k, T, dt = problem(cfg, need_spec=False)
    I = search_space(init, inputs, k, T)
    if I.dim != sur.mlp.widths[0]:
        raise ConfigError("model", f"network takes {sur.mlp.widths[0]} inputs, search space has {I.dim}")
    A, b = parse_unsafe(cfg.get("unsafe"), sur.mlp.widths[-1])
    spec = ReachabilitySpec(I, A, b)
    if cfg["attack"] == "pgd":
        kw = {"iters": cfg["iters"], "step": cfg["step"], "restarts": cfg["restarts"]}
    else:
        kw = {"eps": cfg["eps"]}
    res = nnfal_run(system, sur, spec, Layout(init.dim, k, T, dt), NnfalBudget(cfg["max_attacks"],
                                                                                 cfg.get("timeout_secs")),
                    attack=cfg["attack"], seed=cfg["seed"], delta=cfg["delta"], attack_kwargs=kw, mode=cfg["mode"])
    result = res.to_json()
    ces = [res.counterexample] if res.counterexample is not None else []
    result.update(system=system.name, unsafe={"A": A.tolist(), "b": b.tolist()}, attack=cfg["attack"],
                  outputs=write_ce_outputs(cfg, ces))
    emit_report(cfg, "nnfal", "falsified" if res.success else "failure", result)
    return EXIT_OK if res.success else EXIT_FAILURE


def search_space(init: Box, inputs: Box, k: int, T: float) -> Box:
    """Surrogate input box ``[x0, u_flat, t]``."""
    return init.concat(inputs.repeat(k)).concat(Box([0.0], [T]))


COMMANDS = {
    "simulate": cmd_simulate,
    "monitor": cmd_monitor,
    "dod": cmd_dod,
    "gen-data": cmd_gen_data,
    "fit-tree": cmd_fit_tree,
    "dump-tree": cmd_dump_tree,
    "dtfal": cmd_dtfal,
    "train-nn": cmd_train_nn,
    "nnfal": cmd_nnfal,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"flexifal {args.command}: config error: {e}", file=sys.stderr)
    except (ValueError, KeyError, OSError, SimulationError, TrainingError, stl.HorizonError) as e:
        print(f"flexifal {args.command}: error: {e}", file=sys.stderr)
    return EXIT_ERROR


def report_schema() -> dict:
    return json.loads(resources.files("flexifal").joinpath("report.schema.json").read_text())


if __name__ == "__main__":
    sys.exit(main())
