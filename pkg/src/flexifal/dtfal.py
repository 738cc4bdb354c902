"""Decision-tree guided falsification.

Loop: robustness dataset -> CART tree -> falsifying (or nearest) leaves ->
explanation boxes -> R targeted simulations per leaf -> grow dataset -> refit.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import stl
from .core import Box, Counterexample, Trajectory, search_box, unflatten
from .dataset import RobustnessDataset, generate_robustness_dataset, simulate_many, stream
from .dtree import TreeParams, explanation_box, find_falsifying_leaves, find_nearest_leaves, fit, gen_explanation
from .systems import System

log = logging.getLogger(__name__)

LEAF_STREAM, INJECT_STREAM = 0x1EAF, 0x1417


@dataclass(frozen=True)
class DtfalConfig:
    N: int = 50
    epochs: int = 5
    R: int = 20
    min_ce: int = 1
    k: int = 1
    T: float = 1.0
    dt: float = 0.01
    seed: int = 0
    leaf_cap: int = 8
    max_simulations: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_depth: int | None = None
    jobs: int = 1

    def __post_init__(self):
        for name in ("N", "epochs", "R", "min_ce", "k", "leaf_cap", "jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"DtfalConfig.{name} must be >= 1")
        if not (self.T > 0 and self.dt > 0):
            raise ValueError("T and dt must be positive")

    @property
    def tree_params(self) -> TreeParams:
        return TreeParams(self.min_samples_split, self.min_samples_leaf, self.max_depth)


@dataclass
class DtfalReport:
    falsified: bool
    counterexamples: list[Counterexample]
    simulations: int
    epochs_used: int
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    config: DtfalConfig | None = None
    final_dataset: RobustnessDataset | None = None

    def to_json(self, include_timing: bool = False) -> dict:
        out = {
            "status": "falsified" if self.falsified else "failure",
            "simulations": self.simulations,
            "epochs_used": self.epochs_used,
            "counterexamples": [ce.to_json() for ce in self.counterexamples],
            "epochs": self.epochs,
            "config": _config_json(self.config),
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out


def _config_json(cfg):
    if cfg is None:
        return None
    out = asdict(cfg)
    out.pop("jobs")  # results do not depend on it
    return out


def sample_and_simulate(system: System, box: Box, phi: stl.Formula, R: int, seed: int, *, n0: int, k: int,
                        T: float, dt: float, key=(), jobs: int = 1):
    """Simulate ``R`` uniform draws from ``box`` (flattened search space).

    Returns ``(counterexamples, features, rho, blown_up)``; blown-up runs are left
    out of ``features``/``rho``.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    m = system.input_dim
    feats = np.array([box.sample(stream(seed, *key, i)) for i in range(R)]).reshape(R, box.dim)
    X0 = feats[:, :n0]
    U = feats[:, n0:].reshape(R, k, m)
    states, bad = simulate_many(system, X0, U, T, dt, jobs)
    ces, keep, rho = [], [], []
    for i in range(R):
        if bad[i] >= 0:
            log.warning("sample %d blew up at index %d; dropped", i, bad[i])
            continue
        traj = Trajectory(dt, states[i], system.var_names)
        r = stl.robustness(phi, traj)
        keep.append(i)
        rho.append(r)
        if r < 0:
            ces.append(Counterexample(unflatten(feats[i], n0, k, m, T), traj, r))
    return ces, feats[keep], np.array(rho, dtype=np.float64), int(np.sum(bad >= 0))


def run(system: System, init: Box, inputs: Box, phi: stl.Formula, cfg: DtfalConfig) -> DtfalReport:
    t0 = time.perf_counter()
    n0 = init.dim
    stl.check_horizon(phi, int(round(cfg.T / cfg.dt)) + 1, cfg.dt)
    space = search_box(init, inputs, cfg.k)
    ds = generate_robustness_dataset(system, init, inputs, cfg.k, cfg.T, cfg.dt, phi, cfg.N, cfg.seed, cfg.jobs)
    sims = cfg.N
    ces: list[Counterexample] = []
    history: list[dict] = []
    common = dict(n0=n0, k=cfg.k, T=cfg.T, dt=cfg.dt, jobs=cfg.jobs)

    def report(ok, epochs_used):
        return DtfalReport(ok, ces, sims, epochs_used, history, time.perf_counter() - t0, cfg, ds)

    def budget_left():
        return cfg.max_simulations is None or sims + cfg.R <= cfg.max_simulations

    for epoch in range(cfg.epochs):
        tree = fit(ds.features, ds.rho, cfg.tree_params, ds.feature_names)
        leaves = find_falsifying_leaves(tree)
        kind = "falsifying"
        if not leaves:
            leaves, kind = find_nearest_leaves(tree), "nearest"
        diag = {"epoch": epoch, "dataset_rows": len(ds), "tree_nodes": len(tree), "leaf_kind": kind,
                "candidate_leaves": len(leaves), "leaves": []}
        history.append(diag)
        grown = 0
        for rank, leaf in enumerate(leaves[:cfg.leaf_cap]):
            exp = gen_explanation(tree, leaf)
            entry = {"leaf": leaf, "predicted_rho": tree.nodes[leaf].value, "explanation": exp.to_json()}
            diag["leaves"].append(entry)
            box = explanation_box(exp, space)
            if box is None:
                entry["skipped"] = "empty explanation box"
                continue
            if not budget_left():
                entry["skipped"] = "simulation budget exhausted"
                break
            found, feats, rho, blown = sample_and_simulate(
                system, box, phi, cfg.R, cfg.seed, key=(LEAF_STREAM, epoch, rank), **common)
            sims += cfg.R
            ces.extend(found)
            entry.update(samples=cfg.R, counterexamples=len(found), blown_up=blown)
            if len(ces) >= cfg.min_ce:
                return report(True, epoch + 1)
            ds = ds.extend(feats, rho)
            grown += len(rho)
        if grown == 0 and budget_left():
            # nothing new to learn from: add fresh uniform rows so the next fit differs
            _, feats, rho, _ = sample_and_simulate(
                system, space, phi, cfg.R, cfg.seed, key=(INJECT_STREAM, epoch), **common)
            sims += cfg.R
            ds = ds.extend(feats, rho)
            diag["injected"] = len(rho)
        if not budget_left():
            return report(False, epoch + 1)
    return report(False, cfg.epochs)
