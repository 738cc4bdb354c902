"""Trajectory datasets for surrogate training, MinMax scaling, and the DoD metric."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stl
from .core import Box, Trajectory, feature_names, search_box
from .systems import System, n_samples

log = logging.getLogger(__name__)

NN_STREAM, ROB_STREAM, DOD_STREAM = 0x4E4E, 0x524F, 0xD0D
MAX_RETRIES = 20


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; lets work be split across workers freely."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]]))


def simulate_many(system: System, X0, U, T: float, dt: float, jobs: int = 1, chunk: int = 64):
    """Batch-simulate in chunks, optionally on a thread pool. Output order is input order."""
    X0 = np.asarray(X0, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    starts = list(range(0, len(X0), chunk))
    if len(starts) == 0:
        return np.zeros((0, n_samples(T, dt), len(system.var_names))), np.zeros(0, dtype=int)

    def run(s):
        return system.simulate_batch(X0[s:s + chunk], U[s:s + chunk], T, dt)

    if jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _draw(init: Box, inputs: Box, k: int, rng):
    # input segments first, then the initial state
    u = inputs.sample(rng, k) if inputs.dim else np.zeros((k, 0))
    x0 = init.sample(rng)
    return x0, u


def sample_trajectories(system, init, inputs, k, T, dt, N, seed, tag, jobs=1):
    """Draw and simulate ``N`` runs; blown-up runs are redrawn from the next attempt stream.

    Returns ``(X0 (N, n0), U (N, k, m), states (N, S, n))``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    draws = [_draw(init, inputs, k, stream(seed, tag, i, 0)) for i in range(N)]
    X0 = np.array([d[0] for d in draws]).reshape(N, init.dim)
    U = np.array([d[1] for d in draws]).reshape(N, k, inputs.dim)
    states, bad = simulate_many(system, X0, U, T, dt, jobs)
    for attempt in range(1, MAX_RETRIES + 1):
        redo = np.flatnonzero(bad >= 0)
        if len(redo) == 0:
            break
        log.warning("%d trajectories blew up; redrawing (attempt %d)", len(redo), attempt)
        for i in redo:
            X0[i], U[i] = _draw(init, inputs, k, stream(seed, tag, i, attempt))
        s2, b2 = simulate_many(system, X0[redo], U[redo], T, dt, jobs)
        states[redo], bad[redo] = s2, b2
    else:
        if np.any(bad >= 0):
            raise RuntimeError(f"{int(np.sum(bad >= 0))} trajectories still blow up after {MAX_RETRIES} redraws")
    return X0, U, states


@dataclass
class NNDataset:
    """Rows ``(x0, u_flat, t) -> state at t``; one row per sample of every trajectory."""

    inputs: np.ndarray
    outputs: np.ndarray
    input_names: list[str]
    output_names: list[str]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def columns(self) -> list[str]:
        return self.input_names + self.output_names

    def table(self) -> np.ndarray:
        return np.hstack([self.inputs, self.outputs])


@dataclass
class RobustnessDataset:
    """Rows ``flatten(x0, u) -> rho(phi, trajectory, 0)``."""

    features: np.ndarray
    rho: np.ndarray
    feature_names: list[str]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.features.shape[0]

    @property
    def columns(self) -> list[str]:
        return self.feature_names + ["rho"]

    def table(self) -> np.ndarray:
        return np.hstack([self.features, self.rho[:, None]])

    def extend(self, features, rho) -> "RobustnessDataset":
        features = np.asarray(features, dtype=np.float64).reshape(-1, self.features.shape[1])
        return RobustnessDataset(np.vstack([self.features, features]),
                                 np.concatenate([self.rho, np.asarray(rho, dtype=np.float64)]),
                                 self.feature_names, dict(self.meta))


def _meta(system, init, inputs, k, T, dt, N, seed, **extra):
    return {"system": system.name, "init": init.to_list(), "inputs": inputs.to_list(), "k": k, "T": T,
            "dt": dt, "N": N, "seed": seed, **extra}


def generate_nn_dataset(system: System, init: Box, inputs: Box, k: int, T: float, dt: float, N: int,
                        seed: int, jobs: int = 1) -> NNDataset:
    X0, U, states = sample_trajectories(system, init, inputs, k, T, dt, N, seed, NN_STREAM, jobs)
    S = states.shape[1]
    times = np.arange(S) * dt
    flat = np.hstack([X0, U.reshape(N, -1)])
    rows_in = np.hstack([np.repeat(flat, S, axis=0), np.tile(times, N)[:, None]])
    rows_out = states.reshape(N * S, -1)
    names = feature_names(init.dim, k, inputs.dim) + ["t"]
    outs = [f"y_{i}" for i in range(rows_out.shape[1])]
    return NNDataset(rows_in, rows_out, names, outs,
                     _meta(system, init, inputs, k, T, dt, N, seed, mode="nn", var_names=list(system.var_names)))


def generate_robustness_dataset(system: System, init: Box, inputs: Box, k: int, T: float, dt: float,
                                phi: stl.Formula, N: int, seed: int, jobs: int = 1,
                                spec_text: str | None = None) -> RobustnessDataset:
    stl.check_horizon(phi, n_samples(T, dt), dt)
    X0, U, states = sample_trajectories(system, init, inputs, k, T, dt, N, seed, ROB_STREAM, jobs)
    rho = np.array([stl.robustness(phi, Trajectory(dt, s, system.var_names)) for s in states])
    feats = np.hstack([X0, U.reshape(N, -1)])
    meta = _meta(system, init, inputs, k, T, dt, N, seed, mode="rob", spec=spec_text or stl.to_text(phi))
    return RobustnessDataset(feats, rho, feature_names(init.dim, k, inputs.dim), meta)


def stratified_points(box: Box, N: int, seed: int, tag: int = DOD_STREAM) -> np.ndarray:
    """Latin hypercube sample of ``box``: every axis split into ``N`` equal strata, one point per stratum."""
    rng = stream(seed, tag)
    d = box.dim
    perms = np.array([rng.permutation(N) for _ in range(d)]).T.reshape(N, d)
    u = (perms + rng.random((N, d))) / N
    return np.clip(box.lows + (box.highs - box.lows) * u, box.lows, box.highs)


def degree_of_difficulty(system: System, init: Box, inputs: Box, k: int, T: float, dt: float,
                         phi: stl.Formula, N: int, seed: int, jobs: int = 1, sampling: str = "stratified") -> float:
    """Percentage of ``N`` random runs that violate ``phi``.

    ``sampling="stratified"`` draws a Latin hypercube over the flattened search
    space (unbiased, lower variance); ``"iid"`` reuses the robustness-dataset draws.
    """
    return 100.0 * int(np.sum(difficulty_rho(system, init, inputs, k, T, dt, phi, N, seed, jobs, sampling) < 0)) / N


def difficulty_rho(system, init, inputs, k, T, dt, phi, N, seed, jobs=1, sampling="stratified") -> np.ndarray:
    """Robustness of the ``N`` runs behind :func:`degree_of_difficulty`."""
    if sampling == "iid":
        return generate_robustness_dataset(system, init, inputs, k, T, dt, phi, N, seed, jobs).rho
    if sampling != "stratified":
        raise ValueError(f"unknown sampling {sampling!r}")
    if N < 1:
        raise ValueError("N must be >= 1")
    stl.check_horizon(phi, n_samples(T, dt), dt)
    space = search_box(init, inputs, k)
    feats = stratified_points(space, N, seed)
    X0, U = feats[:, :init.dim], feats[:, init.dim:].reshape(N, k, inputs.dim)
    states, bad = simulate_many(system, X0, U, T, dt, jobs)
    for attempt in range(1, MAX_RETRIES + 1):
        redo = np.flatnonzero(bad >= 0)
        if len(redo) == 0:
            break
        log.warning("%d trajectories blew up; redrawing (attempt %d)", len(redo), attempt)
        for i in redo:
            X0[i], U[i] = _draw(init, inputs, k, stream(seed, DOD_STREAM, i, attempt))
        states[redo], bad[redo] = simulate_many(system, X0[redo], U[redo], T, dt, jobs)
    else:
        if np.any(bad >= 0):
            raise RuntimeError(f"{int(np.sum(bad >= 0))} trajectories still blow up after {MAX_RETRIES} redraws")
    return np.array([stl.robustness(phi, Trajectory(dt, st, system.var_names)) for st in states])


# -------------------------------------------------------------------- scaling


@dataclass(frozen=True)
class ScalingParams:
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mins", np.asarray(self.mins, dtype=np.float64))
        object.__setattr__(self, "maxs", np.asarray(self.maxs, dtype=np.float64))
        if np.any(self.maxs < self.mins):
            raise ValueError("scaling max below min")

    @property
    def degenerate(self) -> np.ndarray:
        return self.maxs == self.mins

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        span = np.where(self.degenerate, 1.0, self.maxs - self.mins)
        return np.where(self.degenerate, 0.0, (X - self.mins) / span)

    def inverse(self, Xs) -> np.ndarray:
        Xs = np.asarray(Xs, dtype=np.float64)
        return np.where(self.degenerate, self.mins, self.mins + Xs * (self.maxs - self.mins))

    def to_json(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_json(cls, obj) -> "ScalingParams":
        return cls(obj["mins"], obj["maxs"])


def minmax_scale(X, params: ScalingParams | None = None):
    """Scale each column to [0, 1]; constant columns map to 0. Returns ``(scaled, params)``."""
    X = np.asarray(X, dtype=np.float64)
    if params is None:
        params = ScalingParams(X.min(axis=0), X.max(axis=0))
        if params.degenerate.any():
            warnings.warn(f"constant feature columns {np.flatnonzero(params.degenerate).tolist()} scaled to 0.0",
                          stacklevel=2)
    return params.transform(X), params


# ---------------------------------------------------------------- persistence


def save_dataset(ds, path) -> None:
    """CSV with a header row plus a ``.json`` sidecar holding everything needed to regenerate it."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.columns)
        for row in ds.table():
            w.writerow([repr(float(v)) for v in row])
    meta = dict(ds.meta)
    meta["kind"] = "nn" if isinstance(ds, NNDataset) else "rob"
    meta["columns"] = ds.columns
    if isinstance(ds, NNDataset):
        meta["n_inputs"] = len(ds.input_names)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    table = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
    meta.pop("columns", None)
    kind = meta.pop("kind")
    if kind == "nn":
        n_in = meta.pop("n_inputs")
        return NNDataset(table[:, :n_in], table[:, n_in:], header[:n_in], header[n_in:], meta)
    return RobustnessDataset(table[:, :-1], table[:, -1], header[:-1], meta)
