"""Shared numeric types: trajectories, input signals, search boxes, counterexamples."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if ndim == 1:
        arr = arr.reshape(-1)
    elif arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled states; row ``j`` holds the state at time ``j * dt``."""

    dt: float
    states: np.ndarray
    var_names: tuple[str, ...]

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        states = np.array(self.states, dtype=np.float64)
        if states.ndim == 1:
            states = states.reshape(-1, 1)
        if states.ndim != 2 or states.shape[0] == 0:
            raise ValueError("states must be a non-empty (samples, n) array")
        names = tuple(self.var_names)
        if len(names) != states.shape[1]:
            raise ValueError(f"{len(names)} names for {states.shape[1]} state columns")
        states.setflags(write=False)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "var_names", names)

    def __len__(self):
        return self.states.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.dt == other.dt and self.var_names == other.var_names
                and np.array_equal(self.states, other.states))

    @property
    def horizon(self) -> float:
        return (len(self) - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def column(self, name: str) -> np.ndarray:
        try:
            return self.states[:, self.var_names.index(name)]
        except ValueError:
            raise KeyError(f"variable {name!r} not in trajectory {self.var_names}") from None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("time",) + self.var_names)
        for t, row in zip(self.times, self.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        """Parse ``time,var1,...`` CSV; the time column must be a uniform grid from 0."""
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        if len(rows) < 2:
            raise ValueError("trajectory CSV needs a header and at least one row")
        header = [h.strip() for h in rows[0]]
        if header[0] != "time":
            raise ValueError("first CSV column must be 'time'")
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        if data.shape[1] != len(header):
            raise ValueError("ragged trajectory CSV")
        times = data[:, 0]
        dt = times[1] - times[0] if len(times) > 1 else 1.0
        if len(times) > 1:
            grid = np.arange(len(times)) * dt
            if abs(times[0]) > 1e-9 or not np.allclose(times, grid, rtol=0, atol=1e-9 * max(1.0, times[-1])):
                raise ValueError("trajectory time column is not a uniform grid starting at 0")
        return cls(dt, data[:, 1:], tuple(header[1:]))


@dataclass(frozen=True, eq=False)
class PiecewiseConstantSignal:
    """``k`` equal-length segments over ``[0, horizon]``, each an ``m``-vector."""

    horizon: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals.reshape(-1, 1) if vals.size else vals.reshape(0, 0)
        if vals.ndim != 2 or vals.shape[0] < 1:
            raise ValueError("signal needs k >= 1 segments of equal dimension")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        vals.setflags(write=False)
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "values", vals)

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def segment_index(self, t: float) -> int:
        if not 0 <= t <= self.horizon:
            raise ValueError(f"t={t} outside [0, {self.horizon}]")
        return min(int(math.floor(t * self.k / self.horizon)), self.k - 1)

    def __call__(self, t: float) -> np.ndarray:
        return self.values[self.segment_index(t)]

    def __eq__(self, other):
        if not isinstance(other, PiecewiseConstantSignal):
            return NotImplemented
        return self.horizon == other.horizon and np.array_equal(self.values, other.values)


def signal_eval(u: PiecewiseConstantSignal, t: float) -> np.ndarray:
    return u(t)


@dataclass(frozen=True, eq=False)
class Box:
    lows: np.ndarray
    highs: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.lows, 1), _frozen(self.highs, 1)
        if lo.shape != hi.shape:
            raise ValueError("box bounds differ in length")
        if np.any(lo > hi):
            raise ValueError(f"box has lows > highs: {lo} > {hi}")
        object.__setattr__(self, "lows", lo)
        object.__setattr__(self, "highs", hi)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]]) -> "Box":
        pairs = list(pairs)
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    @property
    def dim(self) -> int:
        return self.lows.shape[0]

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lows - tol) and np.all(x <= self.highs + tol))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        x = self.lows + (self.highs - self.lows) * rng.random(shape)
        return np.clip(x, self.lows, self.highs)

    def repeat(self, times: int) -> "Box":
        return Box(np.tile(self.lows, times), np.tile(self.highs, times))

    def concat(self, other: "Box") -> "Box":
        return Box(np.concatenate([self.lows, other.lows]), np.concatenate([self.highs, other.highs]))

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lows, other.lows) and np.array_equal(self.highs, other.highs)

    def to_list(self) -> list[list[float]]:
        return [[float(a), float(b)] for a, b in zip(self.lows, self.highs)]


@dataclass(frozen=True, eq=False)
class SearchPoint:
    """Initial state plus piecewise-constant input: one candidate of the search."""

    x0: np.ndarray
    u: PiecewiseConstantSignal

    def __post_init__(self):
        object.__setattr__(self, "x0", _frozen(self.x0, 1))

    def __eq__(self, other):
        if not isinstance(other, SearchPoint):
            return NotImplemented
        return np.array_equal(self.x0, other.x0) and self.u == other.u

    def within(self, init: Box, inputs: Box) -> bool:
        if not init.contains(self.x0):
            return False
        return all(inputs.contains(seg) for seg in self.u.values)


def flatten(point: SearchPoint) -> np.ndarray:
    return np.concatenate([point.x0, point.u.values.reshape(-1)])


def unflatten(vec, n0: int, k: int, m: int, horizon: float) -> SearchPoint:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n0 + k * m,):
        raise ValueError(f"feature vector of length {vec.shape} does not match n0={n0}, k={k}, m={m}")
    return SearchPoint(vec[:n0].copy(), PiecewiseConstantSignal(horizon, vec[n0:].reshape(k, m).copy()))


def feature_names(n0: int, k: int, m: int) -> list[str]:
    return [f"x0_{i}" for i in range(n0)] + [f"u_{j}_{r}" for j in range(k) for r in range(m)]


def search_box(init: Box, inputs: Box, k: int) -> Box:
    """Flattened search space: initial box times the input box repeated per segment."""
    return init.concat(inputs.repeat(k))


@dataclass(frozen=True, eq=False)
class Counterexample:
    point: SearchPoint
    trajectory: Trajectory
    robustness: float

    def to_json(self) -> dict:
        return {
            "x0": [float(v) for v in self.point.x0],
            "u": self.point.u.values.tolist(),
            "horizon": self.point.u.horizon,
            "k": self.point.u.k,
            "m": self.point.u.m,
            "robustness": float(self.robustness),
            "dt": self.trajectory.dt,
            "var_names": list(self.trajectory.var_names),
        }

    @classmethod
    def from_json(cls, obj: dict, trajectory: Trajectory) -> "Counterexample":
        vals = np.array(obj["u"], dtype=np.float64).reshape(obj["k"], obj["m"])
        point = SearchPoint(obj["x0"], PiecewiseConstantSignal(obj["horizon"], vals))
        return cls(point, trajectory, float(obj["robustness"]))


def points_to_csv(points: Sequence[SearchPoint], robustness: Sequence[float] | None = None) -> str:
    """Header of feature names, then one flattened point per line (plus ``robustness``)."""
    if not points:
        return ""
    p0 = points[0]
    names = feature_names(p0.x0.size, p0.u.k, p0.u.m)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names + (["robustness"] if robustness is not None else []))
    for i, p in enumerate(points):
        row = [repr(float(v)) for v in flatten(p)]
        if robustness is not None:
            row.append(repr(float(robustness[i])))
        w.writerow(row)
    return buf.getvalue()


def points_from_csv(text: str, n0: int, k: int, m: int, horizon: float):
    """Inverse of :func:`points_to_csv`; returns ``(points, robustness or None)``."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    header, body = rows[0], rows[1:]
    has_rho = header[-1] == "robustness"
    pts, rhos = [], []
    for r in body:
        vals = [float(v) for v in r]
        if has_rho:
            rhos.append(vals.pop())
        pts.append(unflatten(vals, n0, k, m, horizon))
    return pts, (rhos if has_rho else None)


def point_to_json(point: SearchPoint) -> str:
    return json.dumps({"x0": point.x0.tolist(), "u": point.u.values.tolist(), "horizon": point.u.horizon,
                       "k": point.u.k, "m": point.u.m})


def point_from_json(text: str) -> SearchPoint:
    obj = json.loads(text)
    vals = np.array(obj["u"], dtype=np.float64).reshape(obj["k"], obj["m"])
    return SearchPoint(obj["x0"], PiecewiseConstantSignal(obj["horizon"], vals))
