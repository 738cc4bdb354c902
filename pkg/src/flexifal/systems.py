"""Deterministic black-box simulators.

Built-in benchmarks integrate a whole batch of trajectories at once with fixed-step
RK4. Every update is elementwise, so a row of a batch is bit-identical to the same
trajectory simulated alone. Discrete transitions are urgent: guards are checked at
step boundaries and the lowest-indexed enabled guard fires.
"""

from __future__ import annotations

import json
import math
import subprocess
import sys
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Box, PiecewiseConstantSignal, Trajectory

G_ACCEL = 9.81
BB_RESTITUTION = 0.75


class SimulationError(RuntimeError):
    pass


class BlowUpError(SimulationError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"numerical blow-up: non-finite state at sample {index}")


def n_samples(T: float, dt: float) -> int:
    """``ceil(T/dt) + 1``; ``dt`` must divide ``T`` to within 1e-9."""
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    steps = T / dt
    r = round(steps)
    if abs(steps - r) > 1e-9 * max(1.0, steps):
        raise ValueError(f"dt={dt} does not divide T={T}")
    return int(r) + 1


def segment_indices(k: int, samples: int) -> np.ndarray:
    """Input segment active during each step ``j -> j+1`` (floor rule, exact in integers)."""
    j = np.arange(samples - 1)
    return np.minimum(j * k // (samples - 1), k - 1)


def step_rk4(f: Callable, x, u_val, h: float):
    """One classical Runge-Kutta step of ``x' = f(x, u)`` with the input held constant."""
    if not h > 0:
        raise ValueError("step size must be positive")
    k1 = f(x, u_val)
    k2 = f(x + (h / 2) * k1, u_val)
    k3 = f(x + (h / 2) * k2, u_val)
    k4 = f(x + h * k3, u_val)
    return x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


class System:
    """Black-box ``(x0, u, T, dt) -> Trajectory`` map.

    Subclasses implement :meth:`_simulate_batch`; the default batch path simply
    loops over single runs.
    """

    name = "system"
    var_names: tuple[str, ...] = ()
    state_dim = 0
    input_dim = 0

    def simulate(self, x0, u: PiecewiseConstantSignal, T: float, dt: float) -> Trajectory:
        x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
        self._check_dims(x0, u.values)
        if abs(u.horizon - T) > 1e-9 * max(1.0, T):
            raise ValueError(f"input signal horizon {u.horizon} does not cover T={T}")
        states, bad = self.simulate_batch(x0[None, :], u.values[None, :, :], T, dt)
        if bad[0] >= 0:
            raise BlowUpError(int(bad[0]))
        return Trajectory(dt, states[0], self.var_names)

    def simulate_batch(self, X0, U, T: float, dt: float):
        """Simulate ``B`` runs; returns ``(states (B, S, n), first_bad_index (B,))``.

        ``first_bad_index`` is -1 for finite trajectories.
        """
        X0 = np.asarray(X0, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        if X0.ndim != 2 or U.ndim != 3 or U.shape[0] != X0.shape[0]:
            raise ValueError("batch shapes must be (B, n0) and (B, k, m)")
        self._check_dims(X0[0] if len(X0) else np.zeros(self.state_dim), U[0] if len(U) else np.zeros((1, self.input_dim)))
        S = n_samples(T, dt)
        states = self._simulate_batch(X0, U, T, dt, S)
        finite = np.isfinite(states).all(axis=2)
        bad = np.where(finite.all(axis=1), -1, np.argmin(finite, axis=1))
        return states, bad

    def _simulate_batch(self, X0, U, T, dt, S):
        out = []
        for x0, u in zip(X0, U):
            out.append(self._simulate_one(x0, PiecewiseConstantSignal(T, u), T, dt, S))
        return np.stack(out) if out else np.zeros((0, S, len(self.var_names)))

    def _simulate_one(self, x0, u, T, dt, S):
        raise NotImplementedError

    def _check_dims(self, x0, u_values):
        if x0.shape[-1] != self.state_dim:
            raise ValueError(f"{self.name}: x0 has dimension {x0.shape[-1]}, expected {self.state_dim}")
        if u_values.shape[-1] != self.input_dim:
            raise ValueError(f"{self.name}: input has dimension {u_values.shape[-1]}, expected {self.input_dim}")


class ODESystem(System):
    """Single-mode system ``x' = f(x, u)`` with a vectorised ``f``."""

    def __init__(self, name, var_names, input_dim, flow):
        self.name = name
        self.var_names = tuple(var_names)
        self.state_dim = len(self.var_names)
        self.input_dim = input_dim
        self.flow = flow

    def _simulate_batch(self, X0, U, T, dt, S):
        B = X0.shape[0]
        states = np.empty((B, S, self.state_dim))
        states[:, 0] = X0
        segs = segment_indices(U.shape[1], S)
        x = X0.copy()
        with np.errstate(all="ignore"):
            for j in range(S - 1):
                x = step_rk4(self.flow, x, U[:, segs[j], :], dt)
                states[:, j + 1] = x
        return states


@dataclass(frozen=True)
class Guard:
    source: int
    predicate: Callable  # (B, n) states -> (B,) bool
    target: int
    reset: Callable | None = None  # (B, n) states -> (B, n) states


class HybridSystem(System):
    """Hybrid automaton with urgent, deterministically ordered transitions."""

    def __init__(self, name, var_names, input_dim, flows: Sequence[Callable], guards: Sequence[Guard],
                 initial_mode: Callable | None = None):
        self.name = name
        self.var_names = tuple(var_names)
        self.state_dim = len(self.var_names)
        self.input_dim = input_dim
        self.flows = list(flows)
        self.guards = list(guards)
        self.initial_mode = initial_mode or (lambda X: np.zeros(X.shape[0], dtype=int))

    def _simulate_batch(self, X0, U, T, dt, S):
        B = X0.shape[0]
        states = np.empty((B, S, self.state_dim))
        states[:, 0] = X0
        segs = segment_indices(U.shape[1], S)
        x = X0.copy()
        modes = np.asarray(self.initial_mode(X0), dtype=int)
        with np.errstate(all="ignore"):
            for j in range(S - 1):
                u = U[:, segs[j], :]
                x_next = np.empty_like(x)
                for q in np.unique(modes):
                    rows = modes == q
                    x_next[rows] = step_rk4(self.flows[q], x[rows], u[rows], dt)
                modes, x = self._fire(modes, x_next)
                states[:, j + 1] = x
        return states

    def _fire(self, modes, x_next):
        fired = np.zeros(len(modes), dtype=bool)
        new_modes = modes.copy()
        x_new = x_next.copy()
        for g in self.guards:
            rows = (~fired) & (modes == g.source)
            if not rows.any():
                continue
            rows &= np.asarray(g.predicate(x_next), dtype=bool)
            if not rows.any():
                continue
            if g.reset is not None:
                x_new[rows] = g.reset(x_next[rows])
            new_modes[rows] = g.target
            fired |= rows
        return new_modes, x_new


def handle_guards(hs: HybridSystem, mode: int, x_prev, x_next):
    """Apply the first enabled guard of ``mode`` at ``x_next``; returns ``(mode', x')``."""
    x_next = np.asarray(x_next, dtype=np.float64).reshape(1, -1)
    modes, x = hs._fire(np.array([mode]), x_next)
    return int(modes[0]), x[0]


# ----------------------------------------------------------------- benchmarks


def constant_system(dim: int = 1) -> ODESystem:
    names = ["x"] if dim == 1 else [f"x{i + 1}" for i in range(dim)]
    return ODESystem("const1d" if dim == 1 else f"const{dim}d", names, 0, lambda x, u: np.zeros_like(x))


def single_integrator() -> ODESystem:
    return ODESystem("integrator", ["x"], 1, lambda x, u: u.copy())


def _bb_flow(x, u):
    d = np.empty_like(x)
    d[:, 0] = x[:, 1]
    d[:, 1] = -G_ACCEL
    return d


def _bb_impact(x):
    return (x[:, 0] <= 0) & (x[:, 1] < 0)


def bb_reset(x, c: float = BB_RESTITUTION):
    """Impact reset ``v := -c v, x := 0``.

    When the overshoot below ground would make the reset gain energy (a ball
    at rest), the outgoing speed is taken from the energy at ground level.
    """
    out = x.copy()
    pos, vel = x[:, 0], x[:, 1]
    v_out = -c * vel
    ground_sq = np.maximum(vel * vel + 2 * G_ACCEL * pos, 0.0)
    gains = v_out * v_out > ground_sq
    v_out = np.where(gains, c * np.sqrt(ground_sq), v_out)
    out[:, 0] = 0.0
    out[:, 1] = v_out
    return out


def bouncing_ball() -> HybridSystem:
    return HybridSystem("bouncing-ball", ["x", "v"], 0, [_bb_flow], [Guard(0, _bb_impact, 0, bb_reset)])


def two_tanks() -> HybridSystem:
    """Two tanks; mode = 2*valve1 + valve2 (1 = open). Input: extra inflow into tank 1."""

    def flow(v1, v2):
        def f(x, u):
            d = np.empty_like(x)
            d[:, 0] = -x[:, 0] + (3.0 if v1 else -2.0) + u[:, 0]
            d[:, 1] = x[:, 0] - x[:, 1] - 5.0 if v2 else x[:, 0].copy()
            return d
        return f

    flows = [flow(v1, v2) for v1 in (0, 1) for v2 in (0, 1)]
    guards = []
    for mode in range(4):
        v1, v2 = divmod(mode, 2)
        if v1:
            guards.append(Guard(mode, lambda x: x[:, 0] >= 1.0, mode - 2))
        else:
            guards.append(Guard(mode, lambda x: x[:, 0] <= -1.0, mode + 2))
        if v2:
            guards.append(Guard(mode, lambda x: x[:, 1] <= 0.0, mode - 1))
        else:
            guards.append(Guard(mode, lambda x: x[:, 1] >= 1.0, mode + 1))

    def init(X):
        return 2 * (X[:, 0] <= 0).astype(int) + (X[:, 1] >= 0.5).astype(int)

    return HybridSystem("two-tanks", ["x1", "x2"], 1, flows, guards, init)


OSC_DAMP, OSC_FREQ, OSC_CENTER = 0.2, 1.0, 0.2


def oscillator() -> HybridSystem:
    """Damped rotation about (+c, 0) while q >= 0 and about (-c, 0) while q < 0."""

    def flow(center):
        def f(x, u):
            p = x[:, 0] - center
            q = x[:, 1]
            d = np.empty_like(x)
            d[:, 0] = -OSC_DAMP * p + OSC_FREQ * q
            d[:, 1] = -OSC_FREQ * p - OSC_DAMP * q + u[:, 0]
            return d
        return f

    flows = [flow(OSC_CENTER), flow(-OSC_CENTER)]
    guards = [Guard(0, lambda x: x[:, 1] < 0, 1), Guard(1, lambda x: x[:, 1] >= 0, 0)]
    return HybridSystem("oscillator", ["p", "q"], 1, flows, guards, lambda X: (X[:, 1] < 0).astype(int))


class Navigation(System):
    """Particle on a ``width x height`` grid of unit cells.

    ``x1' = v1, x2' = v2, v' = A (v - vd(cell))`` with ``A`` Hurwitz. The cell
    (the discrete mode) is re-read at every step boundary. Cells on the outer
    ring point inward, which keeps trajectories on the grid.
    """

    name = "navigation"
    var_names = ("x1", "x2", "v1", "v2")
    state_dim = 4
    input_dim = 0
    A = ((-1.2, 0.1), (0.1, -1.2))

    def __init__(self, width: int = 25, height: int = 20):
        self.width, self.height = width, height
        i = np.arange(width)[:, None]
        j = np.arange(height)[None, :]
        angle = (np.pi / 4) * ((3 * i + 5 * j + (i * j) % 3) % 8)
        vd = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
        vd[0, :, 0] = np.abs(vd[0, :, 0]) + 0.5
        vd[-1, :, 0] = -np.abs(vd[-1, :, 0]) - 0.5
        vd[:, 0, 1] = np.abs(vd[:, 0, 1]) + 0.5
        vd[:, -1, 1] = -np.abs(vd[:, -1, 1]) - 0.5
        self.vd = vd

    def cell(self, pos):
        ci = np.clip(np.floor(pos[:, 0]), 0, self.width - 1)
        cj = np.clip(np.floor(pos[:, 1]), 0, self.height - 1)
        ci = np.where(np.isfinite(ci), ci, 0).astype(int)
        cj = np.where(np.isfinite(cj), cj, 0).astype(int)
        return ci, cj

    def _simulate_batch(self, X0, U, T, dt, S):
        (a11, a12), (a21, a22) = self.A
        states = np.empty((X0.shape[0], S, 4))
        states[:, 0] = X0
        x = X0.copy()
        with np.errstate(all="ignore"):
            for j in range(S - 1):
                ci, cj = self.cell(x)
                vd = self.vd[ci, cj]

                def f(s, u, vd=vd):
                    d = np.empty_like(s)
                    e1 = s[:, 2] - vd[:, 0]
                    e2 = s[:, 3] - vd[:, 1]
                    d[:, 0] = s[:, 2]
                    d[:, 1] = s[:, 3]
                    d[:, 2] = a11 * e1 + a12 * e2
                    d[:, 3] = a21 * e1 + a22 * e2
                    return d

                x = step_rk4(f, x, None, dt)
                states[:, j + 1] = x
        return states


CC_GAP, CC_KP, CC_KD, CC_DRAG = 10.0, 0.5, 1.0, 0.05


def chasing_cars() -> ODESystem:
    """Five cars in a line; car 5 leads (throttle, brake in [0, 1]), car i follows car i+1."""

    def f(x, u):
        d = np.empty_like(x)
        d[:, 0:5] = x[:, 5:10]
        d[:, 9] = 4.0 * u[:, 0] - 8.0 * u[:, 1] - CC_DRAG * x[:, 9]
        for i in range(4):
            gap = x[:, i + 1] - x[:, i]
            d[:, 5 + i] = CC_KP * (gap - CC_GAP) + CC_KD * (x[:, 6 + i] - x[:, 5 + i])
        return d

    names = [f"y{i}" for i in range(1, 6)] + [f"v{i}" for i in range(1, 6)]
    return ODESystem("chasing-cars", names, 2, f)


# ------------------------------------------------------------ external process


class ExternalSystem(System):
    """System backed by an executable speaking the JSON-in / CSV-out protocol.

    One process is spawned per simulation: the request ``{"x0", "u", "T", "dt"}``
    goes to stdin and a ``time,var1,...`` CSV is read from stdout.
    """

    def __init__(self, cmd, state_dim: int, input_dim: int, var_names: Sequence[str] | None = None,
                 timeout: float = 60.0):
        self.cmd = [cmd] if isinstance(cmd, str) else list(cmd)
        self.name = "exec:" + " ".join(self.cmd)
        self.state_dim = state_dim
        self.input_dim = input_dim
        self.var_names = tuple(var_names) if var_names else tuple(f"x{i + 1}" for i in range(state_dim))
        if len(self.var_names) != state_dim:
            raise ValueError(f"{len(self.var_names)} variable names for {state_dim} states")
        self.timeout = timeout

    def _request(self, x0, u_values, T, dt) -> Trajectory:
        req = json.dumps({"x0": [float(v) for v in x0], "u": np.asarray(u_values).tolist(), "T": T, "dt": dt})
        try:
            proc = subprocess.run(self.cmd, input=req, capture_output=True, text=True, timeout=self.timeout)
        except subprocess.TimeoutExpired as e:
            raise SimulationError(f"{self.name}: timed out after {self.timeout}s; stderr: {e.stderr or ''}") from e
        except OSError as e:
            raise SimulationError(f"{self.name}: cannot execute: {e}") from e
        if proc.returncode != 0:
            err = SimulationError(f"{self.name}: exit code {proc.returncode}; stderr: {proc.stderr.strip()}")
            err.returncode = proc.returncode
            err.stderr = proc.stderr
            raise err
        try:
            traj = Trajectory.from_csv(proc.stdout)
        except (ValueError, IndexError) as e:
            raise SimulationError(f"{self.name}: malformed output: {e}; stderr: {proc.stderr.strip()}") from e
        if traj.states.shape[1] != self.state_dim:
            raise SimulationError(f"{self.name}: returned {traj.states.shape[1]} state columns, "
                                  f"expected {self.state_dim}")
        return traj

    def _simulate_batch(self, X0, U, T, dt, S):
        out = []
        for x0, u in zip(X0, U):
            traj = self._request(x0, u, T, dt)
            if len(traj) != S:
                raise SimulationError(f"{self.name}: returned {len(traj)} samples, expected {S}")
            if abs(traj.dt - dt) > 1e-9 * max(1.0, dt):
                raise SimulationError(f"{self.name}: returned dt={traj.dt}, expected {dt}")
            out.append(traj.states)
        return np.stack(out) if out else np.zeros((0, S, len(self.var_names)))


SYSTEMS: dict[str, Callable[[], System]] = {
    "const1d": constant_system,
    "integrator": single_integrator,
    "bouncing-ball": bouncing_ball,
    "two-tanks": two_tanks,
    "oscillator": oscillator,
    "navigation": Navigation,
    "chasing-cars": chasing_cars,
}


def get_system(selector: str, state_dim: int | None = None, input_dim: int | None = None,
               timeout: float = 60.0, var_names: Sequence[str] | None = None) -> System:
    """Resolve ``name`` or ``exec:path`` to a system."""
    if selector.startswith("exec:"):
        if state_dim is None or input_dim is None:
            raise ValueError("external systems need explicit state and input dimensions")
        return ExternalSystem(selector[5:], state_dim, input_dim, var_names, timeout=timeout)
    try:
        return SYSTEMS[selector]()
    except KeyError:
        raise ValueError(f"unknown system {selector!r}; known: {', '.join(sorted(SYSTEMS))}") from None


def serve(name: str, stdin=None, stdout=None) -> int:
    """Answer one protocol request for a built-in system (used to wrap it as an executable)."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    req = json.load(stdin)
    system = get_system(name)
    T, dt = float(req["T"]), float(req["dt"])
    u = np.array(req["u"], dtype=np.float64).reshape(-1, system.input_dim) if system.input_dim else \
        np.zeros((max(1, len(req["u"])), 0))
    traj = system.simulate(req["x0"], PiecewiseConstantSignal(T, u), T, dt)
    stdout.write(traj.to_csv())
    return 0


@dataclass(frozen=True)
class Benchmark:
    """A falsification instance: system, spec text, boxes and discretisation.

    ``canonical`` is False when the dynamics constants or boxes are our own
    pinned choices rather than values taken from the benchmark's origin.
    """

    system: str
    spec: str
    init: Box
    inputs: Box
    k: int
    T: float
    dt: float
    canonical: bool = False
    note: str = ""


def _bb_spec():
    return "G[0,10] !((v >= -1) & (v <= 1) & (x >= 1) & (x <= 2))"


def _box_spec(T, a, b):
    (v1, lo1, hi1), (v2, lo2, hi2) = a, b
    return f"G[0,{T}] !(({v1} >= {lo1}) & ({v1} <= {hi1}) & ({v2} >= {lo2}) & ({v2} <= {hi2}))"


_EMPTY = Box([], [])
BENCHMARKS: dict[str, Benchmark] = {
    "BB1": Benchmark("bouncing-ball", _bb_spec(), Box([0.5, -1.0], [1.0, 1.0]), _EMPTY, 1, 10.0, 0.01,
                     note="init box tuned so DoD is about 1.7%"),
    "TT1": Benchmark("two-tanks", _box_spec(10, ("x1", 0, 0.40), ("x2", -0.5, -0.465)),
                     Box([-0.5, -0.5], [0.5, 0.5]), Box([-0.1], [0.1]), 2, 10.0, 0.01),
    "TT2": Benchmark("two-tanks", _box_spec(10, ("x1", -0.2, 0.2), ("x2", 0.31, 0.35)),
                     Box([-0.5, -0.5], [0.5, 0.5]), Box([-0.1], [0.1]), 2, 10.0, 0.01),
    "TT3": Benchmark("two-tanks", _box_spec(10, ("x1", -0.2, 0.2), ("x2", 0.30, 0.35)),
                     Box([-0.5, -0.5], [0.5, 0.5]), Box([-0.1], [0.1]), 2, 10.0, 0.01),
    "TT4": Benchmark("two-tanks", _box_spec(10, ("x1", 1, 1.5), ("x2", -0.4, -0.23)),
                     Box([-0.5, -0.5], [0.5, 0.5]), Box([-0.1], [0.1]), 2, 10.0, 0.01),
    "OSC1": Benchmark("oscillator", _box_spec(10, ("p", 0, 0.1), ("q", 0.13485, 0.15)),
                      Box([0.2, -0.1], [0.4, 0.1]), Box([-0.05], [0.05]), 2, 10.0, 0.01),
    "OSC2": Benchmark("oscillator", _box_spec(10, ("p", -0.5, -0.45029), ("q", 0.1, 0.1968)),
                      Box([0.2, -0.1], [0.4, 0.1]), Box([-0.05], [0.05]), 2, 10.0, 0.01),
    "OSC3": Benchmark("oscillator", _box_spec(10, ("p", 0.1, 0.193), ("q", -0.3, -0.25)),
                      Box([0.2, -0.1], [0.4, 0.1]), Box([-0.05], [0.05]), 2, 10.0, 0.01),
    "NAV1": Benchmark("navigation", _box_spec(50, ("x1", 7, 8), ("x2", 9, 10)),
                      Box([2.0, 2.0, -0.3, -0.3], [3.0, 3.0, 0.3, 0.3]), _EMPTY, 1, 50.0, 0.05),
    "NAV2": Benchmark("navigation", _box_spec(50, ("x1", 22, 23), ("x2", 11, 12)),
                      Box([2.0, 2.0, -0.3, -0.3], [3.0, 3.0, 0.3, 0.3]), _EMPTY, 1, 50.0, 0.05),
    "NAV3": Benchmark("navigation", _box_spec(50, ("x1", 11, 12), ("x2", 16, 17)),
                      Box([2.0, 2.0, -0.3, -0.3], [3.0, 3.0, 0.3, 0.3]), _EMPTY, 1, 50.0, 0.05),
    "CC1": Benchmark("chasing-cars", "G[0,100] (y5 - y4 <= 40)",
                     Box([0, 10, 20, 30, 40, 9, 9, 9, 9, 9], [1, 11, 21, 31, 41, 11, 11, 11, 11, 11]),
                     Box([0.0, 0.0], [1.0, 1.0]), 5, 100.0, 0.1),
    "CCx": Benchmark("chasing-cars", "G[0,50] ((y2 - y1 > 7.5) & (y3 - y2 > 7.5) & (y4 - y3 > 7.5) & (y5 - y4 > 7.5))",
                     Box([0, 10, 20, 30, 40, 9, 9, 9, 9, 9], [1, 11, 21, 31, 41, 11, 11, 11, 11, 11]),
                     Box([0.0, 0.0], [1.0, 1.0]), 5, 100.0, 0.1),
}


if __name__ == "__main__":  # python -m flexifal.systems serve <name>
    if len(sys.argv) != 3 or sys.argv[1] != "serve":
        sys.stderr.write("usage: python -m flexifal.systems serve <system>\n")
        sys.exit(1)
    sys.exit(serve(sys.argv[2]))
