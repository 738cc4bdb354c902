"""Neural-network surrogate falsification.

A ReLU MLP learns ``(x0, u, t) -> state``. Gradient attacks (PGD, FGSM) search
the surrogate for inputs whose output lands in the unsafe set ``U``; each hit is
replayed on the real system and, if spurious, an L-infinity ball around it is
cut out of the input box before the next attack.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import stl
from .core import Box, Counterexample, Trajectory, unflatten
from .dataset import ScalingParams, stream
from .systems import SimulationError, System, n_samples

log = logging.getLogger(__name__)

ATTACK_STREAM = 0xA77C
MODEL_MAGIC = b"FFNN"


class TrainingError(RuntimeError):
    pass


# ----------------------------------------------------------------------- MLP


@dataclass
class Mlp:
    """Fully connected net: ReLU on hidden layers, identity output.

    ``weights[i]`` has shape ``(widths[i+1], widths[i])``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, widths: Sequence[int], seed: int = 0) -> "Mlp":
        rng = stream(seed, 0x1217)
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, widths: Sequence[int]) -> "Mlp":
        return cls([np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])], [np.zeros(o) for o in widths[1:]])

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, X) -> np.ndarray:
        return self._forward(X)[-1]

    def _forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.widths[0]:
            raise ValueError(f"input has dimension {X.shape[-1]}, network expects {self.widths[0]}")
        acts = [np.atleast_2d(X)]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ W.T + b
            acts.append(z if i == last else np.maximum(z, 0.0))
        return acts

    def backward(self, acts, d_out):
        """Gradients ``(dW list, db list, d_input)`` for upstream gradient ``d_out``."""
        dWs, dbs = [None] * len(self.weights), [None] * len(self.weights)
        g = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            dWs[i] = g.T @ acts[i]
            dbs[i] = g.sum(axis=0)
            g = g @ self.weights[i]
            if i > 0:
                g = g * (acts[i] > 0)
        return dWs, dbs, g

    def loss_and_grads(self, X, Y):
        """Mean squared error over all outputs and its parameter gradients."""
        acts = self._forward(X)
        diff = acts[-1] - np.atleast_2d(Y)
        loss = float(np.mean(diff * diff))
        dWs, dbs, _ = self.backward(acts, 2.0 * diff / diff.size)
        return loss, dWs, dbs


def forward(mlp: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = mlp.forward(x)
    return y[0] if x.ndim == 1 else y


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    val_fraction: float = 0.2
    seed: int = 0
    early_stopping: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or self.patience < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("invalid training configuration")


class Adam:
    def __init__(self, params: list[np.ndarray], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    mlp: Mlp
    best_epoch: int
    best_loss: float
    history: list[dict] = field(default_factory=list)


def train_mlp(X, Y, hidden: Sequence[int], cfg: TrainConfig | None = None, init: Mlp | None = None) -> TrainResult:
    """Adam on MSE with a seeded shuffle.

    With early stopping, the checkpoint with the lowest validation loss is kept and
    training stops after ``patience`` epochs without improvement; otherwise the
    checkpoint with the lowest training loss is kept.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) == 0:
        raise TrainingError("empty dataset")
    rng = stream(cfg.seed, 0x7EA1)
    order = rng.permutation(len(X))
    n_val = int(round(cfg.val_fraction * len(X))) if cfg.early_stopping else 0
    if cfg.early_stopping and n_val == 0:
        raise TrainingError("early stopping needs a non-empty validation split")
    val, tr = order[:n_val], order[n_val:]
    Xtr, Ytr, Xval, Yval = X[tr], Y[tr], X[val], Y[val]
    mlp = init.copy() if init is not None else Mlp.init([X.shape[1], *hidden, Y.shape[1]], cfg.seed)
    opt = Adam(mlp.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def monitored():
        if cfg.early_stopping:
            d = mlp.forward(Xval) - Yval
        else:
            d = mlp.forward(Xtr) - Ytr
        return float(np.mean(d * d))

    best = monitored()
    if not np.isfinite(best):
        raise TrainingError("non-finite loss before training")
    best_mlp, best_epoch, stale = mlp.copy(), 0, 0
    history = [{"epoch": 0, "loss": best}]
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(Xtr))
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss, dWs, dbs = mlp.loss_and_grads(Xtr[idx], Ytr[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            opt.step([g for pair in zip(dWs, dbs) for g in pair])
        cur = monitored()
        if not np.isfinite(cur):
            raise TrainingError(f"non-finite monitored loss at epoch {epoch}")
        history.append({"epoch": epoch, "loss": cur})
        if cur < best:
            best, best_mlp, best_epoch, stale = cur, mlp.copy(), epoch, 0
        else:
            stale += 1
            if cfg.early_stopping and stale >= cfg.patience:
                break
    return TrainResult(best_mlp, best_epoch, best, history)


# ---------------------------------------------------------------- model file


@dataclass
class Surrogate:
    """Trained net plus the input scaling it was trained under."""

    mlp: Mlp
    scaling: ScalingParams
    meta: dict = field(default_factory=dict)

    def predict(self, X_raw) -> np.ndarray:
        return self.mlp.forward(self.scaling.transform(X_raw))


def save_model(path, surrogate: Surrogate) -> None:
    """``FFNN`` magic, u64 header length, JSON header, then little-endian f64 weights."""
    header = {"widths": surrogate.mlp.widths, "scaling": surrogate.scaling.to_json(), "meta": surrogate.meta}
    hb = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in surrogate.mlp.params())
    Path(path).write_bytes(MODEL_MAGIC + struct.pack("<Q", len(hb)) + hb + blob)


def load_model(path) -> Surrogate:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    (hl,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hl])
    flat = np.frombuffer(raw[12 + hl:], dtype="<f8")
    widths = header["widths"]
    ws, bs, off = [], [], 0
    for i, o in zip(widths[:-1], widths[1:]):
        ws.append(flat[off:off + i * o].reshape(o, i).astype(np.float64))
        off += i * o
        bs.append(flat[off:off + o].astype(np.float64))
        off += o
    if off != flat.size:
        raise ValueError(f"{path}: weight blob size does not match header")
    return Surrogate(Mlp(ws, bs), ScalingParams.from_json(header["scaling"]), header.get("meta", {}))


# ------------------------------------------------------------------- attacks


@dataclass(frozen=True)
class ReachabilitySpec:
    """Find ``x`` in box ``I`` with ``A @ N(x) <= b`` (every row)."""

    I: Box
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if A.shape[0] != b.shape[0] or A.shape[0] == 0:
            raise ValueError("unsafe set needs matching, non-empty A and b")
        if np.any(self.I.highs <= self.I.lows):
            raise ValueError("input box must be non-degenerate")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_output_box(cls, I: Box, lows, highs) -> "ReachabilitySpec":
        """``U`` as a box over outputs; infinite bounds are dropped."""
        lows, highs = np.asarray(lows, dtype=float), np.asarray(highs, dtype=float)
        rows, rhs = [], []
        for j, (lo, hi) in enumerate(zip(lows, highs)):
            e = np.zeros(len(lows))
            e[j] = 1.0
            if np.isfinite(hi):
                rows.append(e)
                rhs.append(hi)
            if np.isfinite(lo):
                rows.append(-e)
                rhs.append(-lo)
        return cls(I, np.array(rows), np.array(rhs))

    def margins(self, Y) -> np.ndarray:
        return np.atleast_2d(Y) @ self.A.T - self.b

    def contains_output(self, y) -> bool:
        return bool(np.all(self.margins(y) <= 0))

    def to_json(self) -> dict:
        return {"I": self.I.to_list(), "A": self.A.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_json(cls, obj) -> "ReachabilitySpec":
        return cls(Box.from_pairs(obj["I"]), obj["A"], obj["b"])


@dataclass(frozen=True)
class SpuriousSet:
    """Excluded inputs: L-infinity balls ``(center, radius)``."""

    centers: tuple[tuple[float, ...], ...] = ()
    radii: tuple[float, ...] = ()

    def __len__(self):
        return len(self.centers)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        for c, r in zip(self.centers, self.radii):
            if np.max(np.abs(x - np.asarray(c))) <= r:
                return True
        return False


def exclude_spurious(psi: SpuriousSet, candidate, delta: float) -> SpuriousSet:
    if delta < 0:
        raise ValueError("exclusion radius must be >= 0")
    c = tuple(float(v) for v in np.asarray(candidate).reshape(-1))
    return SpuriousSet(psi.centers + (c,), psi.radii + (float(delta),))


def attack_loss(mlp: Mlp, spec: ReachabilitySpec, x, margin: float = 0.0):
    """Hinge loss ``sum_j max(0, margin_j)`` and its input gradient."""
    acts = mlp._forward(np.asarray(x, dtype=np.float64)[None, :])
    m = spec.margins(acts[-1])[0] + margin
    active = m > 0
    loss = float(np.sum(m[active]))
    d_out = (spec.A[active].sum(axis=0))[None, :]
    _, _, gx = mlp.backward(acts, d_out)
    return loss, gx[0]


@dataclass(frozen=True)
class AttackResult:
    candidate: np.ndarray | None
    iterations: int
    restart: int = 0

    @property
    def found(self) -> bool:
        return self.candidate is not None


NOT_FOUND = None


def _fresh_point(I: Box, psi: SpuriousSet, rng, tries: int = 1000):
    for _ in range(tries):
        x = I.sample(rng)
        if not psi.contains(x):
            return x
    return None


def _is_hit(mlp, spec, psi, x, margin) -> bool:
    loss, _ = attack_loss(mlp, spec, x, margin)
    return loss == 0.0 and spec.I.contains(x) and not psi.contains(x)


def pgd_attack(mlp: Mlp, spec: ReachabilitySpec, psi: SpuriousSet = SpuriousSet(), iters: int = 100,
               step: float = 0.01, restarts: int = 5, seed: int = 0, margin: float = 0.0) -> AttackResult:
    """Projected signed-gradient descent on the hinge loss, from random starts in ``I``.

    Iterates that fall in an excluded ball are redrawn uniformly from ``I``.
    """
    total = 0
    for r in range(restarts):
        rng = stream(seed, ATTACK_STREAM, r)
        x = _fresh_point(spec.I, psi, rng)
        if x is None:
            continue
        for it in range(iters + 1):
            loss, g = attack_loss(mlp, spec, x, margin)
            if loss == 0.0:
                return AttackResult(x, total, r)
            if it == iters:
                break
            total += 1
            x = np.clip(x - step * np.sign(g), spec.I.lows, spec.I.highs)
            if psi.contains(x):
                x = _fresh_point(spec.I, psi, rng)
                if x is None:
                    break
    return AttackResult(NOT_FOUND, total, restarts)


def fgsm_attack(mlp: Mlp, spec: ReachabilitySpec, psi: SpuriousSet = SpuriousSet(), eps: float = 0.1,
                seed: int = 0, margin: float = 0.0) -> AttackResult:
    """One signed-gradient step of size ``eps`` from a random point, projected to ``I``."""
    rng = stream(seed, ATTACK_STREAM, 0)
    x = _fresh_point(spec.I, psi, rng)
    if x is None:
        return AttackResult(NOT_FOUND, 0)
    _, g = attack_loss(mlp, spec, x, margin)
    x = np.clip(x - eps * np.sign(g), spec.I.lows, spec.I.highs)
    if _is_hit(mlp, spec, psi, x, margin):
        return AttackResult(x, 1)
    return AttackResult(NOT_FOUND, 1)


# ----------------------------------------------------------------- validation


@dataclass(frozen=True)
class Layout:
    """How a flattened candidate ``[x0, u, t]`` maps onto a simulation."""

    n0: int
    k: int
    T: float
    dt: float
    with_time: bool = True


@dataclass(frozen=True)
class Validation:
    real: bool
    trajectory: Trajectory | None
    index: int
    value: float  # largest unsafe-set margin (<= 0 inside U) or STL robustness
    reason: str = ""


def snap_time(t: float, layout: Layout) -> int:
    S = n_samples(layout.T, layout.dt)
    return int(min(max(round(t / layout.dt), 0), S - 1))


def validate(system: System, candidate, target, layout: Layout, mode: str = "at_time") -> Validation:
    """Replay ``candidate`` (original units) on the real system.

    ``target`` is a :class:`ReachabilitySpec` (real iff the state at the snapped
    candidate time, or at any sample when ``mode == "any"``, lies in ``U``) or an
    STL formula (real iff robustness < 0).
    """
    cand = np.asarray(candidate, dtype=np.float64).reshape(-1)
    m = system.input_dim
    width = layout.n0 + layout.k * m
    point = unflatten(cand[:width], layout.n0, layout.k, m, layout.T)
    try:
        traj = system.simulate(point.x0, point.u, layout.T, layout.dt)
    except (SimulationError, ValueError) as e:
        return Validation(False, None, -1, np.inf, f"simulation failed: {e}")
    if not isinstance(target, ReachabilitySpec):
        rho = stl.robustness(target, traj)
        return Validation(rho < 0, traj, 0, rho, "")
    margins = target.margins(traj.states).max(axis=1)
    if mode == "any":
        hits = np.flatnonzero(margins <= 0)
        idx = int(hits[0]) if len(hits) else int(np.argmin(margins))
    elif mode == "at_time":
        idx = snap_time(cand[width], layout) if layout.with_time else len(traj) - 1
    else:
        raise ValueError(f"unknown validation mode {mode!r}")
    val = float(margins[idx])
    return Validation(val <= 0, traj, idx, val, "" if val <= 0 else "state outside unsafe set")


# ---------------------------------------------------------------------- loop


@dataclass(frozen=True)
class NnfalBudget:
    max_attacks: int = 50
    timeout_secs: float | None = None


@dataclass
class NnfalResult:
    success: bool
    candidate: np.ndarray | None  # original units
    counterexample: Counterexample | None
    refinements: int
    psi: SpuriousSet
    attacks: int
    events: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "status": "falsified" if self.success else "failure",
            "candidate": None if self.candidate is None else [float(v) for v in self.candidate],
            "counterexample": None if self.counterexample is None else self.counterexample.to_json(),
            "refinements": self.refinements,
            "attacks": self.attacks,
            "excluded": [list(c) for c in self.psi.centers],
            "events": self.events,
        }


def nnfal_run(system: System, surrogate: Surrogate, spec: ReachabilitySpec, layout: Layout,
              budget: NnfalBudget = NnfalBudget(), attack: str = "pgd", seed: int = 0, delta: float = 1e-3,
              attack_kwargs: dict | None = None, validator: Callable | None = None,
              mode: str = "at_time") -> NnfalResult:
    """Attack, validate, exclude; repeat until a real counterexample or the budget runs out.

    ``spec.I`` is in original units; attacks run in the scaled space the net was
    trained in and ``delta`` is measured there.
    """
    attack_kwargs = dict(attack_kwargs or {})
    sc = surrogate.scaling
    scaled_I = Box(sc.transform(spec.I.lows), sc.transform(spec.I.highs))
    scaled = ReachabilitySpec(scaled_I, spec.A, spec.b)
    validator = validator or (lambda cand: validate(system, cand, spec, layout, mode))
    psi = SpuriousSet()
    events: list[dict] = []
    t0 = time.perf_counter()
    for call in range(budget.max_attacks):
        if budget.timeout_secs is not None and time.perf_counter() - t0 > budget.timeout_secs:
            events.append({"event": "timeout", "attacks": call})
            break
        call_seed = int(stream(seed, ATTACK_STREAM, call).integers(2**63))
        if attack == "pgd":
            res = pgd_attack(surrogate.mlp, scaled, psi, seed=call_seed, **attack_kwargs)
        elif attack == "fgsm":
            res = fgsm_attack(surrogate.mlp, scaled, psi, seed=call_seed, **attack_kwargs)
        else:
            raise ValueError(f"unknown attack {attack!r}")
        if not res.found:
            events.append({"event": "not_found", "attack": call, "iterations": res.iterations})
            continue
        cand = sc.inverse(res.candidate)
        verdict = validator(cand)
        ev = {"event": "candidate", "attack": call, "scaled": res.candidate.tolist(), "candidate": cand.tolist(),
              "real": bool(verdict.real), "value": float(verdict.value)}
        events.append(ev)
        if verdict.real:
            ce = None
            if verdict.trajectory is not None:
                width = layout.n0 + layout.k * system.input_dim
                point = unflatten(cand[:width], layout.n0, layout.k, system.input_dim, layout.T)
                ce = Counterexample(point, verdict.trajectory, verdict.value)
            return NnfalResult(True, cand, ce, len(psi), psi, call + 1, events)
        psi = exclude_spurious(psi, res.candidate, delta)
    return NnfalResult(False, None, None, len(psi), psi, len(events), events)


def falsification_rate(task: Callable[[int], object], runs: int = 10, seed: int = 0) -> int:
    """Number of runs (seeds ``seed .. seed + runs - 1``) where ``task`` reports success."""
    ok = 0
    for i in range(runs):
        res = task(seed + i)
        flag = getattr(res, "falsified", getattr(res, "success", res))
        ok += bool(flag)
    return ok
