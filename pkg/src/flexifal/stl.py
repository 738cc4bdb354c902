"""Signal temporal logic: formulas, parser, Boolean semantics and robustness on sampled traces.

All quantifiers range over the sample grid of the trajectory. Temporal windows
``t + [a, b]`` are closed and truncated at the end of the trace; a window that
contains no sample raises :class:`HorizonError`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import Trajectory

LE, LT, GE, GT = "<=", "<", ">=", ">"
_CMPS = (LE, LT, GE, GT)
BOUNDARY_EPS = 1e-12


class STLSyntaxError(ValueError):
    def __init__(self, msg: str, pos: int, text: str = ""):
        self.pos = pos
        self.text = text
        super().__init__(f"{msg} at position {pos}" + (f": {text[:pos]}<!>{text[pos:]}" if text else ""))


class HorizonError(ValueError):
    """A temporal window holds no sample of the trajectory."""


class UnknownVariableError(KeyError):
    pass


# --------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Atom:
    """Linear predicate ``sum(coef * var) cmp bound``; usually a single variable."""

    terms: tuple[tuple[str, float], ...]
    cmp: str
    bound: float

    def __post_init__(self):
        if self.cmp not in _CMPS:
            raise ValueError(f"unknown comparison {self.cmp!r}")
        if not self.terms:
            raise ValueError("atom needs at least one variable")
        if not math.isfinite(self.bound):
            raise ValueError("atom bound must be finite")

    @classmethod
    def of(cls, var: str, cmp: str, bound: float) -> "Atom":
        return cls(((var, 1.0),), cmp, float(bound))

    @property
    def var(self) -> str | None:
        if len(self.terms) == 1 and self.terms[0][1] == 1.0:
            return self.terms[0][0]
        return None


@dataclass(frozen=True)
class TrueF:
    pass


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


def _check_interval(lo, hi):
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0 or lo > hi:
        raise ValueError(f"bad temporal interval [{lo}, {hi}]")


@dataclass(frozen=True)
class Until:
    lo: float
    hi: float
    left: "Formula"
    right: "Formula"

    def __post_init__(self):
        _check_interval(self.lo, self.hi)


@dataclass(frozen=True)
class Always:
    lo: float
    hi: float
    arg: "Formula"

    def __post_init__(self):
        _check_interval(self.lo, self.hi)


@dataclass(frozen=True)
class Eventually:
    lo: float
    hi: float
    arg: "Formula"

    def __post_init__(self):
        _check_interval(self.lo, self.hi)


Formula = Union[Atom, TrueF, Not, And, Or, Implies, Until, Always, Eventually]


def variables(phi: Formula) -> set[str]:
    if isinstance(phi, Atom):
        return {v for v, _ in phi.terms}
    if isinstance(phi, TrueF):
        return set()
    if isinstance(phi, (Not, Always, Eventually)):
        return variables(phi.arg)
    return variables(phi.left) | variables(phi.right)


def desugar(phi: Formula) -> Formula:
    """Rewrite Always/Eventually into Until form, recursively."""
    if isinstance(phi, (Atom, TrueF)):
        return phi
    if isinstance(phi, Not):
        return Not(desugar(phi.arg))
    if isinstance(phi, Always):
        return Not(Until(phi.lo, phi.hi, TrueF(), Not(desugar(phi.arg))))
    if isinstance(phi, Eventually):
        return Until(phi.lo, phi.hi, TrueF(), desugar(phi.arg))
    if isinstance(phi, Until):
        return Until(phi.lo, phi.hi, desugar(phi.left), desugar(phi.right))
    return type(phi)(desugar(phi.left), desugar(phi.right))


# ------------------------------------------------------------------ printing


def _num(x: float) -> str:
    x = float(x)
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _lin(terms) -> str:
    out = []
    for i, (v, c) in enumerate(terms):
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        body = v if mag == 1.0 else f"{_num(mag)}*{v}"
        if i == 0:
            out.append(body if sign == "+" else f"-{body}")
        else:
            out.append(f" {sign} {body}")
    return "".join(out)


def to_text(phi: Formula) -> str:
    """Canonical ASCII rendering; ``parse(to_text(phi)) == phi``."""
    if isinstance(phi, Atom):
        return f"({_lin(phi.terms)} {phi.cmp} {_num(phi.bound)})"
    if isinstance(phi, TrueF):
        return "true"
    if isinstance(phi, Not):
        return f"!{to_text(phi.arg)}"
    if isinstance(phi, And):
        return f"({to_text(phi.left)} & {to_text(phi.right)})"
    if isinstance(phi, Or):
        return f"({to_text(phi.left)} | {to_text(phi.right)})"
    if isinstance(phi, Implies):
        return f"({to_text(phi.left)} -> {to_text(phi.right)})"
    if isinstance(phi, Until):
        return f"({to_text(phi.left)} U[{_num(phi.lo)},{_num(phi.hi)}] {to_text(phi.right)})"
    op = "G" if isinstance(phi, Always) else "F"
    return f"{op}[{_num(phi.lo)},{_num(phi.hi)}] {to_text(phi.arg)}"


# ------------------------------------------------------------------- parsing

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<op><=|>=|->|[<>!&|()\[\],+\-*]|≤|≥|¬|∧|∨|→|□|◊|◇)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
""", re.VERBOSE)

_ALIASES = {"≤": "<=", "≥": ">=", "¬": "!", "∧": "&", "∨": "|", "→": "->", "□": "G", "◊": "F", "◇": "F"}


def _tokenize(text: str):
    toks, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise STLSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        val = m.group()
        if kind == "op":
            val = _ALIASES.get(val, val)
            if val in ("G", "F"):
                kind = "ident"
        if kind != "ws":
            toks.append((kind, val, pos))
        pos = m.end()
    toks.append(("eof", "", pos))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self, ahead=0):
        return self.toks[min(self.i + ahead, len(self.toks) - 1)]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, val):
        tok = self.take()
        if tok[1] != val:
            raise STLSyntaxError(f"expected {val!r}, found {tok[1] or 'end of input'!r}", tok[2], self.text)
        return tok

    def error(self, msg):
        raise STLSyntaxError(msg, self.peek()[2], self.text)

    def is_temporal(self, names):
        kind, val, _ = self.peek()
        return kind == "ident" and val in names and self.peek(1)[1] == "["

    def parse(self):
        phi = self.implies()
        if self.peek()[0] != "eof":
            self.error(f"unexpected {self.peek()[1]!r}")
        return phi

    def implies(self):
        left = self.or_()
        if self.peek()[1] == "->":
            self.take()
            return Implies(left, self.implies())
        return left

    def or_(self):
        left = self.and_()
        while self.peek()[1] == "|":
            self.take()
            left = Or(left, self.and_())
        return left

    def and_(self):
        left = self.until()
        while self.peek()[1] == "&":
            self.take()
            left = And(left, self.until())
        return left

    def until(self):
        left = self.unary()
        if self.is_temporal(("U",)):
            self.take()
            lo, hi = self.interval()
            return Until(lo, hi, left, self.until())
        return left

    def interval(self):
        start = self.peek()[2]
        self.expect("[")
        lo = self.signed_number()
        self.expect(",")
        hi = self.signed_number()
        self.expect("]")
        if lo < 0 or lo > hi:
            raise STLSyntaxError(f"bad interval [{lo}, {hi}]", start, self.text)
        return lo, hi

    def signed_number(self):
        sign = 1.0
        while self.peek()[1] in ("+", "-"):
            if self.take()[1] == "-":
                sign = -sign
        tok = self.take()
        if tok[0] != "num":
            raise STLSyntaxError(f"expected a number, found {tok[1] or 'end of input'!r}", tok[2], self.text)
        return sign * float(tok[1])

    def unary(self):
        kind, val, pos = self.peek()
        if val == "!":
            self.take()
            return Not(self.unary())
        if self.is_temporal(("G", "F")):
            self.take()
            lo, hi = self.interval()
            arg = self.unary()
            return Always(lo, hi, arg) if val == "G" else Eventually(lo, hi, arg)
        if kind == "ident" and val in ("U",) and self.peek(1)[1] == "[":
            self.error("'U' is an infix operator")
        return self.primary()

    def primary(self):
        kind, val, pos = self.peek()
        if val == "(":
            self.take()
            inner = self.implies()
            self.expect(")")
            return inner
        if kind == "ident" and val.lower() == "true":
            self.take()
            return TrueF()
        if kind == "ident" and val.lower() == "false":
            self.take()
            return Not(TrueF())
        if kind in ("ident", "num") or val in ("-", "+"):
            return self.atom()
        self.error(f"unexpected {val or 'end of input'!r}")

    def atom(self):
        terms = self.linear()
        kind, val, pos = self.peek()
        if val not in _CMPS:
            self.error(f"expected a comparison operator, found {val or 'end of input'!r}")
        self.take()
        bound = self.signed_number()
        merged: dict[str, float] = {}
        for v, c in terms:
            merged[v] = merged.get(v, 0.0) + c
        terms = tuple((v, c) for v, c in merged.items() if c != 0.0)
        if not terms:
            raise STLSyntaxError("atom has no variables", pos, self.text)
        return Atom(terms, val, bound)

    def linear(self):
        terms = [self.term(1.0)]
        while self.peek()[1] in ("+", "-"):
            sign = 1.0 if self.take()[1] == "+" else -1.0
            terms.append(self.term(sign))
        return terms

    def term(self, sign):
        while self.peek()[1] in ("+", "-"):
            if self.take()[1] == "-":
                sign = -sign
        kind, val, pos = self.take()
        if kind == "num":
            coef = float(val)
            self.expect("*")
            kind, val, pos = self.take()
            if kind != "ident":
                raise STLSyntaxError("expected a variable after '*'", pos, self.text)
            return val, sign * coef
        if kind != "ident" or (val in ("G", "F", "U") and self.peek()[1] == "["):
            raise STLSyntaxError(f"expected a variable, found {val or 'end of input'!r}", pos, self.text)
        return val, sign


def parse(text: str) -> Formula:
    return _Parser(text).parse()


# ---------------------------------------------------------------- evaluation


def _grid_index(traj: Trajectory, t: float) -> int:
    idx = int(round(t / traj.dt))
    if abs(idx * traj.dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= idx < len(traj):
        raise ValueError(f"time {t} is not a sample time of the trajectory")
    return idx


def _offsets(lo: float, hi: float, dt: float) -> tuple[int, int]:
    return int(math.ceil(lo / dt - 1e-9)), int(math.floor(hi / dt + 1e-9))


def _window(i, a_off, b_off, n, phi):
    lo = i + a_off
    hi = min(i + b_off, n - 1)
    if lo > hi:
        raise HorizonError(f"window [{phi.lo}, {phi.hi}] at sample {i} holds no sample (trace has {n})")
    return lo, hi


def _atom_lhs(phi: Atom, traj: Trajectory, upto: int) -> np.ndarray:
    acc = np.zeros(upto + 1)
    for v, c in phi.terms:
        if v not in traj.var_names:
            raise UnknownVariableError(f"variable {v!r} not in trajectory {traj.var_names}")
        col = traj.states[: upto + 1, traj.var_names.index(v)]
        acc = acc + col if c == 1.0 else acc + c * col
    return acc


def _child_upto(phi, upto, n, dt):
    a_off, b_off = _offsets(phi.lo, phi.hi, dt)
    _window(upto, a_off, b_off, n, phi)
    return a_off, b_off, min(upto + b_off, n - 1)


def _rob(phi: Formula, traj: Trajectory, upto: int) -> np.ndarray:
    n = len(traj)
    if isinstance(phi, Atom):
        lhs = _atom_lhs(phi, traj, upto)
        return phi.bound - lhs if phi.cmp in (LE, LT) else lhs - phi.bound
    if isinstance(phi, TrueF):
        return np.full(upto + 1, np.inf)
    if isinstance(phi, Not):
        return -_rob(phi.arg, traj, upto)
    if isinstance(phi, And):
        return np.minimum(_rob(phi.left, traj, upto), _rob(phi.right, traj, upto))
    if isinstance(phi, Or):
        return np.maximum(_rob(phi.left, traj, upto), _rob(phi.right, traj, upto))
    if isinstance(phi, Implies):
        return np.maximum(-_rob(phi.left, traj, upto), _rob(phi.right, traj, upto))

    a_off, b_off, cu = _child_upto(phi, upto, n, traj.dt)
    out = np.empty(upto + 1)
    if isinstance(phi, (Always, Eventually)):
        child = _rob(phi.arg, traj, cu)
        reduce = np.min if isinstance(phi, Always) else np.max
        for i in range(upto + 1):
            lo, hi = _window(i, a_off, b_off, n, phi)
            out[i] = reduce(child[lo:hi + 1])
        return out
    # Until: max over t' of min(rho2(t'), min of rho1 over [t, t'))
    r1 = _rob(phi.left, traj, cu)
    r2 = _rob(phi.right, traj, cu)
    for i in range(upto + 1):
        lo, hi = _window(i, a_off, b_off, n, phi)
        prefix = np.concatenate(([np.inf], np.minimum.accumulate(r1[i:hi])))
        # prefix[j] = min of rho1 over [i, i + j); j = 0 is the empty prefix
        best = np.max(np.minimum(r2[lo:hi + 1], prefix[lo - i:hi - i + 1]))
        out[i] = best
    return out


def _sat(phi: Formula, traj: Trajectory, upto: int) -> np.ndarray:
    n = len(traj)
    if isinstance(phi, Atom):
        lhs = _atom_lhs(phi, traj, upto)
        b = phi.bound
        return {LT: lhs < b, LE: lhs <= b, GT: lhs > b, GE: lhs >= b}[phi.cmp]
    if isinstance(phi, TrueF):
        return np.ones(upto + 1, dtype=bool)
    if isinstance(phi, Not):
        return ~_sat(phi.arg, traj, upto)
    if isinstance(phi, And):
        return _sat(phi.left, traj, upto) & _sat(phi.right, traj, upto)
    if isinstance(phi, Or):
        return _sat(phi.left, traj, upto) | _sat(phi.right, traj, upto)
    if isinstance(phi, Implies):
        return ~_sat(phi.left, traj, upto) | _sat(phi.right, traj, upto)

    a_off, b_off, cu = _child_upto(phi, upto, n, traj.dt)
    out = np.empty(upto + 1, dtype=bool)
    if isinstance(phi, (Always, Eventually)):
        child = _sat(phi.arg, traj, cu)
        reduce = np.all if isinstance(phi, Always) else np.any
        for i in range(upto + 1):
            lo, hi = _window(i, a_off, b_off, n, phi)
            out[i] = reduce(child[lo:hi + 1])
        return out
    s1 = _sat(phi.left, traj, cu)
    s2 = _sat(phi.right, traj, cu)
    for i in range(upto + 1):
        lo, hi = _window(i, a_off, b_off, n, phi)
        ok = False
        for tp in range(lo, hi + 1):
            if s2[tp] and bool(np.all(s1[i:tp])):
                ok = True
                break
        out[i] = ok
    return out


def _check_finite(traj: Trajectory):
    if not np.all(np.isfinite(traj.states)):
        raise ValueError("trajectory contains non-finite samples")


def robustness(phi: Formula, traj: Trajectory, t: float = 0.0) -> float:
    i = _grid_index(traj, t)
    _check_finite(traj)
    return float(_rob(phi, traj, i)[i])


def robustness_signal(phi: Formula, traj: Trajectory, upto: int | None = None) -> np.ndarray:
    """Robustness at sample indices ``0..upto`` (default: as far as every window fits)."""
    _check_finite(traj)
    if upto is None:
        upto = len(traj) - 1
    return _rob(phi, traj, upto)


def satisfies(phi: Formula, traj: Trajectory, t: float = 0.0) -> bool:
    i = _grid_index(traj, t)
    _check_finite(traj)
    return bool(_sat(phi, traj, i)[i])


@dataclass(frozen=True)
class Verdict:
    robustness: float
    satisfied: bool
    boundary: bool


def evaluate(phi: Formula, traj: Trajectory, t: float = 0.0) -> Verdict:
    """Robustness plus Boolean verdict; ``boundary`` flags ``|rho| < 1e-12``."""
    rho = robustness(phi, traj, t)
    return Verdict(rho, satisfies(phi, traj, t), abs(rho) < BOUNDARY_EPS)


def check_horizon(phi: Formula, n_samples: int, dt: float, upto: int = 0) -> None:
    """Raise :class:`HorizonError` unless ``phi`` can be evaluated at sample ``upto``."""
    if isinstance(phi, (Atom, TrueF)):
        return
    if isinstance(phi, Not):
        return check_horizon(phi.arg, n_samples, dt, upto)
    if isinstance(phi, (And, Or, Implies)):
        check_horizon(phi.left, n_samples, dt, upto)
        return check_horizon(phi.right, n_samples, dt, upto)
    _, _, cu = _child_upto(phi, upto, n_samples, dt)
    if isinstance(phi, Until):
        check_horizon(phi.left, n_samples, dt, cu)
        return check_horizon(phi.right, n_samples, dt, cu)
    return check_horizon(phi.arg, n_samples, dt, cu)
