"""Boolean monitor for temporal-logic formulas on uniformly sampled traces.

Grammar: true | predicate | not | and | until_[a,b], with always/eventually
as first-class derived operators.  Semantics follow the discrete-sample
reading: a formula is checked at sample instants only, and an interval
[a, b] in seconds maps to sample indices floor(a/Ts) .. ceil(b/Ts), which
is the conservative rounding for guarantees.

Evaluation is three-valued internally: a verdict that depends on samples
beyond the end of the trace is *unknown*, and `evaluate` raises
InsufficientHorizon instead of certifying it.  Unbounded intervals are
clipped to the trace end under the same rule, so a guarantee is never
vacuously true just because the trace ran out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InsufficientHorizon(RuntimeError):
    """The trace ends before the verdict is determined."""


_OPS = {
    "ge": lambda v, c: v >= c,
    "gt": lambda v, c: v > c,
    "le": lambda v, c: v <= c,
    "lt": lambda v, c: v < c,
}


@dataclass(frozen=True)
class Formula:
    kind: str                      # true | pred | not | and | until | always | eventually
    children: tuple = ()
    signal: str | None = None
    op: str | None = None
    threshold: float = 0.0
    interval: tuple | None = None  # (a, b) in seconds; b may be inf

    def __post_init__(self):
        if self.interval is not None:
            a, b = self.interval
            if not (0 <= a <= b):
                raise ValueError(f"bad interval {self.interval}")
            if not np.isfinite(a) or not np.isfinite(self.threshold):
                raise ValueError("interval start and thresholds must be finite")
        if self.kind == "pred" and self.op not in _OPS:
            raise ValueError(f"unknown comparator {self.op!r}")


TOP = Formula("true")


def pred(signal: str, op: str, threshold: float) -> Formula:
    return Formula("pred", signal=signal, op=op, threshold=float(threshold))


def neg(f: Formula) -> Formula:
    return Formula("not", (f,))


def conj(a: Formula, b: Formula) -> Formula:
    return Formula("and", (a, b))


def disj(a: Formula, b: Formula) -> Formula:
    # derived: a or b == not(not a and not b)
    return neg(conj(neg(a), neg(b)))


def until(f1: Formula, f2: Formula, a: float, b: float) -> Formula:
    return Formula("until", (f1, f2), interval=(float(a), float(b)))


def always(f: Formula, a: float, b: float) -> Formula:
    return Formula("always", (f,), interval=(float(a), float(b)))


def eventually(f: Formula, a: float, b: float) -> Formula:
    return Formula("eventually", (f,), interval=(float(a), float(b)))


class SampledTrace:
    """Named real-valued channels on a uniform time grid."""

    def __init__(self, timestamps, channels):
        self.timestamps = np.asarray(timestamps, dtype=float).ravel()
        self.channels = {k: np.asarray(v, dtype=float).ravel() for k, v in channels.items()}
        n = self.timestamps.size
        if n < 2:
            raise ValueError("a trace needs at least two samples")
        for name, v in self.channels.items():
            if v.size != n:
                raise ValueError(f"channel {name!r} has {v.size} samples, expected {n}")
        deltas = np.diff(self.timestamps)
        self.ts = float(deltas[0])
        if self.ts <= 0 or np.max(np.abs(deltas - self.ts)) > 1e-12:
            raise ValueError("timestamps must be uniformly spaced")

    def __len__(self):
        return self.timestamps.size


def _window(interval, ts):
    a, b = interval
    ia = int(np.floor(a / ts + 1e-12))
    ib = None if np.isinf(b) else int(np.ceil(b / ts - 1e-12))
    return ia, ib


def _and3(x, y):
    if x is False or y is False:
        return False
    if x is True and y is True:
        return True
    return None


def _not3(x):
    return None if x is None else (not x)


def _eval(f: Formula, trace: SampledTrace, t: int):
    n = len(trace)
    if f.kind == "true":
        return True
    if f.kind == "pred":
        if t >= n:
            return None
        return bool(_OPS[f.op](trace.channels[f.signal][t], f.threshold))
    if f.kind == "not":
        return _not3(_eval(f.children[0], trace, t))
    if f.kind == "and":
        return _and3(_eval(f.children[0], trace, t), _eval(f.children[1], trace, t))

    ia, ib = _window(f.interval, trace.ts)
    last = n - 1 if ib is None else min(t + ib, n - 1)
    truncated = (ib is None) or (t + ib > n - 1)

    if f.kind == "always":
        out = True
        for tp in range(t + ia, last + 1):
            out = _and3(out, _eval(f.children[0], trace, tp))
            if out is False:
                return False
        if t + ia > last:   # window starts beyond the trace
            return None
        return None if truncated else out

    if f.kind == "eventually":
        out = False
        for tp in range(t + ia, last + 1):
            v = _eval(f.children[0], trace, tp)
            if v is True:
                return True
            if v is None:
                out = None
        if t + ia > last:
            return None
        return None if truncated else out

    if f.kind == "until":
        f1, f2 = f.children
        # prefix: f1 holds on [t, t'] inclusive
        prefix = True
        for tp in range(t, min(t + ia, last + 1)):
            prefix = _and3(prefix, _eval(f1, trace, tp))
            if prefix is False:
                return False
        out = False
        for tp in range(t + ia, last + 1):
            prefix = _and3(prefix, _eval(f1, trace, tp))
            term = _and3(prefix, _eval(f2, trace, tp))
            if term is True:
                return True
            if term is None:
                out = None
            if prefix is False:
                return out  # no later witness possible; verdict settled
        if t + ia > last:
            return None
        return None if truncated else out

    raise ValueError(f"unknown node kind {f.kind!r}")


def evaluate(f: Formula, trace: SampledTrace, t_index: int = 0) -> bool:
    """Boolean verdict of `f` on `trace` at sample `t_index`.

    Raises InsufficientHorizon when the trace ends before the verdict is
    determined (e.g. an unbounded always with no violation so far).
    """
    if not 0 <= t_index < len(trace):
        raise IndexError(f"t_index {t_index} outside trace of length {len(trace)}")
    verdict = _eval(f, trace, t_index)
    if verdict is None:
        raise InsufficientHorizon(
            "verdict depends on samples beyond the end of the trace")
    return verdict


def entails(f1: Formula, f2: Formula, traces) -> bool:
    """Empirical formula order: on every given trace, f1 true implies f2 true.

    This is a sampled check over the provided traces, not a decision
    procedure.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    for tr in traces:
        if evaluate(f1, tr, 0) and not evaluate(f2, tr, 0):
            return False
    return True


# ---------------------------------------------------------------------------
# Prefix textual form, e.g.  (always 0 inf (ge omega_2 -0.05))
# ---------------------------------------------------------------------------

def _tokenize(text: str):
    return text.replace("(", " ( ").replace(")", " ) ").split()


def _num(tok: str) -> float:
    if tok == "inf":
        return np.inf
    return float(tok)


def _parse(tokens, pos):
    if tokens[pos] != "(":
        if tokens[pos] == "true":
            return TOP, pos + 1
        raise ValueError(f"expected '(' at token {pos}: {tokens[pos]!r}")
    head = tokens[pos + 1]
    pos += 2
    if head in _OPS:
        f = pred(tokens[pos], head, _num(tokens[pos + 1]))
        pos += 2
    elif head == "true":
        f = TOP
    elif head == "not":
        child, pos = _parse(tokens, pos)
        f = neg(child)
    elif head in ("and", "or"):
        left, pos = _parse(tokens, pos)
        right, pos = _parse(tokens, pos)
        f = conj(left, right) if head == "and" else disj(left, right)
    elif head in ("always", "eventually"):
        a, b = _num(tokens[pos]), _num(tokens[pos + 1])
        child, pos = _parse(tokens, pos + 2)
        f = always(child, a, b) if head == "always" else eventually(child, a, b)
    elif head == "until":
        a, b = _num(tokens[pos]), _num(tokens[pos + 1])
        left, pos = _parse(tokens, pos + 2)
        right, pos = _parse(tokens, pos)
        f = until(left, right, a, b)
    else:
        raise ValueError(f"unknown operator {head!r}")
    if tokens[pos] != ")":
        raise ValueError(f"expected ')' at token {pos}")
    return f, pos + 1


def parse(text: str) -> Formula:
    """Parse the prefix textual formula format used in scenario configs."""
    tokens = _tokenize(text)
    if not tokens:
        raise ValueError("empty formula")
    f, pos = _parse(tokens, 0)
    if pos != len(tokens):
        raise ValueError("trailing tokens after formula")
    return f
