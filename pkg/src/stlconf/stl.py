"""STL formulas over confidence signals: syntax, grammar and robustness.

Formulas are immutable trees that carry their numeric parameters inline.
Parameters are addressed by name through a ``ParamVector`` (a plain dict); the
name of a parameter is its kind followed by the pre-order index of the node
that owns it, e.g. ``(G 0.0 1.0 (ge s 0.6))`` has parameters ``a0``, ``b0``
and ``mu1``.

Temporal bounds are fractions of the signal length. On a signal of length
``n`` the bound ``a`` resolves to step ``floor(a * (n - 1))``; windows that run
past the end are clamped to the last step and are never empty.

Two semantics are provided. Hard semantics uses exact min/max. Soft semantics
replaces them by log-sum-exp smoothing with temperature ``tau`` and supports
reverse-mode gradients with respect to per-instance parameters.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import _kernels
from .errors import FormulaSyntaxError, ParamError
from .trace import ConfidenceSignal, SignalBatch

DEFAULT_TAU = 20.0
# Slack for fractions that are meant to land exactly on a step boundary.
_RESOLVE_EPS = 1e-6

ParamVector = dict


@dataclass(frozen=True)
class Pred:
    channel: str
    cmp: str  # "ge" or "le"
    value: float


@dataclass(frozen=True)
class VarLe:
    nu: float


@dataclass(frozen=True)
class Gain:
    w: float
    eps: float


@dataclass(frozen=True)
class Loss:
    w: float
    eps: float


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Always:
    a: float
    b: float
    child: "Formula"


@dataclass(frozen=True)
class Eventually:
    a: float
    b: float
    child: "Formula"


Formula = Union[Pred, VarLe, Gain, Loss, Not, And, Or, Always, Eventually]

# (lo, hi) closed ranges per parameter kind; "w" and "alpha" exclude 0.
PARAM_RANGES = {
    "a": (0.0, 1.0),
    "b": (0.0, 1.0),
    "mu": (0.0, 1.0),
    "dl": (-1.0, 1.0),
    "rt": (-10.0, 10.0),
    "nu": (0.0, 0.25),
    "w": (0.0, 0.5),
    "eps": (0.0, 0.5),
    "alpha": (0.0, 10.0),
    "beta": (-10.0, 10.0),
}
_OPEN_LOW = {"w", "alpha"}


def param_kind(name: str) -> str:
    return name.rstrip("0123456789")


def _pred_kind(channel: str) -> str:
    if channel == "s":
        return "mu"
    if channel == "d":
        return "dl"
    return "rt"


def _children(phi):
    if isinstance(phi, (Not, Always, Eventually)):
        return (phi.child,)
    if isinstance(phi, (And, Or)):
        return (phi.left, phi.right)
    return ()


def _own_params(phi, idx):
    if isinstance(phi, Pred):
        return [(f"{_pred_kind(phi.channel)}{idx}", phi.value)]
    if isinstance(phi, VarLe):
        return [(f"nu{idx}", phi.nu)]
    if isinstance(phi, (Gain, Loss)):
        return [(f"w{idx}", phi.w), (f"eps{idx}", phi.eps)]
    if isinstance(phi, (Always, Eventually)):
        return [(f"a{idx}", phi.a), (f"b{idx}", phi.b)]
    return []


def iter_nodes(phi):
    """Yield ``(index, node)`` in pre-order."""
    stack = [phi]
    idx = 0
    while stack:
        node = stack.pop()
        yield idx, node
        idx += 1
        stack.extend(reversed(_children(node)))


def node_count(phi) -> int:
    return sum(1 for _ in iter_nodes(phi))


def depth(phi) -> int:
    kids = _children(phi)
    return 1 + (max(depth(k) for k in kids) if kids else 0)


def parameters(phi) -> ParamVector:
    out = {}
    for idx, node in iter_nodes(phi):
        for name, value in _own_params(node, idx):
            out[name] = float(value)
    return out


def bind(phi, theta: ParamVector):
    """Return ``phi`` with every parameter replaced by its value in ``theta``."""
    counter = [0]

    def get(name):
        try:
            return float(theta[name])
        except KeyError:
            raise ParamError(f"unbound parameter {name!r}") from None

    def rebuild(node):
        idx = counter[0]
        counter[0] += 1
        if isinstance(node, Pred):
            return Pred(node.channel, node.cmp, get(f"{_pred_kind(node.channel)}{idx}"))
        if isinstance(node, VarLe):
            return VarLe(get(f"nu{idx}"))
        if isinstance(node, Gain):
            return Gain(get(f"w{idx}"), get(f"eps{idx}"))
        if isinstance(node, Loss):
            return Loss(get(f"w{idx}"), get(f"eps{idx}"))
        if isinstance(node, Not):
            return Not(rebuild(node.child))
        if isinstance(node, (And, Or)):
            left = rebuild(node.left)
            return type(node)(left, rebuild(node.right))
        a, b = get(f"a{idx}"), get(f"b{idx}")
        return type(node)(a, b, rebuild(node.child))

    return rebuild(phi)


def check_params(theta: ParamVector) -> None:
    """Raise ParamError unless every value is inside its kind's range."""
    for name, value in theta.items():
        kind = param_kind(name)
        if kind not in PARAM_RANGES:
            raise ParamError(f"unknown parameter kind in {name!r}")
        lo, hi = PARAM_RANGES[kind]
        v = float(value)
        if not math.isfinite(v) or v > hi or v < lo or (kind in _OPEN_LOW and v <= lo):
            raise ParamError(f"{name}={v} outside its range")
    for name, value in theta.items():
        if param_kind(name) == "a":
            b = theta.get("b" + name[1:])
            if b is not None and float(value) > float(b):
                raise ParamError(f"interval {name}={value} > b{name[1:]}={b}")


def check_formula(phi) -> None:
    check_params(parameters(phi))


# ---------------------------------------------------------------------------
# grammar

_TOKEN = re.compile(r"\s*(?:(\()|(\))|([^\s()]+))")
_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")
_CHANNEL = re.compile(r"s|d|r\d+$")


def _tokenize(text: str):
    pos = 0
    data = text.encode("utf-8")
    tokens = []
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        tok = m.group(1) or m.group(2) or m.group(3)
        start = m.end() - len(tok)
        tokens.append((tok, len(text[:start].encode("utf-8"))))
        pos = m.end()
    return tokens, len(data)


class _Parser:
    def __init__(self, text):
        self.tokens, self.end = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, self.end)

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, want):
        tok, off = self.next()
        if tok != want:
            raise FormulaSyntaxError(f"expected {want!r}, got {tok!r}", off)

    def number(self):
        tok, off = self.next()
        if tok is None or not _NUMBER.match(tok):
            raise FormulaSyntaxError(f"expected a number, got {tok!r}", off)
        return float(tok)

    def formula(self):
        self.expect("(")
        op, off = self.next()
        if op in ("ge", "le"):
            ch, choff = self.next()
            if ch is None or not _CHANNEL.match(ch):
                raise FormulaSyntaxError(f"bad channel {ch!r}", choff)
            node = Pred(ch, op, self.number())
        elif op == "varle":
            node = VarLe(self.number())
        elif op in ("gain", "loss"):
            w = self.number()
            node = (Gain if op == "gain" else Loss)(w, self.number())
        elif op == "not":
            node = Not(self.formula())
        elif op in ("and", "or"):
            left = self.formula()
            node = (And if op == "and" else Or)(left, self.formula())
        elif op in ("G", "F"):
            a = self.number()
            b = self.number()
            node = (Always if op == "G" else Eventually)(a, b, self.formula())
        else:
            raise FormulaSyntaxError(f"unknown operator {op!r}", off)
        self.expect(")")
        return node


def parse_formula(text: str):
    """Parse grammar text into ``(Formula, ParamVector)``."""
    p = _Parser(text)
    phi = p.formula()
    tok, off = p.peek()
    if tok is not None:
        raise FormulaSyntaxError(f"trailing input {tok!r}", off)
    theta = parameters(phi)
    check_params(theta)
    return phi, theta


def _num(x: float) -> str:
    return repr(float(x))


def _render(phi, num) -> str:
    if isinstance(phi, Pred):
        return f"({phi.cmp} {phi.channel} {num(phi.value)})"
    if isinstance(phi, VarLe):
        return f"(varle {num(phi.nu)})"
    if isinstance(phi, Gain):
        return f"(gain {num(phi.w)} {num(phi.eps)})"
    if isinstance(phi, Loss):
        return f"(loss {num(phi.w)} {num(phi.eps)})"
    if isinstance(phi, Not):
        return f"(not {_render(phi.child, num)})"
    if isinstance(phi, And):
        return f"(and {_render(phi.left, num)} {_render(phi.right, num)})"
    if isinstance(phi, Or):
        return f"(or {_render(phi.left, num)} {_render(phi.right, num)})"
    op = "G" if isinstance(phi, Always) else "F"
    return f"({op} {num(phi.a)} {num(phi.b)} {_render(phi.child, num)})"


def format_formula(phi, theta: Optional[ParamVector] = None) -> str:
    if theta is not None:
        phi = bind(phi, theta)
    return _render(phi, _num)


def canonical_skeleton(phi) -> str:
    """Formula text with every numeric parameter replaced by ``_``."""
    return _render(phi, lambda _: "_")


# ---------------------------------------------------------------------------
# evaluation


def resolve_interval(a: float, b: float, n: int):
    """Map fractional bounds to ``(start, end)`` step offsets on length ``n``."""
    if not (0.0 <= a <= b <= 1.0):
        raise ParamError(f"interval [{a}, {b}] is not inside [0, 1] with a <= b")
    start = int(math.floor(a * (n - 1) + _RESOLVE_EPS))
    end = int(math.floor(b * (n - 1) + _RESOLVE_EPS))
    return start, max(start, end)


def _resolve_batch(a, b, lengths):
    span = (lengths - 1).astype(np.float64)
    start = np.floor(a * span + _RESOLVE_EPS).astype(np.int64)
    end = np.floor(b * span + _RESOLVE_EPS).astype(np.int64)
    return start, np.maximum(start, end)


def _window_size(w, lengths):
    return np.maximum(1, np.ceil(w * lengths - _RESOLVE_EPS)).astype(np.int64)


def _row_sum(X, mask):
    # Sequential column accumulation: deterministic summation order per row.
    acc = np.zeros(X.shape[0])
    for j in range(X.shape[1]):
        acc = acc + np.where(mask[:, j], X[:, j], 0.0)
    return acc


def _aggregate_terms(batch: SignalBatch, w):
    """Mean of the first and last ``ceil(w*n)`` steps for each row."""
    lengths = batch.lengths
    m = _window_size(w, lengths)
    t = np.arange(batch.width)[None, :]
    first = t < m[:, None]
    last = (t >= (lengths - m)[:, None]) & (t < lengths[:, None])
    start_mean = _row_sum(batch.values, first) / m
    end_mean = _row_sum(batch.values, last) / m
    return start_mean, end_mean


def signal_variance(batch: SignalBatch):
    mask = batch.mask()
    n = batch.lengths.astype(np.float64)
    mean = _row_sum(batch.values, mask) / n
    dev = batch.values - mean[:, None]
    return _row_sum(dev * dev, mask) / n


class _Tape:
    """Vectorised evaluator for one formula over a batch.

    ``theta`` maps parameter names to scalars or per-row arrays. With
    ``tau=None`` min/max are exact; otherwise log-sum-exp smoothed.
    """

    def __init__(self, batch: SignalBatch, theta: ParamVector, tau: Optional[float]):
        self.batch = batch
        self.theta = theta
        self.tau = tau
        self.N = len(batch)
        self.L = batch.width
        self.cache = {}

    def p(self, name):
        try:
            v = self.theta[name]
        except KeyError:
            raise ParamError(f"unbound parameter {name!r}") from None
        return np.broadcast_to(np.asarray(v, dtype=np.float64), (self.N,))

    def _bounds(self, idx):
        a, b = self.p(f"a{idx}"), self.p(f"b{idx}")
        if np.any(a < 0.0) or np.any(b > 1.0) or np.any(a > b):
            raise ParamError(f"interval a{idx}/b{idx} outside 0 <= a <= b <= 1")
        return _resolve_batch(a, b, self.batch.lengths)

    def _min2(self, x, y, use_max):
        if self.tau is None:
            return np.maximum(x, y) if use_max else np.minimum(x, y)
        t = self.tau
        if use_max:
            return np.logaddexp(t * x, t * y) / t
        return -np.logaddexp(-t * x, -t * y) / t

    def forward(self, phi, idx=0):
        """Return ``(trace, next_idx)``; traces are cached by node index."""
        mask = self.batch.mask()
        if isinstance(phi, Pred):
            X = self.batch.channel(phi.channel)
            thr = self.p(f"{_pred_kind(phi.channel)}{idx}")[:, None]
            out = X - thr if phi.cmp == "ge" else thr - X
            nxt = idx + 1
        elif isinstance(phi, VarLe):
            nu = self.p(f"nu{idx}")
            out = (nu - signal_variance(self.batch))[:, None] * np.ones((1, self.L))
            nxt = idx + 1
        elif isinstance(phi, (Gain, Loss)):
            w, eps = self.p(f"w{idx}"), self.p(f"eps{idx}")
            if np.any(w <= 0.0) or np.any(w > 1.0):
                raise ParamError(f"window fraction w{idx} must lie in (0, 1]")
            start_mean, end_mean = _aggregate_terms(self.batch, w)
            gap = end_mean - start_mean if isinstance(phi, Gain) else start_mean - end_mean
            out = (gap - eps)[:, None] * np.ones((1, self.L))
            nxt = idx + 1
        elif isinstance(phi, Not):
            child, nxt = self.forward(phi.child, idx + 1)
            out = -child
        elif isinstance(phi, (And, Or)):
            left, mid = self.forward(phi.left, idx + 1)
            right, nxt = self.forward(phi.right, mid)
            out = self._min2(left, right, isinstance(phi, Or))
        else:
            child, nxt = self.forward(phi.child, idx + 1)
            starts, ends = self._bounds(idx)
            use_max = isinstance(phi, Eventually)
            if self.tau is None:
                out = _kernels.window_hard(child, self.batch.lengths, starts, ends, use_max)
            else:
                out = _kernels.window_soft(child, self.batch.lengths, starts, ends, self.tau, use_max)
        out = np.where(mask, out, 0.0)
        self.cache[idx] = out
        return out, nxt

    def backward(self, phi, adj, grads, idx=0):
        """Accumulate d(sum adj*trace)/d(param) per row into ``grads``."""
        if isinstance(phi, Pred):
            name = f"{_pred_kind(phi.channel)}{idx}"
            g = adj.sum(axis=1)
            grads[name] = grads.get(name, 0.0) + (-g if phi.cmp == "ge" else g)
            return idx + 1
        if isinstance(phi, VarLe):
            name = f"nu{idx}"
            grads[name] = grads.get(name, 0.0) + adj.sum(axis=1)
            return idx + 1
        if isinstance(phi, (Gain, Loss)):
            name = f"eps{idx}"
            grads[name] = grads.get(name, 0.0) - adj.sum(axis=1)
            grads.setdefault(f"w{idx}", np.zeros(self.N))
            return idx + 1
        if isinstance(phi, Not):
            return self.backward(phi.child, -adj, grads, idx + 1)
        if isinstance(phi, (And, Or)):
            out = self.cache[idx]
            left_idx = idx + 1
            left = self.cache[left_idx]
            # right child's index is only known after walking the left subtree
            right_idx = left_idx + node_count(phi.left)
            right = self.cache[right_idx]
            if self.tau is None:
                pick_left = left >= right if isinstance(phi, Or) else left <= right
                wl = pick_left.astype(np.float64)
                wr = 1.0 - wl
            else:
                sgn = 1.0 if isinstance(phi, Or) else -1.0
                wl = np.exp(sgn * self.tau * (left - out))
                wr = np.exp(sgn * self.tau * (right - out))
            self.backward(phi.left, adj * wl, grads, left_idx)
            return self.backward(phi.right, adj * wr, grads, right_idx)
        child = self.cache[idx + 1]
        out = self.cache[idx]
        starts, ends = self._bounds(idx)
        use_max = isinstance(phi, Eventually)
        tau = self.tau if self.tau is not None else 1e12
        dchild = _kernels.window_soft_grad(child, out, adj, self.batch.lengths, starts, ends, tau, use_max)
        grads.setdefault(f"a{idx}", np.zeros(self.N))
        grads.setdefault(f"b{idx}", np.zeros(self.N))
        return self.backward(phi.child, dchild, grads, idx + 1)


def _theta_for(phi, theta):
    if theta is None:
        return parameters(phi)
    missing = [k for k in parameters(phi) if k not in theta]
    if missing:
        raise ParamError(f"unbound parameter(s) {missing}")
    return theta


def evaluate(phi, batch: SignalBatch, theta: Optional[ParamVector] = None, tau: Optional[float] = None) -> np.ndarray:
    """Robustness trace for every row of ``batch``; padding positions are 0."""
    if tau is not None and tau <= 0:
        raise ValueError("tau must be positive")
    tape = _Tape(batch, _theta_for(phi, theta), tau)
    out, _ = tape.forward(phi)
    return out


def scalar_robustness(phi, batch: SignalBatch, theta=None, tau=None) -> np.ndarray:
    return evaluate(phi, batch, theta, tau)[:, 0]


def soft_robustness_grad(phi, batch: SignalBatch, theta: ParamVector, tau: float = DEFAULT_TAU):
    """Scalar soft robustness per row and its gradient w.r.t. each parameter.

    Returns ``(rho, grads)`` with ``grads[name]`` of shape ``(N,)`` holding
    d rho_i / d theta_i[name]. Interval and window fractions resolve through a
    floor, so their gradient is identically zero.
    """
    tape = _Tape(batch, _theta_for(phi, theta), tau)
    trace, _ = tape.forward(phi)
    adj = np.zeros_like(trace)
    adj[:, 0] = 1.0
    grads = {}
    tape.backward(phi, adj, grads)
    N = len(batch)
    grads = {k: np.broadcast_to(np.asarray(v, dtype=np.float64), (N,)).copy() for k, v in grads.items()}
    return trace[:, 0], grads


def _single(S: ConfidenceSignal) -> SignalBatch:
    return SignalBatch.from_signals([S])


def robustness_at(phi, theta, S: ConfidenceSignal, t: int) -> float:
    n = len(S)
    if not 0 <= t < n:
        raise IndexError(f"step {t} outside signal of length {n}")
    return float(evaluate(phi, _single(S), theta)[0, t])


def robustness_scalar(phi, theta, S: ConfidenceSignal) -> float:
    return robustness_at(phi, theta, S, 0)


def robustness_trace(phi, theta, S: ConfidenceSignal) -> np.ndarray:
    return evaluate(phi, _single(S), theta)[0, : len(S)].copy()


def soft_robustness(phi, theta, S: ConfidenceSignal, tau: float = DEFAULT_TAU) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return float(evaluate(phi, _single(S), theta, tau)[0, 0])


def softmin(x, tau: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.min()
    return float(m - np.log(np.exp(-tau * (x - m)).sum()) / tau)


def softmax(x, tau: float) -> float:
    return -softmin(-np.asarray(x, dtype=np.float64), tau)


def inline_lifted(phi, sources):
    """Replace lifted-channel predicates by the formulas they were lifted from.

    ``(ge rK 0)`` becomes ``sources[K]`` and ``(le rK 0)`` becomes
    ``(not sources[K])``; both rewrites preserve robustness exactly.
    """
    if isinstance(phi, Pred) and phi.channel.startswith("r"):
        if phi.value != 0.0:
            raise ParamError("only zero-threshold lifted predicates can be inlined")
        src = sources[int(phi.channel[1:])]
        return src if phi.cmp == "ge" else Not(src)
    if isinstance(phi, Not):
        return Not(inline_lifted(phi.child, sources))
    if isinstance(phi, (And, Or)):
        return type(phi)(inline_lifted(phi.left, sources), inline_lifted(phi.right, sources))
    if isinstance(phi, (Always, Eventually)):
        return type(phi)(phi.a, phi.b, inline_lifted(phi.child, sources))
    return phi


def window_count(phi) -> int:
    """Number of min/max reductions (temporal operators and binary nodes)."""
    return sum(1 for _, n in iter_nodes(phi) if isinstance(n, (And, Or, Always, Eventually)))
