"""Hypernetwork that predicts per-instance STL block parameters.

The structures of a mined :class:`PatternSet` stay fixed. A small MLP reads
features of the question and of the confidence signal and outputs, for every
block, every formula parameter plus ``(alpha, beta)``. Outputs are squashed
into their legal ranges by construction, including ``a <= b`` for intervals
and ``low < high`` for the threshold pair of a recovery-shaped pattern.

Interval endpoints and window fractions resolve through a floor and carry no
gradient, so training can never move them. The default initialisation
therefore starts every head at the pattern set's fitted values (zero output
weights, biases set to the inverse squash); ``init="midpoint"`` starts every
head at raw output 0 instead.

Training minimises the binary NLL of the aggregated prediction computed with
soft robustness; gradients are propagated by hand through the aggregation,
the sigmoid maps, the soft robustness tape, the output squashes and the MLP.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DegenerateData, OptError, SchemaError, StateError
from .estimator import ALPHA_MAX, BETA_MAX, PROB_CLIP, ROBUSTNESS_CLIP, contributions, map_probability, softmax_weights
from .patterns import PatternSet
from .stl import (
    DEFAULT_TAU,
    And,
    Eventually,
    Pred,
    iter_nodes,
    node_count,
    param_kind,
    parameters,
    scalar_robustness,
    soft_robustness_grad,
)
from .trace import SignalBatch, labels_of

HASH_WIDTH = 256
N_STATS = 7
RAW_CLAMP = 30.0
_TOKEN = re.compile(r"[a-z0-9]+")


# ---------------------------------------------------------------------------
# features


def _bucket(token: str):
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    v = int.from_bytes(h, "big")
    return v % HASH_WIDTH, 1.0 if (v >> 63) & 1 else -1.0


def text_features(question: str) -> np.ndarray:
    out = np.zeros(HASH_WIDTH)
    toks = _TOKEN.findall(question.lower())
    for tok in toks:
        k, sgn = _bucket(tok)
        out[k] += sgn
    if toks:
        out /= np.sqrt(len(toks))
    return out


def signal_stats(values) -> np.ndarray:
    """mean, variance, OLS slope, min, max, final value, 1/length."""
    s = np.asarray(values, dtype=np.float64)
    n = s.size
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    denom = float(tc @ tc)
    slope = float(tc @ (s - s.mean()) / denom) if denom > 0 else 0.0
    return np.array([s.mean(), s.var(), slope, s.min(), s.max(), s[-1], 1.0 / n])


def featurize(instance) -> np.ndarray:
    return np.concatenate([text_features(instance.question), signal_stats(instance.signal.values)])


def featurize_all(data) -> np.ndarray:
    return np.vstack([featurize(inst) for inst in data])


# ---------------------------------------------------------------------------
# output squashes


def _squash(kind, r):
    if kind == "mu":
        return expit(r)
    if kind == "dl":
        return np.tanh(r)
    if kind == "rt":
        return 10.0 * np.tanh(r)
    if kind == "nu":
        return 0.25 * expit(r)
    if kind in ("eps", "w"):
        return 0.5 * expit(r)
    if kind == "alpha":
        return ALPHA_MAX * expit(r)
    if kind == "beta":
        return BETA_MAX * np.tanh(r)
    raise SchemaError(f"no squash for parameter kind {kind!r}")


def _squash_grad(kind, r):
    if kind in ("mu", "nu", "eps", "w", "alpha"):
        scale = {"mu": 1.0, "nu": 0.25, "eps": 0.5, "w": 0.5, "alpha": ALPHA_MAX}[kind]
        s = expit(r)
        return scale * s * (1 - s)
    scale = {"dl": 1.0, "rt": 10.0, "beta": BETA_MAX}[kind]
    t = np.tanh(r)
    return scale * (1 - t * t)


def _logit(p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p / (1 - p))


def _unsquash(kind, x):
    x = float(x)
    if kind == "mu":
        r = _logit(x)
    elif kind == "dl":
        r = np.arctanh(np.clip(x, -1 + 1e-12, 1 - 1e-12))
    elif kind == "rt":
        r = np.arctanh(np.clip(x / 10.0, -1 + 1e-12, 1 - 1e-12))
    elif kind == "nu":
        r = _logit(x / 0.25)
    elif kind in ("eps", "w"):
        r = _logit(x / 0.5)
    elif kind == "alpha":
        r = _logit(x / ALPHA_MAX)
    elif kind == "beta":
        r = np.arctanh(np.clip(x / BETA_MAX, -1 + 1e-12, 1 - 1e-12))
    else:
        raise SchemaError(f"no squash for parameter kind {kind!r}")
    return float(np.clip(r, -RAW_CLAMP, RAW_CLAMP))


GROUP_WIDTH = {"interval": 2, "order": 3}


def _order_pairs(phi):
    """Threshold pairs ``(low, high)`` of ``F(s <= low) & F(s >= high)`` subtrees."""
    nodes = list(iter_nodes(phi))
    theta = parameters(phi)
    out = {}
    for i, node in nodes:
        if not isinstance(node, And):
            continue
        j = i + 1 + node_count(node.left)
        parts = [(i + 1, node.left, "le"), (j, node.right, "ge")]
        if all(isinstance(n, Eventually) and isinstance(n.child, Pred) and n.child.channel == "s"
               and n.child.cmp == cmp for _, n, cmp in parts):
            low, high = f"mu{i + 2}", f"mu{j + 1}"
            if theta[low] < theta[high] and low not in out and high not in out:
                out[low] = high
    return out


def output_layout(ps: PatternSet):
    """``[(block, kind, names)]`` for every output head, in column order.

    ``kind`` is a parameter kind (one raw output), ``"interval"`` (two raws
    for ``a``/``b``) or ``"order"`` (three raws for an ordered threshold
    pair).
    """
    out = []
    for k, pat in enumerate(ps.patterns):
        theta = parameters(pat.formula)
        pairs = _order_pairs(pat.formula)
        taken = set(pairs) | set(pairs.values())
        for name in theta:
            kind = param_kind(name)
            if kind == "a":
                out.append((k, "interval", (name, "b" + name[1:])))
            elif name in pairs:
                out.append((k, "order", (name, pairs[name])))
            elif kind != "b" and name not in taken:
                out.append((k, kind, (name,)))
        out.append((k, "alpha", ("alpha",)))
        out.append((k, "beta", ("beta",)))
    return out


def _width(kind):
    return GROUP_WIDTH.get(kind, 1)


def _group_values(kind, r):
    """Parameter values of one head from its raw columns ``r`` (N, width)."""
    if kind == "interval":
        a = expit(r[:, 0])
        return [a, np.minimum(a + (1 - a) * expit(r[:, 1]), 1.0)]
    if kind == "order":
        m, g, h = expit(r[:, 0]), expit(r[:, 1]), expit(r[:, 2])
        return [m * g, m + (1 - m) * h]
    return [_squash(kind, r[:, 0])]


def _group_backward(kind, r, ups):
    """Raw-column gradients of one head given upstream value gradients."""
    if kind == "interval":
        su, sv = expit(r[:, 0]), expit(r[:, 1])
        a = su
        du = su * (1 - su)
        return np.column_stack([ups[0] * du + ups[1] * (1 - sv) * du, ups[1] * (1 - a) * sv * (1 - sv)])
    if kind == "order":
        m, g, h = expit(r[:, 0]), expit(r[:, 1]), expit(r[:, 2])
        dm, dg, dh = m * (1 - m), g * (1 - g), h * (1 - h)
        return np.column_stack([ups[0] * g * dm + ups[1] * (1 - h) * dm, ups[0] * m * dg, ups[1] * (1 - m) * dh])
    return (ups[0] * _squash_grad(kind, r[:, 0]))[:, None]


def _group_raw(kind, vals):
    """Inverse of :func:`_group_values` for one instance's values."""
    if kind == "interval":
        a, b = vals
        v = _logit((b - a) / (1 - a)) if a < 1 else 0.0
        return [float(np.clip(_logit(a), -RAW_CLAMP, RAW_CLAMP)), float(np.clip(v, -RAW_CLAMP, RAW_CLAMP))]
    if kind == "order":
        low, high = vals
        m = (low + high) / 2
        g, h = low / m, (high - m) / (1 - m)
        return [float(np.clip(_logit(x), -RAW_CLAMP, RAW_CLAMP)) for x in (m, g, h)]
    return [_unsquash(kind, vals[0])]


# ---------------------------------------------------------------------------
# model


@dataclass
class HyperModel:
    W: list  # [W1, W2, W3]
    b: list  # [b1, b2, b3]
    g: np.ndarray  # aggregation logits
    layout: list
    pattern_hash: str
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, ps: PatternSet, hidden=64, seed=0, init="fitted") -> "HyperModel":
        if init not in ("fitted", "midpoint"):
            raise ValueError("init must be 'fitted' or 'midpoint'")
        rng = np.random.default_rng(seed)
        layout = output_layout(ps)
        d_in = HASH_WIDTH + N_STATS
        W1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), (hidden, d_in))
        W2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden))
        n_out = sum(_width(kind) for _, kind, _ in layout)
        W3 = np.zeros((n_out, hidden))
        b3 = np.zeros(n_out)
        if init == "fitted":
            for k, kind, names, cols in _columns(layout):
                pat = ps.patterns[k]
                theta = dict(parameters(pat.formula), alpha=pat.alpha, beta=pat.beta)
                b3[cols] = _group_raw(kind, [theta[n] for n in names])
        cfg = {"hidden": hidden, "seed": seed, "init": init}
        g = np.asarray(ps.weights, dtype=np.float64).copy() if init == "fitted" else np.zeros(len(ps))
        return cls([W1, W2, W3], [np.zeros(hidden), np.zeros(hidden), b3], g, layout, ps.content_hash(), cfg)

    # -- flat parameter vector, used by the optimiser and the gradient check
    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.W] + [v.ravel() for v in self.b] + [self.g])

    def set_flat(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        pos = 0
        for arrs in (self.W, self.b):
            for i, a in enumerate(arrs):
                arrs[i] = x[pos : pos + a.size].reshape(a.shape).copy()
                pos += a.size
        self.g = x[pos : pos + self.g.size].copy()

    def raw_outputs(self, X):
        h1 = np.tanh(X @ self.W[0].T + self.b[0])
        h2 = np.tanh(h1 @ self.W[1].T + self.b[1])
        return h2 @ self.W[2].T + self.b[2], (h1, h2)

    def check_bound(self, ps: PatternSet) -> None:
        if ps.content_hash() != self.pattern_hash:
            raise StateError("hypernetwork was trained for a different pattern set")

    # -- persistence
    def to_dict(self) -> dict:
        return {
            "W": [w.tolist() for w in self.W],
            "b": [v.tolist() for v in self.b],
            "g": self.g.tolist(),
            "layout": [[k, kind, list(names)] for k, kind, names in self.layout],
            "feature_width": HASH_WIDTH + N_STATS,
            "hidden": [int(v.size) for v in self.b[:2]],
            "pattern_hash": self.pattern_hash,
            "config": self.config,
            "history": [float(x) for x in self.history],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "HyperModel":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
            if d.get("feature_width", HASH_WIDTH + N_STATS) != HASH_WIDTH + N_STATS:
                raise SchemaError(f"feature width {d['feature_width']} != {HASH_WIDTH + N_STATS}")
            return cls(
                [np.array(w, dtype=np.float64) for w in d["W"]],
                [np.array(v, dtype=np.float64) for v in d["b"]],
                np.array(d["g"], dtype=np.float64),
                [(int(k), str(kind), tuple(str(n) for n in names)) for k, kind, names in d["layout"]],
                d["pattern_hash"],
                d.get("config", {}),
                d.get("history", []),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed hypernetwork file: {exc}") from exc


def _columns(layout):
    """Yield ``(block, kind, names, slice)`` with each head's raw columns."""
    pos = 0
    for k, kind, names in layout:
        w = _width(kind)
        yield k, kind, names, slice(pos, pos + w)
        pos += w


def _block_thetas(model: HyperModel, ps: PatternSet, raw):
    """Per-block parameter dicts of per-row arrays, plus alpha and beta."""
    r = np.clip(raw, -RAW_CLAMP, RAW_CLAMP)
    thetas = [dict(parameters(p.formula)) for p in ps.patterns]
    alpha = [None] * len(ps)
    beta = [None] * len(ps)
    for k, kind, names, cols in _columns(model.layout):
        for name, v in zip(names, _group_values(kind, r[:, cols])):
            if name == "alpha":
                alpha[k] = v
            elif name == "beta":
                beta[k] = v
            else:
                thetas[k][name] = v
    return thetas, alpha, beta


def predict_params(model: HyperModel, ps: PatternSet, data):
    """Per-instance parameters: list (one per block) of ``{name: (N,)}``.

    ``alpha`` and ``beta`` are included in each dict.
    """
    model.check_bound(ps)
    raw, _ = model.raw_outputs(featurize_all(data))
    thetas, alpha, beta = _block_thetas(model, ps, raw)
    N = len(data)
    out = []
    for th, a, b in zip(thetas, alpha, beta):
        d = {k: np.broadcast_to(np.asarray(v, dtype=np.float64), (N,)).copy() for k, v in th.items()}
        d["alpha"], d["beta"] = a, b
        out.append(d)
    return out


def predict_with_hyper(model: HyperModel, ps: PatternSet, data, semantics="hard"):
    """Return ``(P_hat, rho, P)`` with per-instance parameters."""
    model.check_bound(ps)
    raw, _ = model.raw_outputs(featurize_all(data))
    thetas, alpha, beta = _block_thetas(model, ps, raw)
    batch = SignalBatch.from_instances(data)
    tau = None if semantics == "hard" else float(semantics)
    rho = np.column_stack([scalar_robustness(p.formula, batch, th, tau) for p, th in zip(ps.patterns, thetas)])
    P = map_probability(rho, np.column_stack(alpha), np.column_stack(beta))
    C = contributions(P, [p.polarity for p in ps.patterns])
    return C @ softmax_weights(model.g), rho, P


# ---------------------------------------------------------------------------
# loss and gradient


def loss_and_grad(model: HyperModel, ps: PatternSet, X, batch: SignalBatch, y, tau=DEFAULT_TAU, grad=True):
    """Soft-semantics NLL and its gradient w.r.t. ``model.flat()``."""
    raw_full, (h1, h2) = model.raw_outputs(X)
    thetas, alpha, beta = _block_thetas(model, ps, raw_full)
    N, K = len(y), len(ps)
    rho = np.empty((N, K))
    drho = []
    for k, (pat, th) in enumerate(zip(ps.patterns, thetas)):
        if grad:
            rho[:, k], gk = soft_robustness_grad(pat.formula, batch, th, tau)
            drho.append(gk)
        else:
            rho[:, k] = scalar_robustness(pat.formula, batch, th, tau)
    A, B = np.column_stack(alpha), np.column_stack(beta)
    rc = np.clip(rho, -ROBUSTNESS_CLIP, ROBUSTNESS_CLIP)
    z = A * rc + B
    raw_p = expit(z)
    p = np.clip(raw_p, PROB_CLIP, 1 - PROB_CLIP)
    sign = np.where(np.array([q.polarity for q in ps.patterns]) == "neg", -1.0, 1.0)
    C = np.where(sign[None, :] < 0, 1 - p, p)
    pi = softmax_weights(model.g)
    P = C @ pi
    loss = float(-np.mean(y * np.log(P) + (1 - y) * np.log(1 - P)))
    if not np.isfinite(loss):
        raise OptError("non-finite hypernetwork loss")
    if not grad:
        return loss
    dP = -(y / P - (1 - y) / (1 - P)) / N
    dpi = dP @ C
    dg = pi * (dpi - pi @ dpi)
    live = (raw_p > PROB_CLIP) & (raw_p < 1 - PROB_CLIP)
    dz = dP[:, None] * pi[None, :] * sign[None, :] * raw_p * (1 - raw_p) * live
    dA = dz * rc
    dB = dz
    drho_k = dz * A * (np.abs(rho) < ROBUSTNESS_CLIP)
    r = raw_full
    dr = np.zeros_like(r)
    for k, kind, names, cols in _columns(model.layout):
        ups = []
        for name in names:
            if name == "alpha":
                ups.append(dA[:, k])
            elif name == "beta":
                ups.append(dB[:, k])
            else:
                ups.append(drho_k[:, k] * drho[k].get(name, 0.0))
        inside = np.abs(r[:, cols]) < RAW_CLAMP
        dr[:, cols] = _group_backward(kind, np.clip(r[:, cols], -RAW_CLAMP, RAW_CLAMP), ups) * inside
    dW3 = dr.T @ h2
    db3 = dr.sum(axis=0)
    da2 = (dr @ model.W[2]) * (1 - h2 * h2)
    dW2 = da2.T @ h1
    db2 = da2.sum(axis=0)
    da1 = (da2 @ model.W[1]) * (1 - h1 * h1)
    dW1 = da1.T @ X
    db1 = da1.sum(axis=0)
    flat = np.concatenate([dW1.ravel(), dW2.ravel(), dW3.ravel(), db1, db2, db3, dg])
    return loss, flat


# ---------------------------------------------------------------------------
# training


def _decay_mask(model: HyperModel) -> np.ndarray:
    """1 on weight matrices, 0 on biases and aggregation logits."""
    return np.concatenate([np.ones(w.size) for w in model.W] + [np.zeros(v.size) for v in model.b] + [np.zeros(model.g.size)])


def train_hyper(ps: PatternSet, data, lr=0.01, epochs=60, batch=64, seed=0, tau=DEFAULT_TAU,
                hidden=64, init="fitted", weight_decay=1e-3) -> HyperModel:
    """Minibatch Adam on the soft NLL; keeps the epoch with the best full-data NLL.

    ``weight_decay`` adds an L2 penalty on the weight matrices to each step
    (not to the selection criterion): without it the network drives the
    training NLL to ~0 by saturating alpha and loses calibration on new data.

    Epoch 0 is the initial model, so with ``init="fitted"`` the result is
    never worse (on the training data) than the fixed pattern set.
    """
    y = labels_of(data)
    if y.size == 0 or y.min() == y.max():
        raise DegenerateData("hypernetwork training needs both classes")
    if batch < 1 or epochs < 0 or lr <= 0:
        raise ValueError("batch >= 1, epochs >= 0 and lr > 0 required")
    model = HyperModel.init(ps, hidden=hidden, seed=seed, init=init)
    model.config.update({"lr": lr, "epochs": epochs, "batch": batch, "tau": tau, "weight_decay": weight_decay})
    X = featurize_all(data)
    full = SignalBatch.from_instances(data)
    rng = np.random.default_rng(seed)
    params = model.flat()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    best, best_loss = params.copy(), loss_and_grad(model, ps, X, full, y, tau, grad=False)
    history = [best_loss]
    t = 0
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch):
            idx = np.sort(order[start : start + batch])
            _, gr = loss_and_grad(model, ps, X[idx], full.take(idx), y[idx], tau)
            if not np.all(np.isfinite(gr)):
                raise OptError("non-finite hypernetwork gradient")
            if weight_decay:
                gr = gr + weight_decay * _decay_mask(model) * params
            t += 1
            m = 0.9 * m + 0.1 * gr
            v = 0.999 * v + 0.001 * gr * gr
            params = params - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            model.set_flat(params)
        cur = loss_and_grad(model, ps, X, full, y, tau, grad=False)
        history.append(cur)
        if cur < best_loss:
            best, best_loss = params.copy(), cur
    model.set_flat(best)
    model.history = history
    return model
