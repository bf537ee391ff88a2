"""STL blocks: clipped robustness, sigmoid mapping and pos/neg aggregation.

A block turns one fixed formula into a probability
``p = clip(sigmoid(alpha * clip(rho, -R, R) + beta), eps_p, 1 - eps_p)``.
Negative-polarity blocks contribute ``1 - p``; contributions are combined by
a softmax-weighted convex combination.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .errors import DegenerateData, OptError
from .patterns import PatternSet
from .stl import DEFAULT_TAU, evaluate
from .trace import ConfidenceSignal, SignalBatch, labels_of

ROBUSTNESS_CLIP = 10.0
PROB_CLIP = 1e-6
ALPHA_MAX = 10.0
BETA_MAX = 10.0


@dataclass(frozen=True)
class BlockOutput:
    rho: float
    p: float
    polarity: str
    name: str = ""

    @property
    def contribution(self) -> float:
        return self.p if self.polarity == "pos" else 1.0 - self.p


def map_probability(rho, alpha, beta):
    z = alpha * np.clip(rho, -ROBUSTNESS_CLIP, ROBUSTNESS_CLIP) + beta
    return np.clip(expit(z), PROB_CLIP, 1.0 - PROB_CLIP)


def _as_batch(x) -> SignalBatch:
    if isinstance(x, SignalBatch):
        return x
    if isinstance(x, ConfidenceSignal):
        return SignalBatch.from_signals([x])
    return SignalBatch.from_instances(x)


def block_robustness(pattern, batch: SignalBatch, tau=None) -> np.ndarray:
    return evaluate(pattern.formula, batch, None, tau)[:, 0]


def block_score(pattern, S: ConfidenceSignal, semantics="hard") -> BlockOutput:
    """Score one signal with one block; ``semantics`` is "hard" or a tau."""
    tau = None if semantics == "hard" else float(semantics)
    rho = float(block_robustness(pattern, SignalBatch.from_signals([S]), tau)[0])
    p = float(map_probability(rho, pattern.alpha, pattern.beta))
    return BlockOutput(rho, p, pattern.polarity, pattern.name)


def softmax_weights(logits) -> np.ndarray:
    w = np.asarray(logits, dtype=np.float64)
    e = np.exp(w - w.max())
    return e / e.sum()


def aggregate(blocks, weights=None) -> float:
    if not blocks:
        raise DegenerateData("cannot aggregate zero blocks")
    contrib = np.array([b.contribution for b in blocks])
    pi = softmax_weights(np.zeros(len(blocks)) if weights is None else weights)
    return float(pi @ contrib)


def contributions(P, polarities) -> np.ndarray:
    neg = np.asarray([pol == "neg" for pol in polarities])
    return np.where(neg[None, :], 1.0 - P, P)


def block_matrix(ps: PatternSet, batch: SignalBatch, tau=None):
    """Robustness and probability matrices of shape (N, K)."""
    rho = np.column_stack([block_robustness(p, batch, tau) for p in ps.patterns])
    alpha = np.array([p.alpha for p in ps.patterns])
    beta = np.array([p.beta for p in ps.patterns])
    return rho, map_probability(rho, alpha[None, :], beta[None, :])


def predict(ps: PatternSet, data, semantics="hard"):
    """Return ``(P_hat, rho, p)`` for every instance in ``data``."""
    batch = _as_batch(data)
    tau = None if semantics == "hard" else float(semantics)
    rho, P = block_matrix(ps, batch, tau)
    C = contributions(P, [p.polarity for p in ps.patterns])
    return C @ softmax_weights(ps.weights), rho, P


def ave_logit_baseline(instance) -> float:
    signal = instance.signal if hasattr(instance, "signal") else instance
    return float(np.mean(signal.values))


# ---------------------------------------------------------------------------
# fitting


def binary_nll(P, y) -> float:
    P = np.clip(P, 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(P) + (1 - y) * np.log(1 - P)))


def fit_logistic(x, y, bias=True, iters=25):
    """Fit ``sigmoid(alpha*x + beta)`` to labels ``y`` by projected Newton.

    ``x`` may be 1-D (one problem) or 2-D ``(G, N)`` (G independent
    problems solved together). ``alpha`` is kept in ``(0, ALPHA_MAX]`` and
    ``beta`` in ``[-BETA_MAX, BETA_MAX]``; ``bias=False`` pins ``beta`` to 0.
    Returns ``(alpha, beta, nll)`` with the same leading shape as ``x``.
    """
    X = np.atleast_2d(np.clip(np.asarray(x, dtype=np.float64), -ROBUSTNESS_CLIP, ROBUSTNESS_CLIP))
    y = np.asarray(y, dtype=np.float64)[None, :]
    G = X.shape[0]
    a = np.ones(G)
    b = np.zeros(G)

    def loss(a, b):
        z = a[:, None] * X + b[:, None]
        return np.mean(np.logaddexp(0.0, z) - y * z, axis=1)

    cur = loss(a, b)
    for _ in range(iters):
        z = a[:, None] * X + b[:, None]
        s = expit(z)
        r = s - y
        h = s * (1 - s)
        ga = np.mean(r * X, axis=1)
        haa = np.mean(h * X * X, axis=1) + 1e-9
        if bias:
            gb = np.mean(r, axis=1)
            hbb = np.mean(h, axis=1) + 1e-9
            hab = np.mean(h * X, axis=1)
            det = haa * hbb - hab * hab
            det = np.where(np.abs(det) < 1e-15, 1e-15, det)
            da = (hbb * ga - hab * gb) / det
            db = (haa * gb - hab * ga) / det
        else:
            da = ga / haa
            db = np.zeros(G)
        step = np.ones(G)
        improved = np.zeros(G, dtype=bool)
        na, nb = a, b
        for _ in range(8):
            ta = np.clip(a - step * da, 1e-6, ALPHA_MAX)
            tb = np.clip(b - step * db, -BETA_MAX, BETA_MAX) if bias else b
            new = loss(ta, tb)
            ok = (new < cur) & ~improved
            na = np.where(ok, ta, na)
            nb = np.where(ok, tb, nb)
            cur = np.where(ok, new, cur)
            improved |= ok
            if improved.all():
                break
            step = step / 2
        if not improved.any():
            break
        a, b = na, nb
    if np.asarray(x).ndim == 1:
        return float(a[0]), float(b[0]), float(cur[0])
    return a, b, cur


def _adam(params, grad_fn, lr, epochs, loss_fn):
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    best, best_loss = params.copy(), loss_fn(params)
    losses = [best_loss]
    b1, b2 = 0.9, 0.999
    for t in range(1, epochs + 1):
        g = grad_fn(params)
        if not np.all(np.isfinite(g)):
            raise OptError("non-finite gradient")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        params = params - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + 1e-8)
        cur = loss_fn(params)
        if not np.isfinite(cur):
            raise OptError("non-finite loss")
        losses.append(cur)
        if cur < best_loss:
            best, best_loss = params.copy(), cur
    return best, best_loss, losses


def _inv_alpha(alpha):
    r = np.clip(np.asarray(alpha, dtype=np.float64) / ALPHA_MAX, 1e-9, 1 - 1e-9)
    return np.log(r / (1 - r))


def mapping_loss_and_grad(params, rho, y, polarities, grad=True):
    """NLL of the aggregated prediction and its gradient.

    ``params`` packs ``[u (K), v (K), w (K)]`` with ``alpha = 10*sigmoid(u)``,
    ``beta = 10*tanh(v)`` and softmax weight logits ``w``.
    """
    N, K = rho.shape
    u, v, w = params[:K], params[K : 2 * K], params[2 * K :]
    su = expit(u)
    alpha = ALPHA_MAX * su
    tv = np.tanh(v)
    beta = BETA_MAX * tv
    rt = np.clip(rho, -ROBUSTNESS_CLIP, ROBUSTNESS_CLIP)
    z = alpha[None, :] * rt + beta[None, :]
    raw = expit(z)
    p = np.clip(raw, PROB_CLIP, 1 - PROB_CLIP)
    sign = np.where(np.asarray(polarities) == "neg", -1.0, 1.0)
    C = np.where(sign[None, :] < 0, 1 - p, p)
    pi = softmax_weights(w)
    P = C @ pi
    loss = float(-np.mean(y * np.log(P) + (1 - y) * np.log(1 - P)))
    if not grad:
        return loss
    dP = -(y / P - (1 - y) / (1 - P)) / N
    dC = dP[:, None] * pi[None, :]
    live = (raw > PROB_CLIP) & (raw < 1 - PROB_CLIP)
    dz = dC * sign[None, :] * raw * (1 - raw) * live
    dalpha = (dz * rt).sum(axis=0)
    dbeta = dz.sum(axis=0)
    du = dalpha * ALPHA_MAX * su * (1 - su)
    dv = dbeta * BETA_MAX * (1 - tv * tv)
    dpi = dP @ C
    dw = pi * (dpi - pi @ dpi)
    return loss, np.concatenate([du, dv, dw])


def fit_mapping(ps: PatternSet, data, lr=0.05, epochs=500, seed=0, tau=DEFAULT_TAU, init="unit"):
    """Refit every block's (alpha, beta) and the aggregation weights.

    Full-batch Adam on the binary NLL of the aggregated prediction, with
    robustness computed under soft semantics at temperature ``tau`` (``None``
    for hard). ``init="unit"`` starts from alpha=1, beta=0 and equal weights;
    ``init="current"`` starts from the values already in ``ps``. The returned
    set holds the best iterate, so the final NLL never exceeds the initial
    one. ``seed`` is recorded only; the procedure has no randomness.
    """
    y = labels_of(data) if not isinstance(data, tuple) else data[1]
    batch = _as_batch(data if not isinstance(data, tuple) else data[0])
    if y.min() == y.max():
        raise DegenerateData("fit_mapping needs both classes")
    K = len(ps)
    rho = np.column_stack([block_robustness(p, batch, tau) for p in ps.patterns])
    pols = [p.polarity for p in ps.patterns]
    if init == "unit":
        start = np.concatenate([_inv_alpha(np.ones(K)), np.zeros(K), np.zeros(K)])
    else:
        alpha = np.array([p.alpha for p in ps.patterns])
        beta = np.clip(np.array([p.beta for p in ps.patterns]) / BETA_MAX, -1 + 1e-9, 1 - 1e-9)
        start = np.concatenate([_inv_alpha(alpha), np.arctanh(beta), ps.weights])
    best, best_loss, losses = _adam(
        start,
        lambda q: mapping_loss_and_grad(q, rho, y, pols)[1],
        lr,
        epochs,
        lambda q: mapping_loss_and_grad(q, rho, y, pols, grad=False),
    )
    alpha = ALPHA_MAX * expit(best[:K])
    beta = BETA_MAX * np.tanh(best[K : 2 * K])
    pats = [replace(p, alpha=float(a), beta=float(b)) for p, a, b in zip(ps.patterns, alpha, beta)]
    out = ps.with_patterns(pats, weights=best[2 * K :].copy())
    prov = dict(out.provenance)
    prov["mapping"] = {"lr": lr, "epochs": epochs, "seed": seed, "tau": tau, "init": init,
                       "initial_nll": losses[0], "final_nll": best_loss}
    return replace(out, provenance=prov)
