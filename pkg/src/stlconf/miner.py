"""Discriminative STL mining and the analyses built on mined pattern sets.

Mining runs in four stages:

1. every catalog template is fitted to the data (coarse grid, then
   Nelder-Mead) under the NLL of its polarity;
2. the top-K fitted templates of each polarity are lifted into extra signal
   channels holding their robustness traces;
3. candidates are composed from the lifted channels (temporal nesting) and
   from pairs of fitted templates (conjunction/disjunction), then refitted;
4. a greedy forward selection picks ``n_pos`` positive and ``n_neg``
   negative patterns that minimise the validation NLL of the aggregated
   ensemble.

Threshold-type parameters are fitted with the logit ``alpha * rho`` (no
bias): a free bias would absorb any shift of a single threshold and leave it
unidentified. The block mapping ``(alpha, beta)`` is refitted with bias once
the parameters are fixed.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .catalog import WINDOW_GRID, list_templates
from .errors import DegenerateData, OptError
from .estimator import fit_logistic, map_probability, softmax_weights
from .patterns import FittedPattern, PatternSet
from .stl import (
    Always,
    And,
    Eventually,
    Or,
    Pred,
    canonical_skeleton,
    format_formula,
    inline_lifted,
    node_count,
    param_kind,
    parameters,
    scalar_robustness,
    evaluate,
)
from .trace import SignalBatch, labels_of

NESTED_INTERVALS = ((0.0, 1.0), (0.0, 0.5), (0.5, 1.0), (0.0, 0.25), (0.75, 1.0), (0.25, 0.75))
PARAM_GROUPS = {
    "a": "time",
    "b": "time",
    "w": "time",
    "mu": "threshold",
    "nu": "threshold",
    "rt": "threshold",
    "eps": "difference",
    "dl": "difference",
}


@dataclass
class MineConfig:
    n_pos: int = 5
    n_neg: int = 5
    K: int = 8
    seed: int = 0
    val_fraction: float = 0.2
    max_evals: int = 200

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _norm_polarity(p: str) -> str:
    if p in ("pos", "positive"):
        return "pos"
    if p in ("neg", "negative"):
        return "neg"
    raise ValueError(f"unknown polarity {p!r}")


def split_indices(n: int, val_fraction: float, seed: int):
    """Seeded shuffle; the last ``val_fraction`` of it is the validation part."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction)) if val_fraction > 0 else 0
    n_val = min(max(n_val, 1 if val_fraction > 0 else 0), n - 1)
    return np.sort(perm[: n - n_val]), np.sort(perm[n - n_val :])


def dataset_id(data) -> str:
    h = hashlib.sha256()
    for inst in data:
        h.update(inst.id.encode())
        h.update(np.asarray(inst.signal.values).tobytes())
        h.update(bytes([inst.label]))
    return h.hexdigest()[:16]


class _Split:
    """Train/validation batches and the target labels of one polarity."""

    def __init__(self, train: SignalBatch, y_train, val: SignalBatch, y_val):
        self.train, self.val = train, val
        self.y_train = np.asarray(y_train, dtype=np.float64)
        self.y_val = np.asarray(y_val, dtype=np.float64)

    def target(self, polarity):
        if polarity == "pos":
            return self.y_train, self.y_val
        return 1.0 - self.y_train, 1.0 - self.y_val


def _check_both_classes(y):
    if y.size == 0 or y.min() == y.max():
        raise DegenerateData("data must contain both correct and incorrect instances")


def _nll(rho, y, alpha, beta):
    p = np.clip(map_probability(rho, alpha, beta), 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


# ---------------------------------------------------------------------------
# parameter grids


def _grids(batch: SignalBatch):
    mask = batch.mask()
    pooled = batch.values[mask]
    deciles = np.unique(np.quantile(pooled, np.linspace(0.1, 0.9, 9)))
    dmask = mask.copy()
    dmask[:, 0] = False
    absd = np.abs(batch.diff[dmask]) if dmask.any() else np.zeros(1)
    margins = np.unique(np.clip(np.concatenate([[0.0], np.quantile(absd, np.linspace(0.1, 0.9, 9))]), 0.0, 0.5))
    n = batch.lengths.astype(np.float64)
    mean = (batch.values * mask).sum(axis=1) / n
    var = (((batch.values - mean[:, None]) ** 2) * mask).sum(axis=1) / n
    variances = np.unique(np.clip(np.quantile(var, np.linspace(0.1, 0.9, 9)), 0.0, 0.25))
    return {
        "threshold": [float(x) for x in deciles],
        "margin": [float(x) for x in margins],
        "variance": [float(x) for x in variances],
        "window": list(WINDOW_GRID),
    }


# ---------------------------------------------------------------------------
# single-formula fitting


class _FormulaFit:
    """Fit the free parameters of ``builder`` under one polarity's NLL."""

    def __init__(self, builder, names, bounds, split: _Split, polarity, max_evals, constraint=None):
        self.builder = builder
        self.names = names
        self.bounds = bounds
        self.split = split
        self.polarity = polarity
        self.max_evals = max_evals
        self.constraint = constraint
        self.y, self.y_val = split.target(polarity)
        self.seen = {}

    def _key(self, x):
        return tuple(float(v) for v in x)

    def _formula(self, x):
        return self.builder(**dict(zip(self.names, x)))

    def score_many(self, points):
        fresh = [p for p in points if self._key(p) not in self.seen]
        if fresh:
            phis = [self._formula(p) for p in fresh]
            rho = np.vstack([scalar_robustness(phi, self.split.train) for phi in phis])
            _, _, losses = fit_logistic(rho, self.y, bias=False)
            for p, phi, loss in zip(fresh, phis, losses):
                self.seen[self._key(p)] = (float(loss), phi)
        return [self.seen[self._key(p)][0] for p in points]

    def score(self, x):
        x = np.clip(np.asarray(x, dtype=np.float64), [b[0] for b in self.bounds], [b[1] for b in self.bounds])
        if self.constraint is not None and not self.constraint(dict(zip(self.names, x))):
            return 10.0
        return self.score_many([x])[0]

    def run(self, grid_points):
        grid_points = [p for p in grid_points if self.constraint is None or self.constraint(dict(zip(self.names, p)))]
        if not grid_points:
            raise OptError("empty parameter grid")
        losses = self.score_many(grid_points)
        if self.names and self.max_evals > 0:
            best = grid_points[int(np.argmin(losses))]
            minimize(
                self.score,
                np.asarray(best, dtype=np.float64),
                method="Nelder-Mead",
                bounds=self.bounds,
                options={"maxfev": self.max_evals, "xatol": 1e-4, "fatol": 1e-9},
            )
        ranked = sorted(
            self.seen.values(),
            key=lambda lp: (round(lp[0], 12), node_count(lp[1]), format_formula(lp[1])),
        )
        loss, phi = ranked[0]
        if not math.isfinite(loss):
            raise OptError("non-finite loss")
        return phi


def _finish(name, phi, polarity, split: _Split):
    y, y_val = split.target(polarity)
    rho = scalar_robustness(phi, split.train)
    alpha, beta, train_loss = fit_logistic(rho, y, bias=True)
    if not math.isfinite(train_loss):
        raise OptError("non-finite loss")
    val_loss = _nll(scalar_robustness(phi, split.val), y_val, alpha, beta) if len(split.val) else float("nan")
    return FittedPattern(name, phi, polarity, alpha, beta, train_loss, val_loss)


def _template_fit(spec, split: _Split, polarity, max_evals, grids):
    names = [p.name for p in spec.params]
    bounds = [(max(p.lo, 1e-3) if p.grid == "window" else p.lo, p.hi) for p in spec.params]
    axes = [grids[p.grid] for p in spec.params]
    points = [tuple(pt) for pt in itertools.product(*axes)]
    constraint = (lambda d: d["mu_low"] < d["mu_high"]) if "mu_low" in names else None
    fit = _FormulaFit(spec.builder, names, bounds, split, polarity, max_evals, constraint)
    phi = fit.run(points)
    return _finish(spec.name, phi, polarity, split)


def _make_split(data, val_fraction, seed) -> _Split:
    y = labels_of(data)
    _check_both_classes(y)
    if val_fraction > 0:
        tr, va = split_indices(len(data), val_fraction, seed)
    else:
        tr, va = np.arange(len(data)), np.arange(0)
    batch = SignalBatch.from_instances(data)
    val = batch.take(va) if va.size else batch.take(tr[:1])
    split = _Split(batch.take(tr), y[tr], val, y[va] if va.size else y[tr[:1]])
    if not va.size:
        split.val = SignalBatch(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0, dtype=np.int64))
        split.y_val = np.zeros(0)
    _check_both_classes(split.y_train)
    return split


def fit_template(spec, data, objective="pos", seed=0, val_fraction=0.2, max_evals=200) -> FittedPattern:
    """Fit one template's parameters by grid search plus Nelder-Mead refinement.

    ``objective`` selects the NLL: ``"pos"`` targets correctness, ``"neg"``
    targets incorrectness (labels inverted). The returned pattern carries the
    train NLL and the NLL on the seeded validation split.
    """
    split = _make_split(data, val_fraction, seed)
    return _template_fit(spec, split, _norm_polarity(objective), max_evals, _grids(split.train))


# ---------------------------------------------------------------------------
# lifting and composition


def lift_batch(batch: SignalBatch, patterns) -> SignalBatch:
    return batch.with_lifted([evaluate(p.formula, batch) for p in patterns])


def lift_signals(data, patterns):
    """Return instances whose signals carry one robustness channel per pattern."""
    from dataclasses import replace as _replace

    from .stl import robustness_trace

    out = []
    for inst in data:
        chans = [robustness_trace(p.formula, None, inst.signal) for p in patterns]
        out.append(_replace(inst, signal=inst.signal.with_lifted(chans)))
    return out


@dataclass(frozen=True)
class Candidate:
    name: str
    polarity: str
    builder: object  # callable(**free) -> Formula over lifted channels
    free: tuple  # names of free parameters
    sources: tuple  # lifted channel index -> source pattern


def compose_candidates(fitted, K: int, channel_offset: int = 0):
    """Composed candidates from the first ``K`` fitted patterns of one polarity.

    ``fitted[j]`` is assumed to be lifted into channel ``channel_offset + j``.
    Yields temporal nestings G/F over the satisfied (``r >= 0``) and violated
    (``r <= 0``) predicates of each pattern, and the pairwise conjunctions and
    disjunctions of distinct patterns.
    """
    if K < 1:
        raise ValueError("beam width K must be >= 1")
    top = list(fitted)[:K]
    out = []
    for j, pat in enumerate(top):
        ch = f"r{channel_offset + j}"
        for op, opname in ((Always, "G"), (Eventually, "F")):
            for cmp, sign in (("ge", "+"), ("le", "-")):
                def build(a, b, op=op, ch=ch, cmp=cmp):
                    return op(a, b, Pred(ch, cmp, 0.0))

                out.append(Candidate(f"{opname}[{pat.name}{sign}]", pat.polarity, build, ("a", "b"), ()))
    for i, j in itertools.combinations(range(len(top)), 2):
        for op, sym in ((And, "&"), (Or, "|")):
            left, right = top[i].formula, top[j].formula

            def build(op=op, left=left, right=right):
                return op(left, right)

            out.append(Candidate(f"{top[i].name}{sym}{top[j].name}", top[i].polarity, build, (), ()))
    return out


def _fit_candidate(cand: Candidate, split: _Split, max_evals, sources):
    if cand.free:
        constraint = lambda d: d["a"] <= d["b"]  # noqa: E731
        fit = _FormulaFit(cand.builder, list(cand.free), [(0.0, 1.0), (0.0, 1.0)], split, cand.polarity, max_evals, constraint)
        phi = fit.run(list(NESTED_INTERVALS))
    else:
        phi = cand.builder()
    pat = _finish(cand.name, phi, cand.polarity, split)
    return replace(pat, formula=inline_lifted(pat.formula, sources))


# ---------------------------------------------------------------------------
# greedy ensemble selection


def _ensemble_nll(w, C, y):
    pi = softmax_weights(w)
    P = np.clip(C @ pi, 1e-12, 1 - 1e-12)
    loss = -np.mean(y * np.log(P) + (1 - y) * np.log(1 - P))
    dP = -(y / P - (1 - y) / (1 - P)) / y.size
    dpi = dP @ C
    return float(loss), pi * (dpi - pi @ dpi)


def _optimise_weights(C, y, w):
    """Fit logits for ``C``'s columns; the last column is the newcomer.

    The warm start gives the newcomer a negligible weight, so the result is
    never worse than the previous ensemble. A second start mixes it in at
    weight ``1/k`` because the warm start sits on a flat region.
    """
    if C.shape[1] == 1:
        return np.zeros(1), _ensemble_nll(np.zeros(1), C, y)[0]
    lse = float(np.log(np.exp(w - w.max()).sum()) + w.max())
    starts = [np.append(w, w.min() - 50.0), np.append(w, lse - np.log(w.size))]
    best_w, best = starts[0], _ensemble_nll(starts[0], C, y)[0]
    for w0 in starts:
        res = minimize(_ensemble_nll, w0, args=(C, y), jac=True, method="L-BFGS-B", options={"maxiter": 100})
        if res.fun < best:
            best_w, best = res.x, float(res.fun)
    return best_w, best


def greedy_select(candidates, C_val, y_val, n_pos, n_neg):
    """Forward selection over columns of ``C_val`` (contributions per candidate).

    Returns ``(indices, logits, trace)`` where ``trace[k]`` is the ensemble
    validation NLL after ``k+1`` picks; it never increases.
    """
    quota = {"pos": n_pos, "neg": n_neg}
    chosen, w, trace = [], np.zeros(0), []
    order = sorted(range(len(candidates)), key=lambda j: (node_count(candidates[j].formula), candidates[j].text))
    while True:
        best = None
        for j in order:
            if j in chosen or quota[candidates[j].polarity] <= 0:
                continue
            wj, loss = _optimise_weights(C_val[:, chosen + [j]], y_val, w)
            if best is None or loss < best[0] - 1e-12:
                best = (loss, j, wj)
        if best is None:
            break
        loss, j, w = best
        if trace and loss > trace[-1]:
            loss = trace[-1]
        chosen.append(j)
        quota[candidates[j].polarity] -= 1
        trace.append(loss)
    return chosen, w, trace


def _contribution(pat: FittedPattern, batch: SignalBatch):
    p = map_probability(scalar_robustness(pat.formula, batch), pat.alpha, pat.beta)
    return p if pat.polarity == "pos" else 1.0 - p


def mine(data, config: MineConfig = None, **overrides) -> PatternSet:
    cfg = replace(config or MineConfig(), **overrides)
    if cfg.n_pos < 0 or cfg.n_neg < 0 or cfg.n_pos + cfg.n_neg == 0:
        raise ValueError("n_pos and n_neg must be >= 0 and not both 0")
    split = _make_split(data, cfg.val_fraction, cfg.seed)
    grids = _grids(split.train)

    base = {"pos": [], "neg": []}
    for spec in list_templates():
        pol = _norm_polarity(spec.polarity)
        base[pol].append(_template_fit(spec, split, pol, cfg.max_evals, grids))

    tops = {
        pol: sorted(base[pol], key=lambda p: (round(p.train_loss, 12), node_count(p.formula), p.text))[: cfg.K]
        for pol in ("pos", "neg")
    }
    lifted_patterns = tops["pos"] + tops["neg"]
    sources = [p.formula for p in lifted_patterns]
    lifted = _Split(lift_batch(split.train, lifted_patterns), split.y_train,
                    lift_batch(split.val, lifted_patterns), split.y_val)

    pool = base["pos"] + base["neg"]
    offset = {"pos": 0, "neg": len(tops["pos"])}
    for pol in ("pos", "neg"):
        for cand in compose_candidates(tops[pol], cfg.K, offset[pol]):
            pool.append(_fit_candidate(cand, lifted, cfg.max_evals, sources))

    seen, unique = set(), []
    for pat in pool:
        key = (pat.polarity, pat.text)
        if key not in seen:
            seen.add(key)
            unique.append(pat)

    C_val = np.column_stack([_contribution(p, split.val) for p in unique])
    chosen, logits, trace = greedy_select(unique, C_val, split.y_val, cfg.n_pos, cfg.n_neg)
    picked = [(unique[j], logits[k]) for k, j in enumerate(chosen)]
    pos = [(p, w) for p, w in picked if p.polarity == "pos"]
    neg = [(p, w) for p, w in picked if p.polarity == "neg"]
    weights = np.array([w for _, w in pos] + [w for _, w in neg], dtype=np.float64)
    weights = weights - weights.max() if weights.size else weights
    provenance = {
        "dataset": dataset_id(data),
        "config_hash": cfg.hash(),
        "n_candidates": len(unique),
        "selection_nll": [float(x) for x in trace],
        "val_nll": float(trace[-1]) if trace else float("nan"),
    }
    return PatternSet(tuple(p for p, _ in pos), tuple(p for p, _ in neg), weights, cfg.seed, asdict(cfg), provenance)


# ---------------------------------------------------------------------------
# analyses


def jaccard_similarity(A: PatternSet, B: PatternSet, polarity="neg") -> float:
    pol = _norm_polarity(polarity)
    sa, sb = A.skeletons(pol), B.skeletons(pol)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def jaccard_from_skeletons(sa, sb) -> float:
    sa, sb = set(sa), set(sb)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def param_group(name: str):
    return PARAM_GROUPS.get(param_kind(name.rsplit(".", 1)[-1]))


def param_variability(vectors, grouping: str) -> float:
    """Mean absolute pairwise difference of the parameters in one group.

    The mean runs over unordered pairs of vectors and over the group's
    parameters shared by all vectors.
    """
    if grouping not in ("time", "threshold", "difference"):
        raise ValueError(f"unknown grouping {grouping!r}")
    vectors = list(vectors)
    if len(vectors) < 2:
        raise DegenerateData("need at least two parameter vectors")
    names = [k for k in vectors[0] if param_group(k) == grouping and all(k in v for v in vectors)]
    if not names:
        raise DegenerateData(f"no {grouping} parameters shared by all vectors")
    diffs = [
        abs(float(p[k]) - float(q[k]))
        for p, q in itertools.combinations(vectors, 2)
        for k in names
    ]
    return float(np.mean(diffs))


def flatten_params(ps: PatternSet) -> dict:
    out = {}
    for pol, pats in (("pos", ps.pos), ("neg", ps.neg)):
        for k, p in enumerate(pats):
            for name, v in parameters(p.formula).items():
                out[f"{pol}{k}.{name}"] = v
    return out


def skeleton_of(text_or_formula) -> str:
    if isinstance(text_or_formula, str):
        from .stl import parse_formula

        return canonical_skeleton(parse_formula(text_or_formula)[0])
    return canonical_skeleton(text_or_formula)
