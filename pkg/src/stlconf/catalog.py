"""Primitive template library and atomic predicate set that seed mining."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ParamError
from .stl import Always, Eventually, And, Gain, Loss, Pred, VarLe, check_formula

WINDOW_GRID = (0.1, 0.25, 0.5)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    lo: float
    hi: float
    grid: str  # "threshold", "window", "margin", "variance"


@dataclass(frozen=True)
class TemplateSpec:
    name: str
    polarity: str
    params: tuple
    builder: Callable
    text: str

    def build(self, theta: dict):
        for p in self.params:
            if p.name not in theta:
                raise ParamError(f"{self.name} needs parameter {p.name!r}")
            v = float(theta[p.name])
            if not (p.lo <= v <= p.hi) or (p.grid == "window" and v <= 0.0):
                raise ParamError(f"{self.name}: {p.name}={v} outside [{p.lo}, {p.hi}]")
        phi = self.builder(**{p.name: float(theta[p.name]) for p in self.params})
        check_formula(phi)
        return phi

    def midpoint(self) -> dict:
        mid = {p.name: (p.lo + p.hi) / 2 for p in self.params}
        if "mu_low" in mid:
            mid["mu_low"], mid["mu_high"] = 0.25, 0.75
        return mid


def _mu():
    return ParamSpec("mu", 0.0, 1.0, "threshold")


def _k():
    return ParamSpec("k", 0.0, 0.5, "window")


def _eps():
    return ParamSpec("eps", 0.0, 0.5, "margin")


def _recovery(mu_low, mu_high):
    if not mu_low < mu_high:
        raise ParamError(f"Recovery needs mu_low < mu_high, got {mu_low} >= {mu_high}")
    return And(Eventually(0.0, 1.0, Pred("s", "le", mu_low)), Eventually(0.0, 1.0, Pred("s", "ge", mu_high)))


_TEMPLATES = (
    TemplateSpec("WeakestLink", "positive", (_mu(),),
                 lambda mu: Always(0.0, 1.0, Pred("s", "ge", mu)), "G[0,T](s >= mu)"),
    TemplateSpec("EndHigh", "positive", (_k(), _mu()),
                 lambda k, mu: Always(1.0 - k, 1.0, Pred("s", "ge", mu)), "G[T-k,T](s >= mu)"),
    TemplateSpec("StartHigh", "positive", (_k(), _mu()),
                 lambda k, mu: Always(0.0, k, Pred("s", "ge", mu)), "G[0,k](s >= mu)"),
    TemplateSpec("NeverSharpDrop", "positive", (_eps(),),
                 lambda eps: Always(0.0, 1.0, Pred("d", "ge", -eps)), "G[0,T](d > -eps)"),
    TemplateSpec("ConfidenceGain", "positive", (ParamSpec("w", 0.0, 0.5, "window"), _eps()),
                 lambda w, eps: Gain(w, eps), "mean_end > mean_start + eps"),
    TemplateSpec("LowVarOverall", "positive", (ParamSpec("nu", 0.0, 0.25, "variance"),),
                 lambda nu: VarLe(nu), "Var(s) <= nu"),
    TemplateSpec("EventuallyLow", "negative", (_mu(),),
                 lambda mu: Eventually(0.0, 1.0, Pred("s", "le", mu)), "F[0,T](s <= mu)"),
    TemplateSpec("EndLow", "negative", (_k(), _mu()),
                 lambda k, mu: Eventually(1.0 - k, 1.0, Pred("s", "le", mu)), "F[T-k,T](s <= mu)"),
    TemplateSpec("ConfidenceLoss", "negative", (ParamSpec("w", 0.0, 0.5, "window"), _eps()),
                 lambda w, eps: Loss(w, eps), "mean_start > mean_end + eps"),
    TemplateSpec("SharpDrop", "negative", (_eps(),),
                 lambda eps: Eventually(0.0, 1.0, Pred("d", "le", -eps)), "F[0,T](d <= -eps)"),
    TemplateSpec("FinalDecline", "negative", (_k(),),
                 lambda k: Always(1.0 - k, 1.0, Pred("d", "le", 0.0)), "G[T-k,T](d <= 0)"),
    TemplateSpec("Recovery", "negative",
                 (ParamSpec("mu_low", 0.0, 1.0, "threshold"), ParamSpec("mu_high", 0.0, 1.0, "threshold")),
                 _recovery, "F(s <= mu_low) & F(s >= mu_high)"),
)

_BY_NAME = {t.name: t for t in _TEMPLATES}


def list_templates(polarity: Optional[str] = None) -> list:
    if polarity in (None, "all"):
        return list(_TEMPLATES)
    if polarity not in ("positive", "negative"):
        raise ValueError(f"polarity must be 'positive' or 'negative', got {polarity!r}")
    return [t for t in _TEMPLATES if t.polarity == polarity]


def get_template(name: str) -> TemplateSpec:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ParamError(f"unknown template {name!r}") from None


def instantiate(name: str, theta: dict):
    return get_template(name).build(theta)


def atomic_predicates() -> list:
    return [
        {"category": "Level", "predicates": ["(ge s mu)", "(le s mu)"], "ranges": {"mu": (0.0, 1.0)}},
        {"category": "Deviation", "predicates": ["s >= mean(s) - k*std(s)"], "ranges": {"k": (0.0, 3.0)}},
        {"category": "Derivative", "predicates": ["(ge d -eps)", "(le d -eps)", "(le d 0.0)"],
         "ranges": {"eps": (0.0, 0.5)}},
        {"category": "Aggregate", "predicates": ["(varle nu)", "(gain w 0.0)"],
         "ranges": {"nu": (0.0, 0.25), "w": (0.0, 0.5)}},
    ]


def deviation_predicate(values, k: float) -> Pred:
    """Materialise ``s >= mean - k*std`` for one instance as a Level predicate."""
    v = np.asarray(values, dtype=np.float64)
    thr = float(v.mean() - k * v.std())
    return Pred("s", "ge", min(1.0, max(0.0, thr)))
