"""Fitted patterns and pattern sets, with their JSON file format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SchemaError
from .stl import canonical_skeleton, format_formula, parameters, parse_formula

POLARITIES = ("pos", "neg")


@dataclass(frozen=True)
class FittedPattern:
    name: str
    formula: object
    polarity: str  # "pos" or "neg"
    alpha: float = 1.0
    beta: float = 0.0
    train_loss: float = float("nan")
    val_loss: float = float("nan")

    @property
    def theta(self) -> dict:
        return parameters(self.formula)

    @property
    def skeleton(self) -> str:
        return canonical_skeleton(self.formula)

    @property
    def text(self) -> str:
        return format_formula(self.formula)

    def to_dict(self) -> dict:
        theta = dict(self.theta)
        theta["alpha"] = float(self.alpha)
        theta["beta"] = float(self.beta)
        return {
            "name": self.name,
            "formula": self.text,
            "skeleton": self.skeleton,
            "theta": theta,
            "train_loss": float(self.train_loss),
            "val_loss": float(self.val_loss),
        }

    @classmethod
    def from_dict(cls, d: dict, polarity: str) -> "FittedPattern":
        phi, _ = parse_formula(d["formula"])
        theta = d.get("theta", {})
        return cls(
            name=d.get("name", d["formula"]),
            formula=phi,
            polarity=polarity,
            alpha=float(theta.get("alpha", 1.0)),
            beta=float(theta.get("beta", 0.0)),
            train_loss=float(d.get("train_loss", float("nan"))),
            val_loss=float(d.get("val_loss", float("nan"))),
        )


@dataclass(frozen=True)
class PatternSet:
    pos: tuple
    neg: tuple
    weights: np.ndarray = None  # logits, pos blocks first then neg
    seed: int = 0
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pos and not self.neg:
            raise SchemaError("a pattern set needs at least one pattern")
        for p in self.pos:
            if p.polarity != "pos":
                raise SchemaError(f"pattern {p.name} has polarity {p.polarity} in the pos list")
        for p in self.neg:
            if p.polarity != "neg":
                raise SchemaError(f"pattern {p.name} has polarity {p.polarity} in the neg list")
        w = np.zeros(len(self)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self),):
            raise SchemaError("weights must have one logit per pattern")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.pos) + len(self.neg)

    @property
    def patterns(self) -> tuple:
        return tuple(self.pos) + tuple(self.neg)

    def with_patterns(self, patterns, weights=None) -> "PatternSet":
        patterns = list(patterns)
        pos = tuple(p for p in patterns if p.polarity == "pos")
        neg = tuple(p for p in patterns if p.polarity == "neg")
        return replace(self, pos=pos, neg=neg, weights=self.weights if weights is None else weights)

    def skeletons(self, polarity: str) -> set:
        pats = self.pos if polarity == "pos" else self.neg
        return {p.skeleton for p in pats}

    def to_dict(self) -> dict:
        n_pos = len(self.pos)
        return {
            "pos": [p.to_dict() for p in self.pos],
            "neg": [p.to_dict() for p in self.neg],
            "weights": {"pos": [float(x) for x in self.weights[:n_pos]], "neg": [float(x) for x in self.weights[n_pos:]]},
            "seed": int(self.seed),
            "config": self.config,
            "provenance": self.provenance,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PatternSet":
        try:
            pos = tuple(FittedPattern.from_dict(x, "pos") for x in d.get("pos", []))
            neg = tuple(FittedPattern.from_dict(x, "neg") for x in d.get("neg", []))
            w = d.get("weights") or {}
            weights = list(w.get("pos", [0.0] * len(pos))) + list(w.get("neg", [0.0] * len(neg)))
        except (KeyError, TypeError, AttributeError) as exc:
            raise SchemaError(f"malformed pattern set: {exc}") from exc
        return cls(pos, neg, np.array(weights, dtype=np.float64), int(d.get("seed", 0)),
                   d.get("config", {}), d.get("provenance", {}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "PatternSet":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"pattern set is not valid JSON: {exc.msg}") from exc
        return cls.from_dict(d)

    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()
