"""Seeded synthetic confidence traces with planted, known-separable structure.

Each scenario assigns labels first and then draws a signal that satisfies the
class rule with a margin the noise cannot cross, so every test built on these
datasets passes deterministically.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import DegenerateData
from .metrics import auroc
from .stl import format_formula, parse_formula, scalar_robustness
from .trace import ConfidenceSignal, LabeledInstance, SignalBatch, labels_of

SCENARIOS = ("stable_high", "sharp_drop", "oscillate", "gain", "instance_threshold")
LENGTH_RANGE = (6, 14)
N_QUESTION_IDS = 16

# Planted formula per scenario, with the polarity under which it scores
# correctness (negative formulas score failure).
ORACLES = {
    "stable_high": ("(G 0.0 1.0 (ge s 0.5))", "pos"),
    "sharp_drop": ("(F 0.0 1.0 (le d -0.25))", "neg"),
    "oscillate": ("(varle 0.015)", "pos"),
    "gain": ("(gain 0.25 0.15)", "pos"),
    "instance_threshold": ("(G 0.0 1.0 (ge s 0.6))", "pos"),
}


def _truncnorm(rng, sigma, size, cut=3.0):
    x = rng.normal(0.0, sigma, size)
    return np.clip(x, -cut * sigma, cut * sigma)


def question_threshold(qid: int) -> float:
    """Separating level for question ``qid``: 0.4 + 0.4 * h(qid), h in [0, 1]."""
    digest = hashlib.blake2b(f"q{qid}".encode(), digest_size=8).digest()
    h = int.from_bytes(digest, "big") / float(2**64 - 1)
    return 0.4 + 0.4 * h


def _reflect_walk(rng, start, steps, lo, hi):
    vals = [start]
    for d in steps:
        nxt = vals[-1] + d
        if nxt < lo or nxt > hi:
            nxt = vals[-1] - d
        vals.append(nxt)
    return np.array(vals)


def _stable_high(rng, label, n):
    sigma = 0.03
    base = rng.uniform(0.7, 0.95, n)
    vals = np.clip(base + _truncnorm(rng, sigma, n), 0.0, 1.0)
    if label == 0:
        k = rng.integers(1, 3)
        idx = rng.choice(n, size=k, replace=False)
        vals[idx] = rng.uniform(0.0, 0.15, k)
    return vals


def _sharp_drop(rng, label, n):
    small = 0.05
    if label == 1:
        steps = rng.uniform(-small, small, n - 1)
        return _reflect_walk(rng, rng.uniform(0.3, 0.9), steps, 0.02, 0.98)
    p = int(rng.integers(1, n))  # drop happens between steps p-1 and p
    pre = _reflect_walk(rng, rng.uniform(0.7, 0.95), rng.uniform(-small, small, p - 1), 0.6, 0.98)
    drop = rng.uniform(0.4, 0.55)
    post_start = pre[-1] - drop
    post = _reflect_walk(rng, post_start, rng.uniform(-small, small, n - p - 1), 0.02, 0.98)
    return np.concatenate([pre, post])


def _oscillate(rng, label, n):
    sigma = 0.03
    level = rng.uniform(0.55, 0.75)
    if label == 1:
        return np.clip(level + _truncnorm(rng, sigma, n), 0.0, 1.0)
    amp = rng.uniform(0.2, 0.3)
    phase = rng.integers(0, 2)
    sign = np.where((np.arange(n) + phase) % 2 == 0, 1.0, -1.0)
    return np.clip(level + sign * amp + _truncnorm(rng, sigma, n), 0.0, 1.0)


def _gain(rng, label, n):
    sigma = 0.01
    if label == 1:
        delta = rng.uniform(0.5, 0.7)
        start = rng.uniform(0.2, 0.95 - delta)
    else:
        delta = rng.uniform(-0.3, 0.0)
        start = rng.uniform(0.35 - delta, 0.9)
    ramp = start + delta * np.arange(n) / (n - 1)
    return np.clip(ramp + _truncnorm(rng, sigma, n), 0.0, 1.0)


def _instance_threshold(rng, label, n, thr):
    # Both classes share one shape distribution and differ only in where the
    # minimum sits relative to the question's threshold, so nothing but the
    # level (read against the question) carries the label.
    shape = rng.uniform(0.0, 0.15, n)
    shape[rng.integers(0, n)] = 0.0
    margin = rng.uniform(0.05, 0.12)
    base = thr + margin if label == 1 else thr - margin
    return np.clip(base + shape + _truncnorm(rng, 0.01, n), 0.0, 1.0)


def generate(scenario: str, n_instances: int, seed: int) -> list:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if n_instances < 2:
        raise DegenerateData("need at least two instances")
    rng = np.random.default_rng(seed)
    labels = np.array([1] * (n_instances // 2) + [0] * (n_instances - n_instances // 2))
    rng.shuffle(labels)
    out = []
    for i, label in enumerate(labels):
        n = int(rng.integers(LENGTH_RANGE[0], LENGTH_RANGE[1] + 1))
        question = f"synthetic {scenario} question {i}"
        if scenario == "stable_high":
            vals = _stable_high(rng, label, n)
        elif scenario == "sharp_drop":
            vals = _sharp_drop(rng, label, n)
        elif scenario == "oscillate":
            vals = _oscillate(rng, label, n)
        elif scenario == "gain":
            vals = _gain(rng, label, n)
        else:
            qid = int(rng.integers(0, N_QUESTION_IDS))
            question = f"item q{qid} : answer question number q{qid} carefully"
            vals = _instance_threshold(rng, label, n, question_threshold(qid))
        sig = ConfidenceSignal.from_values(vals)
        out.append(LabeledInstance(f"{scenario}-{seed}-{i}", scenario, question, sig, int(label)))
    return out


def question_id(instance) -> int:
    tok = instance.question.split()[1]
    return int(tok[1:])


def oracle(scenario: str):
    """Planted formula, its polarity and its grammar text."""
    text, polarity = ORACLES[scenario]
    phi, _ = parse_formula(text)
    return phi, polarity, format_formula(phi)


def oracle_auroc(scenario: str, data) -> float:
    """AUROC of the planted formula as a correctness score."""
    phi, polarity, _ = oracle(scenario)
    rho = scalar_robustness(phi, SignalBatch.from_instances(data))
    score = rho if polarity == "pos" else -rho
    return auroc(score, labels_of(data))


def per_instance_oracle_auroc(data) -> float:
    """AUROC of ``min(s) - threshold(question)`` on instance_threshold data."""
    score = [float(inst.signal.values.min()) - question_threshold(question_id(inst)) for inst in data]
    return auroc(score, labels_of(data))


def fixed_threshold_auroc(data) -> float:
    """Best AUROC of any fixed-threshold level rule; thresholds shift but do not reorder."""
    phi, _ = parse_formula("(G 0.0 1.0 (ge s 0.5))")
    return auroc(scalar_robustness(phi, SignalBatch.from_instances(data)), labels_of(data))


def oracle_document(scenario: str, n_instances: int, seed: int, data) -> dict:
    _, polarity, text = oracle(scenario)
    doc = {
        "scenario": scenario,
        "n": n_instances,
        "seed": seed,
        "formula": text,
        "polarity": polarity,
        "oracle_auroc": oracle_auroc(scenario, data),
    }
    if scenario == "instance_threshold":
        doc["per_instance_oracle_auroc"] = per_instance_oracle_auroc(data)
        doc["fixed_threshold_auroc"] = fixed_threshold_auroc(data)
        doc["thresholds"] = {f"q{q}": question_threshold(q) for q in range(N_QUESTION_IDS)}
    return doc


def dumps_oracle(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"
