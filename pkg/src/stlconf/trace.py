"""Labeled reasoning traces and stepwise confidence signals.

A response is cut into segments of tokens; each segment's confidence is the
arithmetic mean of its token probabilities. The resulting per-step series,
together with its first difference and any lifted robustness channels, is the
temporal axis that every formula is evaluated on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyTrace, SchemaError

SENTENCE_ENDINGS = (".", "!", "?")
DEFAULT_FIXED_SIZE = 20


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ConfidenceSignal:
    values: np.ndarray
    diff: np.ndarray
    lifted: tuple = ()
    lifted_names: tuple = ()

    @classmethod
    def from_values(cls, values) -> "ConfidenceSignal":
        v = _frozen(values)
        if v.ndim != 1 or v.size == 0:
            raise EmptyTrace("signal must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise SchemaError("signal values must lie in [0, 1]")
        d = np.zeros_like(v)
        d[1:] = v[1:] - v[:-1]
        return cls(v, _frozen(d))

    def __len__(self) -> int:
        return int(self.values.size)

    def channel(self, name: str) -> np.ndarray:
        if name == "s":
            return self.values
        if name == "d":
            return self.diff
        if name.startswith("r") and name[1:].isdigit():
            k = int(name[1:])
            if k < len(self.lifted):
                return self.lifted[k]
        raise SchemaError(f"signal has no channel {name!r}")

    def with_lifted(self, channels, names=None) -> "ConfidenceSignal":
        chans = tuple(_frozen(c) for c in channels)
        for c in chans:
            if c.shape != self.values.shape:
                raise SchemaError("lifted channel length differs from signal length")
        names = tuple(names) if names is not None else tuple(f"r{len(self.lifted) + i}" for i in range(len(chans)))
        return replace(self, lifted=self.lifted + chans, lifted_names=self.lifted_names + names)


@dataclass(frozen=True, eq=False)
class LabeledInstance:
    id: str
    task: str
    question: str
    signal: ConfidenceSignal
    label: int
    segments: Optional[tuple] = None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "task": self.task,
            "question": self.question,
            "segments": [list(map(float, s)) for s in self.segments] if self.segments is not None else None,
            "signal": None if self.segments is not None else [float(x) for x in self.signal.values],
            "label": int(self.label),
        }


def segment_response(token_probs: Sequence[float], mode: str = "auto", token_texts=None, size: int = DEFAULT_FIXED_SIZE):
    """Split a token-probability sequence into contiguous nonempty segments.

    ``mode`` is ``"sentence"`` (cut after a token ending in ``.``, ``!`` or
    ``?``, or containing a newline), ``"fixed"`` (chunks of ``size`` tokens) or
    ``"auto"`` (sentence when texts are given, fixed otherwise).
    """
    probs = list(token_probs)
    if not probs:
        raise EmptyTrace("no tokens to segment")
    if mode == "auto":
        mode = "sentence" if token_texts is not None else "fixed"
    if mode == "fixed":
        if size < 1:
            raise SchemaError("fixed segment size must be >= 1")
        return [probs[i : i + size] for i in range(0, len(probs), size)]
    if mode != "sentence":
        raise SchemaError(f"unknown segmentation mode {mode!r}")
    if token_texts is None or len(token_texts) != len(probs):
        raise SchemaError("sentence mode needs one token text per probability")
    segments, current = [], []
    for p, text in zip(probs, token_texts):
        current.append(p)
        stripped = text.rstrip(" \t")
        if "\n" in text or stripped.endswith(SENTENCE_ENDINGS):
            segments.append(current)
            current = []
    if current:
        segments.append(current)
    return segments


def compute_signal(segments) -> ConfidenceSignal:
    if len(segments) == 0:
        raise EmptyTrace("no segments")
    values = []
    for seg in segments:
        if len(seg) == 0:
            raise EmptyTrace("empty segment")
        for p in seg:
            if not (isinstance(p, (int, float)) and 0.0 <= p <= 1.0):
                raise SchemaError(f"token probability {p!r} outside [0, 1]")
        values.append(math.fsum(seg) / len(seg))
    return ConfidenceSignal.from_values(values)


_REQUIRED = ("id", "task", "question", "label")


def instance_from_record(rec, line=None) -> LabeledInstance:
    if not isinstance(rec, dict):
        raise SchemaError("record is not a JSON object", line)
    for key in _REQUIRED:
        if key not in rec:
            raise SchemaError(f"missing {key!r}", line)
    label = rec["label"]
    if isinstance(label, bool) or label not in (0, 1):
        raise SchemaError(f"label must be 0 or 1, got {label!r}", line)
    for key in ("id", "task", "question"):
        if not isinstance(rec[key], str):
            raise SchemaError(f"{key!r} must be a string", line)
    segs, sig = rec.get("segments"), rec.get("signal")
    if (segs is None) == (sig is None):
        raise SchemaError("exactly one of 'segments' and 'signal' must be non-null", line)
    try:
        if segs is not None:
            if not isinstance(segs, list) or not all(isinstance(s, list) for s in segs):
                raise SchemaError("'segments' must be a list of lists", line)
            signal = compute_signal(segs)
            segments = tuple(tuple(float(p) for p in s) for s in segs)
        else:
            if not isinstance(sig, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in sig):
                raise SchemaError("'signal' must be a list of numbers", line)
            signal = ConfidenceSignal.from_values(sig)
            segments = None
    except (SchemaError, EmptyTrace) as exc:
        if isinstance(exc, SchemaError) and exc.line is not None:
            raise
        raise SchemaError(str(exc), line) from exc
    return LabeledInstance(rec["id"], rec["task"], rec["question"], signal, int(label), segments)


def load_dataset(path) -> list[LabeledInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from exc
            out.append(instance_from_record(rec, lineno))
    return out


def save_dataset(instances, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def labels_of(instances) -> np.ndarray:
    return np.array([inst.label for inst in instances], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class SignalBatch:
    """Signals padded to a common length for vectorised evaluation."""

    values: np.ndarray
    diff: np.ndarray
    lengths: np.ndarray
    lifted: tuple = field(default=())

    @classmethod
    def from_signals(cls, signals) -> "SignalBatch":
        signals = list(signals)
        if not signals:
            raise EmptyTrace("empty batch")
        L = max(len(s) for s in signals)
        N = len(signals)
        values = np.zeros((N, L))
        diff = np.zeros((N, L))
        lengths = np.array([len(s) for s in signals], dtype=np.int64)
        n_lift = min(len(s.lifted) for s in signals)
        lifted = [np.zeros((N, L)) for _ in range(n_lift)]
        for i, s in enumerate(signals):
            n = len(s)
            values[i, :n] = s.values
            diff[i, :n] = s.diff
            for k in range(n_lift):
                lifted[k][i, :n] = s.lifted[k]
        return cls(values, diff, lengths, tuple(lifted))

    @classmethod
    def from_instances(cls, instances) -> "SignalBatch":
        return cls.from_signals([inst.signal for inst in instances])

    def __len__(self) -> int:
        return int(self.lengths.size)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    def channel(self, name: str) -> np.ndarray:
        if name == "s":
            return self.values
        if name == "d":
            return self.diff
        if name.startswith("r") and name[1:].isdigit() and int(name[1:]) < len(self.lifted):
            return self.lifted[int(name[1:])]
        raise SchemaError(f"batch has no channel {name!r}")

    def mask(self) -> np.ndarray:
        return np.arange(self.width)[None, :] < self.lengths[:, None]

    def take(self, idx) -> "SignalBatch":
        idx = np.asarray(idx)
        lengths = self.lengths[idx]
        L = int(lengths.max())
        return SignalBatch(
            self.values[idx, :L],
            self.diff[idx, :L],
            lengths,
            tuple(c[idx, :L] for c in self.lifted),
        )

    def with_lifted(self, channels) -> "SignalBatch":
        mask = self.mask()
        chans = tuple(np.where(mask, np.asarray(c, dtype=np.float64), 0.0) for c in channels)
        return replace(self, lifted=self.lifted + chans)
