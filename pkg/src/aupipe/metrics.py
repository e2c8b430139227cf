"""Per-AU confusion accounting and report rendering.

Counters accumulate thread-confined and merge associatively, so any
sharding of a prediction stream (e.g. one shard per evaluation worker)
yields the same totals as single-pass counting. F1 uses the 0/0 -> 0.0
convention; binary accuracy on an empty counter is an error.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionCounter:
    au_id: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def update(counter: ConfusionCounter, predicted_prob: float, truth: int, threshold: float = 0.5) -> ConfusionCounter:
    """Tally one prediction: present iff prob is strictly above threshold."""
    if not 0.0 <= predicted_prob <= 1.0:
        raise ValueError(f"probability {predicted_prob} outside [0, 1]")
    if truth not in (0, 1):
        raise ValueError(f"truth must be 0 or 1, got {truth}")
    predicted = predicted_prob > threshold
    if predicted and truth == 1:
        counter.tp += 1
    elif predicted and truth == 0:
        counter.fp += 1
    elif not predicted and truth == 1:
        counter.fn += 1
    else:
        counter.tn += 1
    return counter


def merge(a: ConfusionCounter, b: ConfusionCounter) -> ConfusionCounter:
    if a.au_id != b.au_id:
        raise ValueError(f"cannot merge counters for AU {a.au_id} and AU {b.au_id}")
    return ConfusionCounter(au_id=a.au_id, tp=a.tp + b.tp, fp=a.fp + b.fp, fn=a.fn + b.fn, tn=a.tn + b.tn)


def f1(counter: ConfusionCounter) -> float:
    denom = 2 * counter.tp + counter.fp + counter.fn
    if denom == 0:
        return 0.0
    return 2 * counter.tp / denom


def accuracy(counter: ConfusionCounter) -> float:
    if counter.total == 0:
        raise ValueError(f"AU {counter.au_id}: accuracy undefined on an empty counter")
    return (counter.tp + counter.tn) / counter.total


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[dict, ...]
    macro_f1: float
    macro_accuracy: float
    threshold: float
    total_samples: int

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "rows": [dict(r) for r in self.rows],
            "macro_f1": self.macro_f1,
            "macro_accuracy": self.macro_accuracy,
            "total_samples": self.total_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    def render_text(self) -> str:
        """Aligned AU / F1 / accuracy table, values to two decimals; the
        average row is computed before rounding."""
        lines = [f"{'AU':<6}{'F1-Score':>10}{'Accuracy':>10}"]
        for row in self.rows:
            lines.append(f"{row['au_id']:<6}{row['f1']:>10.2f}{row['accuracy']:>10.2f}")
        lines.append(f"{'Avg':<6}{self.macro_f1:>10.2f}{self.macro_accuracy:>10.2f}")
        return "\n".join(lines)


def report(counters: list[ConfusionCounter], threshold: float = 0.5) -> EvalReport:
    """Per-AU rows (ascending AU id) plus unweighted macro averages."""
    if not counters:
        raise ValueError("report needs at least one counter")
    ordered = sorted(counters, key=lambda c: c.au_id)
    rows = tuple(
        {
            "au_id": c.au_id,
            "tp": c.tp,
            "fp": c.fp,
            "fn": c.fn,
            "tn": c.tn,
            "f1": f1(c),
            "accuracy": accuracy(c),
        }
        for c in ordered
    )
    return EvalReport(
        rows=rows,
        macro_f1=sum(r["f1"] for r in rows) / len(rows),
        macro_accuracy=sum(r["accuracy"] for r in rows) / len(rows),
        threshold=threshold,
        total_samples=sum(c.total for c in ordered),
    )


class MultiLabelEvaluator:
    """Accumulates one counter per AU over (probability, truth) pairs."""

    def __init__(self, au_ids: tuple[int, ...], threshold: float = 0.5):
        self.threshold = threshold
        self.counters = {au: ConfusionCounter(au) for au in au_ids}

    def update_batch(self, probs, truths) -> None:
        probs = np.asarray(probs)
        truths = np.asarray(truths)
        if probs.shape != truths.shape or probs.ndim != 2 or probs.shape[1] != len(self.counters):
            raise ValueError(f"probs/truths must be (n, {len(self.counters)}); got {probs.shape} and {truths.shape}")
        for row_p, row_t in zip(probs, truths):
            for au, p, t in zip(self.counters, row_p, row_t):
                update(self.counters[au], float(p), int(t), self.threshold)

    def merge_from(self, other: "MultiLabelEvaluator") -> None:
        if set(self.counters) != set(other.counters):
            raise ValueError("evaluators track different AU sets")
        for au in self.counters:
            self.counters[au] = merge(self.counters[au], other.counters[au])

    def report(self) -> EvalReport:
        return report(list(self.counters.values()), self.threshold)
