"""Detection metrics: align alerts with ground truth, count, and score.

Evaluation is packet-level: cache alerts are projected onto packets via
their offending indices, and a response frame takes the ground-truth
label of the request that produced it. Metrics are computed as exact
rationals; reports carry their float values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .risk import Alert
from .simulate import ATTACK, LabeledFrame

# Published baseline results quoted in reports for context; they were
# measured on different data and are not reproduced by this tool.
REFERENCE_ROWS = (
    ("K-Nearest Neighbour (published baseline)", 0.553, 0.448),
    ("Naive Bayes (published baseline)", 0.444, 0.526),
    ("Random Forests (published baseline)", 0.605, 0.384),
)


class UndefinedMetric(ValueError):
    """Denominator is zero; the metric is absent, not 0 or 1."""


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def alert_indices(alerts: Iterable[Alert | dict]) -> set[int]:
    """Global packet indices named by any alert's offending set."""
    flagged: set[int] = set()
    for alert in alerts:
        if isinstance(alert, Alert):
            flagged.update(alert.offending_global)
        else:
            flagged.update(alert["offending"])
    return flagged


def align(alerts: Iterable[Alert | dict], labels: Sequence) -> list[bool]:
    """Per-packet predictions: True where some alert blames the packet."""
    n = len(labels)
    flagged = alert_indices(alerts)
    out_of_range = [i for i in flagged if not 0 <= i < n]
    if out_of_range:
        raise IndexError(
            f"alert references frame {min(out_of_range)} outside the "
            f"{n}-frame label set")
    return [i in flagged for i in range(n)]


def effective_labels(labels: Sequence[LabeledFrame | dict]) -> list[bool]:
    """Ground truth as booleans, responses inheriting their request's label."""

    def fields(entry) -> tuple[bool, int | None]:
        if isinstance(entry, LabeledFrame):
            return entry.label == ATTACK, entry.response_to
        return entry["label"] == ATTACK, entry.get("response_to")

    own = []
    parents = []
    for entry in labels:
        is_attack, response_to = fields(entry)
        own.append(is_attack)
        parents.append(response_to)
    return [attack or (parent is not None and own[parent])
            for attack, parent in zip(own, parents)]


def confusion(predictions: Sequence[bool], truth: Sequence[bool]) -> Confusion:
    if len(predictions) != len(truth):
        raise ValueError(f"{len(predictions)} predictions vs "
                         f"{len(truth)} labels")
    tp = tn = fp = fn = 0
    for predicted, actual in zip(predictions, truth):
        if predicted and actual:
            tp += 1
        elif not predicted and not actual:
            tn += 1
        elif predicted:
            fp += 1
        else:
            fn += 1
    return Confusion(tp=tp, tn=tn, fp=fp, fn=fn)


def accuracy(c: Confusion) -> Fraction:
    if c.total == 0:
        raise UndefinedMetric("no packets evaluated")
    return Fraction(c.tp + c.tn, c.total)


def detection_rate(c: Confusion) -> Fraction:
    if c.tp + c.fn == 0:
        raise UndefinedMetric("no attack packets in ground truth")
    return Fraction(c.tp, c.tp + c.fn)


def false_positive_rate(c: Confusion) -> Fraction:
    if c.fp + c.tn == 0:
        raise UndefinedMetric("no normal packets in ground truth")
    return Fraction(c.fp, c.fp + c.tn)


@dataclass(frozen=True)
class MetricsReport:
    confusion: Confusion
    accuracy: float | None
    detection_rate: float | None
    false_positive_rate: float | None
    config: dict

    @classmethod
    def build(cls, c: Confusion, config: dict | None = None) -> "MetricsReport":
        def maybe(fn) -> float | None:
            try:
                return float(fn(c))
            except UndefinedMetric:
                return None

        return cls(confusion=c, accuracy=maybe(accuracy),
                   detection_rate=maybe(detection_rate),
                   false_positive_rate=maybe(false_positive_rate),
                   config=dict(config or {}))

    def to_json(self) -> dict:
        return {
            "confusion": {"tp": self.confusion.tp, "tn": self.confusion.tn,
                          "fp": self.confusion.fp, "fn": self.confusion.fn},
            "accuracy": self.accuracy,
            "detection_rate": self.detection_rate,
            "false_positive_rate": self.false_positive_rate,
            "evaluation": "packet-level; alerts projected via offending "
                          "indices; responses inherit request labels",
            "config": self.config,
        }

    def to_table(self) -> str:
        def pct(value: float | None) -> str:
            return "n/a" if value is None else f"{100 * value:.1f}%"

        rows = [(name, f"{100 * dr:.1f}%", f"{100 * fpr:.1f}%")
                for name, dr, fpr in REFERENCE_ROWS]
        rows.append(("This run (risk cache detector)",
                     pct(self.detection_rate), pct(self.false_positive_rate)))
        widths = [max(len(r[i]) for r in rows + [("Technique", "DR", "FPR")])
                  for i in range(3)]
        lines = ["  ".join(h.ljust(w) for h, w in
                           zip(("Technique", "DR", "FPR"), widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(cell.ljust(w) for cell, w in zip(row, widths))
                  for row in rows]
        lines.append("")
        lines.append(f"accuracy: {pct(self.accuracy)}   confusion: "
                     f"tp={self.confusion.tp} tn={self.confusion.tn} "
                     f"fp={self.confusion.fp} fn={self.confusion.fn}")
        lines.append("baseline rows are results published elsewhere on other "
                     "datasets, shown for scale only")
        return "\n".join(lines)


def load_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
