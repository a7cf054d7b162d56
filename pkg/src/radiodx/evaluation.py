"""Confusion matrix and the binary metric family (positive class = PNEUMONIA)."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

METRIC_NAMES = ("sens", "esp", "vpp", "vpn", "acc", "f1")

NOTES = """\
Metric definitions (positive class = PNEUMONIA):
  SENS = VP / (VP + FN)      sensitivity, recall
  ESP  = VN / (VN + FP)      specificity
  VPP  = VP / (VP + FP)      positive predictive value, precision
  VPN  = VN / (VN + FN)      negative predictive value
  ACC  = (VP + VN) / total
  F1   = 2 * VPP * SENS / (VPP + SENS)

Commonly printed variants VPN = FN / (FN + VN) and ACC = VP * VN / total are not
used: on the 147/3/4/146 reference matrix they give values that disagree with
its known VPN of 97.4% and accuracy of 97.7%, whereas the forms above agree.
f1_esp_variant = 2 * ESP * SENS / (ESP + SENS) is reported alongside for reference.
A metric whose denominator is zero is written as ABSENT.
"""


@dataclass(frozen=True)
class ConfusionMatrix:
    vp: int
    vn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.vp, self.vn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.vp + self.vn + self.fp + self.fn

    def rows(self) -> list[list[int]]:
        """Rows = true NORMAL / PNEUMONIA, columns = predicted NORMAL / PNEUMONIA."""
        return [[self.vn, self.fp], [self.fn, self.vp]]


@dataclass(frozen=True)
class MetricsReport:
    sens: Optional[Fraction]
    esp: Optional[Fraction]
    vpp: Optional[Fraction]
    vpn: Optional[Fraction]
    acc: Optional[Fraction]
    f1: Optional[Fraction]
    f1_esp_variant: Optional[Fraction] = None

    def as_floats(self) -> dict[str, Optional[float]]:
        return {k: (None if v is None else float(v)) for k, v in
                ((name, getattr(self, name)) for name in METRIC_NAMES + ("f1_esp_variant",))}


def confusion_matrix(predictions: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionMatrix:
    """Count outcomes; a sample is predicted positive iff ``p >= threshold``."""
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions but {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("need at least one prediction")
    vp = vn = fp = fn = 0
    for p, y in zip(predictions, labels):
        pos = p >= threshold
        if y:
            vp += pos
            fn += not pos
        else:
            fp += pos
            vn += not pos
    return ConfusionMatrix(int(vp), int(vn), int(fp), int(fn))


def _ratio(num: int, den: int) -> Optional[Fraction]:
    return Fraction(num, den) if den else None


def _harmonic(a: Optional[Fraction], b: Optional[Fraction]) -> Optional[Fraction]:
    if a is None or b is None or a + b == 0:
        return None
    return 2 * a * b / (a + b)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    sens = _ratio(cm.vp, cm.vp + cm.fn)
    esp = _ratio(cm.vn, cm.vn + cm.fp)
    vpp = _ratio(cm.vp, cm.vp + cm.fp)
    vpn = _ratio(cm.vn, cm.vn + cm.fn)
    acc = _ratio(cm.vp + cm.vn, cm.total)
    return MetricsReport(sens, esp, vpp, vpn, acc, _harmonic(vpp, sens), _harmonic(esp, sens))


def format_value(v: Optional[Fraction]) -> str:
    return "ABSENT" if v is None else f"{float(v):.9f}"


def metrics_csv(report: MetricsReport) -> str:
    lines = ["metric,value"] + [f"{name},{format_value(getattr(report, name))}" for name in METRIC_NAMES]
    return "\n".join(lines) + "\n"


def confusion_csv(cm: ConfusionMatrix) -> str:
    return "".join(f"{a},{b}\n" for a, b in cm.rows())


def parse_metrics_csv(text: str) -> dict[str, Optional[float]]:
    rows = list(csv.reader(text.splitlines()))
    if rows[0] != ["metric", "value"]:
        raise ValueError("metrics CSV must start with `metric,value`")
    return {k: (None if v == "ABSENT" else float(v)) for k, v in rows[1:]}


def emit_report(cm: ConfusionMatrix, report: MetricsReport, destination: str | os.PathLike) -> dict[str, str]:
    """Write metrics.csv, confusion.csv and notes.txt; returns the paths written."""
    os.makedirs(destination, exist_ok=True)
    paths = {}
    notes = NOTES + f"\nf1_esp_variant,{format_value(report.f1_esp_variant)}\n"
    for name, text in (("metrics.csv", metrics_csv(report)), ("confusion.csv", confusion_csv(cm)),
                       ("notes.txt", notes)):
        path = os.path.join(destination, name)
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        paths[name] = path
    return paths
