"""Strict-match scoring at note level (micro P/R/F1) and timeline level (Type A/B)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

from .timeline import NormalizedTriplet, PatientTimeline

# Conventions the shared-task script leaves unstated; reported in every output.
CONVENTIONS = {
    "empty_pred_empty_gold_patient_f1": 1.0,
    "type_b_with_no_gold_patients": 0.0,
    "patients_outside_universe": "ignored",
    "patients_missing_from_predictions": "scored against an empty prediction",
    "note_level_counting": "set semantics per note",
}


class EmptyUniverse(ValueError):
    pass


@dataclass
class NoteLevelMetrics:
    true_positives: int
    false_positives: int
    false_negatives: int
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TimelineMetrics:
    type_a_f1: float
    type_b_f1: float
    official: float
    per_patient_f1: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def strict_match(pred: NormalizedTriplet, gold: NormalizedTriplet) -> bool:
    return pred.key == gold.key


def note_micro(
    preds: Mapping[str, Iterable[Hashable]], golds: Mapping[str, Iterable[Hashable]]
) -> NoteLevelMetrics:
    """Micro-averaged counts over notes; a note missing on one side is empty there.

    Items are compared by equality, so pass canonical keys
    (``SactTriplet.key()``) rather than raw surface triplets.
    """
    tp = fp = fn = 0
    for note_id in set(preds) | set(golds):
        p = set(preds.get(note_id, ()))
        g = set(golds.get(note_id, ()))
        hit = len(p & g)
        tp += hit
        fp += len(p) - hit
        fn += len(g) - hit
    return NoteLevelMetrics(tp, fp, fn, *prf(tp, fp, fn))


def patient_f1(pred: set, gold: set) -> float:
    if not pred and not gold:
        return 1.0
    hit = len(pred & gold)
    return prf(hit, len(pred) - hit, len(gold) - hit)[2]


def timeline_f1(
    preds: Sequence[PatientTimeline],
    golds: Sequence[PatientTimeline],
    universe: Sequence[str],
) -> TimelineMetrics:
    if not universe:
        raise EmptyUniverse("no patients to score")
    pred_by = {t.patient_id: t.keys() for t in preds}
    gold_by = {t.patient_id: t.keys() for t in golds}
    missing = set(gold_by) - set(universe)
    if missing:
        raise ValueError(f"gold patients outside the universe: {sorted(missing)}")

    per_patient = {}
    for pid in sorted(set(universe)):
        per_patient[pid] = patient_f1(pred_by.get(pid, set()), gold_by.get(pid, set()))
    type_a = sum(per_patient.values()) / len(per_patient)
    with_gold = [pid for pid in per_patient if gold_by.get(pid)]
    type_b = sum(per_patient[p] for p in with_gold) / len(with_gold) if with_gold else 0.0
    official = (type_a + type_b) / 2
    return TimelineMetrics(type_a, type_b, official, per_patient)


def format_table(report: dict) -> str:
    """Human-readable summary of a metrics report."""
    lines = []
    note = report.get("note_level")
    if note:
        lines.append("Note-level micro")
        lines.append(f"  TP={note['true_positives']}  FP={note['false_positives']}  FN={note['false_negatives']}")
        lines.append(f"  precision={note['precision']:.4f}  recall={note['recall']:.4f}  f1={note['f1']:.4f}")
    tl = report.get("timeline_level")
    if tl:
        lines.append("Timeline-level macro F1")
        lines.append(f"  type_a={tl['type_a_f1']:.4f}  type_b={tl['type_b_f1']:.4f}  official={tl['official']:.4f}")
        for pid, score in sorted(tl["per_patient_f1"].items()):
            lines.append(f"    {pid:<20} {score:.4f}")
    return "\n".join(lines)
