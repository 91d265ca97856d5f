"""Note-level extractions to de-duplicated patient timelines."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import ClinicalNote
from .extraction import NoteExtraction
from .timenorm import NormalizedTime, Unnormalizable, normalize
from .triplets import RELATIONS, SactTriplet, canonicalize


@dataclass(frozen=True)
class NormalizedTriplet:
    sact_key: str
    relation: str
    time: NormalizedTime
    sact_surface: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.relation not in RELATIONS:
            raise ValueError(f"illegal relation {self.relation!r}")

    @classmethod
    def from_surface(cls, sact: str, relation: str, time: NormalizedTime) -> NormalizedTriplet:
        return cls(canonicalize(sact), relation, time, sact)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.sact_key, self.relation, self.time.value)

    def as_row(self) -> list[str]:
        return [self.sact_key, self.relation, self.time.value]


@dataclass(frozen=True)
class PatientTimeline:
    patient_id: str
    events: frozenset[NormalizedTriplet] = frozenset()

    def keys(self) -> set[tuple[str, str, str]]:
        return {e.key for e in self.events}

    def rows(self) -> list[list[str]]:
        ordered = sorted(self.events, key=lambda e: (e.time.value, e.sact_key, e.relation))
        return [e.as_row() for e in ordered]


def normalize_triplets(
    triplets: Iterable[SactTriplet],
    note: ClinicalNote,
    drops: Counter | None = None,
    strict_iso_fixups: bool = False,
) -> list[NormalizedTriplet]:
    out = []
    for t in triplets:
        try:
            time = normalize(t.time_raw, note.doctime, strict_iso_fixups)
        except Unnormalizable as exc:
            if drops is not None:
                drops[exc.reason] += 1
            continue
        out.append(NormalizedTriplet.from_surface(t.sact, t.relation, time))
    return out


def normalize_extraction(
    extraction: NoteExtraction,
    note: ClinicalNote,
    drops: Counter | None = None,
    strict_iso_fixups: bool = False,
) -> list[NormalizedTriplet]:
    """Normalize every triplet's time against the note's document time.

    Triplets whose time cannot be normalized are dropped and counted in
    ``drops`` by reason.
    """
    return normalize_triplets(extraction.triplets, note, drops, strict_iso_fixups)


def aggregate(patient_id: str, normalized: Iterable[NormalizedTriplet]) -> PatientTimeline:
    """Set-union by (sact_key, relation, time value); first surface form wins."""
    seen: dict[tuple[str, str, str], NormalizedTriplet] = {}
    for t in normalized:
        seen.setdefault(t.key, t)
    return PatientTimeline(patient_id, frozenset(seen.values()))


def timelines_to_json(timelines: Sequence[PatientTimeline]) -> str:
    payload = {tl.patient_id: tl.rows() for tl in sorted(timelines, key=lambda t: t.patient_id)}
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def write_timelines(timelines: Sequence[PatientTimeline], path: str | Path) -> None:
    ids = [t.patient_id for t in timelines]
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate patient ids in timelines")
    Path(path).write_text(timelines_to_json(timelines), encoding="utf-8")


def timelines_from_json(data: dict) -> list[PatientTimeline]:
    out = []
    for patient_id, rows in data.items():
        events = []
        for row in rows:
            sact, relation, value = row
            events.append(NormalizedTriplet(sact, relation, NormalizedTime.from_value(value), sact))
        out.append(aggregate(patient_id, events))
    return sorted(out, key=lambda t: t.patient_id)


def read_timelines(path: str | Path) -> list[PatientTimeline]:
    return timelines_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
