"""Note corpus loading, document-time detection and sentence splitting.

Corpus layout::

    <root>/<patient_id>/<note_id>.txt     UTF-8 note text
    <root>/<patient_id>/gold.json         optional, note_id -> [[sact, relation, time], ...]
    <root>/<patient_id>/meta.json         optional, {"cancer_type": "breast"}
"""

from __future__ import annotations

import datetime as dt
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .triplets import CANCER_TYPES, SactTriplet

GOLD_FILE = "gold.json"
META_FILE = "meta.json"

MIN_YEAR = 1900
MAX_YEAR = 2100


class NoDoctime(LookupError):
    """No valid YYYYMMDD run was found in a note."""


class CorpusFormatError(ValueError):
    def __init__(self, path: Path | str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = Path(path)


@dataclass(frozen=True)
class ClinicalNote:
    patient_id: str
    note_id: str
    text: str
    doctime: dt.date | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"note {self.note_id!r} has empty text")


@dataclass
class PatientRecord:
    patient_id: str
    cancer_type: str
    notes: list[ClinicalNote]
    # None when the patient has no gold file; otherwise every note has an entry.
    gold: dict[str, list[SactTriplet]] | None = None

    def __post_init__(self) -> None:
        if self.cancer_type not in CANCER_TYPES:
            raise ValueError(f"unknown cancer type {self.cancer_type!r}")
        seen = set()
        for note in self.notes:
            if note.patient_id != self.patient_id:
                raise ValueError(f"note {note.note_id} belongs to {note.patient_id}")
            if note.note_id in seen:
                raise ValueError(f"duplicate note id {note.note_id}")
            seen.add(note.note_id)


@dataclass(frozen=True)
class SentenceSpan:
    note_id: str
    index: int
    start: int
    end: int

    def text(self, note_text: str) -> str:
        return note_text[self.start:self.end]


@dataclass
class GoldAnnotation:
    note_id: str
    triplets: list[SactTriplet] = field(default_factory=list)


# --------------------------------------------------------------------------
# Document time
# --------------------------------------------------------------------------

_EIGHT_DIGITS = re.compile(r"(?<![0-9])[0-9]{8}(?![0-9])")


def parse_yyyymmdd(digits: str) -> dt.date | None:
    year, month, day = int(digits[:4]), int(digits[4:6]), int(digits[6:8])
    if not MIN_YEAR <= year <= MAX_YEAR:
        return None
    try:
        return dt.date(year, month, day)
    except ValueError:
        return None


def detect_doctime(text: str) -> dt.date:
    """Return the first run of exactly eight digits that forms a valid date.

    Runs embedded in longer digit sequences are skipped.  Raises
    :class:`NoDoctime` when no candidate validates.
    """
    for match in _EIGHT_DIGITS.finditer(text):
        date = parse_yyyymmdd(match.group())
        if date is not None:
            return date
    raise NoDoctime("no valid YYYYMMDD date in note text")


def find_doctime(text: str) -> dt.date | None:
    try:
        return detect_doctime(text)
    except NoDoctime:
        return None


# --------------------------------------------------------------------------
# Sentence splitting
# --------------------------------------------------------------------------

ABBREVIATIONS = frozenset(
    {
        "dr", "mr", "mrs", "ms", "mg", "mcg", "ml", "kg", "cm", "mm", "vs",
        "etc", "approx", "pt", "no", "st", "jr", "sr", "prof", "inc", "fig",
        "e.g", "i.e", "b.i.d", "t.i.d", "q.d", "p.o", "a.m", "p.m", "dept",
        "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept",
        "oct", "nov", "dec",
    }
)

# Candidate boundary: terminal punctuation (plus closing quotes/brackets)
# followed by whitespace, or a blank line.
_BOUNDARY = re.compile(r"[.!?]+[\"')\]]*(?=\s)|\n[ \t]*\n")
_WORD_BEFORE = re.compile(r"([A-Za-z][A-Za-z.]*)\.$")


def _is_abbreviation(text: str, period_end: int) -> bool:
    m = _WORD_BEFORE.search(text, max(0, period_end - 32), period_end)
    if m is None:
        return False
    word = m.group(1).lower()
    if word in ABBREVIATIONS:
        return True
    # Single capital initials ("J. Smith").
    return len(word) == 1 and m.group(1).isupper()


def split_sentences(text: str, note_id: str = "") -> list[SentenceSpan]:
    """Split note text into ordered, non-overlapping, whitespace-trimmed spans."""
    cuts = [0]
    for m in _BOUNDARY.finditer(text):
        if m.group().startswith("\n"):
            cuts.append(m.start())
            continue
        if m.group()[0] == "." and len(m.group()) == 1 and _is_abbreviation(text, m.end()):
            continue
        cuts.append(m.end())
    cuts.append(len(text))

    spans: list[SentenceSpan] = []
    for lo, hi in zip(cuts, cuts[1:]):
        while lo < hi and text[lo].isspace():
            lo += 1
        while hi > lo and text[hi - 1].isspace():
            hi -= 1
        if lo < hi:
            spans.append(SentenceSpan(note_id, len(spans), lo, hi))
    return spans


# --------------------------------------------------------------------------
# Corpus loading
# --------------------------------------------------------------------------


def _read_gold(path: Path, note_ids: set[str]) -> dict[str, list[SactTriplet]]:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(path, f"unreadable gold file ({exc})") from exc
    if not isinstance(raw, dict):
        raise CorpusFormatError(path, "gold file must be a JSON object")
    gold: dict[str, list[SactTriplet]] = {nid: [] for nid in note_ids}
    for note_id, rows in raw.items():
        if note_id not in note_ids:
            raise CorpusFormatError(path, f"gold refers to unknown note {note_id!r}")
        if not isinstance(rows, list):
            raise CorpusFormatError(path, f"gold for {note_id!r} must be an array")
        for row in rows:
            if not (isinstance(row, list) and len(row) == 3 and all(isinstance(x, str) for x in row)):
                raise CorpusFormatError(path, f"bad gold triple {row!r} in {note_id!r}")
            try:
                gold[note_id].append(SactTriplet(*row))
            except ValueError as exc:
                raise CorpusFormatError(path, f"{note_id!r}: {exc}") from exc
    return gold


def load_patient(directory: Path, default_cancer_type: str = "breast") -> PatientRecord:
    patient_id = directory.name
    cancer_type = default_cancer_type
    meta_path = directory / META_FILE
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            cancer_type = meta.get("cancer_type", cancer_type)
        except (UnicodeDecodeError, json.JSONDecodeError, AttributeError) as exc:
            raise CorpusFormatError(meta_path, f"unreadable meta file ({exc})") from exc
        if cancer_type not in CANCER_TYPES:
            raise CorpusFormatError(meta_path, f"unknown cancer type {cancer_type!r}")

    notes = []
    for path in sorted(directory.glob("*.txt")):
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusFormatError(path, "note is not valid UTF-8") from exc
        if not text.strip():
            raise CorpusFormatError(path, "note text is empty")
        notes.append(ClinicalNote(patient_id, path.stem, text, find_doctime(text)))

    gold = None
    gold_path = directory / GOLD_FILE
    if gold_path.exists():
        gold = _read_gold(gold_path, {n.note_id for n in notes})
    return PatientRecord(patient_id, cancer_type, notes, gold)


def load_corpus(
    root: str | Path, default_cancer_type: str = "breast", max_workers: int = 1
) -> list[PatientRecord]:
    """Load every patient directory under ``root``, sorted by patient then note id."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusFormatError(root, "corpus root is not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            records = list(pool.map(lambda d: load_patient(d, default_cancer_type), dirs))
    else:
        records = [load_patient(d, default_cancer_type) for d in dirs]
    # Extraction and dataset files are keyed by note id alone.
    owner: dict[str, str] = {}
    for record in records:
        for note in record.notes:
            if note.note_id in owner:
                raise CorpusFormatError(
                    root / record.patient_id / f"{note.note_id}.txt",
                    f"note id also used by patient {owner[note.note_id]!r}",
                )
            owner[note.note_id] = record.patient_id
    return records


def iter_notes(records: list[PatientRecord]):
    for record in records:
        yield from record.notes
