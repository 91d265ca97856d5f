"""SFT examples from gold annotations and recall-ranked DPO preference pairs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .corpus import ClinicalNote, PatientRecord
from .gateway import (
    EXTRACTION,
    Gateway,
    ParseError,
    SamplingParams,
    parse_triplet_array,
    render_prompt,
    serialize_triplets,
    template_hash,
)
from .triplets import SactTriplet

DEFAULT_SAMPLES = 8

# Recorded in dataset metadata for the external trainer; nothing here trains.
RECOMMENDED_TRAINING = {
    "sft_epochs": 10,
    "dpo_warmup_sft_epochs": 5,
    "dpo_epochs": 10,
    "adapter": "lora",
    "thinking_mode": False,
}


@dataclass(frozen=True)
class SftExample:
    note_id: str
    prompt_text: str
    target_text: str


@dataclass(frozen=True)
class CandidateSet:
    note_id: str
    candidates: tuple[str, ...]

    @property
    def k(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class PreferencePair:
    note_id: str
    prompt_text: str
    chosen: str
    rejected: str
    chosen_recall: float
    rejected_recall: float

    def __post_init__(self) -> None:
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected must differ")
        if self.chosen_recall < self.rejected_recall:
            raise ValueError("chosen recall below rejected recall")


def annotated_notes(records: Sequence[PatientRecord]) -> list[tuple[ClinicalNote, list[SactTriplet]]]:
    out = []
    for record in records:
        if record.gold is None:
            continue
        for note in record.notes:
            out.append((note, record.gold.get(note.note_id, [])))
    return sorted(out, key=lambda pair: pair[0].note_id)


def build_sft_dataset(records: Sequence[PatientRecord]) -> list[SftExample]:
    """One example per annotated note, including notes with no gold events."""
    return [
        SftExample(note.note_id, render_prompt(EXTRACTION, note.text), serialize_triplets(gold))
        for note, gold in annotated_notes(records)
    ]


def candidate_recall(candidate_text: str, gold: Sequence[SactTriplet]) -> float:
    """Share of distinct gold triplets reproduced by the candidate (precision ignored)."""
    gold_keys = {t.key() for t in gold}
    if not gold_keys:
        raise ValueError("recall is undefined for an empty gold list")
    try:
        predicted = {t.key() for t in parse_triplet_array(candidate_text)}
    except ParseError:
        return 0.0
    return len(gold_keys & predicted) / len(gold_keys)


def select_pair(
    candidates: CandidateSet, gold: Sequence[SactTriplet], prompt_text: str = ""
) -> PreferencePair | None:
    """Highest-recall candidate vs lowest-recall candidate, ties to the lower index.

    When the two picks are the same text (only possible when every recall is
    equal) the rejected side moves to the first candidate with different text;
    with no such candidate there is no pair.
    """
    texts = candidates.candidates
    if not texts:
        return None
    recalls = [candidate_recall(t, gold) for t in texts]
    best = max(range(len(texts)), key=lambda i: (recalls[i], -i))
    worst = min(range(len(texts)), key=lambda i: (recalls[i], i))
    if texts[best] == texts[worst]:
        worst = next((i for i, t in enumerate(texts) if t != texts[best]), None)
        if worst is None:
            return None
    return PreferencePair(
        candidates.note_id, prompt_text, texts[best], texts[worst], recalls[best], recalls[worst]
    )


def sample_candidates(
    note: ClinicalNote,
    gateway: Gateway,
    k: int = DEFAULT_SAMPLES,
    sampling: SamplingParams | None = None,
) -> CandidateSet:
    """Draw ``k`` generations from the warm-up policy; failures become empty strings."""
    out = []
    for i in range(k):
        request = gateway.request(EXTRACTION, note.text, thinking=False, sampling=sampling, sample_index=i)
        result = gateway.complete(request, warn=False)
        out.append(result.answer_text if result.finish_reason != "length" else "")
    return CandidateSet(note.note_id, tuple(out))


def build_preference_pairs(
    records: Sequence[PatientRecord], candidate_sets: dict[str, CandidateSet]
) -> list[PreferencePair]:
    pairs = []
    for note, gold in annotated_notes(records):
        if not gold or note.note_id not in candidate_sets:
            continue
        pair = select_pair(candidate_sets[note.note_id], gold, render_prompt(EXTRACTION, note.text))
        if pair is not None:
            pairs.append(pair)
    return pairs


def _jsonl(rows: list[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)


def emit_datasets(
    sft: Sequence[SftExample],
    pairs: Sequence[PreferencePair],
    out_dir: str | Path,
    sampling: SamplingParams | None = None,
    samples_per_note: int = DEFAULT_SAMPLES,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sft_rows = [{"prompt": e.prompt_text, "response": e.target_text} for e in sorted(sft, key=lambda e: e.note_id)]
    dpo_rows = [
        {"prompt": p.prompt_text, "chosen": p.chosen, "rejected": p.rejected}
        for p in sorted(pairs, key=lambda p: p.note_id)
    ]
    (out / "sft.jsonl").write_text(_jsonl(sft_rows), encoding="utf-8")
    (out / "dpo.jsonl").write_text(_jsonl(dpo_rows), encoding="utf-8")
    metadata = {
        "template": EXTRACTION,
        "template_sha256": template_hash(EXTRACTION),
        "sampling": asdict(sampling or SamplingParams()),
        "samples_per_note": samples_per_note,
        "sft_examples": len(sft_rows),
        "dpo_pairs": len(dpo_rows),
        "recommended_training": RECOMMENDED_TRAINING,
    }
    (out / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_candidates(path: str | Path) -> dict[str, CandidateSet]:
    """Read ``{"note_id": ..., "candidates": [...]}`` JSON lines."""
    sets = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            sets[row["note_id"]] = CandidateSet(row["note_id"], tuple(row["candidates"]))
    return sets


def write_candidates(sets: Sequence[CandidateSet], path: str | Path) -> None:
    rows = [{"note_id": s.note_id, "candidates": list(s.candidates)} for s in sorted(sets, key=lambda s: s.note_id)]
    Path(path).write_text(_jsonl(rows), encoding="utf-8")
