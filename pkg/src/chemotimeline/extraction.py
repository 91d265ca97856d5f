"""Note-level extraction strategies."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import ClinicalNote, split_sentences
from .dictionary import (
    SactDictionary,
    TaggedSentence,
    TagFormatError,
    read_tags,
    select_candidate_windows,
    tag_note,
)
from .gateway import (
    EXTRACTION,
    SENTENCE_RELATION,
    TAG_VERIFICATION,
    Gateway,
    ParseError,
    SamplingParams,
    parse_triplet_array,
)
from .triplets import SactTriplet

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "thinking", "thinking_post", "dictionary", "sft_model", "dpo_model", "ensemble")

SENTENCE_SEPARATOR = "\n\n"


class MixedNoteError(ValueError):
    pass


@dataclass
class NoteExtraction:
    note_id: str
    strategy: str
    triplets: list[SactTriplet] = field(default_factory=list)
    warnings: Counter = field(default_factory=Counter)

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


# --------------------------------------------------------------------------
# Postprocessing rules
# --------------------------------------------------------------------------

FILLER_WORDS = ("approximately", "about", "around", "in")
_FILLER = re.compile(r"(?<!\S)(?:" + "|".join(FILLER_WORDS) + r")(?!\S)", re.IGNORECASE)


def strip_chemo_descriptors(sact: str) -> str:
    """Drop every whitespace token before the first token containing "chemo"."""
    tokens = sact.split()
    for i, tok in enumerate(tokens):
        if "chemo" in tok.lower():
            return " ".join(tokens[i:]) if i else sact
    return sact


def split_combined(sact: str) -> list[str]:
    if "/" not in sact:
        return [sact]
    return [part.strip() for part in sact.split("/") if part.strip()]


def strip_time_fillers(time_raw: str) -> str:
    if not _FILLER.search(time_raw):
        return time_raw
    cleaned = " ".join(_FILLER.sub(" ", time_raw).split())
    # Keep the original when nothing but filler words remain.
    return cleaned or time_raw


def postprocess_triplets(triplets: Sequence[SactTriplet]) -> list[SactTriplet]:
    out = []
    for t in triplets:
        sact = strip_chemo_descriptors(t.sact)
        time_raw = strip_time_fillers(t.time_raw)
        for part in split_combined(sact):
            # A split component is itself a therapy name, so the descriptor
            # rule applies to it too; this keeps the whole pass idempotent.
            out.append(SactTriplet(strip_chemo_descriptors(part), t.relation, time_raw))
    return out


# --------------------------------------------------------------------------
# Prompt strategies
# --------------------------------------------------------------------------


def _generate_and_parse(
    gateway: Gateway,
    template_id: str,
    payload: str,
    thinking: bool,
    sampling: SamplingParams | None,
    stats: Counter,
    model_name: str | None = None,
) -> list[SactTriplet]:
    request = gateway.request(template_id, payload, thinking=thinking, sampling=sampling, model_name=model_name)
    result = gateway.complete(request, warn=False)
    if result.finish_reason == "length":
        stats["truncated"] += 1
        log.warning("truncated generation for %s; treating as no extraction", template_id)
        return []
    try:
        return parse_triplet_array(result.answer_text, stats)
    except ParseError:
        log.warning("unparseable %s output; treating as no extraction", template_id)
        return []


def extract_baseline(
    note: ClinicalNote,
    gateway: Gateway,
    sampling: SamplingParams | None = None,
    strategy: str = "baseline",
    model_name: str | None = None,
) -> NoteExtraction:
    """One-pass extraction over the raw note, thinking disabled."""
    stats: Counter = Counter()
    triplets = _generate_and_parse(gateway, EXTRACTION, note.text, False, sampling, stats, model_name)
    return NoteExtraction(note.note_id, strategy, triplets, stats)


def extract_thinking(
    note: ClinicalNote,
    gateway: Gateway,
    postprocess: bool = False,
    sampling: SamplingParams | None = None,
    model_name: str | None = None,
) -> NoteExtraction:
    stats: Counter = Counter()
    triplets = _generate_and_parse(gateway, EXTRACTION, note.text, True, sampling, stats, model_name)
    if postprocess:
        triplets = postprocess_triplets(triplets)
    return NoteExtraction(note.note_id, "thinking_post" if postprocess else "thinking", triplets, stats)


# --------------------------------------------------------------------------
# Dictionary-enhanced pipeline
# --------------------------------------------------------------------------


def _unwrap_braces(text: str) -> str | None:
    text = text.strip()
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        text = text[1:-1].strip()
    if not (text.startswith("{") and text.endswith("}")):
        return None
    return text[1:-1]


def verify_tags(
    batches: Sequence[Sequence[TaggedSentence]],
    gateway: Gateway,
    thinking: bool = True,
    sampling: SamplingParams | None = None,
    stats: Counter | None = None,
) -> list[TaggedSentence]:
    """Let the model add or remove tags; each batch is one request.

    Output that breaks the brace format or the sentence layout falls back to
    the input tagging for the whole batch.  A sentence whose text the model
    altered keeps its input tagging.
    """
    stats = stats if stats is not None else Counter()
    out: list[TaggedSentence] = []
    for batch in batches:
        if not batch:
            continue
        payload = "{" + SENTENCE_SEPARATOR.join(s.tagged_text for s in batch) + "}"
        request = gateway.request(TAG_VERIFICATION, payload, thinking=thinking, sampling=sampling)
        result = gateway.complete(request, warn=False)
        body = _unwrap_braces(result.answer_text) if result.finish_reason != "length" else None
        parts = body.split(SENTENCE_SEPARATOR) if body is not None else []
        if len(parts) != len(batch):
            stats["verification_fallback"] += 1
            log.warning("tag verification output unusable; keeping dictionary tags")
            out.extend(batch)
            continue
        for original, tagged in zip(batch, parts):
            tagged = tagged.strip()
            try:
                plain, matches = read_tags(tagged)
            except TagFormatError:
                plain, matches = None, []
            if plain != original.text:
                stats["verification_sentence_kept"] += 1
                out.append(original)
                continue
            out.append(TaggedSentence(original.sentence_span, tagged, tuple(matches)))
    return out


def extract_dictionary_pipeline(
    note: ClinicalNote,
    dictionary: SactDictionary,
    gateway: Gateway,
    thinking: bool = True,
    sampling: SamplingParams | None = None,
) -> NoteExtraction:
    stats: Counter = Counter()
    spans = split_sentences(note.text, note.note_id)
    tagged = tag_note(note, spans, dictionary)
    candidates = [t for t in tagged if t.has_tags]
    if not candidates:
        return NoteExtraction(note.note_id, "dictionary", [], stats)

    verified = {t.sentence_span.index: t for t in verify_tags([candidates], gateway, thinking, sampling, stats)}
    merged = [verified.get(t.sentence_span.index, t) for t in tagged]

    triplets: list[SactTriplet] = []
    for window in select_candidate_windows(note, merged):
        triplets.extend(
            _generate_and_parse(gateway, SENTENCE_RELATION, window.render(), thinking, sampling, stats)
        )
    return NoteExtraction(note.note_id, "dictionary", triplets, stats)


def ensemble_concat(extractions: Sequence[NoteExtraction], note_id: str | None = None) -> NoteExtraction:
    """Concatenate member outputs in order; duplicates are kept for aggregation."""
    ids = {e.note_id for e in extractions}
    if note_id is not None:
        ids.add(note_id)
    if len(ids) > 1:
        raise MixedNoteError(f"extractions span several notes: {sorted(ids)}")
    merged = NoteExtraction(ids.pop() if ids else "", "ensemble")
    for e in extractions:
        merged.triplets.extend(e.triplets)
        merged.warnings.update(e.warnings)
    return merged
