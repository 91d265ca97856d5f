"""Per-cancer-type SACT dictionaries and ``<e>``/``</e>`` sentence tagging."""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from .corpus import ClinicalNote, SentenceSpan
from .triplets import CANCER_TYPES

OPEN_TAG = "<e>"
CLOSE_TAG = "</e>"

_WS = re.compile(r"\s+")
_TAG = re.compile(r"</?e>")


def normalize_term(term: str) -> str:
    return _WS.sub(" ", term).strip().lower()


@dataclass(frozen=True)
class TermSource:
    """A list of dictionary terms with its provenance.

    ``kind`` is one of ``regimen`` (regimen/drug/abbreviation listings, where
    purely alphabetic terms of two letters or fewer are dropped), ``generic``,
    ``annotated`` or ``curated``.
    """

    terms: tuple[str, ...]
    kind: str = "curated"

    @property
    def filter_short(self) -> bool:
        return self.kind == "regimen"


@dataclass(frozen=True)
class SactDictionary:
    cancer_type: str
    terms: frozenset[str]

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, term: str) -> bool:
        return normalize_term(term) in self.terms


def build_dictionary(
    cancer_type: str, raw_term_lists: Sequence[TermSource | Iterable[str]]
) -> SactDictionary:
    if cancer_type not in CANCER_TYPES:
        raise ValueError(f"unknown cancer type {cancer_type!r}")
    if not raw_term_lists:
        raise ValueError("at least one term list is required")
    terms: set[str] = set()
    for source in raw_term_lists:
        if not isinstance(source, TermSource):
            source = TermSource(tuple(source))
        for raw in source.terms:
            term = normalize_term(raw)
            if not term:
                continue
            if source.filter_short and len(term) <= 2 and term.isalpha():
                continue
            terms.add(term)
    return SactDictionary(cancer_type, frozenset(terms))


def read_term_file(text: str) -> list[str]:
    """Parse a dictionary file: one term per line, ``#`` starts a comment line."""
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


def shipped_terms(cancer_type: str) -> list[str]:
    if cancer_type not in CANCER_TYPES:
        raise ValueError(f"unknown cancer type {cancer_type!r}")
    ref = resources.files("chemotimeline") / "data" / "dictionaries" / f"{cancer_type}.txt"
    return read_term_file(ref.read_text(encoding="utf-8"))


def load_dictionary(cancer_type: str, extra_sources: Sequence[TermSource] = ()) -> SactDictionary:
    """The shipped list for ``cancer_type`` merged with any extra sources."""
    return build_dictionary(cancer_type, [TermSource(tuple(shipped_terms(cancer_type))), *extra_sources])


# --------------------------------------------------------------------------
# Multi-pattern matching
# --------------------------------------------------------------------------


class _Automaton:
    """Aho-Corasick automaton over lowercased terms."""

    def __init__(self, terms: Iterable[str]) -> None:
        self.goto: list[dict[str, int]] = [{}]
        self.fail: list[int] = [0]
        self.out: list[list[int]] = [[]]  # term lengths ending at each state
        for term in terms:
            self._add(term)
        self._link()

    def _add(self, term: str) -> None:
        state = 0
        for ch in term:
            nxt = self.goto[state].get(ch)
            if nxt is None:
                nxt = len(self.goto)
                self.goto[state][ch] = nxt
                self.goto.append({})
                self.fail.append(0)
                self.out.append([])
            state = nxt
        self.out[state].append(len(term))

    def _link(self) -> None:
        queue = deque(self.goto[0].values())
        while queue:
            state = queue.popleft()
            for ch, nxt in self.goto[state].items():
                queue.append(nxt)
                f = self.fail[state]
                while f and ch not in self.goto[f]:
                    f = self.fail[f]
                cand = self.goto[f].get(ch, 0)
                self.fail[nxt] = cand if cand != nxt else 0
                self.out[nxt] = self.out[nxt] + self.out[self.fail[nxt]]

    def find_all(self, text: str):
        """Yield ``(start, end)`` for every occurrence of every term."""
        state = 0
        for i, ch in enumerate(text):
            while state and ch not in self.goto[state]:
                state = self.fail[state]
            state = self.goto[state].get(ch, 0)
            for length in self.out[state]:
                yield i + 1 - length, i + 1


_AUTOMATA: dict[frozenset[str], _Automaton] = {}


def _automaton(dictionary: SactDictionary) -> _Automaton:
    auto = _AUTOMATA.get(dictionary.terms)
    if auto is None:
        auto = _AUTOMATA[dictionary.terms] = _Automaton(dictionary.terms)
    return auto


def _at_boundary(text: str, start: int, end: int) -> bool:
    before_ok = start == 0 or not text[start - 1].isalnum()
    after_ok = end == len(text) or not text[end].isalnum()
    return before_ok and after_ok


def select_longest(candidates: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Resolve overlaps: longer matches win, then earlier ones; result in text order."""
    chosen: list[tuple[int, int]] = []
    for start, end in sorted(set(candidates), key=lambda m: (m[0] - m[1], m[0])):
        if all(end <= s or start >= e for s, e in chosen):
            chosen.append((start, end))
    return sorted(chosen)


def find_matches(text: str, dictionary: SactDictionary) -> list[tuple[int, int]]:
    """Non-overlapping ``(start, end)`` dictionary hits at token boundaries."""
    # str.lower() can change length for a few code points; fall back to
    # per-character folding so offsets stay aligned with ``text``.
    folded = text.lower()
    if len(folded) != len(text):
        folded = "".join(c.lower() if len(c.lower()) == 1 else c for c in text)
    hits = (m for m in _automaton(dictionary).find_all(folded) if _at_boundary(text, *m))
    return select_longest(hits)


# --------------------------------------------------------------------------
# Tagged sentences
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TermMatch:
    term: str  # surface text as it appears in the sentence
    start: int
    end: int


@dataclass(frozen=True)
class TaggedSentence:
    sentence_span: SentenceSpan | None
    tagged_text: str
    match_terms: tuple[TermMatch, ...] = field(default=())

    @property
    def text(self) -> str:
        return strip_tags(self.tagged_text)

    @property
    def has_tags(self) -> bool:
        return bool(self.match_terms)


def strip_tags(tagged: str) -> str:
    return _TAG.sub("", tagged)


def apply_tags(text: str, spans: Sequence[tuple[int, int]]) -> str:
    parts, pos = [], 0
    for start, end in spans:
        parts.append(text[pos:start])
        parts.append(OPEN_TAG + text[start:end] + CLOSE_TAG)
        pos = end
    parts.append(text[pos:])
    return "".join(parts)


class TagFormatError(ValueError):
    pass


def read_tags(tagged: str) -> tuple[str, list[TermMatch]]:
    """Recover plain text and match offsets from tagged text.

    Raises :class:`TagFormatError` for unbalanced, nested or empty tags.
    """
    plain: list[str] = []
    matches: list[TermMatch] = []
    pos = 0
    plain_len = 0
    open_at: int | None = None
    for m in _TAG.finditer(tagged):
        chunk = tagged[pos:m.start()]
        plain.append(chunk)
        plain_len += len(chunk)
        pos = m.end()
        if m.group() == OPEN_TAG:
            if open_at is not None:
                raise TagFormatError("nested <e> tag")
            open_at = plain_len
        else:
            if open_at is None:
                raise TagFormatError("</e> without <e>")
            if open_at == plain_len:
                raise TagFormatError("empty tag")
            matches.append(TermMatch("".join(plain)[open_at:plain_len], open_at, plain_len))
            open_at = None
    if open_at is not None:
        raise TagFormatError("unclosed <e> tag")
    plain.append(tagged[pos:])
    return "".join(plain), matches


def tag_matches(
    sentence_text: str, dictionary: SactDictionary, span: SentenceSpan | None = None
) -> TaggedSentence:
    spans = find_matches(sentence_text, dictionary)
    matches = tuple(TermMatch(sentence_text[s:e], s, e) for s, e in spans)
    return TaggedSentence(span, apply_tags(sentence_text, spans), matches)


def tag_note(note: ClinicalNote, spans: Sequence[SentenceSpan], dictionary: SactDictionary) -> list[TaggedSentence]:
    return [tag_matches(s.text(note.text), dictionary, s) for s in spans]


@dataclass(frozen=True)
class ContextWindow:
    """An anchor sentence (tagged) with its untagged neighbours."""

    anchor_index: int
    previous: str | None
    anchor: str
    next: str | None

    def render(self) -> str:
        return "\n".join(p for p in (self.previous, self.anchor, self.next) if p)


def select_candidate_windows(note: ClinicalNote, tagged: Sequence[TaggedSentence]) -> list[ContextWindow]:
    """One window per sentence carrying at least one tag, clipped at note edges."""
    ordered = sorted(tagged, key=lambda t: t.sentence_span.index if t.sentence_span else 0)
    windows = []
    for i, sent in enumerate(ordered):
        if not sent.has_tags:
            continue
        prev_text = ordered[i - 1].text if i > 0 else None
        next_text = ordered[i + 1].text if i + 1 < len(ordered) else None
        index = sent.sentence_span.index if sent.sentence_span else i
        windows.append(ContextWindow(index, prev_text, sent.tagged_text, next_text))
    return windows
