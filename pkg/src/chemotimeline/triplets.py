"""Event triplets shared by every stage of the pipeline."""

from __future__ import annotations

import re
from dataclasses import dataclass

BEGINS_ON = "BEGINS-ON"
ENDS_ON = "ENDS-ON"
CONTAINS_1 = "CONTAINS-1"
RELATIONS = (BEGINS_ON, ENDS_ON, CONTAINS_1)

CANCER_TYPES = ("breast", "melanoma", "ovarian")

_WS = re.compile(r"\s+")


def canonicalize(text: str) -> str:
    """Lowercase and collapse internal whitespace."""
    return _WS.sub(" ", text).strip().lower()


@dataclass(frozen=True)
class SactTriplet:
    """A raw note-level event: therapy mention, relation, time expression (verbatim)."""

    sact: str
    relation: str
    time_raw: str

    def __post_init__(self) -> None:
        if not self.sact.strip():
            raise ValueError("sact must be non-empty")
        if not self.time_raw.strip():
            raise ValueError("time_raw must be non-empty")
        if self.relation not in RELATIONS:
            raise ValueError(f"illegal relation {self.relation!r}")

    def key(self) -> tuple[str, str, str]:
        """Strict-match key used for note-level scoring and recall."""
        return (canonicalize(self.sact), self.relation, canonicalize(self.time_raw))

    def as_list(self) -> list[str]:
        return [self.sact, self.relation, self.time_raw]

    def as_dict(self) -> dict[str, str]:
        return {"SACT": self.sact, "relation": self.relation, "time": self.time_raw}
