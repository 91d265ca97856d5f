"""Rule-based normalization of time expressions to ISO day/week/month/year values.

Relative expressions are resolved against the note's document time.  Two
behaviours of the original grammar are kept on purpose because the reference
timelines were produced with them:

* ``last week`` resolves to a *day* (anchor minus seven days) while
  ``next week`` resolves to a *week*;
* a month-day without a year ("January 9") lands in the year before the
  anchor's year.

Passing ``strict_iso_fixups=True`` disables both.
"""

from __future__ import annotations

import calendar
import datetime as dt
import re
from dataclasses import dataclass

DAY, WEEK, MONTH, YEAR = "day", "week", "month", "year"

FORMATS = {
    DAY: re.compile(r"^\d{4}-\d{2}-\d{2}$"),
    WEEK: re.compile(r"^\d{4}-w(0[1-9]|[1-4]\d|5[0-3])$"),
    MONTH: re.compile(r"^\d{4}-(0[1-9]|1[0-2])$"),
    YEAR: re.compile(r"^\d{4}$"),
}

UNKNOWN_SHAPE = "unknown-shape"
MISSING_ANCHOR = "missing-anchor"
INVALID_DATE = "invalid-date"

TWO_DIGIT_YEAR_PIVOT = 29


class Unnormalizable(ValueError):
    def __init__(self, reason: str, expr: str = "") -> None:
        super().__init__(f"{reason}: {expr!r}")
        self.reason = reason
        self.expr = expr


@dataclass(frozen=True)
class NormalizedTime:
    granularity: str
    value: str

    def __post_init__(self) -> None:
        fmt = FORMATS.get(self.granularity)
        if fmt is None or not fmt.match(self.value):
            raise ValueError(f"{self.value!r} is not a valid {self.granularity} value")
        if self.granularity == DAY:
            dt.date.fromisoformat(self.value)

    @classmethod
    def day(cls, date: dt.date) -> NormalizedTime:
        return cls(DAY, date.isoformat())

    @classmethod
    def week(cls, date: dt.date) -> NormalizedTime:
        year, week = iso_week_of(date)
        return cls(WEEK, f"{year:04d}-w{week:02d}")

    @classmethod
    def month(cls, year: int, month: int) -> NormalizedTime:
        return cls(MONTH, f"{year:04d}-{month:02d}")

    @classmethod
    def year(cls, year: int) -> NormalizedTime:
        return cls(YEAR, f"{year:04d}")

    @classmethod
    def from_value(cls, value: str) -> NormalizedTime:
        for gran, fmt in FORMATS.items():
            if fmt.match(value):
                return cls(gran, value)
        raise ValueError(f"unrecognised normalized time {value!r}")


@dataclass(frozen=True)
class Anchor:
    doctime: dt.date


def iso_week_of(date: dt.date) -> tuple[int, int]:
    """ISO-8601 week-numbering year and week number."""
    iso = date.isocalendar()
    return iso[0], iso[1]


def add_months(date: dt.date, months: int) -> dt.date:
    """Calendar month arithmetic, clamping the day to the target month's length."""
    index = date.year * 12 + date.month - 1 + months
    year, month = divmod(index, 12)
    month += 1
    day = min(date.day, calendar.monthrange(year, month)[1])
    return dt.date(year, month, day)


# --------------------------------------------------------------------------
# Grammar
# --------------------------------------------------------------------------

MONTHS = {
    "january": 1, "jan": 1, "february": 2, "feb": 2, "march": 3, "mar": 3,
    "april": 4, "apr": 4, "may": 5, "june": 6, "jun": 6, "july": 7, "jul": 7,
    "august": 8, "aug": 8, "september": 9, "sept": 9, "sep": 9,
    "october": 10, "oct": 10, "november": 11, "nov": 11, "december": 12, "dec": 12,
}

NUMBER_WORDS = {
    "a": 1, "an": 1, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11,
    "twelve": 12,
}

_MONTH = r"(?P<month>" + "|".join(sorted(MONTHS, key=len, reverse=True)) + r")\.?"
_DAYNUM = r"(?P<day>\d{1,2})(?:st|nd|rd|th)?"
_NUM = r"(?P<n>\d+|" + "|".join(NUMBER_WORDS) + ")"

_NUMERIC = re.compile(r"(?P<m>\d{1,2})(?P<sep>[/-])(?P<d>\d{1,2})(?P=sep)(?P<y>\d{4}|\d{2})")
_VERBOSE = re.compile(_MONTH + r"\s+" + _DAYNUM + r",?\s+(?P<year>\d{4})")
_MONTH_DAY = re.compile(_MONTH + r"\s+" + _DAYNUM)
_MONTH_YEAR = re.compile(_MONTH + r",?\s+(?P<year>\d{4})")
_YEAR = re.compile(r"(?P<year>\d{4})")
_AGO = re.compile(_NUM + r"\s+(?P<unit>day|week|month|year)s?\s+ago")
_SHIFT = re.compile(r"(?P<which>last|next|this)\s+(?P<unit>week|month|year)")
_DEICTIC = {"today": 0, "yesterday": -1, "tomorrow": 1}

_EDGE_PUNCT = " \t\r\n.,;:!?\"'()[]{}"


def _date(year: int, month: int, day: int, expr: str) -> dt.date:
    try:
        return dt.date(year, month, day)
    except ValueError as exc:
        raise Unnormalizable(INVALID_DATE, expr) from exc


def _expand_year(text: str) -> int:
    year = int(text)
    if len(text) == 2:
        year += 2000 if year <= TWO_DIGIT_YEAR_PIVOT else 1900
    return year


def _require(anchor: Anchor | dt.date | None, expr: str) -> dt.date:
    if anchor is None:
        raise Unnormalizable(MISSING_ANCHOR, expr)
    return anchor.doctime if isinstance(anchor, Anchor) else anchor


def _month_day(month: int, day: int, ref: dt.date, strict: bool, expr: str) -> dt.date:
    if not 1 <= day <= 31:
        raise Unnormalizable(INVALID_DATE, expr)
    if not strict:
        return _date(ref.year - 1, month, day, expr)
    # Most recent occurrence not after the anchor; Feb 29 may need a few years.
    for year in range(ref.year, ref.year - 9, -1):
        try:
            candidate = dt.date(year, month, day)
        except ValueError:
            continue
        if candidate <= ref:
            return candidate
    raise Unnormalizable(INVALID_DATE, expr)


def normalize(
    expr: str, anchor: Anchor | dt.date | None = None, strict_iso_fixups: bool = False
) -> NormalizedTime:
    """Normalize one time expression; raises :class:`Unnormalizable`."""
    text = " ".join(expr.split()).strip(_EDGE_PUNCT).lower()
    if not text:
        raise Unnormalizable(UNKNOWN_SHAPE, expr)

    if m := _NUMERIC.fullmatch(text):
        year = _expand_year(m["y"])
        return NormalizedTime.day(_date(year, int(m["m"]), int(m["d"]), expr))

    if m := _VERBOSE.fullmatch(text):
        return NormalizedTime.day(_date(int(m["year"]), MONTHS[m["month"]], int(m["day"]), expr))

    if m := _MONTH_YEAR.fullmatch(text):
        return NormalizedTime.month(int(m["year"]), MONTHS[m["month"]])

    if m := _YEAR.fullmatch(text):
        return NormalizedTime.year(int(m["year"]))

    if m := _MONTH_DAY.fullmatch(text):
        ref = _require(anchor, expr)
        return NormalizedTime.day(_month_day(MONTHS[m["month"]], int(m["day"]), ref, strict_iso_fixups, expr))

    if text in _DEICTIC:
        ref = _require(anchor, expr)
        return NormalizedTime.day(ref + dt.timedelta(days=_DEICTIC[text]))

    if m := _AGO.fullmatch(text):
        ref = _require(anchor, expr)
        n = int(m["n"]) if m["n"].isdigit() else NUMBER_WORDS[m["n"]]
        unit = m["unit"]
        try:
            if unit == "day":
                out = ref - dt.timedelta(days=n)
            elif unit == "week":
                out = ref - dt.timedelta(weeks=n)
            elif unit == "month":
                out = add_months(ref, -n)
            else:
                out = add_months(ref, -12 * n)
        except (OverflowError, ValueError) as exc:
            raise Unnormalizable(INVALID_DATE, expr) from exc
        return NormalizedTime.day(out)

    if m := _SHIFT.fullmatch(text):
        ref = _require(anchor, expr)
        which, unit = m["which"], m["unit"]
        step = {"last": -1, "next": 1, "this": 0}[which]
        if unit == "week":
            shifted = ref + dt.timedelta(days=7 * step)
            if which == "last" and not strict_iso_fixups:
                return NormalizedTime.day(shifted)
            return NormalizedTime.week(shifted)
        if unit == "month":
            shifted = add_months(ref.replace(day=1), step)
            return NormalizedTime.month(shifted.year, shifted.month)
        return NormalizedTime.year(ref.year + step)

    raise Unnormalizable(UNKNOWN_SHAPE, expr)


def try_normalize(
    expr: str, anchor: Anchor | dt.date | None = None, strict_iso_fixups: bool = False
) -> NormalizedTime | None:
    try:
        return normalize(expr, anchor, strict_iso_fixups)
    except Unnormalizable:
        return None
