"""Run configuration and end-to-end orchestration."""

from __future__ import annotations

import datetime as dt
import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .corpus import ClinicalNote, PatientRecord, load_corpus
from .dictionary import SactDictionary, load_dictionary
from .evaluation import CONVENTIONS, format_table, note_micro, timeline_f1
from .extraction import (
    STRATEGIES,
    NoteExtraction,
    ensemble_concat,
    extract_baseline,
    extract_dictionary_pipeline,
    extract_thinking,
)
from .gateway import EndpointProfile, Gateway, GatewayError, HttpBackend, MockBackend, SamplingParams
from .timeline import (
    NormalizedTriplet,
    PatientTimeline,
    aggregate,
    normalize_triplets,
    timelines_to_json,
)
from .triplets import CANCER_TYPES, SactTriplet

log = logging.getLogger(__name__)

DEFAULT_ENSEMBLE = ("sft_model", "dpo_model", "thinking_post")


class ConfigError(ValueError):
    pass


@dataclass
class EnsembleMember:
    strategy: str
    model: str | None = None


@dataclass
class RunConfig:
    corpus_root: Path
    output_dir: Path
    strategy: str = "baseline"
    cancer_type: str = "breast"
    endpoint: EndpointProfile | None = None
    sampling: SamplingParams = field(default_factory=SamplingParams)
    mock_fixtures: Path | None = None
    model_name: str = "mock"
    workers: int = 1
    max_in_flight: int = 4
    retries: int = 3
    strict_iso_fixups: bool = False
    dictionary_thinking: bool = True
    ensemble: list[EnsembleMember] = field(
        default_factory=lambda: [EnsembleMember(s) for s in DEFAULT_ENSEMBLE]
    )

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.cancer_type not in CANCER_TYPES:
            raise ConfigError(f"unknown cancer type {self.cancer_type!r}")
        if self.mock_fixtures is not None and self.endpoint is not None:
            raise ConfigError("mock_fixtures and endpoint are mutually exclusive")
        if self.mock_fixtures is None and self.endpoint is None:
            raise ConfigError("either mock_fixtures or endpoint must be configured")
        if self.workers < 1 or self.max_in_flight < 1:
            raise ConfigError("workers and max_in_flight must be >= 1")
        for member in self.ensemble:
            if member.strategy in ("ensemble",) or member.strategy not in STRATEGIES:
                raise ConfigError(f"invalid ensemble member {member.strategy!r}")

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "model": self.endpoint.model if self.endpoint else self.model_name,
            "backend": "http" if self.endpoint else "mock",
            "cancer_type_default": self.cancer_type,
            "sampling": asdict(self.sampling),
            "strict_iso_fixups": self.strict_iso_fixups,
            "ensemble": [asdict(m) for m in self.ensemble] if self.strategy == "ensemble" else None,
        }


def _path(base: Path, value: Any) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def config_from_dict(data: dict, base: Path = Path(".")) -> RunConfig:
    try:
        endpoint = EndpointProfile(**data["endpoint"]) if data.get("endpoint") else None
        sampling = SamplingParams(**data.get("sampling", {}))
        ensemble = [EnsembleMember(**m) for m in data["ensemble"]] if "ensemble" in data else None
        cfg = RunConfig(
            corpus_root=_path(base, data["corpus_root"]),
            output_dir=_path(base, data.get("output_dir", "out")),
            strategy=data.get("strategy", "baseline"),
            cancer_type=data.get("cancer_type", "breast"),
            endpoint=endpoint,
            sampling=sampling,
            mock_fixtures=_path(base, data.get("mock_fixtures")),
            model_name=data.get("model_name", "mock"),
            workers=int(data.get("workers", 1)),
            max_in_flight=int(data.get("max_in_flight", 4)),
            retries=int(data.get("retries", 3)),
            strict_iso_fixups=bool(data.get("strict_iso_fixups", False)),
            dictionary_thinking=bool(data.get("dictionary_thinking", True)),
        )
        if ensemble is not None:
            cfg.ensemble = ensemble
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(data, path.parent)


def build_gateway(cfg: RunConfig) -> Gateway:
    if cfg.mock_fixtures is not None:
        return Gateway(MockBackend(cfg.mock_fixtures), cfg.model_name, cfg.max_in_flight)
    assert cfg.endpoint is not None
    return Gateway(HttpBackend(cfg.endpoint, retries=cfg.retries), cfg.endpoint.model, cfg.max_in_flight)


# --------------------------------------------------------------------------
# Extraction
# --------------------------------------------------------------------------


def _run_strategy(
    strategy: str,
    note: ClinicalNote,
    gateway: Gateway,
    cfg: RunConfig,
    dictionary: SactDictionary | None,
    model: str | None = None,
) -> NoteExtraction:
    if strategy in ("baseline", "sft_model", "dpo_model"):
        return extract_baseline(note, gateway, cfg.sampling, strategy=strategy, model_name=model)
    if strategy in ("thinking", "thinking_post"):
        return extract_thinking(note, gateway, strategy == "thinking_post", cfg.sampling, model_name=model)
    if strategy == "dictionary":
        assert dictionary is not None
        return extract_dictionary_pipeline(note, dictionary, gateway, cfg.dictionary_thinking, cfg.sampling)
    members = [_run_strategy(m.strategy, note, gateway, cfg, dictionary, m.model) for m in cfg.ensemble]
    return ensemble_concat(members, note.note_id)


def extract_corpus(
    records: Sequence[PatientRecord], cfg: RunConfig, gateway: Gateway
) -> list[NoteExtraction]:
    """Run the configured strategy on every note, in corpus order."""
    dictionaries: dict[str, SactDictionary] = {}
    if cfg.strategy == "dictionary" or any(m.strategy == "dictionary" for m in cfg.ensemble):
        for ct in {r.cancer_type for r in records}:
            dictionaries[ct] = load_dictionary(ct)
    jobs = [(note, dictionaries.get(r.cancer_type)) for r in records for note in r.notes]

    def work(job: tuple[ClinicalNote, SactDictionary | None]) -> NoteExtraction:
        note, dictionary = job
        try:
            return _run_strategy(cfg.strategy, note, gateway, cfg, dictionary)
        except GatewayError as exc:
            log.error("note %s: model call failed (%s); recording empty extraction", note.note_id, exc)
            return NoteExtraction(note.note_id, cfg.strategy, [], Counter({"llm_failure": 1}))

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(work, jobs))
    return [work(j) for j in jobs]


# --------------------------------------------------------------------------
# File formats for intermediate artifacts
# --------------------------------------------------------------------------


def extractions_to_json(
    extractions: Sequence[NoteExtraction], records: Sequence[PatientRecord], run_info: dict
) -> str:
    patient_of = {n.note_id: r.patient_id for r in records for n in r.notes}
    notes = {}
    for e in sorted(extractions, key=lambda e: e.note_id):
        notes[e.note_id] = {
            "patient_id": patient_of.get(e.note_id),
            "triplets": [t.as_list() for t in e.triplets],
            "warnings": dict(sorted(e.warnings.items())),
        }
    payload = {**run_info, "notes": notes}
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def read_extractions(path: str | Path) -> tuple[str, dict[str, list[SactTriplet]]]:
    """Read an extraction file; returns ``(strategy, note_id -> triplets)``.

    Accepts the run format (``{"strategy":..., "notes": {...}}``) or a bare
    ``note_id -> [[sact, relation, time], ...]`` mapping.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return triplet_mapping(data)


def triplet_mapping(data: dict) -> tuple[str, dict[str, list[SactTriplet]]]:
    strategy = "baseline"
    if isinstance(data.get("notes"), dict):
        strategy = data.get("strategy", strategy)
        rows_by_note = {nid: entry["triplets"] for nid, entry in data["notes"].items()}
    else:
        rows_by_note = data
    return strategy, {nid: [SactTriplet(*row) for row in rows] for nid, rows in rows_by_note.items()}


def normalize_corpus(
    triplets_by_note: dict[str, list[SactTriplet]],
    records: Sequence[PatientRecord],
    drops: Counter,
    strict_iso_fixups: bool = False,
) -> tuple[dict[str, list[NormalizedTriplet]], list[PatientTimeline]]:
    """Normalize per note, then aggregate per patient (every patient gets a timeline)."""
    per_note: dict[str, list[NormalizedTriplet]] = {}
    timelines = []
    for record in records:
        patient_events: list[NormalizedTriplet] = []
        for note in record.notes:
            normalized = normalize_triplets(triplets_by_note.get(note.note_id, []), note, drops, strict_iso_fixups)
            per_note[note.note_id] = normalized
            patient_events.extend(normalized)
        timelines.append(aggregate(record.patient_id, patient_events))
    return per_note, timelines


def normalized_to_json(per_note: dict[str, list[NormalizedTriplet]]) -> str:
    payload = {
        nid: [[t.sact_surface, t.relation, t.time.value, t.time.granularity] for t in rows]
        for nid, rows in sorted(per_note.items())
    }
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def gold_by_note(records: Sequence[PatientRecord]) -> dict[str, list[SactTriplet]] | None:
    if not any(r.gold is not None for r in records):
        return None
    out: dict[str, list[SactTriplet]] = {}
    for r in records:
        if r.gold is not None:
            out.update(r.gold)
    return out


def evaluation_report(
    pred_by_note: dict[str, list[SactTriplet]],
    pred_timelines: Sequence[PatientTimeline],
    records: Sequence[PatientRecord],
    strict_iso_fixups: bool = False,
) -> tuple[dict, list[PatientTimeline]] | None:
    """Note-level and timeline-level metrics against the corpus gold."""
    gold_notes = gold_by_note(records)
    if gold_notes is None:
        return None
    gold_records = [r for r in records if r.gold is not None]
    note_ids = {n.note_id for r in gold_records for n in r.notes}
    note_level = note_micro(
        {nid: [t.key() for t in ts] for nid, ts in pred_by_note.items() if nid in note_ids},
        {nid: [t.key() for t in ts] for nid, ts in gold_notes.items()},
    )
    _, gold_timelines = normalize_corpus(gold_notes, gold_records, Counter(), strict_iso_fixups)
    universe = [r.patient_id for r in gold_records]
    timeline = timeline_f1(
        [t for t in pred_timelines if t.patient_id in set(universe)], gold_timelines, universe
    )
    assert abs(timeline.official - (timeline.type_a_f1 + timeline.type_b_f1) / 2) < 1e-12
    report = {
        "conventions": CONVENTIONS,
        "note_level": note_level.as_dict(),
        "timeline_level": timeline.as_dict(),
    }
    return report, gold_timelines


# --------------------------------------------------------------------------
# Full run
# --------------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def run_pipeline(cfg: RunConfig, gateway: Gateway | None = None) -> dict:
    """Load, extract, normalize, aggregate, write timelines and (with gold) evaluate.

    Every stage's output is persisted in ``cfg.output_dir``; the returned
    report is also written there as ``manifest.json``.
    """
    cfg.validate()
    started = time.perf_counter()
    timings: dict[str, float] = {}

    def mark(stage: str, t0: float) -> float:
        now = time.perf_counter()
        timings[stage] = round(now - t0, 6)
        return now

    t = time.perf_counter()
    records = load_corpus(cfg.corpus_root, cfg.cancer_type, cfg.workers)
    t = mark("load", t)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    gateway = gateway or build_gateway(cfg)
    extractions = extract_corpus(records, cfg, gateway)
    t = mark("extract", t)
    run_info = cfg.summary()
    _write(out / "extractions.json", extractions_to_json(extractions, records, run_info))

    drops: Counter = Counter()
    pred_by_note = {e.note_id: e.triplets for e in extractions}
    per_note, timelines = normalize_corpus(pred_by_note, records, drops, cfg.strict_iso_fixups)
    _write(out / "normalized.json", normalized_to_json(per_note))
    _write(out / "timelines.json", timelines_to_json(timelines))
    t = mark("normalize_aggregate", t)

    warnings: Counter = Counter()
    for e in extractions:
        warnings.update(e.warnings)

    metrics = None
    evaluated = evaluation_report(pred_by_note, timelines, records, cfg.strict_iso_fixups)
    if evaluated is not None:
        metrics, gold_timelines = evaluated
        _write(out / "gold_timelines.json", timelines_to_json(gold_timelines))
        _write(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        _write(out / "metrics.txt", format_table(metrics) + "\n")
        mark("evaluate", t)

    report = {
        **run_info,
        "started_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "corpus_root": str(cfg.corpus_root),
        "patients": len(records),
        "notes": sum(len(r.notes) for r in records),
        "notes_without_doctime": sum(1 for r in records for n in r.notes if n.doctime is None),
        "model_calls": gateway.calls,
        "triplets_extracted": sum(len(e.triplets) for e in extractions),
        "triplets_normalized": sum(len(v) for v in per_note.values()),
        "timeline_events": sum(len(tl.events) for tl in timelines),
        "dropped": dict(sorted(drops.items())),
        "warnings": dict(sorted(warnings.items())),
        "metrics": metrics,
        "timing_seconds": {**timings, "total": round(time.perf_counter() - started, 6)},
    }
    _write(out / "manifest.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
