"""Command-line entry point.

Exit codes: 0 success, 1 fatal error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import dpo_prep
from .corpus import CorpusFormatError, load_corpus
from .evaluation import CONVENTIONS, format_table, note_micro, timeline_f1
from .extraction import STRATEGIES
from .gateway import GatewayError, SamplingParams
from .pipeline import (
    ConfigError,
    RunConfig,
    build_gateway,
    config_from_dict,
    extract_corpus,
    extractions_to_json,
    gold_by_note,
    load_config,
    normalize_corpus,
    normalized_to_json,
    read_extractions,
    run_pipeline,
    triplet_mapping,
)
from .timeline import read_timelines, timelines_to_json
from .timenorm import Unnormalizable, normalize
from .triplets import CANCER_TYPES

log = logging.getLogger("chemotimeline")


def _backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--corpus", type=Path, help="corpus root directory")
    p.add_argument("--cancer-type", choices=CANCER_TYPES, help="default cancer type for patients without meta.json")
    p.add_argument("--mock-fixtures", type=Path, help="directory of canned responses")
    p.add_argument("--endpoint-url", help="chat-completions URL")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--auth-env", default=None, help="environment variable holding the API token")
    p.add_argument("--workers", type=int, help="notes processed concurrently")
    p.add_argument("--max-in-flight", type=int, help="concurrent model requests")
    p.add_argument("--strict-iso-fixups", action="store_true", default=None,
                   help="disable the reproduced last-week/month-day normalization quirks")


def _config(args: argparse.Namespace, **extra) -> RunConfig:
    overrides = {
        "corpus_root": str(args.corpus.resolve()) if args.corpus else None,
        "cancer_type": args.cancer_type,
        "mock_fixtures": str(args.mock_fixtures.resolve()) if args.mock_fixtures else None,
        "workers": args.workers,
        "max_in_flight": args.max_in_flight,
        "strict_iso_fixups": args.strict_iso_fixups,
        **extra,
    }
    if args.endpoint_url:
        endpoint = {"url": args.endpoint_url, "model": args.model or "default"}
        if args.auth_env:
            endpoint["auth_env"] = args.auth_env
        overrides["endpoint"] = endpoint
    elif args.model:
        overrides["model_name"] = args.model
    if args.config:
        return load_config(args.config, overrides)
    data = {k: v for k, v in overrides.items() if v is not None}
    if "corpus_root" not in data:
        raise ConfigError("--corpus or --config is required")
    return config_from_dict(data)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args, strategy=args.strategy, output_dir=str(args.out.resolve()) if args.out else None)
    report = run_pipeline(cfg)
    if report.get("metrics"):
        print(format_table(report["metrics"]))
    print(f"wrote outputs to {cfg.output_dir}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = _config(args, strategy=args.strategy, output_dir=str(args.out.resolve().parent))
    records = load_corpus(cfg.corpus_root, cfg.cancer_type, cfg.workers)
    extractions = extract_corpus(records, cfg, build_gateway(cfg))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(extractions_to_json(extractions, records, cfg.summary()), encoding="utf-8")
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    records = load_corpus(args.corpus, args.cancer_type or "breast")
    _, by_note = read_extractions(args.inp)
    drops: Counter = Counter()
    per_note, timelines = normalize_corpus(by_note, records, drops, args.strict_iso_fixups)
    args.out.write_text(timelines_to_json(timelines), encoding="utf-8")
    if args.normalized_out:
        args.normalized_out.write_text(normalized_to_json(per_note), encoding="utf-8")
    log.info("dropped: %s", dict(drops))
    return 0


def _read_universe(path: Path | None) -> list[str] | None:
    if path is None:
        return None
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return [line.strip() for line in text.splitlines() if line.strip()]
    return [str(x) for x in data]


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.level == "note":
        _, pred = read_extractions(args.pred)
        if args.gold.is_dir():
            gold = gold_by_note(load_corpus(args.gold)) or {}
        else:
            _, gold = triplet_mapping(json.loads(args.gold.read_text(encoding="utf-8")))
        metrics = note_micro(
            {k: [t.key() for t in v] for k, v in pred.items() if k in gold},
            {k: [t.key() for t in v] for k, v in gold.items()},
        )
        report = {"conventions": CONVENTIONS, "note_level": metrics.as_dict()}
    else:
        preds = read_timelines(args.pred)
        golds = read_timelines(args.gold)
        universe = _read_universe(args.universe) or [t.patient_id for t in golds]
        metrics = timeline_f1([p for p in preds if p.patient_id in set(universe)], golds, universe)
        report = {"conventions": CONVENTIONS, "timeline_level": metrics.as_dict()}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    print(format_table(report), file=sys.stderr)
    return 0


def cmd_timenorm(args: argparse.Namespace) -> int:
    for line in sys.stdin:
        line = line.rstrip("\n")
        if not line.strip():
            continue
        expr, _, anchor_text = line.partition("\t")
        anchor = dt.date.fromisoformat(anchor_text.strip()) if anchor_text.strip() else None
        try:
            result = normalize(expr, anchor, args.strict_iso_fixups)
            print(f"{expr}\t{result.granularity}\t{result.value}")
        except Unnormalizable as exc:
            print(f"{expr}\tunnormalizable\t{exc.reason}")
    return 0


def cmd_sft_prep(args: argparse.Namespace) -> int:
    records = load_corpus(args.corpus, args.cancer_type or "breast")
    examples = dpo_prep.build_sft_dataset(records)
    dpo_prep.emit_datasets(examples, [], args.out_dir)
    print(f"{len(examples)} SFT examples -> {args.out_dir}")
    return 0


def cmd_dpo_prep(args: argparse.Namespace) -> int:
    records = load_corpus(args.corpus, args.cancer_type or "breast")
    sampling = SamplingParams()
    if args.candidates:
        sets = dpo_prep.read_candidates(args.candidates)
    else:
        cfg = _config(args, output_dir=str(args.out_dir.resolve()))
        sampling = cfg.sampling
        gateway = build_gateway(cfg)
        sets = {}
        for note, gold in dpo_prep.annotated_notes(records):
            if gold:
                sets[note.note_id] = dpo_prep.sample_candidates(note, gateway, args.samples, sampling)
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        dpo_prep.write_candidates(list(sets.values()), Path(args.out_dir) / "candidates.jsonl")
    pairs = dpo_prep.build_preference_pairs(records, sets)
    examples = dpo_prep.build_sft_dataset(records)
    dpo_prep.emit_datasets(examples, pairs, args.out_dir, sampling, args.samples)
    print(f"{len(pairs)} preference pairs, {len(examples)} SFT examples -> {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chemotimeline", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline from a configuration")
    _backend_args(p)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--out", type=Path, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("extract", help="note-level extraction")
    _backend_args(p)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--out", type=Path, required=True, help="extraction JSON file")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("aggregate", help="normalize and aggregate extractions into timelines")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--normalized-out", type=Path)
    p.add_argument("--cancer-type", choices=CANCER_TYPES)
    p.add_argument("--strict-iso-fixups", action="store_true")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("evaluate", help="strict-match scoring")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gold", type=Path, required=True, help="gold file, or corpus directory for --level note")
    p.add_argument("--universe", type=Path, help="patient ids (JSON list or one per line)")
    p.add_argument("--level", choices=("note", "timeline"), default="timeline")
    p.add_argument("--out", type=Path, help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("timenorm", help="normalize 'expr<TAB>anchor' lines from stdin")
    p.add_argument("--strict-iso-fixups", action="store_true")
    p.set_defaults(func=cmd_timenorm)

    p = sub.add_parser("sft-prep", help="SFT dataset from gold annotations")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--cancer-type", choices=CANCER_TYPES)
    p.set_defaults(func=cmd_sft_prep)

    p = sub.add_parser("dpo-prep", help="recall-ranked preference pairs")
    _backend_args(p)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--candidates", type=Path, help="pre-sampled candidates JSONL")
    p.add_argument("--samples", type=int, default=dpo_prep.DEFAULT_SAMPLES)
    p.set_defaults(func=cmd_dpo_prep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CorpusFormatError, GatewayError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
