"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

from __future__ import annotations

import datetime as dt
import itertools
import json
import random
import time
from contextlib import contextmanager
from pathlib import Path

import conftest
from chemotimeline.dictionary import TermSource, build_dictionary, find_matches, load_dictionary, read_tags, strip_tags, tag_matches
from chemotimeline.dpo_prep import CandidateSet, select_pair
from chemotimeline.evaluation import note_micro, patient_f1, timeline_f1
from chemotimeline.extraction import postprocess_triplets
from chemotimeline.gateway import ParseError, parse_triplet_array, serialize_triplets
from chemotimeline.pipeline import load_config, run_pipeline
from chemotimeline.timeline import NormalizedTriplet, aggregate, timelines_to_json
from chemotimeline.timenorm import normalize
from chemotimeline.triplets import CANCER_TYPES, RELATIONS, SactTriplet
from oracles import (
    fmt_day,
    fmt_week,
    oracle_note_micro,
    oracle_select,
    oracle_timeline,
    shift_days,
    shift_months,
)
from chemotimeline.timenorm import NormalizedTime

FIXTURES = Path(__file__).parent / "fixtures"


@contextmanager
def criterion(number: int, title: str):
    details: list[str] = []
    try:
        yield details
    except BaseException:
        line = f"[FAIL] criterion {number}: {title}"
        conftest.ACCEPTANCE_RESULTS[number] = line
        print(line)
        raise
    line = f"[PASS] criterion {number}: {title}" + (f" ({'; '.join(details)})" if details else "")
    conftest.ACCEPTANCE_RESULTS[number] = line
    print(line)


# --------------------------------------------------------------------------
# 1. Time normalization
# --------------------------------------------------------------------------


def _derived_timenorm_cases(n: int = 60) -> list[tuple[str, dt.date, str]]:
    rng = random.Random(20130115)
    cases = []
    while len(cases) < n:
        anchor = dt.date(2000, 1, 1) + dt.timedelta(days=rng.randrange(0, 365 * 25))
        ymd = (anchor.year, anchor.month, anchor.day)
        k = rng.randint(1, 40)
        kind = len(cases) % 8
        if kind == 0:
            cases.append((f"{k} days ago", anchor, fmt_day(shift_days(ymd, -k))))
        elif kind == 1:
            cases.append((f"{k} weeks ago", anchor, fmt_day(shift_days(ymd, -7 * k))))
        elif kind == 2:
            cases.append((f"{k} months ago", anchor, fmt_day(shift_months(ymd, -k))))
        elif kind == 3:
            cases.append(("next week", anchor, fmt_week(shift_days(ymd, 7))))
        elif kind == 4:
            cases.append(("last week", anchor, fmt_day(shift_days(ymd, -7))))
        elif kind == 5:
            cases.append(("yesterday", anchor, fmt_day(shift_days(ymd, -1))))
        elif kind == 6:
            y, m, _ = shift_months((ymd[0], ymd[1], 1), -1)
            cases.append(("last month", anchor, "%04d-%02d" % (y, m)))
        else:
            cases.append((f"{k % 5 + 1} years ago", anchor, fmt_day(shift_months(ymd, -12 * (k % 5 + 1)))))
    return cases


def test_criterion_1_timenorm_golden_and_derived():
    with criterion(1, "timenorm golden set + oracle-derived calendar cases") as info:
        golden = [
            ("last week", dt.date(2013, 1, 15), "2013-01-08"),
            ("next week", dt.date(2013, 7, 23), "2013-w31"),
            ("January 9", dt.date(2013, 2, 10), "2012-01-09"),
        ]
        derived = _derived_timenorm_cases()
        assert len(derived) >= 30
        start = time.perf_counter()
        for expr, anchor, expected in golden + derived:
            assert normalize(expr, anchor).value == expected, (expr, anchor, expected)
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0
        info.append(f"3 golden + {len(derived)} derived, {elapsed * 1000:.1f} ms")


# --------------------------------------------------------------------------
# 2. Postprocessing
# --------------------------------------------------------------------------


def test_criterion_2_postprocessing():
    with criterion(2, "postprocessing examples + idempotence") as info:
        T = SactTriplet
        assert postprocess_triplets([T("Doxorubicin/Cyclophosphamide", "CONTAINS-1", "today")]) == [
            T("Doxorubicin", "CONTAINS-1", "today"), T("Cyclophosphamide", "CONTAINS-1", "today")]
        assert postprocess_triplets([T("adjuvant chemotherapy", "CONTAINS-1", "2011")]) == [
            T("chemotherapy", "CONTAINS-1", "2011")]
        assert postprocess_triplets([T("neoadjuvant chemo", "BEGINS-ON", "approximately 3 weeks ago")]) == [
            T("chemo", "BEGINS-ON", "3 weeks ago")]
        for filler in ("approximately", "about", "around", "in"):
            assert postprocess_triplets([T("Taxol", "CONTAINS-1", f"{filler} 2011")])[0].time_raw == "2011"

        rng = random.Random(2)
        vocab = ["adjuvant", "neoadjuvant", "chemo", "chemotherapy", "Taxol", "AC", "/", "in", "about",
                 "approximately", "around", "3", "weeks", "ago", "2011", "Herceptin/Perjeta", "x/", "/y"]
        count = 0
        for _ in range(1000):
            sact = " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 5)))
            when = " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 4)))
            if not sact.strip() or not when.strip():
                continue
            item = [T(sact, rng.choice(RELATIONS), when)]
            once = postprocess_triplets(item)
            assert postprocess_triplets(once) == once, item
            count += 1
        assert count == 1000
        info.append(f"{count} generated triplets")


# --------------------------------------------------------------------------
# 3. Dictionary tagging
# --------------------------------------------------------------------------


def test_criterion_3_dictionary_tagging():
    with criterion(3, "dictionary tagging") as info:
        total = 0
        for ct in CANCER_TYPES:
            d = load_dictionary(ct)
            for term in d.terms:
                text = f"Patient received {term} today."
                assert (17, 17 + len(term)) in find_matches(text, d), term
                total += 1
        tagged = tag_matches("Normal FEV1 and FEV1/FEC ratio", load_dictionary("breast"))
        assert [m.term for m in tagged.match_terms] == ["FEC"]

        rng = random.Random(3)
        d = load_dictionary("breast")
        pool = sorted(d.terms) + ["the", "on", "mg", "FEV1", "ratio", ",", "(", ")", "/", "-", "pac", "atx"]
        for _ in range(1000):
            words = [rng.choice(pool) for _ in range(rng.randint(0, 12))]
            sentence = "".join(w + rng.choice([" ", "", "/", ", "]) for w in words)
            out = tag_matches(sentence, d)
            assert strip_tags(out.tagged_text) == sentence
            assert read_tags(out.tagged_text)[0] == sentence

        built = build_dictionary("breast", [TermSource(("AT", "AC", "TC", "Taxol"), kind="regimen")])
        assert "at" not in built.terms and "taxol" in built.terms
        info.append(f"{total} shipped terms, 1000 round trips")


# --------------------------------------------------------------------------
# 4. Evaluation
# --------------------------------------------------------------------------


def _nt(key):
    return NormalizedTriplet(key[0], key[1], NormalizedTime.from_value(key[2]), key[0])


def test_criterion_4_evaluation_oracle():
    with criterion(4, "evaluation oracle equivalence") as info:
        m = note_micro({"n1": {"a", "b"}, "n2": {"c"}}, {"n1": {"a"}, "n2": {"c", "d"}})
        assert m.precision == m.recall == m.f1 == 2 / 3
        gold = {("a", "BEGINS-ON", "2012"), ("b", "BEGINS-ON", "2012")}
        assert patient_f1(gold | {("c", "BEGINS-ON", "2012")}, gold) == 2 * (2 / 3) * 1 / ((2 / 3) + 1)

        rng = random.Random(4)
        pool = [(s, r, v) for s in ("taxol", "ac", "il2") for r in RELATIONS for v in ("2012", "2013-w02")]
        worst = 0.0
        for _ in range(100):
            patients = [f"p{i}" for i in range(rng.randint(1, 5))]
            preds = {p: set(rng.sample(pool, rng.randint(0, 6))) for p in patients if rng.random() < 0.85}
            golds = {p: set(rng.sample(pool, rng.randint(0, 6))) for p in patients if rng.random() < 0.85}
            nm = note_micro(preds, golds)
            worst = max(worst, *(abs(x - y) for x, y in zip((nm.precision, nm.recall, nm.f1),
                                                             oracle_note_micro(preds, golds))))
            tm = timeline_f1([aggregate(p, map(_nt, e)) for p, e in preds.items()],
                             [aggregate(p, map(_nt, e)) for p, e in golds.items()], patients)
            worst = max(worst, *(abs(x - y) for x, y in zip((tm.type_a_f1, tm.type_b_f1, tm.official),
                                                             oracle_timeline(preds, golds, patients))))
            assert tm.official == (tm.type_a_f1 + tm.type_b_f1) / 2
        assert worst <= 1e-12
        info.append(f"100 instances, max |diff| = {worst:.1e}")


# --------------------------------------------------------------------------
# 5. DPO pair selection
# --------------------------------------------------------------------------


def test_criterion_5_dpo_selection():
    with criterion(5, "DPO pair selection") as info:
        g1, g2 = SactTriplet("Taxol", "BEGINS-ON", "today"), SactTriplet("AC", "ENDS-ON", "2012")
        texts = [serialize_triplets(list(c)) for r in range(3) for c in itertools.combinations([g1, g2], r)]
        texts += ["unparseable", serialize_triplets([g2, g1])]
        exhaustive = 0
        for gold in ([g1], [g2], [g1, g2]):
            keys = {t.key() for t in gold}
            for k in range(1, 4):
                for combo in itertools.product(texts, repeat=k):
                    pair = select_pair(CandidateSet("n", combo), gold)
                    expected = oracle_select(list(combo), keys)
                    got = None if pair is None else (pair.chosen, pair.rejected)
                    want = None if expected is None else (combo[expected[0]], combo[expected[1]])
                    assert got == want, combo
                    exhaustive += 1

        rng = random.Random(5)
        pool = texts + [serialize_triplets([SactTriplet("x", "CONTAINS-1", "y")]), "[", "[]"]
        for _ in range(10_000):
            combo = tuple(rng.choice(pool) for _ in range(rng.randint(1, 8)))
            pair = select_pair(CandidateSet("n", combo), [g1, g2])
            if pair is not None:
                assert pair.chosen_recall >= pair.rejected_recall and pair.chosen != pair.rejected

        assert select_pair(CandidateSet("n", ("[]",) * 5), [g1]) is None
        info.append(f"{exhaustive} exhaustive sets, 10000 fuzz sets")


# --------------------------------------------------------------------------
# 6. End-to-end determinism
# --------------------------------------------------------------------------


def test_criterion_6_end_to_end_determinism(tmp_path):
    with criterion(6, "end-to-end determinism on the fixture corpus") as info:
        start = time.perf_counter()
        outputs = []
        for name, workers in (("a", 1), ("b", 1), ("c", 4)):
            cfg = load_config(FIXTURES / "run.toml", {"output_dir": str(tmp_path / name), "workers": workers})
            report = run_pipeline(cfg)
            assert report["patients"] == 6 and report["notes"] == 20
            tl = report["metrics"]["timeline_level"]
            assert tl["official"] == (tl["type_a_f1"] + tl["type_b_f1"]) / 2
            outputs.append(((tmp_path / name / "timelines.json").read_bytes(),
                            (tmp_path / name / "metrics.json").read_bytes()))
        elapsed = time.perf_counter() - start
        assert outputs[0] == outputs[1] == outputs[2]
        assert outputs[0][0] == (FIXTURES / "golden" / "timelines_baseline.json").read_bytes()
        assert elapsed < 10.0
        info.append(f"3 runs in {elapsed:.2f} s")


# --------------------------------------------------------------------------
# 7. Aggregation
# --------------------------------------------------------------------------


def test_criterion_7_aggregation():
    with criterion(7, "aggregation properties") as info:
        rng = random.Random(7)
        pool = [_nt((s, r, v)) for s in ("taxol", "il2", "il-2", "ac") for r in RELATIONS
                for v in ("2012-01-12", "2012-w02", "2012")]
        items = [rng.choice(pool) for _ in range(50)]
        reference = aggregate("p", items)
        assert aggregate("p", reference.events) == reference
        ref_json = timelines_to_json([reference])
        for _ in range(1000):
            rng.shuffle(items)
            assert timelines_to_json([aggregate("p", items)]) == ref_json

        both = aggregate("p", [_nt(("cabotaxol", "BEGINS-ON", "2012-01-12")), _nt(("cabotaxol", "ENDS-ON", "2012-01-12"))])
        assert len(both.events) == 2
        il = aggregate("p", [_nt(("il2", "BEGINS-ON", "2011-06-19")), _nt(("il-2", "BEGINS-ON", "2011-06-19"))])
        assert len(il.events) == 2
        info.append("1000 shuffles")


# --------------------------------------------------------------------------
# 8. Gateway parsing robustness
# --------------------------------------------------------------------------


def _malformed(rng: random.Random, seeds: list[str]) -> str:
    choice = rng.randrange(5)
    if choice == 0:
        base = rng.choice(seeds)
        return base[: rng.randrange(len(base) + 1)]
    if choice == 1:
        base = list(rng.choice(seeds))
        for _ in range(rng.randint(1, 6)):
            pos = rng.randrange(len(base) + 1)
            base.insert(pos, rng.choice('[]{}",:\\`\n\x00é'))
        return "".join(base)
    if choice == 2:
        return "".join(rng.choice('[]{}",: aSACT') for _ in range(rng.randint(0, 60)))
    if choice == 3:
        return "".join(chr(rng.randrange(0x20, 0x2FFF)) for _ in range(rng.randint(0, 40)))
    return "[" * rng.randint(1, 2000) + rng.choice(["", "]", "{"])


def test_criterion_8_gateway_robustness():
    with criterion(8, "parser robustness + schema round trip") as info:
        rng = random.Random(8)
        seeds = [
            '[{"SACT": "Taxol", "relation": "BEGINS-ON", "time": "today"}]',
            'Sure! ```json\n[{"SACT": "AC", "relation": "ENDS-ON", "time": "2012"}]\n```',
            '{["AC", "ENDS-ON", "April 10, 2012"], ["Taxol", "BEGINS-ON", "next week"]}',
            "<think>x</think>[]",
        ]
        outcomes = {"parsed": 0, "parse_error": 0}
        for _ in range(10_000):
            text = _malformed(rng, seeds)
            try:
                result = parse_triplet_array(text)
            except ParseError:
                outcomes["parse_error"] += 1
                continue
            assert all(isinstance(t, SactTriplet) for t in result)
            outcomes["parsed"] += 1

        alphabet = 'abcXYZ 0/-"\\{}[]\n\té中'
        for _ in range(1000):
            items = [
                SactTriplet(
                    "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 12))).strip() or "x",
                    rng.choice(RELATIONS),
                    "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 12))).strip() or "y",
                )
                for _ in range(rng.randint(0, 5))
            ]
            assert parse_triplet_array(serialize_triplets(items)) == items
            assert json.loads(serialize_triplets(items)) == [t.as_dict() for t in items]
        info.append(f"10000 fuzz cases {outcomes}, 1000 round trips")
