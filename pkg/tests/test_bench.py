import json
import logging
import math
import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mca_forge import bench
from mca_forge.bench import BenchCase, JudgeScore
from mca_forge.errors import ConfigError, McaError, ShapeError
from mca_forge.pipeline.backends import Backends
from mca_forge.pipeline.runner import PipelineConfig, run_pipeline
from mca_forge.scenes import LatentClip

GOLDEN = Path(__file__).parent / "golden" / "insedit_row.txt"


def clip(arr):
    return LatentClip.from_array(np.asarray(arr, np.float32))


def test_thirteen_categories():
    assert len(bench.CATEGORIES) == len(set(bench.CATEGORIES)) == 13
    with pytest.raises(ConfigError):
        BenchCase("x", "teleport", "i", "a", "b")


def test_constant_judge_unchanged():
    s = bench.score_sample(bench.mock_cases(1)[0], bench.ConstantJudge())
    assert s == JudgeScore(5.0, 5.0, 5.0, 5.0, clamped=False)


def test_clamp_with_flag(caplog):
    with caplog.at_level(logging.WARNING):
        s = bench.clamp_scores({"overall": 4.0, "ic": 7.2, "tvq": 3.0, "urp": 0.5})
    assert (s.ic, s.urp, s.clamped) == (5.0, 1.0, True)
    assert "clamped" in caplog.text
    with pytest.raises(McaError):
        bench.clamp_scores({"overall": math.nan, "ic": 1, "tvq": 1, "urp": 1})


def test_mock_judge_double_run_identical():
    cases = bench.mock_cases(82, 0)
    first = [bench.score_sample(c, bench.MockBenchJudge()) for c in cases]
    second = [bench.score_sample(c, bench.MockBenchJudge()) for c in cases]
    assert first == second
    assert all(1 <= v <= 5 for s in first for v in s.values())


# --- proxies ------------------------------------------------------------------


def test_urp_identical_is_five():
    a = np.random.default_rng(0).standard_normal((2, 2, 2, 3))
    mask = np.array([True, False] * 4)
    assert bench.urp_proxy(clip(a), clip(a), mask) == 5.0
    b = a.copy().reshape(8, 3)
    b[mask] += 9  # edits inside the mask do not count
    assert bench.urp_proxy(clip(a), clip(b.reshape(a.shape)), mask) == 5.0


def test_urp_limit():
    sigma = 0.1
    a = np.zeros((1, 1, 1, 1))
    b = np.full((1, 1, 1, 1), math.sqrt(100 * sigma))  # MSE = 100 sigma
    s = bench.urp_proxy(clip(a), clip(b), np.zeros(1, bool), sigma)
    assert 1.0 <= s < 1.001


def test_urp_scalar_oracle_and_dims():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 2, 2, 2)) * 0.3, rng.standard_normal((2, 2, 2, 2)) * 0.3
    mask = rng.random(8) < 0.4
    ca, cb = clip(a), clip(b)
    sq = [(float(ca.values.array[t, c]) - float(cb.values.array[t, c])) ** 2
          for t in range(8) if not mask[t] for c in range(2)]
    ref = 1 + 4 * math.exp(-(sum(sq) / len(sq)) / 0.1)
    assert abs(bench.urp_proxy(ca, cb, mask) - ref) < 1e-9
    with pytest.raises(ShapeError):
        bench.urp_proxy(ca, clip(a[:1]), mask)
    with pytest.raises(ValueError):
        bench.urp_proxy(ca, cb, mask, sigma=0)


def test_tvq_examples():
    static = np.tile(np.random.default_rng(2).standard_normal((1, 2, 2, 3)), (4, 1, 1, 1))
    assert bench.tvq_proxy(clip(static)) == 5.0
    alt = np.stack([np.full((2, 2, 3), (-1) ** f) for f in range(4)])
    assert bench.tvq_proxy(clip(alt)) < bench.tvq_proxy(clip(static))
    assert bench.tvq_proxy(clip(np.ones((1, 2, 2, 3)) * 7)) == 5.0


def _oracle_interframe(arr):
    f = arr.shape[0]
    vals = [float(x) ** 2 for i in range(f - 1) for x in (arr[i + 1] - arr[i]).reshape(-1)]
    return sum(vals) / len(vals)


@given(st.integers(0, 2**32 - 1))
def test_tvq_ranking_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    clips = [(rng.standard_normal((3, 2, 2, 2)) * s).astype(np.float32) for s in rng.uniform(0.01, 1, 3)]
    raw = [_oracle_interframe(c.astype(np.float64)) for c in clips]
    got = [bench.tvq_proxy(clip(c)) for c in clips]
    assert np.argsort(raw, kind="stable").tolist() == np.argsort([-g for g in got], kind="stable").tolist()


@given(st.integers(0, 2**32 - 1))
def test_urp_monotone_in_distance(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 2, 2, 2))
    d = rng.standard_normal(a.shape)
    mask = np.zeros(8, bool)
    scales = sorted(rng.uniform(0, 1, 3))
    scores = [bench.urp_proxy(clip(a), clip(a + s * d), mask) for s in scales]
    assert scores[0] >= scores[1] >= scores[2]


# --- aggregation ------------------------------------------------------------------


def test_single_case_aggregate_exact():
    c = bench.mock_cases(1)[0]
    s = bench.score_sample(c, bench.MockBenchJudge())
    agg = bench.aggregate([(c, s)])
    assert agg.overall == s.values() and agg.per_category[c.category] == s.values()


def test_empty_aggregate_rejected():
    with pytest.raises(ValueError):
        bench.aggregate([])


def test_82_case_recount():
    cases = bench.mock_cases(82, 0)
    scored = [(c, bench.score_sample(c, bench.MockBenchJudge())) for c in cases]
    agg = bench.aggregate(scored)
    assert agg.total == 82 and set(agg.per_category) == set(bench.CATEGORIES)
    for i, metric in enumerate(bench.METRICS):
        total = 0.0
        for c in sorted(cases, key=lambda c: c.id):
            total += getattr(dict(scored)[c], metric)
        assert abs(agg.overall[i] - total / 82) <= 1e-12
        for cat in bench.CATEGORIES:
            vals = [getattr(s, metric) for c, s in scored if c.category == cat]
            assert abs(agg.per_category[cat][i] - sum(vals) / len(vals)) <= 1e-12


def test_aggregate_permutation_invariant():
    scored = [(c, bench.score_sample(c, bench.MockBenchJudge())) for c in bench.mock_cases(40, 1)]
    shuffled = scored[:]
    random.Random(0).shuffle(shuffled)
    a, b = bench.aggregate(scored), bench.aggregate(shuffled)
    assert a.overall == b.overall and a.per_category == b.per_category


# --- tables ---------------------------------------------------------------------


@pytest.mark.parametrize("x,s", [(4.605, "4.61"), (4.5, "4.50"), (4.615, "4.62"), (1.0049, "1.00"), (4.995, "5.00")])
def test_half_up(x, s):
    assert bench.format_score(x) == s


def test_fixture_row_golden():
    text = GOLDEN.read_text(encoding="utf-8")
    header, rows = bench.parse_table(text)
    assert rows == [("InsEdit", (4.61, 4.50, 4.54, 4.80))]
    assert bench.render_table(rows, header) == text
    assert bench.render_table([("InsEdit", (4.61, 4.50, 4.54, 4.80))]) == text


def test_render_parse_fixed_point():
    scored = [(c, bench.score_sample(c, bench.MockBenchJudge())) for c in bench.mock_cases(82, 3)]
    once = bench.render_table(bench.aggregate(scored).rows())
    header, rows = bench.parse_table(once)
    assert bench.render_table(rows, header) == once
    assert [r[0] for r in rows] == list(bench.CATEGORIES) + ["Overall"]


def test_render_errors():
    with pytest.raises(ValueError):
        bench.render_table([])
    with pytest.raises(ShapeError):
        bench.render_table([("x", (1.0, 2.0))])
    with pytest.raises(ValueError):
        bench.parse_table("not a table")


# --- case files -------------------------------------------------------------------


def test_case_jsonl_round_trip(tmp_path):
    cases = bench.mock_cases(5)
    p = tmp_path / "cases.jsonl"
    p.write_text(bench.dump_cases(cases))
    assert bench.load_cases(p) == cases
    assert set(json.loads(p.read_text().splitlines()[0])) == {
        "id", "category", "instruction", "source_ref", "edited_ref", "mask_ref"}


def test_pipeline_manifest_as_cases(tmp_path):
    res = run_pipeline(PipelineConfig(records=8), 0, tmp_path, Backends.mock())
    cases = bench.load_cases(res.manifest)
    assert len(cases) == res.summary["verified"]
    judge = bench.ProxyJudge(tmp_path)
    for c in cases:
        s = bench.score_sample(c, judge)
        assert s.urp == 5.0  # mock pairs are identical outside the mask
        assert 1 <= s.tvq <= 5
