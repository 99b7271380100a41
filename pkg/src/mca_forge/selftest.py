"""Fast invariant checks runnable from an installed package (``mca-forge selftest``).

Each registered check returns (passed, total). The test suite asserts the
same names and counts, so the two stay in step.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import bench, mcat
from .attention import BranchRole, BranchState, McaVariant, mca_attention, mca_weights
from .pipeline.mixture import IMAGE_TO_VIDEO, STAGE1_OBJECTIVES, mixture_sample
from .schedule import TASKS, grid, parse_schedule, preset, render_schedule
from .tensor import Tensor, bit_equal

CHECKS: dict[str, tuple[Callable[[], tuple[int, int]], int]] = {}


def check(name: str, total: int):
    def deco(fn):
        CHECKS[name] = (fn, total)
        return fn

    return deco


def _state(rng, role, n, d) -> BranchState:
    q, k, v = (Tensor(rng.standard_normal((n, d)).astype(np.float32)) for _ in range(3))
    return BranchState(role, q, k, v, 0, 0)


@check("mca-identity", 200)
def _mca_identity() -> tuple[int, int]:
    rng = np.random.default_rng(0)
    ok = 0
    for _ in range(200):
        n, d = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        a = _state(rng, BranchRole.SRC, n, d)
        b = _state(rng, BranchRole.TAR, n, d)
        same = BranchState(BranchRole.TAR, a.q, a.k, a.v, 0, 0)
        base = mca_attention(a, a, McaVariant.SELF)
        good = bit_equal(mca_attention(a, b, McaVariant.SELF), base)
        for var in (McaVariant.CONCAT_KV, McaVariant.SWAP_K, McaVariant.SWAP_KV):
            good &= bool(np.max(np.abs(mca_attention(a, same, var).array - base.array)) <= 1e-6)
        for var in McaVariant:
            w = mca_weights(a, b, var).array
            good &= bool(np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-6)
        ok += good
    return ok, 200


@check("schedule-presets", len(TASKS))
def _presets() -> tuple[int, int]:
    ok = 0
    for task in TASKS:
        pol = preset(task)
        text = render_schedule(pol)
        back = parse_schedule(text)
        good = render_schedule(back) == text and back.rules == pol.rules
        for role, layer, step, var in grid(back, 4, 50):
            if step / 50 >= 0.7 and var.is_swap:
                good = False
        ok += good
    return ok, len(TASKS)


@check("mcat-roundtrip", 50)
def _mcat() -> tuple[int, int]:
    rng = np.random.default_rng(1)
    shapes = [(0,), (1,), (), (3, 0, 2)]
    ok = 0
    for i in range(50):
        shape = shapes[i] if i < len(shapes) else tuple(int(s) for s in rng.integers(1, 6, size=rng.integers(1, 4)))
        arr = rng.standard_normal(shape).astype(np.float32)
        t = mcat.decode(mcat.encode(Tensor(arr)))
        ok += t.shape == arr.shape and t.array.tobytes() == arr.tobytes()
    return ok, 50


@check("mixture-frequencies", 2)
def _mixture() -> tuple[int, int]:
    ok = 0
    for spec in (STAGE1_OBJECTIVES, IMAGE_TO_VIDEO):
        draws = mixture_sample(spec, 20_000, 0)
        freq = np.array([draws.count(n) for n in spec.names]) / len(draws)
        ok += bool(np.all(np.abs(freq - spec.probabilities()) <= 0.015))
    return ok, 2


@check("bench-aggregate", 2)
def _bench() -> tuple[int, int]:
    cases = bench.mock_cases(82, 0)
    judge = bench.MockBenchJudge()
    scored = [(c, bench.score_sample(c, judge)) for c in cases]
    agg = bench.aggregate(scored)
    recount = [sum(s.values()[i] for _, s in sorted(scored, key=lambda cs: cs[0].id)) / 82 for i in range(4)]
    ok = int(all(abs(a - b) <= 1e-12 for a, b in zip(agg.overall, recount)))
    fixture = bench.render_table([("InsEdit", (4.61, 4.50, 4.54, 4.80))])
    header, rows = bench.parse_table(fixture)
    ok += bench.render_table(rows, header) == fixture
    return ok, 2


def run_all(out=print) -> bool:
    all_ok = True
    for name, (fn, total) in CHECKS.items():
        t0 = time.perf_counter()
        passed, n = fn()
        good = passed == n == total
        all_ok &= good
        out(f"{'PASS' if good else 'FAIL'} {name}: {passed}/{n} ({time.perf_counter() - t0:.2f}s)")
    out(f"{len(CHECKS)} checks, {'all passed' if all_ok else 'FAILURES'}")
    return all_ok
