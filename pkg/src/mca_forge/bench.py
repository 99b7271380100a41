"""Benchmark scoring: judge scores on a 1-5 scale, offline proxies, tables."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .denoiser import alignment_metric
from .errors import ConfigError, McaError, ShapeError
from .pipeline.backends import HttpClient, stable_hash
from .scenes import LatentClip

log = logging.getLogger(__name__)

CATEGORIES = (
    "addition",
    "removal",
    "replacement",
    "recoloring",
    "retexturing",
    "relocation",
    "rescaling",
    "background switch",
    "weather switch",
    "time switch",
    "season switch",
    "stylization",
    "relighting",
)
METRICS = ("overall", "ic", "tvq", "urp")
HEADERS = ("Overall", "IC", "TVQ", "URP")
SCORE_MIN, SCORE_MAX = 1.0, 5.0

# pipeline edit kinds -> bench categories
EDIT_CATEGORY = {
    "insert": "addition",
    "remove": "removal",
    "recolor": "recoloring",
    "move": "relocation",
    "background": "background switch",
}


@dataclass(frozen=True)
class BenchCase:
    id: str
    category: str
    instruction: str
    source_ref: str
    edited_ref: str
    mask_ref: str | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ConfigError(f"{self.id}: unknown category {self.category!r}")


@dataclass(frozen=True)
class JudgeScore:
    overall: float
    ic: float
    tvq: float
    urp: float
    clamped: bool = False

    def values(self) -> tuple[float, float, float, float]:
        return self.overall, self.ic, self.tvq, self.urp


def clamp_scores(raw: dict) -> JudgeScore:
    vals, clamped = [], False
    for m in METRICS:
        v = float(raw[m])
        if not math.isfinite(v):
            raise McaError(f"judge returned non-finite {m}")
        c = min(SCORE_MAX, max(SCORE_MIN, v))
        if c != v:
            log.warning("judge score %s=%r clamped to %r", m, v, c)
            clamped = True
        vals.append(c)
    return JudgeScore(*vals, clamped=clamped)


# --------------------------------------------------------------------------
# judges


class MockBenchJudge:
    version = "mock-bench-judge/1"

    def score(self, case: BenchCase) -> dict:
        out = {}
        for m in METRICS:
            u = (stable_hash("judge", case.id, case.category, case.instruction, m) % 10**9) / 10**9
            out[m] = SCORE_MIN + (SCORE_MAX - SCORE_MIN) * u
        return out


class ConstantJudge:
    def __init__(self, **scores):
        self.scores = {m: scores.get(m, 5.0) for m in METRICS}
        self.version = "constant-judge/1"

    def score(self, case: BenchCase) -> dict:
        return dict(self.scores)


class ProxyJudge:
    """Scores from clip content alone: URP and TVQ proxies, overall their mean, IC fixed at 3."""

    version = "proxy-judge/1"

    def __init__(self, root=".", sigma: float = 0.1):
        self.root = Path(root)
        self.sigma = sigma

    def score(self, case: BenchCase) -> dict:
        src = LatentClip.load(self.root / case.source_ref)
        edited = LatentClip.load(self.root / case.edited_ref)
        if case.mask_ref:
            from . import mcat

            mask = mcat.read(self.root / case.mask_ref).array.reshape(-1) > 0.5
        else:
            mask = np.zeros(src.dims.tokens, dtype=bool)
        urp = urp_proxy(src, edited, mask, self.sigma)
        tvq = tvq_proxy(edited, self.sigma)
        return {"overall": (urp + tvq) / 2, "ic": 3.0, "tvq": tvq, "urp": urp}


class HttpBenchJudge:
    def __init__(self, client: HttpClient):
        self.client = client
        self.version = f"http:{client.base_url}"

    def score(self, case: BenchCase) -> dict:
        resp = self.client.post("/v1/judge", {"sample_ref": case.edited_ref, "instruction": case.instruction})
        missing = [m for m in METRICS if m not in resp]
        if missing:
            raise McaError(f"/v1/judge: response lacks {missing}")
        return resp


def score_sample(case: BenchCase, judge) -> JudgeScore:
    return clamp_scores(judge.score(case))


# --------------------------------------------------------------------------
# proxies


def urp_proxy(source: LatentClip, edited: LatentClip, mask, sigma: float = 0.1) -> float:
    """1 + 4 exp(-mse_unedited / sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mse = alignment_metric(source, edited, mask)
    return SCORE_MIN + (SCORE_MAX - SCORE_MIN) * math.exp(-mse / sigma)


def interframe_mse(clip: LatentClip) -> float:
    frames = clip.frames_array().astype(np.float64)
    if frames.shape[0] < 2:
        return 0.0
    d = np.diff(frames, axis=0)
    return float(np.mean(d * d))


def tvq_proxy(edited: LatentClip, sigma: float = 0.1) -> float:
    """1 + 4 exp(-mean inter-frame squared difference / sigma); single frames score 5."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if edited.dims.frames < 2:
        return SCORE_MAX
    return SCORE_MIN + (SCORE_MAX - SCORE_MIN) * math.exp(-interframe_mse(edited) / sigma)


# --------------------------------------------------------------------------
# aggregation


@dataclass
class Aggregates:
    per_category: dict[str, tuple[float, float, float, float]]
    counts: dict[str, int]
    overall: tuple[float, float, float, float]
    total: int

    def rows(self, overall_label: str = "Overall") -> list[tuple[str, tuple[float, ...]]]:
        rows = [(c, self.per_category[c]) for c in CATEGORIES if c in self.per_category]
        rows.append((overall_label, self.overall))
        return rows


def _means(scores: Sequence[JudgeScore]) -> tuple[float, float, float, float]:
    sums = [0.0, 0.0, 0.0, 0.0]
    for s in scores:
        for i, v in enumerate(s.values()):
            sums[i] += v
    n = len(scores)
    return tuple(x / n for x in sums)


def aggregate(scored: Iterable[tuple[BenchCase, JudgeScore]]) -> Aggregates:
    """Per-category and overall means, summed in id order."""
    items = sorted(scored, key=lambda cs: cs[0].id)
    if not items:
        raise ValueError("aggregate needs at least one scored case")
    by_cat: dict[str, list[JudgeScore]] = {}
    for case, score in items:
        by_cat.setdefault(case.category, []).append(score)
    return Aggregates(
        per_category={c: _means(v) for c, v in by_cat.items()},
        counts={c: len(v) for c, v in by_cat.items()},
        overall=_means([s for _, s in items]),
        total=len(items),
    )


# --------------------------------------------------------------------------
# tables


def format_score(x: float) -> str:
    """Two decimals, ties rounded half-up on the shortest decimal repr."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def render_table(rows: Sequence[tuple[str, Sequence[float]]], name_header: str = "Method") -> str:
    if not rows:
        raise ValueError("render_table needs at least one row")
    name_w = max(len(name_header), *(len(n) for n, _ in rows))
    col_w = [max(len(h), 4) for h in HEADERS]
    lines = [
        "  ".join([name_header.ljust(name_w)] + [h.rjust(w) for h, w in zip(HEADERS, col_w)]),
        "  ".join(["-" * name_w] + ["-" * w for w in col_w]),
    ]
    for name, vals in rows:
        if len(vals) != len(HEADERS):
            raise ShapeError(f"row {name!r} has {len(vals)} values, expected {len(HEADERS)}")
        lines.append("  ".join([name.ljust(name_w)] + [format_score(v).rjust(w) for v, w in zip(vals, col_w)]))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> tuple[str, list[tuple[str, tuple[float, ...]]]]:
    """Inverse of ``render_table``: (name header, rows)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or not set(lines[1].replace(" ", "")) <= {"-"}:
        raise ValueError("not a rendered score table")
    header = lines[0].rsplit(None, len(HEADERS))
    if tuple(header[1:]) != HEADERS:
        raise ValueError(f"unexpected table columns {header[1:]}")
    rows = []
    for ln in lines[2:]:
        parts = ln.rsplit(None, len(HEADERS))
        rows.append((parts[0].rstrip(), tuple(float(p) for p in parts[1:])))
    return header[0].strip(), rows


# --------------------------------------------------------------------------
# case files


def load_cases(path) -> list[BenchCase]:
    """Bench cases from JSONL; pipeline manifests are converted (verified records only)."""
    cases = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if "stage_status" in d:
                if d["stage_status"].get("verified") != "passed":
                    continue
                cases.append(
                    BenchCase(
                        id=d["id"],
                        category=EDIT_CATEGORY[d["meta"]["edit"]],
                        instruction=d["instructions"]["short"],
                        source_ref=d["src_clip"],
                        edited_ref=d["tar_clip"],
                        mask_ref=d["meta"].get("mask_clip"),
                    )
                )
            else:
                cases.append(BenchCase(**d))
    return cases


def dump_cases(cases: Iterable[BenchCase]) -> str:
    return "".join(json.dumps(asdict(c), separators=(",", ":")) + "\n" for c in cases)


def mock_cases(n: int = 82, seed: int = 0) -> list[BenchCase]:
    """Synthetic case list cycling through every category."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n):
        cat = CATEGORIES[i % len(CATEGORIES)]
        tag = int(rng.integers(10**6))
        cases.append(BenchCase(f"case-{i:03d}", cat, f"apply {cat} edit #{tag}", f"src/{i:03d}.mcat", f"out/{i:03d}.mcat"))
    return cases
