"""Drive records through the five stages and write the manifest."""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import BackendError, BackendUnavailable, ConfigError, McaError
from ..scenes import TASK_TO_KINDS, ClipDims
from ..schedule import TASKS, render_schedule
from ..schedule import preset as schedule_preset
from .backends import Backends, backends_from_config
from .mixture import MixtureSpec
from .records import STAGES, ManifestWriter, PipelineRecord, count_outcomes
from .stages import (
    FilterThresholds,
    expand_prompts,
    filter_responses,
    generate_instructions,
    generate_pair,
    sample_ref,
    verify_vqa,
)

log = logging.getLogger(__name__)

SUBJECTS = ("dog", "red ball", "cyclist", "paper lantern", "cat", "kite", "delivery van", "heron")
SETTINGS = ("park", "street corner", "beach", "courtyard", "forest path", "harbor", "rooftop", "market")


@dataclass
class PipelineConfig:
    records: int = 8
    tasks: dict[str, int] = field(default_factory=lambda: {t: 1 for t in TASKS})
    subjects: tuple[str, ...] = SUBJECTS
    settings: tuple[str, ...] = SETTINGS
    dims: ClipDims = ClipDims()
    thresholds: FilterThresholds = FilterThresholds()
    vqa_rounds: int = 3
    vqa_threshold: float = 2 / 3
    backends: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.records < 0:
            raise ConfigError("records must be >= 0")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ConfigError(f"tasks without a schedule preset: {sorted(unknown)}")
        MixtureSpec(self.tasks)
        if not self.subjects or not self.settings:
            raise ConfigError("keyword pools must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {"records", "tasks", "subjects", "settings", "dims", "thresholds", "vqa", "backends"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown pipeline config keys {sorted(extra)}")
        kw = {}
        if "records" in d:
            kw["records"] = int(d["records"])
        if "tasks" in d:
            t = d["tasks"]
            kw["tasks"] = {name: 1 for name in t} if isinstance(t, list) else {k: int(v) for k, v in t.items()}
        for key in ("subjects", "settings"):
            if key in d:
                kw[key] = tuple(d[key])
        if "dims" in d:
            kw["dims"] = ClipDims(**d["dims"])
        if "thresholds" in d:
            kw["thresholds"] = FilterThresholds(**d["thresholds"])
        if "vqa" in d:
            kw["vqa_rounds"] = int(d["vqa"].get("rounds", 3))
            kw["vqa_threshold"] = float(d["vqa"].get("threshold", 2 / 3))
        if "backends" in d:
            kw["backends"] = dict(d["backends"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def record_seed(global_seed: int, index: int) -> int:
    """Per-record seed, a function of (global seed, record index) only."""
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1, np.uint64)[0] >> 1)


def plan_record(config: PipelineConfig, global_seed: int, index: int) -> PipelineRecord:
    seed = record_seed(global_seed, index)
    rng = np.random.default_rng(seed)
    spec = MixtureSpec(config.tasks)
    task = spec.names[int(rng.choice(len(spec.names), p=spec.probabilities()))]
    kinds = TASK_TO_KINDS[task]
    edit = kinds[int(rng.integers(len(kinds)))]
    keywords = (config.subjects[int(rng.integers(len(config.subjects)))],
                config.settings[int(rng.integers(len(config.settings)))])
    return PipelineRecord(id=f"rec-{index:05d}", task=task, edit=edit, seed=seed, schedule=task, keywords=keywords)


def process_record(record: PipelineRecord, config: PipelineConfig, backends: Backends, out_dir: Path) -> PipelineRecord:
    """Run one record through every stage it survives.

    Per-record backend errors end the record at the current stage;
    ``BackendUnavailable`` propagates to stop the run.
    """
    record.backend_versions = backends.versions()
    stage = "captioned"
    try:
        record.prompts, _, _ = expand_prompts(record.keywords, backends.text, record.seed, record.task, record.edit)
        record.advance(stage)

        stage = "synthesized"
        pair = generate_pair(record, backends.generator, out_dir)
        record.src_clip = pair.src_path.relative_to(out_dir).as_posix()
        record.tar_clip = pair.tar_path.relative_to(out_dir).as_posix()
        record.mask_clip = None if pair.mask_path is None else pair.mask_path.relative_to(out_dir).as_posix()
        record.onset = pair.onset
        record.advance(stage)

        stage = "filtered"
        ok, reason = filter_responses(record, out_dir, config.thresholds)
        if not ok:
            record.stop(stage, reason)
            return record
        record.advance(stage)

        stage = "instructed"
        record.instructions = generate_instructions(record, backends.vlm)
        record.advance(stage)

        stage = "verified"
        verified, answers = verify_vqa(sample_ref(record, out_dir), backends.judge, config.vqa_rounds,
                                       config.vqa_threshold)
        record.vqa_answers = answers
        if verified:
            record.advance(stage)
        else:
            record.stop(stage, f"vqa {answers.count('yes')}/{len(answers)} yes")
    except BackendUnavailable:
        raise
    except (BackendError, McaError, ValueError) as exc:
        record.stop(stage, f"{type(exc).__name__}: {exc}", failed=True)
    return record


@dataclass
class RunResult:
    manifest: Path
    summary: dict
    records: list[PipelineRecord]


def run_pipeline(
    config: PipelineConfig,
    seed: int,
    out_dir,
    backends: Backends | None = None,
    workers: int = 1,
) -> RunResult:
    out_dir = Path(out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    if backends is None:
        backends = backends_from_config(config.backends, config.dims)
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    for task in config.tasks:
        (out_dir / "schedules").mkdir(exist_ok=True)
        (out_dir / "schedules" / f"{task}.sched").write_text(render_schedule(schedule_preset(task)), encoding="utf-8")

    plans = [plan_record(config, seed, i) for i in range(config.records)]
    writer = ManifestWriter(out_dir / "manifest.jsonl")
    lock = threading.Lock()
    outage: dict = {}
    done: list[PipelineRecord | None] = [None] * len(plans)

    def work(i: int):
        if outage:
            return
        try:
            rec = process_record(plans[i], config, backends, out_dir)
        except BackendUnavailable as exc:
            with lock:
                if not outage or i < outage["index"]:
                    outage.update(index=i, error=str(exc))
            return
        with lock:
            done[i] = rec
            # never write past a known outage; later records may be incomplete
            if not outage or i < outage["index"]:
                writer.offer(i, rec)

    try:
        if workers == 1:
            for i in range(len(plans)):
                work(i)
                if outage:
                    break
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(work, range(len(plans))))
    finally:
        writer.close()

    written = [r for r in done[: writer.written]]
    counts = count_outcomes(r.to_json() for r in written)
    summary = {
        "complete": not outage,
        "seed": seed,
        "submitted": len(plans),
        "written": writer.written,
        "verified": counts["verified"],
        "rejected": counts["rejected"],
    }
    if outage:
        summary["stopped_at"] = plans[outage["index"]].id
        summary["error"] = outage["error"]
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return RunResult(out_dir / "manifest.jsonl", summary, written)


__all__ = ["PipelineConfig", "run_pipeline", "process_record", "plan_record", "record_seed", "STAGES"]
