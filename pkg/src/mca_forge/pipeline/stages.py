"""The five record stages: caption, synthesize, filter, instruct, verify."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .. import mcat
from ..denoiser import alignment_metric
from ..errors import ConfigError, McaError
from ..scenes import TASK_TO_KINDS, LatentClip
from ..schedule import TASKS
from .backends import VQA_QUESTIONS, GeneratedPair
from .records import Instructions, PipelineRecord, Prompts


def resolve_task(task: str, edit: str | None = None) -> tuple[str, str]:
    """Accept a preset task or a concrete edit kind; return (task, edit)."""
    if task in TASKS:
        kinds = TASK_TO_KINDS[task]
        if edit is None:
            edit = kinds[0]
        if edit not in kinds:
            raise ConfigError(f"edit {edit!r} does not belong to task {task!r}")
        return task, edit
    for t in TASKS:
        if task in TASK_TO_KINDS[t]:
            return t, task
    aliases = {"insertion": "insert", "removal": "remove", "motion": "move"}
    if task in aliases:
        return resolve_task(aliases[task])
    raise ConfigError(f"unknown task {task!r}")


def expand_prompts(keywords, backend, seed: int, task: str, edit: str | None = None) -> tuple[Prompts, str, str]:
    keywords = [str(k) for k in keywords]
    if not keywords:
        raise ValueError("expand_prompts needs at least one keyword")
    task, edit = resolve_task(task, edit)
    return backend.caption(keywords, task, edit, seed), task, edit


def generate_pair(record: PipelineRecord, backend, out_dir) -> GeneratedPair:
    if record.task not in TASKS:
        raise ConfigError(f"no schedule preset for task {record.task!r}")
    return backend.generate(record.prompts, record.task, record.edit, record.schedule, record.seed, out_dir, record.id)


@dataclass(frozen=True)
class FilterThresholds:
    value_min: float = -10.0
    value_max: float = 10.0
    tau_align: float = 0.05
    tau_tv: float = 1.0
    min_edit: float = 1e-3

    def to_json(self) -> dict:
        return asdict(self)


def temporal_tv(clip: LatentClip) -> float:
    """Mean absolute change between consecutive frames."""
    frames = clip.frames_array().astype(np.float64)
    if frames.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(frames, axis=0)).mean())


def load_mask(path, clip: LatentClip, onset: int) -> np.ndarray:
    """Edited-token mask; without a mask file every frame from onset is edited."""
    d = clip.dims
    if path is not None:
        m = mcat.read(path).array.reshape(-1) > 0.5
        if m.size != d.tokens:
            raise ConfigError(f"mask {path} has {m.size} entries, clip has {d.tokens} tokens")
        return m
    m = np.zeros((d.frames, d.tokens_per_frame), dtype=bool)
    m[onset:] = True
    return m.reshape(-1)


def filter_responses(record: PipelineRecord, out_dir, thresholds: FilterThresholds = FilterThresholds()):
    """(passed, reason) for a synthesized record; rejection is a result, not an error."""
    out_dir = Path(out_dir)
    record.thresholds = thresholds.to_json()
    src = LatentClip.load(out_dir / record.src_clip)
    tar = LatentClip.load(out_dir / record.tar_clip)
    if src.dims != tar.dims:
        return False, f"clip dims differ {src.dims} vs {tar.dims}"
    a, b = src.values.array, tar.values.array
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        return False, "non-finite"
    lo, hi = float(min(a.min(), b.min())), float(max(a.max(), b.max()))
    if lo < thresholds.value_min or hi > thresholds.value_max:
        return False, f"value-range [{lo:.4g}, {hi:.4g}]"
    mask = load_mask(None if record.mask_clip is None else out_dir / record.mask_clip, src, record.onset)
    mse = alignment_metric(src, tar, mask)
    if not mse < thresholds.tau_align:
        return False, f"misaligned mse={mse:.4g}"
    tv = max(temporal_tv(src), temporal_tv(tar))
    if not tv < thresholds.tau_tv:
        return False, f"temporal-tv {tv:.4g}"
    inside = np.abs(a[mask].astype(np.float64) - b[mask]).max() if mask.any() else 0.0
    if not inside > thresholds.min_edit:
        return False, "no-edit"
    return True, None


def generate_instructions(record: PipelineRecord, backend) -> Instructions:
    ins = backend.instruct(record.prompts, record.task, record.edit, record.onset, record.seed)
    forms = (ins.short, ins.long, ins.long_dense)
    if not all(f.strip() for f in forms):
        raise McaError("instruction backend returned an empty form")
    return ins


def sample_ref(record: PipelineRecord, out_dir) -> str:
    """Content hash identifying a record for the judge."""
    h = hashlib.sha256()
    for part in (record.id, record.task, record.edit, record.onset, record.prompts.source, record.prompts.target):
        h.update(str(part).encode("utf-8") + b"\x1f")
    if record.instructions is not None:
        for f in (record.instructions.short, record.instructions.long, record.instructions.long_dense):
            h.update(f.encode("utf-8") + b"\x1f")
    for rel in (record.src_clip, record.tar_clip):
        h.update(Path(out_dir, rel).read_bytes())
    return f"{record.id}:{h.hexdigest()[:16]}"


def verify_vqa(ref: str, judge, rounds: int = 3, threshold: float = 2 / 3) -> tuple[bool, list[str]]:
    """Ask ``rounds`` yes/no questions; verified iff yes-fraction >= threshold."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    answers = []
    for r in range(rounds):
        yes, _ = judge.ask(ref, VQA_QUESTIONS[r % len(VQA_QUESTIONS)], r)
        answers.append("yes" if yes else "no")
    passed = Fraction(answers.count("yes"), rounds)
    return passed >= Fraction(threshold).limit_denominator(10**6), answers
