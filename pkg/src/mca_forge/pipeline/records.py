from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

STAGES = ("captioned", "synthesized", "filtered", "instructed", "verified")
PENDING, PASSED, REJECTED, FAILED = "pending", "passed", "rejected", "failed"


@dataclass
class Prompts:
    source: str
    target: str
    subject: str
    setting: str

    def to_json(self) -> dict:
        return {"source": self.source, "target": self.target}


@dataclass
class Instructions:
    short: str
    long: str
    long_dense: str

    def to_json(self) -> dict:
        return {"short": self.short, "long": self.long, "long_dense": self.long_dense}


@dataclass
class PipelineRecord:
    id: str
    task: str
    edit: str
    seed: int
    schedule: str
    keywords: tuple[str, ...]
    status: dict[str, str] = field(default_factory=lambda: {s: PENDING for s in STAGES})
    prompts: Prompts | None = None
    src_clip: str | None = None
    tar_clip: str | None = None
    mask_clip: str | None = None
    onset: int | None = None
    instructions: Instructions | None = None
    reject_reason: str | None = None
    thresholds: dict | None = None
    vqa_answers: list[str] | None = None
    backend_versions: dict[str, str] = field(default_factory=dict)

    def advance(self, stage: str):
        idx = STAGES.index(stage)
        if idx and self.status[STAGES[idx - 1]] != PASSED:
            raise RuntimeError(f"{self.id}: cannot pass {stage} before {STAGES[idx - 1]}")
        self.status[stage] = PASSED

    def stop(self, stage: str, reason: str, failed: bool = False):
        self.status[stage] = FAILED if failed else REJECTED
        self.reject_reason = f"{stage}: {reason}"

    @property
    def verified(self) -> bool:
        return self.status["verified"] == PASSED

    @property
    def stopped_at(self) -> str | None:
        for s in STAGES:
            if self.status[s] in (REJECTED, FAILED):
                return s
        return None

    def to_json(self) -> dict:
        # field order is part of the manifest format
        return {
            "id": self.id,
            "task": self.task,
            "stage_status": dict(self.status),
            "src_clip": self.src_clip,
            "tar_clip": self.tar_clip,
            "onset": self.onset,
            "instructions": None if self.instructions is None else self.instructions.to_json(),
            "reject_reason": self.reject_reason,
            "meta": {
                "seed": self.seed,
                "schedule": self.schedule,
                "backend_versions": dict(self.backend_versions),
                "edit": self.edit,
                "keywords": list(self.keywords),
                "prompts": None if self.prompts is None else self.prompts.to_json(),
                "mask_clip": self.mask_clip,
                "thresholds": self.thresholds,
                "vqa_answers": self.vqa_answers,
            },
        }


def dumps(record: PipelineRecord) -> str:
    return json.dumps(record.to_json(), ensure_ascii=False, separators=(",", ":"))


class ManifestWriter:
    """Append-only JSONL writer that emits records in id order.

    Records may be offered in any order; each is written once every record
    with a smaller index has been written.
    """

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self._pending: dict[int, PipelineRecord] = {}
        self._next = 0

    def offer(self, index: int, record: PipelineRecord):
        self._pending[index] = record
        while self._next in self._pending:
            self._fh.write(dumps(self._pending.pop(self._next)) + "\n")
            self._next += 1
        self._fh.flush()

    @property
    def written(self) -> int:
        return self._next

    def close(self):
        self._fh.close()


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def check_monotone(entries: Iterable[dict]) -> list[str]:
    """Ids of manifest entries whose stage statuses are not monotone."""
    bad = []
    for e in entries:
        ok = True
        stopped = False
        for s in STAGES:
            st = e["stage_status"][s]
            if stopped and st != PENDING:
                ok = False
            if st != PASSED:
                stopped = True
        if e["instructions"] is not None and e["stage_status"]["instructed"] != PASSED:
            ok = False
        if not ok:
            bad.append(e["id"])
    return bad


def count_outcomes(entries: Iterable[dict]) -> dict:
    rejected = {s: 0 for s in STAGES}
    verified = submitted = 0
    for e in entries:
        submitted += 1
        st = e["stage_status"]
        if st["verified"] == PASSED:
            verified += 1
            continue
        for s in STAGES:
            if st[s] in (REJECTED, FAILED):
                rejected[s] += 1
                break
    return {"submitted": submitted, "verified": verified, "rejected": rejected}
