"""Stage backends: deterministic mocks, the toy generator, and HTTP clients.

Every backend exposes a ``version`` string recorded in the manifest. HTTP
clients speak the JSON wire contract::

    POST /v1/caption       {keywords, task, seed}              -> {source_prompt, target_prompt}
    POST /v1/generate_pair {prompts, task, schedule_name, seed} -> {src_ref, tar_ref, onset}
    POST /v1/instruct      {prompts, task, onset}              -> {short, long, long_dense}
    POST /v1/vqa           {sample_ref, question}              -> {answer: yes|no, confidence}
    POST /v1/judge         {sample_ref, instruction}           -> {overall, ic, tvq, urp}

Requests also carry an ``edit`` field (the concrete edit kind) where it is
known; servers may ignore it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import socket
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import scenes
from ..errors import BackendError, BackendUnavailable, ConfigError
from ..tensor import Tensor
from .. import mcat
from .records import Instructions, Prompts

log = logging.getLogger(__name__)


def stable_hash(*parts) -> int:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


# --------------------------------------------------------------------------
# HTTP


@dataclass
class HttpClient:
    base_url: str
    timeout: float = 10.0
    retries: int = 2
    backoff: float = 0.0

    def post(self, route: str, body: dict) -> dict:
        url = self.base_url.rstrip("/") + route
        data = json.dumps(body, sort_keys=True).encode("utf-8")
        last: Exception | None = None
        refused = False
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                if 400 <= exc.code < 500:
                    raise BackendError(f"{route}: HTTP {exc.code}") from exc
                last, refused = exc, False
            except urllib.error.URLError as exc:
                # refused connections mean the service is down; anything else is per-request
                last, refused = exc, isinstance(exc.reason, ConnectionRefusedError)
            except (socket.timeout, TimeoutError) as exc:
                last, refused = exc, False
            except json.JSONDecodeError as exc:
                raise BackendError(f"{route}: malformed JSON response") from exc
            log.warning("%s attempt %d/%d failed: %s", route, attempt + 1, self.retries + 1, last)
            if self.backoff:
                time.sleep(self.backoff * (attempt + 1))
        if refused:
            raise BackendUnavailable(f"{url} unreachable after {self.retries + 1} attempts: {last}")
        raise BackendError(f"{route} failed after {self.retries + 1} attempts: {last}")


def _require(resp: dict, keys, route: str) -> dict:
    missing = [k for k in keys if k not in resp]
    if missing:
        raise BackendError(f"{route}: response lacks {missing}")
    return resp


# --------------------------------------------------------------------------
# stage 1: captions

_CAPTIONS = {
    "insert": [
        ("A quiet {setting} with nothing in the foreground.", "The same quiet {setting}, where a {subject} comes into view."),
        ("An empty {setting} filmed from a steady camera.", "The same {setting} from the same camera, now with a {subject}."),
    ],
    "remove": [
        ("A {subject} in the {setting}, filmed from a steady camera.", "The same {setting} from the same camera, the {subject} gone."),
        ("A {setting} where a {subject} stands out.", "The same {setting}, empty of the {subject}."),
    ],
    "recolor": [
        ("A {subject} in the {setting}.", "The same {subject} in the {setting}, in a different color."),
        ("A plain {subject} moving through the {setting}.", "The same {subject} moving through the {setting}, repainted."),
    ],
    "move": [
        ("A {subject} crossing the {setting} from left to right.", "The same {subject} crossing the {setting} along the other side."),
        ("A {subject} moving along the top of the {setting}.", "The same {subject} moving along the bottom of the {setting}."),
    ],
    "background": [
        ("A {subject} in front of a {setting}.", "The same {subject} in front of a different backdrop than the {setting}."),
        ("A {subject} passing a {setting}.", "The same {subject} passing a replaced background instead of the {setting}."),
    ],
}


class MockText:
    version = "mock-text/1"

    def caption(self, keywords, task: str, edit: str, seed: int) -> Prompts:
        subject, setting = keywords[0], (keywords[1] if len(keywords) > 1 else "room")
        templates = _CAPTIONS[edit]
        src_t, tar_t = templates[stable_hash("caption", task, edit, seed, *keywords) % len(templates)]
        return Prompts(src_t.format(subject=subject, setting=setting), tar_t.format(subject=subject, setting=setting),
                       subject, setting)


class HttpText:
    def __init__(self, client: HttpClient):
        self.client = client
        self.version = f"http:{client.base_url}"

    def caption(self, keywords, task: str, edit: str, seed: int) -> Prompts:
        resp = _require(
            self.client.post("/v1/caption", {"keywords": list(keywords), "task": task, "edit": edit, "seed": seed}),
            ("source_prompt", "target_prompt"),
            "/v1/caption",
        )
        subject, setting = keywords[0], (keywords[1] if len(keywords) > 1 else "")
        return Prompts(str(resp["source_prompt"]), str(resp["target_prompt"]), subject, setting)


# --------------------------------------------------------------------------
# stage 2: paired generation


@dataclass
class GeneratedPair:
    src_path: Path
    tar_path: Path
    onset: int
    mask_path: Path | None = None


def _write_pair(out_dir: Path, record_id: str, src, tar, mask: np.ndarray, dims) -> GeneratedPair:
    clips = Path(out_dir) / "clips"
    sp = src.save(clips / f"{record_id}_src.mcat")
    tp = tar.save(clips / f"{record_id}_tar.mcat")
    mp = mcat.write(clips / f"{record_id}_mask.mcat", Tensor(mask.reshape(dims.frames, dims.height, dims.width)))
    return sp, tp, mp


class MockGenerator:
    """Renders the procedural scene pair instead of sampling a model."""

    version = "mock-generator/1"

    def __init__(self, dims: scenes.ClipDims = scenes.ClipDims()):
        self.dims = dims

    def generate(self, prompts: Prompts, task: str, edit: str, schedule_name: str, seed: int, out_dir, record_id: str):
        rng = np.random.default_rng(seed)
        src, tar, _ = scenes.make_pair(edit, self.dims, rng)
        sp, tp, mp = _write_pair(out_dir, record_id, src.clip, tar.clip, src.edit_mask, self.dims)
        return GeneratedPair(sp, tp, src.onset, mp)


class ToyGenerator:
    """Joint MCA sampling with the toy denoiser."""

    def __init__(self, model, dims: scenes.ClipDims | None = None, num_steps: int = 50, shared_noise: bool = True):
        from ..schedule import load_schedule

        self.model = model
        self.dims = dims or scenes.ClipDims(channels=model.config.channels)
        self.num_steps = num_steps
        self.shared_noise = shared_noise
        self._load_schedule = load_schedule
        self.version = f"toy-denoiser/1 seed={model.seed} steps={num_steps}"

    def generate(self, prompts: Prompts, task: str, edit: str, schedule_name: str, seed: int, out_dir, record_id: str):
        from ..denoiser import sample_pair

        schedule = self._load_schedule(schedule_name)
        rng = np.random.default_rng(seed)
        src_c, tar_c = scenes.pair_conditions(edit, rng)
        onset = int(rng.integers(self.dims.frames))
        src_conds = (src_c,) * self.dims.frames
        tar_conds = (src_c,) * onset + (tar_c,) * (self.dims.frames - onset)
        noise_seed = int(rng.integers(2**63))
        try:
            src, tar = sample_pair(
                self.model, src_conds, tar_conds, schedule, self.num_steps, noise_seed, self.shared_noise, self.dims
            )
        except ValueError as exc:
            raise BackendError(f"generation failed: {exc}") from exc
        mask = scenes.edit_mask(src_conds, tar_conds, onset, self.dims)
        sp, tp, mp = _write_pair(out_dir, record_id, src, tar, mask, self.dims)
        return GeneratedPair(sp, tp, onset, mp)


class HttpGenerator:
    """Remote generator; returned refs must be readable local paths and are copied into the run."""

    def __init__(self, client: HttpClient):
        self.client = client
        self.version = f"http:{client.base_url}"

    def generate(self, prompts: Prompts, task: str, edit: str, schedule_name: str, seed: int, out_dir, record_id: str):
        body = {"prompts": prompts.to_json(), "task": task, "edit": edit, "schedule_name": schedule_name, "seed": seed}
        resp = _require(self.client.post("/v1/generate_pair", body), ("src_ref", "tar_ref", "onset"), "/v1/generate_pair")
        clips = Path(out_dir) / "clips"
        clips.mkdir(parents=True, exist_ok=True)
        paths = []
        for ref, suffix in ((resp["src_ref"], "src"), (resp["tar_ref"], "tar"), (resp.get("mask_ref"), "mask")):
            if ref is None:
                paths.append(None)
                continue
            dst = clips / f"{record_id}_{suffix}.mcat"
            try:
                shutil.copyfile(ref, dst)
            except OSError as exc:
                raise BackendError(f"cannot fetch clip {ref}: {exc}") from exc
            paths.append(dst)
        return GeneratedPair(paths[0], paths[1], int(resp["onset"]), paths[2])


# --------------------------------------------------------------------------
# stage 4: instructions

_SHORT = {
    "insert": "add a {subject}",
    "remove": "remove the {subject}",
    "recolor": "change the color of the {subject}",
    "move": "move the {subject} to the other side",
    "background": "replace the background behind the {subject}",
}
_LONG = [
    "{Short} from frame {onset} onward, keeping the rest of the {setting} unchanged.",
    "Starting at frame {onset}, {short}, and leave everything else in the {setting} as it is.",
]


class MockVlm:
    version = "mock-vlm/1"

    def instruct(self, prompts: Prompts, task: str, edit: str, onset: int, seed: int) -> Instructions:
        short = _SHORT[edit].format(subject=prompts.subject)
        fields = dict(short=short, Short=short[0].upper() + short[1:], onset=onset, setting=prompts.setting or "scene")
        long = _LONG[stable_hash("instruct", task, edit, onset, seed) % len(_LONG)].format(**fields)
        dense = f"{long} Before the edit: {prompts.source} After the edit: {prompts.target}"
        return Instructions(short, long, dense)


class HttpVlm:
    def __init__(self, client: HttpClient):
        self.client = client
        self.version = f"http:{client.base_url}"

    def instruct(self, prompts: Prompts, task: str, edit: str, onset: int, seed: int) -> Instructions:
        body = {"prompts": prompts.to_json(), "task": task, "edit": edit, "onset": onset}
        resp = _require(self.client.post("/v1/instruct", body), ("short", "long", "long_dense"), "/v1/instruct")
        return Instructions(str(resp["short"]), str(resp["long"]), str(resp["long_dense"]))


# --------------------------------------------------------------------------
# stage 5: VQA judge

VQA_QUESTIONS = (
    "Is the requested edit applied in the target clip?",
    "Is the content outside the edit preserved between the two clips?",
    "Does the instruction describe the change between the two clips?",
)


class MockJudge:
    """Answers yes with probability ``yes_rate``, deterministically per (sample, question, round)."""

    def __init__(self, yes_rate: float = 0.9):
        if not 0.0 <= yes_rate <= 1.0:
            raise ConfigError("yes_rate must be in [0, 1]")
        self.yes_rate = yes_rate
        self.version = f"mock-judge/1 yes_rate={yes_rate!r}"

    def ask(self, sample_ref: str, question: str, round_index: int) -> tuple[bool, float]:
        h = stable_hash("vqa", sample_ref, question, round_index)
        u = (h % 1_000_000) / 1_000_000
        return u < self.yes_rate, round(0.5 + abs(u - self.yes_rate) / 2, 6)


class ScriptedJudge:
    """Replays a fixed answer sequence; for tests."""

    version = "scripted-judge/1"

    def __init__(self, answers):
        self.answers = list(answers)
        self.calls = 0

    def ask(self, sample_ref: str, question: str, round_index: int) -> tuple[bool, float]:
        ans = self.answers[self.calls % len(self.answers)]
        self.calls += 1
        return bool(ans), 1.0


class HttpJudge:
    def __init__(self, client: HttpClient):
        self.client = client
        self.version = f"http:{client.base_url}"

    def ask(self, sample_ref: str, question: str, round_index: int) -> tuple[bool, float]:
        resp = _require(self.client.post("/v1/vqa", {"sample_ref": sample_ref, "question": question}),
                        ("answer",), "/v1/vqa")
        answer = str(resp["answer"]).lower()
        if answer not in ("yes", "no"):
            raise BackendError(f"/v1/vqa: answer must be yes|no, got {answer!r}")
        return answer == "yes", float(resp.get("confidence", 1.0))


# --------------------------------------------------------------------------


@dataclass
class Backends:
    text: object
    generator: object
    vlm: object
    judge: object

    def versions(self) -> dict[str, str]:
        return {
            "text": self.text.version,
            "generator": self.generator.version,
            "vlm": self.vlm.version,
            "judge": self.judge.version,
        }

    @classmethod
    def mock(cls, dims: scenes.ClipDims = scenes.ClipDims(), yes_rate: float = 0.9) -> "Backends":
        return cls(MockText(), MockGenerator(dims), MockVlm(), MockJudge(yes_rate))


def backends_from_config(spec: dict, dims: scenes.ClipDims) -> Backends:
    """Build backends from a ``{"text": ..., "generator": ..., ...}`` mapping.

    Each entry is ``"mock"``, ``{"kind": "mock", ...}``, ``{"kind": "http", "url": ...}``
    or, for the generator, ``{"kind": "toy", "model": <checkpoint dir>, "steps": n}``.
    """
    http = spec.get("http", {})

    def entry(name):
        e = spec.get(name, "mock")
        return {"kind": e} if isinstance(e, str) else dict(e)

    def client(e):
        if "url" not in e:
            raise ConfigError("http backend needs a url")
        return HttpClient(e["url"], float(e.get("timeout", http.get("timeout", 10.0))),
                          int(e.get("retries", http.get("retries", 2))))

    def pick(name, mock, http_cls, extra=None):
        e = entry(name)
        kind = e.get("kind", "mock")
        if kind == "mock":
            return mock(e)
        if kind == "http":
            return http_cls(client(e))
        if extra and kind in extra:
            return extra[kind](e)
        raise ConfigError(f"unknown {name} backend kind {kind!r}")

    def toy(e):
        from ..denoiser import ModelConfig, build_model, load_model

        if "model" in e:
            model = load_model(e["model"])
        else:
            model = build_model(ModelConfig(channels=dims.channels), int(e.get("model_seed", 0)))
        return ToyGenerator(model, dims, int(e.get("steps", 50)), bool(e.get("shared_noise", True)))

    return Backends(
        text=pick("text", lambda e: MockText(), HttpText),
        generator=pick("generator", lambda e: MockGenerator(dims), HttpGenerator, {"toy": toy}),
        vlm=pick("vlm", lambda e: MockVlm(), HttpVlm),
        judge=pick("judge", lambda e: MockJudge(float(e.get("yes_rate", 0.9))), HttpJudge),
    )
