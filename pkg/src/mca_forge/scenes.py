"""Procedural latent clips: a drifting background plus an optional moving box.

A frame's content is fully described by a condition id that encodes the
background family and the object (slot = trajectory, color = channel
signature). Paired clips share the sample-specific background pattern and
switch condition at an onset frame, so source and target agree everywhere
outside the edit mask by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mcat
from .errors import ConfigError, ShapeError
from .tensor import Tensor

N_BACKGROUNDS = 2
N_SLOTS = 2
N_COLORS = 3
N_OBJECTS = 1 + N_SLOTS * N_COLORS
N_CONDS = N_BACKGROUNDS * N_OBJECTS

EDIT_KINDS = ("insert", "remove", "recolor", "move", "background")

# which schedule preset drives a given edit kind
KIND_TO_TASK = {
    "insert": "object_insertion_removal",
    "remove": "object_insertion_removal",
    "recolor": "color_material",
    "move": "motion_viewpoint",
    "background": "background_replacement",
}
TASK_TO_KINDS = {
    "object_insertion_removal": ("insert", "remove"),
    "local_modification": ("recolor",),
    "color_material": ("recolor",),
    "motion_viewpoint": ("move",),
    "background_replacement": ("background",),
}


@dataclass(frozen=True)
class ClipDims:
    frames: int = 8
    height: int = 8
    width: int = 8
    channels: int = 8

    def __post_init__(self):
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ConfigError(f"clip dims must be positive: {self}")

    @property
    def tokens(self) -> int:
        return self.frames * self.height * self.width

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class LatentClip:
    dims: ClipDims
    values: Tensor  # [frames*height*width, channels], frame-major

    def __post_init__(self):
        if self.values.shape != (self.dims.tokens, self.dims.channels):
            raise ShapeError(f"clip values {self.values.shape} do not match {self.dims}")

    @classmethod
    def from_array(cls, arr) -> "LatentClip":
        arr = np.asarray(arr, dtype=np.float32)
        f, h, w, c = arr.shape
        return cls(ClipDims(f, h, w, c), Tensor(arr.reshape(f * h * w, c)))

    def frames_array(self) -> np.ndarray:
        d = self.dims
        return self.values.array.reshape(d.frames, d.height, d.width, d.channels)

    def save(self, path) -> Path:
        return mcat.write(path, Tensor(self.frames_array()))

    @classmethod
    def load(cls, path) -> "LatentClip":
        t = mcat.read(path)
        if t.ndim != 4:
            raise ShapeError(f"{path}: clip files are 4-D, got shape {t.shape}")
        return cls.from_array(t.array)


def cond_id(background: int, obj: int) -> int:
    return background * N_OBJECTS + obj


def split_cond(cid: int) -> tuple[int, int]:
    return divmod(cid, N_OBJECTS)


def object_id(slot: int, color: int) -> int:
    return 1 + slot * N_COLORS + color


def object_parts(obj: int) -> tuple[int, int]:
    return divmod(obj - 1, N_COLORS)


def _box_size(dims: ClipDims) -> int:
    return max(1, min(dims.height, dims.width) // 3)


def object_box(obj: int, frame: int, dims: ClipDims) -> tuple[int, int, int] | None:
    """(row, col, size) of an object's box in a frame, or None for no object."""
    if obj == 0:
        return None
    slot, _ = object_parts(obj)
    size = _box_size(dims)
    span = dims.width - size
    progress = frame / max(1, dims.frames - 1)
    if slot == 0:
        row, col = min(1, dims.height - size), round(progress * span)
    else:
        row, col = max(0, dims.height - size - 1), round((1 - progress) * span)
    return row, col, size


def object_mask(obj: int, frame: int, dims: ClipDims) -> np.ndarray:
    m = np.zeros((dims.height, dims.width), dtype=bool)
    box = object_box(obj, frame, dims)
    if box is not None:
        r, c, s = box
        m[r : r + s, c : c + s] = True
    return m


def _signature_table(channels: int) -> tuple[np.ndarray, np.ndarray]:
    # fixed, data-independent channel signatures for backgrounds and colors
    rng = np.random.default_rng(20240917)
    bg = rng.uniform(-0.6, 0.6, (N_BACKGROUNDS, channels))
    colors = rng.choice([-1.0, 1.0], (N_COLORS, channels)) * rng.uniform(0.8, 1.2, (N_COLORS, channels))
    return bg, colors


@dataclass(frozen=True)
class Background:
    """Sample-specific drifting cosine pattern shared by both clips of a pair."""

    amp: np.ndarray  # [channels]
    kx: float
    ky: float
    phase: np.ndarray  # [channels]
    drift: float

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int) -> "Background":
        return cls(
            amp=rng.uniform(0.1, 0.4, channels),
            kx=float(rng.uniform(0.3, 1.5)),
            ky=float(rng.uniform(0.3, 1.5)),
            phase=rng.uniform(0, 2 * np.pi, channels),
            drift=float(rng.uniform(-0.3, 0.3)),
        )


def render(frame_conds, background: Background, dims: ClipDims) -> np.ndarray:
    """[frames, height, width, channels] clip for a per-frame condition list."""
    if len(frame_conds) != dims.frames:
        raise ShapeError(f"need {dims.frames} frame conditions, got {len(frame_conds)}")
    bg_table, colors = _signature_table(dims.channels)
    ys, xs = np.meshgrid(np.arange(dims.height), np.arange(dims.width), indexing="ij")
    out = np.empty((dims.frames, dims.height, dims.width, dims.channels), dtype=np.float64)
    for f, cid in enumerate(frame_conds):
        fam, obj = split_cond(int(cid))
        arg = background.kx * xs + background.ky * ys + background.drift * f
        pattern = background.amp * np.cos(arg[..., None] + background.phase)
        out[f] = bg_table[fam] + pattern
        if obj:
            _, color = object_parts(obj)
            out[f][object_mask(obj, f, dims)] = colors[color]
    return out.astype(np.float32)


@dataclass(frozen=True)
class SynthScene:
    clip: LatentClip
    edit_mask: np.ndarray = field(repr=False)  # [tokens] bool, True = edited
    onset: int
    task: str
    frame_conds: tuple[int, ...]

    def __post_init__(self):
        if not 0 <= self.onset < self.clip.dims.frames:
            raise ShapeError(f"onset {self.onset} outside clip of {self.clip.dims.frames} frames")


def edit_mask(src_conds, tar_conds, onset: int, dims: ClipDims) -> np.ndarray:
    """Tokens that may differ between the two renders."""
    mask = np.zeros((dims.frames, dims.height, dims.width), dtype=bool)
    for f in range(onset, dims.frames):
        sb, so = split_cond(src_conds[f])
        tb, to = split_cond(tar_conds[f])
        if so != to:
            mask[f] |= object_mask(so, f, dims) | object_mask(to, f, dims)
        if sb != tb:
            # background visible wherever neither clip draws an object
            mask[f] |= ~(object_mask(so, f, dims) & object_mask(to, f, dims))
    return mask.reshape(-1)


def pair_conditions(kind: str, rng: np.random.Generator) -> tuple[int, int]:
    """Source and target condition ids for an edit kind."""
    fam = int(rng.integers(N_BACKGROUNDS))
    slot = int(rng.integers(N_SLOTS))
    color = int(rng.integers(N_COLORS))
    obj = object_id(slot, color)
    if kind == "insert":
        return cond_id(fam, 0), cond_id(fam, obj)
    if kind == "remove":
        return cond_id(fam, obj), cond_id(fam, 0)
    if kind == "recolor":
        other = (color + 1 + int(rng.integers(N_COLORS - 1))) % N_COLORS
        return cond_id(fam, obj), cond_id(fam, object_id(slot, other))
    if kind == "move":
        return cond_id(fam, obj), cond_id(fam, object_id(1 - slot, color))
    if kind == "background":
        return cond_id(fam, obj), cond_id(1 - fam, obj)
    raise ConfigError(f"unknown edit kind {kind!r}")


def make_pair(kind: str, dims: ClipDims, rng: np.random.Generator, onset: int | None = None):
    src_c, tar_c = pair_conditions(kind, rng)
    if onset is None:
        onset = int(rng.integers(dims.frames))
    background = Background.random(rng, dims.channels)
    src_conds = (src_c,) * dims.frames
    tar_conds = (src_c,) * onset + (tar_c,) * (dims.frames - onset)
    mask = edit_mask(src_conds, tar_conds, onset, dims)
    src = LatentClip.from_array(render(src_conds, background, dims))
    tar = LatentClip.from_array(render(tar_conds, background, dims))
    task = KIND_TO_TASK[kind]
    return (
        SynthScene(src, mask, onset, task, src_conds),
        SynthScene(tar, mask, onset, task, tar_conds),
        kind,
    )


@dataclass(frozen=True)
class SceneConfig:
    samples: int = 64
    dims: ClipDims = ClipDims()
    kinds: tuple[str, ...] = EDIT_KINDS

    def __post_init__(self):
        unknown = set(self.kinds) - set(EDIT_KINDS)
        if unknown or not self.kinds:
            raise ConfigError(f"unknown edit kinds {sorted(unknown)}")


def synth_dataset(config: SceneConfig, seed: int):
    """``config.samples`` (source, target, kind) triples; kinds cycle in order."""
    out = []
    for i in range(config.samples):
        rng = np.random.default_rng([seed, i])
        kind = config.kinds[i % len(config.kinds)]
        out.append(make_pair(kind, config.dims, rng))
    return out
