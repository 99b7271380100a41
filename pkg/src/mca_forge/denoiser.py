"""A small DiT-style velocity model with joint two-branch sampling."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import mcat
from . import tensor as T
from .attention import AttentionWeights, BranchRole, McaVariant, multi_head_attention, multi_head_mca
from .errors import ConfigError, DivergenceError, NonFiniteError, ShapeError
from .scenes import N_CONDS, ClipDims, LatentClip, SceneConfig, synth_dataset
from .schedule import SchedulePolicy, resolve
from .tensor import GradTape, Tensor


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    channels: int = 8
    conds: int = N_CONDS
    mlp_ratio: int = 2
    concat_k_mode: str = "duplicate"

    def __post_init__(self):
        if min(self.layers, self.width, self.heads, self.channels, self.conds, self.mlp_ratio) < 1:
            raise ConfigError(f"model dims must be positive: {self}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 2:
            raise ConfigError("width must be even for the sinusoidal embeddings")


_ATTN_KEYS = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    W, C, H = cfg.width, cfg.channels, cfg.width * cfg.mlp_ratio
    shapes = [
        ("in_w", (C, W)),
        ("in_b", (W,)),
        ("time_w1", (W, W)),
        ("time_b1", (W,)),
        ("time_w2", (W, W)),
        ("time_b2", (W,)),
        ("cond", (cfg.conds, W)),
    ]
    for l in range(cfg.layers):
        p = f"blocks.{l}."
        shapes += [(p + "ln1_g", (W,)), (p + "ln1_b", (W,)), (p + "mod_w", (W, W))]
        shapes += [(p + "attn." + k, (W, W) if k.startswith("w") else (W,)) for k in _ATTN_KEYS]
        shapes += [
            (p + "ln2_g", (W,)),
            (p + "ln2_b", (W,)),
            (p + "mlp_w1", (W, H)),
            (p + "mlp_b1", (H,)),
            (p + "mlp_w2", (H, W)),
            (p + "mlp_b2", (W,)),
        ]
    shapes += [("out_ln_g", (W,)), ("out_ln_b", (W,)), ("out_w", (W, C)), ("out_b", (C,))]
    return shapes


@dataclass
class ToyModel:
    config: ModelConfig
    params: dict[str, Tensor]
    seed: int

    def attention(self, layer: int) -> AttentionWeights:
        p = f"blocks.{layer}.attn."
        return AttentionWeights(*(self.params[p + k] for k in _ATTN_KEYS), heads=self.config.heads)

    def num_parameters(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.params.values())

    def with_params(self, params: dict[str, Tensor]) -> "ToyModel":
        return ToyModel(self.config, params, self.seed)


def build_model(config: ModelConfig, seed: int) -> ToyModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf == "cond":
            arr = rng.uniform(-0.5, 0.5, shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr)
    return ToyModel(config, params, seed)


# --------------------------------------------------------------------------
# embeddings


def _sincos(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(1, half))
    args = positions[:, None].astype(np.float64) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def positional_table(dims: ClipDims, width: int) -> Tensor:
    """Fixed 3-axis sin/cos features; axis widths are even splits of ``width``."""
    parts = [2 * (width // 6)] * 3
    parts[0] += width - sum(parts)
    f, y, x = np.meshgrid(np.arange(dims.frames), np.arange(dims.height), np.arange(dims.width), indexing="ij")
    cols = [_sincos(axis.reshape(-1), n, 100.0) for axis, n in zip((f, y, x), parts)]
    return Tensor(np.concatenate(cols, axis=1))


def time_features(t: float, width: int) -> Tensor:
    return Tensor(_sincos(np.array([t * 1000.0]), width))


def frame_conditions(cond, dims: ClipDims) -> tuple[int, ...]:
    if isinstance(cond, (int, np.integer)):
        return (int(cond),) * dims.frames
    cond = tuple(int(c) for c in cond)
    if len(cond) != dims.frames:
        raise ShapeError(f"need {dims.frames} per-frame condition ids, got {len(cond)}")
    return cond


@dataclass
class _Branch:
    h: Tensor
    shift_src: Tensor  # per-token conditioning [tokens, width]


class _Context:
    """Per-clip-shape constants, cached across calls."""

    _cache: dict = {}

    def __init__(self, dims: ClipDims, width: int):
        key = (dims, width)
        if key not in self._cache:
            token_frame = np.repeat(np.arange(dims.frames), dims.tokens_per_frame)
            self._cache[key] = (positional_table(dims, width), token_frame)
        self.pos, self.token_frame = self._cache[key]


def _embed(model: ToyModel, x: Tensor, t: float, conds: tuple[int, ...], ctx: _Context) -> _Branch:
    p, W = model.params, model.config.width
    temb = T.gelu(time_features(t, W) @ p["time_w1"] + p["time_b1"]) @ p["time_w2"] + p["time_b2"]
    c_frame = T.gather_rows(p["cond"], conds) + temb
    c_tok = T.gather_rows(c_frame, ctx.token_frame)
    h = x @ p["in_w"] + p["in_b"] + ctx.pos + c_tok
    return _Branch(h, c_tok)


def _pre_attn(model: ToyModel, layer: int, b: _Branch) -> Tensor:
    p = model.params
    pre = f"blocks.{layer}."
    return T.layer_norm(b.h, p[pre + "ln1_g"], p[pre + "ln1_b"]) + b.shift_src @ p[pre + "mod_w"]


def _mlp(model: ToyModel, layer: int, h: Tensor) -> Tensor:
    p = model.params
    pre = f"blocks.{layer}."
    m = T.layer_norm(h, p[pre + "ln2_g"], p[pre + "ln2_b"])
    return h + T.gelu(m @ p[pre + "mlp_w1"] + p[pre + "mlp_b1"]) @ p[pre + "mlp_w2"] + p[pre + "mlp_b2"]


def _head(model: ToyModel, h: Tensor) -> Tensor:
    p = model.params
    return T.layer_norm(h, p["out_ln_g"], p["out_ln_b"]) @ p["out_w"] + p["out_b"]


def block_forward(model: ToyModel, layer: int, src_h, tar_h, src_c, tar_c, variants) -> tuple[Tensor, Tensor]:
    """One transformer block over both branches (exposed for gradient checks)."""
    bs = _Branch(src_h, src_c)
    bt = _Branch(tar_h, tar_c)
    a_src, a_tar = _pre_attn(model, layer, bs), _pre_attn(model, layer, bt)
    o_src, o_tar = multi_head_mca(
        a_src, a_tar, model.attention(layer), variants, concat_k_mode=model.config.concat_k_mode
    )
    return _mlp(model, layer, src_h + o_src), _mlp(model, layer, tar_h + o_tar)


def velocity(model: ToyModel, x: Tensor, t: float, cond, dims: ClipDims) -> Tensor:
    """Single-branch prediction with plain self-attention."""
    ctx = _Context(dims, model.config.width)
    b = _embed(model, x, t, frame_conditions(cond, dims), ctx)
    h = b.h
    for layer in range(model.config.layers):
        h = h + multi_head_attention(_pre_attn(model, layer, _Branch(h, b.shift_src)), model.attention(layer))
        h = _mlp(model, layer, h)
    return _head(model, h)


VariantFn = Callable[[BranchRole, int], McaVariant]


def joint_velocity(model, x_src, x_tar, t, src_cond, tar_cond, dims, variant_for: VariantFn):
    """Both branches in lock-step; ``variant_for(role, layer)`` picks each branch's policy."""
    ctx = _Context(dims, model.config.width)
    bs = _embed(model, x_src, t, frame_conditions(src_cond, dims), ctx)
    bt = _embed(model, x_tar, t, frame_conditions(tar_cond, dims), ctx)
    hs, ht = bs.h, bt.h
    for layer in range(model.config.layers):
        variants = (variant_for(BranchRole.SRC, layer), variant_for(BranchRole.TAR, layer))
        hs, ht = block_forward(model, layer, hs, ht, bs.shift_src, bt.shift_src, variants)
    return _head(model, hs), _head(model, ht)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    """Everything ``train-toy`` needs; the defaults are the desk-scale recipe."""

    model: ModelConfig = ModelConfig()
    data: SceneConfig = SceneConfig()
    steps: int = 2000
    lr: float = 0.05
    batch: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - {"model", "data", "steps", "lr", "batch", "seed"}
        if extra:
            raise ConfigError(f"unknown train config keys {sorted(extra)}")
        kw = {k: d[k] for k in ("steps", "lr", "batch", "seed") if k in d}
        if "model" in d:
            kw["model"] = ModelConfig(**d["model"])
        if "data" in d:
            data = dict(d["data"])
            if "dims" in data:
                data["dims"] = ClipDims(**data["dims"])
            if "kinds" in data:
                data["kinds"] = tuple(data["kinds"])
            kw["data"] = SceneConfig(**data)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def __post_init__(self):
        if self.data.dims.channels != self.model.channels:
            raise ConfigError("data channels must match model channels")


def train_default(config: TrainConfig = TrainConfig(), progress=None) -> "TrainResult":
    """Build, synthesize and train from one config (model seed = data seed = train seed)."""
    model = build_model(config.model, config.seed)
    data = synth_dataset(config.data, config.seed)
    return train(model, data, config.steps, config.lr, config.seed, config.batch, progress)


@dataclass
class TrainResult:
    model: ToyModel
    losses: list[float]


def _training_pool(dataset) -> list[tuple[LatentClip, tuple[int, ...]]]:
    pool = []
    for src, tar, _ in dataset:
        pool.append((src.clip, src.frame_conds))
        pool.append((tar.clip, tar.frame_conds))
    return pool


def flow_matching_loss(model: ToyModel, x1: Tensor, conds, dims: ClipDims, t: float, noise: np.ndarray) -> Tensor:
    x0 = noise.astype(np.float32)
    xt = Tensor((1.0 - t) * x0 + t * x1.array)
    target = Tensor(x1.array - x0)
    pred = velocity(model, xt, t, conds, dims)
    return T.mean_all(T.square(pred - target))


def train(
    model: ToyModel,
    dataset,
    steps: int,
    lr: float,
    seed: int,
    batch: int = 1,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Rectified-flow training with fixed-step gradient descent."""
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    if steps == 0:
        return TrainResult(model, [])
    pool = _training_pool(dataset)
    if not pool:
        raise ConfigError("empty training set")
    rng = np.random.default_rng(seed)
    names = list(model.params)
    params = dict(model.params)
    losses = []
    for step in range(steps):
        grads_sum = None
        total = 0.0
        for _ in range(batch):
            clip, conds = pool[int(rng.integers(len(pool)))]
            t = float(rng.uniform())
            noise = rng.standard_normal(clip.values.shape)
            current = model.with_params(params)
            leaves = [params[n] for n in names]
            with GradTape() as tape:
                tape.watch(*leaves)
                loss = flow_matching_loss(current, clip.values, conds, clip.dims, t, noise)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step)
            grads = tape.gradient(loss, leaves)
            total += value
            grads_sum = grads if grads_sum is None else [a + b for a, b in zip(grads_sum, grads)]
        scale = np.float32(lr / batch)
        params = {n: Tensor._wrap(params[n].array - scale * g) for n, g in zip(names, grads_sum)}
        losses.append(total / batch)
        if progress is not None:
            progress(step, losses[-1])
    return TrainResult(model.with_params(params), losses)


# --------------------------------------------------------------------------
# sampling


def initial_noise(seed: int, dims: ClipDims, shared: bool) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((dims.tokens, dims.channels)).astype(np.float32)
    tar = src if shared else rng.standard_normal((dims.tokens, dims.channels)).astype(np.float32)
    return src, tar


def _check_finite(x: Tensor, what: str):
    if not np.isfinite(x.array).all():
        raise NonFiniteError(f"non-finite latents in {what}")


def sample(model: ToyModel, cond, num_steps: int, seed: int, dims: ClipDims | None = None) -> LatentClip:
    """Single-branch Euler sampling from the source noise stream."""
    dims = dims or ClipDims(channels=model.config.channels)
    x = Tensor(initial_noise(seed, dims, True)[0])
    dt = 1.0 / num_steps
    for s in range(num_steps):
        x = x + velocity(model, x, s * dt, cond, dims) * dt
    _check_finite(x, "sample")
    return LatentClip(dims, x)


def sample_pair(
    model: ToyModel,
    src_cond,
    tar_cond,
    schedule: SchedulePolicy,
    num_steps: int = 50,
    seed: int = 0,
    shared_noise: bool = True,
    dims: ClipDims | None = None,
) -> tuple[LatentClip, LatentClip]:
    """Euler-integrate both branches jointly under an MCA schedule."""
    dims = dims or ClipDims(channels=model.config.channels)
    if dims.channels != model.config.channels:
        raise ConfigError(f"clip has {dims.channels} channels, model expects {model.config.channels}")
    if num_steps < 1:
        raise ConfigError("num_steps must be >= 1")
    L = model.config.layers
    # resolve the full grid up front so schedule errors surface before any work
    table = {
        (role, l, s): resolve(schedule, role, l, s, L, num_steps)
        for role in BranchRole
        for l in range(L)
        for s in range(num_steps)
    }
    n_src, n_tar = initial_noise(seed, dims, shared_noise)
    xs, xt = Tensor(n_src), Tensor(n_tar)
    dt = 1.0 / num_steps
    for s in range(num_steps):
        vs, vt = joint_velocity(
            model, xs, xt, s * dt, src_cond, tar_cond, dims, lambda role, l: table[(role, l, s)]
        )
        xs, xt = xs + vs * dt, xt + vt * dt
    _check_finite(xs, "source branch")
    _check_finite(xt, "target branch")
    return LatentClip(dims, xs), LatentClip(dims, xt)


def alignment_metric(src: LatentClip, tar: LatentClip, mask) -> float:
    """Mean squared difference over unedited tokens (``mask`` True = edited)."""
    if src.dims != tar.dims:
        raise ShapeError(f"clip dims differ: {src.dims} vs {tar.dims}")
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != src.dims.tokens:
        raise ShapeError(f"mask has {mask.size} entries, clip has {src.dims.tokens} tokens")
    keep = ~mask
    if not keep.any():
        return 0.0
    diff = src.values.array[keep].astype(np.float64) - tar.values.array[keep].astype(np.float64)
    return float(np.mean(diff * diff))


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: ToyModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"config": asdict(model.config), "seed": model.seed, "params": list(model.params)}
    (directory / "config.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    for name, t in model.params.items():
        mcat.write(directory / f"{name}.mcat", t)
    return directory


def load_model(directory) -> ToyModel:
    directory = Path(directory)
    meta = json.loads((directory / "config.json").read_text(encoding="utf-8"))
    config = ModelConfig(**meta["config"])
    params = {name: mcat.read(directory / f"{name}.mcat") for name in meta["params"]}
    expected = dict(param_shapes(config))
    for name, t in params.items():
        if expected.get(name) != t.shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {t.shape}, expected {expected.get(name)}")
    return ToyModel(config, params, meta["seed"])


__all__ = [
    "ModelConfig",
    "TrainConfig",
    "train_default",
    "ToyModel",
    "build_model",
    "train",
    "sample",
    "sample_pair",
    "alignment_metric",
    "save_model",
    "load_model",
    "velocity",
    "joint_velocity",
    "block_forward",
]
