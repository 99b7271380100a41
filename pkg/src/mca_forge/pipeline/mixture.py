"""Categorical mixtures for training-data recipes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..errors import ConfigError

# dataset shape of the full-scale pipeline; desk runs use toy clip dims instead
DATASET_RESOLUTION = "480p"
DATASET_FPS = 16
DATASET_SECONDS = 3
DATASET_TARGET_PAIRS = 300_000
INFERENCE_STEPS = 50


@dataclass(frozen=True)
class MixtureSpec:
    weights: tuple[tuple[str, int], ...]

    def __init__(self, weights: Mapping[str, int] | tuple):
        items = tuple(weights.items()) if isinstance(weights, Mapping) else tuple(weights)
        for name, w in items:
            if not isinstance(w, (int, np.integer)) or w < 0:
                raise ConfigError(f"weight for {name!r} must be a nonnegative integer, got {w!r}")
        if not items or sum(w for _, w in items) == 0:
            raise ConfigError("mixture needs at least one positive weight")
        object.__setattr__(self, "weights", items)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.weights]

    def probabilities(self) -> np.ndarray:
        w = np.array([w for _, w in self.weights], dtype=np.float64)
        return w / w.sum()


# stage-1 objectives: generation / VLM reconstruction / consistency preservation
STAGE1_OBJECTIVES = MixtureSpec({"generation": 7, "vlm_reconstruction": 2, "consistency": 1})
IMAGE_TO_VIDEO = MixtureSpec({"image": 4, "video": 1})
PROMPT_FORMS = MixtureSpec({"short": 1, "long": 1, "long_dense": 1})


def mixture_sample(spec: MixtureSpec, n: int, seed: int) -> list[str]:
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(spec.weights), size=n, p=spec.probabilities())
    names = spec.names
    return [names[i] for i in idx]
