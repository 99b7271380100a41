import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mca_forge.errors import ConfigError
from mca_forge.pipeline.mixture import (
    DATASET_FPS,
    DATASET_RESOLUTION,
    DATASET_SECONDS,
    DATASET_TARGET_PAIRS,
    IMAGE_TO_VIDEO,
    PROMPT_FORMS,
    STAGE1_OBJECTIVES,
    MixtureSpec,
    mixture_sample,
)


def freqs(spec, n, seed):
    draws = mixture_sample(spec, n, seed)
    return np.array([draws.count(name) for name in spec.names]) / n


def test_single_category():
    assert set(mixture_sample(MixtureSpec({"a": 1}), 50, 3)) == {"a"}


def test_recipes():
    assert np.allclose(STAGE1_OBJECTIVES.probabilities(), [0.7, 0.2, 0.1])
    assert np.allclose(IMAGE_TO_VIDEO.probabilities(), [0.8, 0.2])
    assert np.allclose(PROMPT_FORMS.probabilities(), [1 / 3] * 3)
    assert (DATASET_RESOLUTION, DATASET_FPS, DATASET_SECONDS, DATASET_TARGET_PAIRS) == ("480p", 16, 3, 300_000)


@pytest.mark.parametrize("spec,target", [(STAGE1_OBJECTIVES, [0.7, 0.2, 0.1]), (IMAGE_TO_VIDEO, [0.8, 0.2])])
def test_frequencies(spec, target):
    assert np.max(np.abs(freqs(spec, 100_000, 0) - target)) <= 0.015


def test_deterministic_per_seed():
    assert mixture_sample(STAGE1_OBJECTIVES, 500, 9) == mixture_sample(STAGE1_OBJECTIVES, 500, 9)
    assert mixture_sample(STAGE1_OBJECTIVES, 500, 9) != mixture_sample(STAGE1_OBJECTIVES, 500, 10)


def test_zero_weight_never_drawn():
    assert "b" not in mixture_sample(MixtureSpec({"a": 2, "b": 0}), 1000, 1)


@pytest.mark.parametrize("weights", [{}, {"a": 0}, {"a": -1}, {"a": 1.5}])
def test_invalid_specs(weights):
    with pytest.raises(ConfigError):
        MixtureSpec(weights)


def test_n_must_be_positive():
    with pytest.raises(ConfigError):
        mixture_sample(IMAGE_TO_VIDEO, 0, 0)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=5).filter(any), st.integers(0, 2**31))
def test_probabilities_are_normalized(ws, seed):
    spec = MixtureSpec({f"c{i}": w for i, w in enumerate(ws)})
    p = spec.probabilities()
    assert abs(p.sum() - 1) < 1e-12
    assert all(w == 0 or p[i] > 0 for i, w in enumerate(ws))
