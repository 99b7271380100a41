"""Paired source/target data construction in five stages."""

from .backends import Backends, MockGenerator, MockJudge, MockText, MockVlm, ToyGenerator
from .mixture import IMAGE_TO_VIDEO, PROMPT_FORMS, STAGE1_OBJECTIVES, MixtureSpec, mixture_sample
from .records import STAGES, PipelineRecord, read_manifest
from .runner import PipelineConfig, run_pipeline
from .stages import FilterThresholds, expand_prompts, filter_responses, generate_instructions, verify_vqa

__all__ = [
    "Backends",
    "MockGenerator",
    "MockJudge",
    "MockText",
    "MockVlm",
    "ToyGenerator",
    "IMAGE_TO_VIDEO",
    "PROMPT_FORMS",
    "STAGE1_OBJECTIVES",
    "MixtureSpec",
    "mixture_sample",
    "STAGES",
    "PipelineRecord",
    "read_manifest",
    "PipelineConfig",
    "run_pipeline",
    "FilterThresholds",
    "expand_prompts",
    "filter_responses",
    "generate_instructions",
    "verify_vqa",
]
