"""Streaming chunkwise diffusion-forcing runtime with analytic toy denoisers."""

from .buffer import ContextView, Group, MemoryBank, parse_layout, render_context
from .conditioning import (
    AudioFeatureFrame, ConditionSlice, ConditionTimeline, TraceEvent, aggregate_audio,
    parse_trace, plan_action, segment_prompts, window_for_chunk,
)
from .core import (
    Chunk, ConfigError, Latent, NoiseLevel, SessionConfig, build_noise_ladder, chunk_duration,
    load_config, reference_latent, validate_config,
)
from .denoise import (
    DriftModel, ToyFlowModel, cfg_fold, full_sequence_oracle, make_generated_gt,
    mix_memory_source, partition_steps, toy_flow_step,
)
from .masks import GroupMask, build_group_mask, expand_to_token_mask, render_mask
from .pipeline import (
    CommConfig, StageCost, Strategy, comm_cost, compute_metrics, run_pipelined,
    sequential_baseline,
)
from .scheduler import ChunkScheduler, EmissionRecord, Phase, run_session, simulate_rollout

__version__ = "0.1.0"

__all__ = [
    "ContextView",
    "Group",
    "MemoryBank",
    "parse_layout",
    "render_context",
    "AudioFeatureFrame",
    "ConditionSlice",
    "ConditionTimeline",
    "TraceEvent",
    "aggregate_audio",
    "parse_trace",
    "plan_action",
    "segment_prompts",
    "window_for_chunk",
    "Chunk",
    "ConfigError",
    "Latent",
    "NoiseLevel",
    "SessionConfig",
    "build_noise_ladder",
    "chunk_duration",
    "load_config",
    "reference_latent",
    "validate_config",
    "DriftModel",
    "ToyFlowModel",
    "cfg_fold",
    "full_sequence_oracle",
    "make_generated_gt",
    "mix_memory_source",
    "partition_steps",
    "toy_flow_step",
    "GroupMask",
    "build_group_mask",
    "expand_to_token_mask",
    "render_mask",
    "CommConfig",
    "StageCost",
    "Strategy",
    "comm_cost",
    "compute_metrics",
    "run_pipelined",
    "sequential_baseline",
    "ChunkScheduler",
    "EmissionRecord",
    "Phase",
    "run_session",
    "simulate_rollout",
]
