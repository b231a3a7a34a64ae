"""Denoiser contract, analytic toy denoisers, and distillation-side utilities.

The toy models follow the linear flow ``x_t = (1 - t) * x0 + t * eps``: a model
predicts a clean target and the sampler takes an Euler step toward it. A step
that lands on t = 0 reproduces the predicted target exactly, which is what
gives every end-to-end test a closed-form expectation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .buffer import ContextView, Group
from .core import Chunk, Latent, NoiseLevel, SessionConfig, descent_path, pure_noise, make_chunk
from .masks import GroupMask, build_group_mask, full_mask


class SingularTimeError(ValueError):
    pass


def toy_flow_step(x: np.ndarray, t: float, t_next: float, target: np.ndarray) -> np.ndarray:
    """Euler step of the linear flow from ``t`` to ``t_next`` toward ``target``."""
    if t == 0:
        raise SingularTimeError("cannot step from t = 0")
    if not 0 <= t_next < t <= 1:
        raise ValueError(f"need 0 <= t_next < t <= 1, got t={t}, t_next={t_next}")
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if t_next == 0:
        return np.broadcast_to(target, x.shape).copy()
    return x + (t_next - t) * (x - target) / t


def cfg_fold(uncond: np.ndarray, cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance blend ``uncond + scale * (cond - uncond)``.

    This is the teacher output a guidance-embedding student is distilled to
    reproduce in a single pass.
    """
    uncond = np.asarray(uncond, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if uncond.shape != cond.shape:
        raise ValueError(f"shape mismatch {uncond.shape} vs {cond.shape}")
    return uncond + scale * (cond - uncond)


def partition_steps(total_nfe: int, segments: int) -> list[range]:
    """Split ``range(total_nfe)`` into contiguous segments, larger ones first."""
    if not 1 <= segments <= total_nfe:
        raise ValueError(f"need 1 <= segments <= total_nfe, got {segments}, {total_nfe}")
    base, extra = divmod(total_nfe, segments)
    ranges, start = [], 0
    for i in range(segments):
        size = base + (1 if i < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    return ranges


class DenoiseStep(Protocol):
    """One function evaluation over the whole denoising stream.

    Returns the same chunks in the same order, each moved to the matching
    entry of ``levels_next``.
    """

    def step(
        self,
        stream: Sequence[Chunk],
        levels_next: Sequence[NoiseLevel],
        context: ContextView,
        mask: GroupMask,
        conds: Sequence[object] = (),
    ) -> list[Chunk]: ...


@lru_cache(maxsize=4096)
def _embedding(digest: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(digest.encode()).digest()[:8], "little")
    vec = np.random.default_rng(seed).standard_normal(dim)
    vec.flags.writeable = False
    return vec


def cond_embedding(digest: str, dim: int) -> np.ndarray:
    """Fixed pseudo-random projection of a conditioning digest."""
    return _embedding(digest, dim)


TargetFn = Callable[[int, str, Latent], np.ndarray]


@dataclass(frozen=True)
class ToyFlowModel:
    """Exact linear-flow denoiser.

    Default target is ``alpha * reference + beta * embed(cond_digest)``; with
    ``memory_weight > 0`` the mean of the visible memory latents is mixed in,
    which makes outputs depend on the buffer contents.
    """

    alpha: float = 0.5
    beta: float = 0.5
    memory_weight: float = 0.0
    target_fn: Optional[TargetFn] = None

    def target(self, chunk_id: int, cond_digest: str, reference: Latent) -> np.ndarray:
        if self.target_fn is not None:
            return np.asarray(self.target_fn(chunk_id, cond_digest, reference), dtype=np.float64)
        dim = reference.data.shape[0]
        return self.alpha * reference.data + self.beta * cond_embedding(cond_digest, dim)

    def predict(self, chunk: Chunk, group: Group, context: ContextView, mask: GroupMask) -> np.ndarray:
        target = self.target(chunk.chunk_id, chunk.cond_digest, context.reference)
        if self.memory_weight:
            visible = [
                context.group(g).data
                for g, ok in zip(mask.layout, mask.row(group))
                if ok and g.kind in ("LT", "ST")
            ]
            if visible:
                target = target + self.memory_weight * np.concatenate(visible).mean(axis=0)
        return target

    def step(self, stream, levels_next, context, mask, conds=()):
        out = []
        for j, (chunk, level) in enumerate(zip(stream, levels_next)):
            target = self.predict(chunk, Group("S", j), context, mask)
            x = toy_flow_step(chunk.data, chunk.t, level.t, target)
            out.append(chunk.with_data(x, level))
        return out

    def error(self, chunk: Chunk, reference: Latent) -> float:
        """RMS over latents of the distance to this model's memory-free target."""
        target = self.target(chunk.chunk_id, chunk.cond_digest, reference)
        diff = chunk.data - target
        return float(np.sqrt(np.mean(np.sum(diff * diff, axis=-1))))


@dataclass(frozen=True)
class DriftModel:
    """Toy denoiser with a systematic per-evaluation bias.

    Each evaluation in a chunk's current pass shifts the predicted target by
    ``bias``, so a k-step descent ends ``k * bias`` away from the exact target.
    With ``inherit_memory`` the residual error of the visible short-term
    memory is carried into the prediction as well, which is how errors
    compound across chunks during streaming.
    """

    inner: ToyFlowModel
    bias: np.ndarray
    inherit_memory: bool = True

    def __post_init__(self):
        bias = np.array(self.bias, dtype=np.float64, copy=True)
        bias.flags.writeable = False
        object.__setattr__(self, "bias", bias)

    def predict(self, chunk, group, context, mask):
        target = self.inner.predict(chunk, group, context, mask)
        target = target + len(chunk.history) * self.bias
        st = context.short_term
        if self.inherit_memory and st is not None and mask.row(group)[mask.layout.index(Group("ST"))]:
            exact = self.inner.target(st.chunk_id, st.cond_digest, context.reference)
            target = target + (st.data - exact).mean(axis=0)
        return target

    def step(self, stream, levels_next, context, mask, conds=()):
        out = []
        for j, (chunk, level) in enumerate(zip(stream, levels_next)):
            target = self.predict(chunk, Group("S", j), context, mask)
            x = toy_flow_step(chunk.data, chunk.t, level.t, target)
            out.append(chunk.with_data(x, level))
        return out

    def error(self, chunk: Chunk, reference: Latent) -> float:
        return self.inner.error(chunk, reference)


@dataclass
class CountingEngine:
    """Wraps an engine and counts stream calls and per-chunk evaluations."""

    engine: DenoiseStep
    calls: int = 0
    chunk_nfes: int = 0
    log: list = field(default_factory=list)

    def step(self, stream, levels_next, context, mask, conds=()):
        self.calls += 1
        self.chunk_nfes += len(stream)
        for chunk, level in zip(stream, levels_next):
            self.log.append((chunk.chunk_id, chunk.t, level.t))
        return self.engine.step(stream, levels_next, context, mask, conds)


def _isolated_context(reference: Latent, chunk: Chunk, long_term=()) -> tuple[ContextView, GroupMask]:
    view = ContextView(reference, tuple(long_term), None, (chunk,))
    return view, build_group_mask(view.layout)


def denoise_to_clean(chunk: Chunk, model: DenoiseStep, ladder: Sequence[float],
                     reference: Latent, long_term: Sequence[Chunk] = ()) -> Chunk:
    """Run ``chunk`` from its current level down to t = 0 with a memory-only context."""
    path = descent_path(ladder, chunk.t)
    for level in path[1:]:
        view, mask = _isolated_context(reference, chunk, long_term)
        (chunk,) = model.step([chunk], [level], view, mask, ())
    return chunk


def inject_noise(chunk: Chunk, t: float, ladder: Sequence[float], rng: np.random.Generator) -> Chunk:
    """Corrupt a clean chunk to flow time ``t`` with ``(1 - t) * x + t * eps``."""
    eps = rng.standard_normal(chunk.data.shape)
    level = descent_path(ladder, t)[0]
    return chunk.with_data((1 - t) * chunk.data + t * eps, level, reset_history=True)


def make_generated_gt(gt: Chunk, t_inject: float, model: DenoiseStep, ladder: Sequence[float],
                      rng: np.random.Generator, reference: Latent) -> Chunk:
    """Noise a ground-truth chunk to ``t_inject`` and denoise it back with ``model``."""
    if not gt.noise_level.is_clean:
        raise ValueError("ground-truth chunk must be clean")
    if not any(abs(t_inject - t) < 1e-12 for t in ladder):
        raise ValueError(f"t_inject={t_inject} is not a ladder level")
    noised = inject_noise(gt, t_inject, ladder, rng)
    return denoise_to_clean(noised, model, ladder, reference)


def mix_memory_source(gt: Chunk, generated: Chunk, p: float,
                      rng: np.random.Generator) -> tuple[Chunk, str]:
    """Pick the generated chunk with probability ``p``; the tag names the choice."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    if rng.random() < p:
        return generated, "generated"
    return gt, "gt"


def full_sequence_oracle(conditions: Sequence, model: DenoiseStep, config: SessionConfig,
                         reference: Latent, rng: Optional[np.random.Generator] = None) -> list[Chunk]:
    """Denoise every chunk jointly under full attention; the non-streaming baseline.

    ``conditions`` holds one ConditionSlice (or bare digest string) per chunk.
    """
    if not conditions:
        return []
    rng = rng if rng is not None else config.rng()
    ladder = config.ladder
    start = pure_noise(ladder)
    chunks = []
    for i, cond in enumerate(conditions):
        digest = cond if isinstance(cond, str) else cond.digest
        eps = rng.standard_normal((config.latents_per_chunk, config.latent_dim))
        chunks.append(make_chunk(i, eps, start, config, digest))
    for level in descent_path(ladder, start.t)[1:]:
        view = ContextView(reference, (), None, tuple(chunks))
        chunks = model.step(chunks, [level] * len(chunks), view, full_mask(view.layout), conditions)
    return chunks


__all__ = [
    "CountingEngine", "DenoiseStep", "DriftModel", "SingularTimeError", "ToyFlowModel",
    "cfg_fold", "cond_embedding", "denoise_to_clean", "full_sequence_oracle", "inject_noise",
    "make_generated_gt", "mix_memory_source", "partition_steps", "toy_flow_step",
]
