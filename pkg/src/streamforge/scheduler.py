"""Chunkwise diffusion-forcing tick loop with memory refinement."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from .buffer import MemoryBank
from .conditioning import ConditionSlice, ConditionTimeline, TraceEvent
from .core import (
    Chunk, Latent, SessionConfig, chunk_duration_exact, descent_path, level_for, make_chunk,
    pure_noise, validate_config,
)
from .denoise import DenoiseStep, denoise_to_clean, inject_noise
from .masks import build_group_mask

log = logging.getLogger(__name__)


class Phase(enum.IntEnum):
    WARMUP = 0
    STEADY = 1
    DRAIN = 2
    DONE = 3


class SchedulerError(RuntimeError):
    pass


class TickError(SchedulerError):
    def __init__(self, tick_index: int, cause: BaseException):
        self.tick_index = tick_index
        super().__init__(f"engine failed at tick {tick_index}: {cause!r}")


class ConditionSource(Protocol):
    def condition_for(self, chunk_id: int) -> Optional[ConditionSlice]: ...


@dataclass
class EmissionRecord:
    chunk_id: int
    tick_index: int
    video_pts_range: tuple[float, float]
    wall_time_emitted: float
    noise_history: tuple[float, ...]
    refined_memory_flag: bool = False
    chunk: Optional[Chunk] = field(default=None, repr=False, compare=False)
    prompt: str = ""
    action_tag: str = ""
    transition: Optional[str] = None

    @property
    def latent_sha256(self) -> str:
        if self.chunk is None:
            return ""
        return hashlib.sha256(np.ascontiguousarray(self.chunk.data, dtype="<f8").tobytes()).hexdigest()

    def to_json(self) -> str:
        return json.dumps({
            "chunk_id": self.chunk_id,
            "tick": self.tick_index,
            "video_pts": list(self.video_pts_range),
            "wall_time": self.wall_time_emitted,
            "noise_history": list(self.noise_history),
            "refined_memory": self.refined_memory_flag,
            "prompt": self.prompt,
            "action": self.action_tag,
            "transition": self.transition,
            "latent_sha256": self.latent_sha256,
        }, sort_keys=True, ensure_ascii=False)


@dataclass(frozen=True)
class TickTrace:
    tick_index: int
    phase: Phase
    levels_at_start: tuple[float, ...]
    emitted: Optional[int]
    refined: bool


class SimClock:
    """Deterministic clock: tick i ends at ``(i + 1) * tick_s``."""

    def __init__(self, tick_s: Union[float, Fraction]):
        self.tick_s = Fraction(tick_s)

    def start(self) -> None:
        pass

    def tick_done(self, tick_index: int) -> float:
        return float((tick_index + 1) * self.tick_s)


class RealtimeClock:
    """Paces ticks against a monotonic clock; late ticks are counted as overruns."""

    def __init__(self, tick_s: float):
        self.tick_s = float(tick_s)
        self.overruns = 0
        self._t0: Optional[float] = None

    def start(self) -> None:
        self._t0 = time.monotonic()

    def tick_done(self, tick_index: int) -> float:
        if self._t0 is None:
            self.start()
        target = self._t0 + (tick_index + 1) * self.tick_s
        now = time.monotonic()
        if now < target:
            time.sleep(target - now)
        else:
            self.overruns += 1
            log.warning("tick %d overran its budget by %.1f ms", tick_index, (now - target) * 1e3)
        return time.monotonic() - self._t0


class WallClock:
    """Unpaced monotonic clock; the caller decides when to tick."""

    def __init__(self):
        self._t0: Optional[float] = None

    def start(self) -> None:
        self._t0 = time.monotonic()

    def tick_done(self, tick_index: int) -> float:
        if self._t0 is None:
            self.start()
        return time.monotonic() - self._t0


@dataclass
class SchedulerState:
    bank: Optional[MemoryBank]
    ladder: tuple[float, ...]
    next_refine_at: int
    tick_index: int = 0
    chunks_emitted: int = 0
    phase: Phase = Phase.WARMUP
    stream_calls: int = 0
    stream_nfes: int = 0
    refine_calls: int = 0
    refinements: list[int] = field(default_factory=list)


class ChunkScheduler:
    """Owns the memory bank and advances it one tick (one chunk duration) at a time.

    Each tick admits at most one pure-noise chunk, runs ``micro_steps`` stream
    evaluations, promotes the head once it is clean, and refines the
    short-term memory every ``refine_interval_chunks`` emissions.
    """

    def __init__(self, config: SessionConfig, engine: DenoiseStep, *,
                 repair_engine: Optional[DenoiseStep] = None, clock=None,
                 rng: Optional[np.random.Generator] = None, refine: bool = True):
        self.config = validate_config(config)
        self.engine = engine
        self.repair_engine = repair_engine if repair_engine is not None else engine
        self.clock = clock if clock is not None else SimClock(chunk_duration_exact(config))
        self.rng = rng if rng is not None else config.rng()
        self.refine_enabled = refine
        self.state: Optional[SchedulerState] = None
        self.trace: list[TickTrace] = []
        self._conds: dict[int, ConditionSlice] = {}
        self._duration = chunk_duration_exact(config)

    @property
    def bank(self) -> MemoryBank:
        return self.state.bank

    def warmup(self, reference: Latent) -> None:
        if self.state is not None:
            raise SchedulerError("scheduler already warmed up")
        self.state = SchedulerState(
            bank=MemoryBank(reference, self.config),
            ladder=tuple(self.config.ladder),
            next_refine_at=self.config.refine_interval_chunks,
        )
        self.clock.start()

    def _admit(self, cond: ConditionSlice) -> None:
        st = self.state
        cid = st.bank.last_admitted + 1
        eps = self.rng.standard_normal((self.config.latents_per_chunk, self.config.latent_dim))
        chunk = make_chunk(cid, eps, pure_noise(st.ladder), self.config, cond.digest)
        st.bank.admit_noise_chunk(chunk)
        self._conds[cid] = cond

    def _stream_step(self) -> None:
        st = self.state
        bank = st.bank
        view = bank.snapshot_context()
        mask = build_group_mask(view.layout)
        levels_next = [level_for(st.ladder, c.noise_level.ladder_index - 1) for c in bank.stream]
        conds = [self._conds[c.chunk_id] for c in bank.stream]
        try:
            out = self.engine.step(list(bank.stream), levels_next, view, mask, conds)
        except Exception as exc:
            raise TickError(st.tick_index, exc) from exc
        if len(out) != len(bank.stream):
            raise TickError(st.tick_index, SchedulerError("engine changed the stream length"))
        bank.advance_stream(out)
        st.stream_calls += 1
        st.stream_nfes += len(out)

    def tick(self, cond_source: ConditionSource) -> Optional[EmissionRecord]:
        st = self.state
        if st is None:
            raise SchedulerError("tick before warmup")
        if st.phase == Phase.DONE:
            raise SchedulerError("session is done")
        bank = st.bank

        if st.phase != Phase.DRAIN and len(bank.stream) < self.config.stream_chunks:
            cond = cond_source.condition_for(bank.last_admitted + 1)
            if cond is None:
                st.phase = Phase.DRAIN
            else:
                self._admit(cond)
        if st.phase == Phase.DRAIN and not bank.stream:
            st.phase = Phase.DONE
            return None

        levels = tuple(c.t for c in bank.stream)
        phase_at_start = st.phase
        for _ in range(self.config.micro_steps):
            self._stream_step()

        record = None
        refined = False
        if bank.stream and bank.stream[0].noise_level.is_clean:
            chunk = bank.promote_clean_chunk()
            cond = self._conds.pop(chunk.chunk_id)
            st.chunks_emitted += 1
            if self.refine_enabled and st.chunks_emitted >= st.next_refine_at:
                refined = self.refine()
            start = chunk.chunk_id * self._duration
            record = EmissionRecord(
                chunk_id=chunk.chunk_id,
                tick_index=st.tick_index,
                video_pts_range=(float(start), float(start + self._duration)),
                wall_time_emitted=self.clock.tick_done(st.tick_index),
                noise_history=chunk.history,
                refined_memory_flag=refined,
                chunk=chunk,
                prompt=cond.prompt,
                action_tag=cond.action_tag,
                transition=cond.transition,
            )
            if st.phase == Phase.WARMUP:
                st.phase = Phase.STEADY
        else:
            self.clock.tick_done(st.tick_index)

        self.trace.append(TickTrace(st.tick_index, phase_at_start, levels,
                                    record.chunk_id if record else None, refined))
        st.tick_index += 1
        if st.phase == Phase.DRAIN and not bank.stream:
            st.phase = Phase.DONE
        return record

    def refine(self) -> bool:
        """Re-noise the short-term memory and repair it against reference + long-term only."""
        st = self.state
        st.next_refine_at += self.config.refine_interval_chunks
        bank = st.bank
        if bank.short_term is None:
            log.warning("refinement skipped at tick %d: no short-term memory", st.tick_index)
            return False
        t = self.config.refine_t
        noised = inject_noise(bank.short_term, t, st.ladder, self.rng)
        steps = len(descent_path(st.ladder, t)) - 1
        repaired = denoise_to_clean(noised, self.repair_engine, st.ladder,
                                    bank.reference, tuple(bank.long_term))
        bank.replace_short_term(repaired)
        st.refine_calls += steps
        st.refinements.append(st.chunks_emitted)
        return True

    def run(self, cond_source: ConditionSource, max_ticks: Optional[int] = None) -> list[EmissionRecord]:
        records = []
        while self.state.phase != Phase.DONE:
            if max_ticks is not None and self.state.tick_index >= max_ticks:
                break
            rec = self.tick(cond_source)
            if rec is not None:
                records.append(rec)
        return records


def run_session(config: SessionConfig, reference: Latent,
                trace: Union[Sequence[TraceEvent], ConditionTimeline], engine: DenoiseStep,
                clock=None, **kwargs) -> list[EmissionRecord]:
    """Warm up, tick until the conditioning is exhausted, and drain in-flight chunks."""
    if isinstance(trace, ConditionTimeline):
        timeline = trace
    else:
        timeline = ConditionTimeline.from_trace(trace, config, reference_digest=_digest(reference))
    scheduler = ChunkScheduler(config, engine, clock=clock, **kwargs)
    scheduler.warmup(reference)
    return scheduler.run(timeline)


def _digest(latent: Latent) -> str:
    return hashlib.sha256(np.ascontiguousarray(latent.data, dtype="<f8").tobytes()).hexdigest()[:16]


def write_emission_log(records: Sequence[EmissionRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


class SyntheticConditions:
    """Condition source with ``num_chunks`` silent, fixed-prompt slices."""

    def __init__(self, num_chunks: int, prompt: str = "idle"):
        self.num_chunks = num_chunks
        self.prompt = prompt

    def condition_for(self, chunk_id: int) -> Optional[ConditionSlice]:
        if chunk_id >= self.num_chunks:
            return None
        return ConditionSlice(chunk_id, (), f"{self.prompt}#{chunk_id}", "idle")


@dataclass(frozen=True)
class RolloutStep:
    chunk_id: int
    nfe_index: int
    t_before: float
    t_after: float
    tick_index: int

    def to_line(self) -> str:
        return f"{self.chunk_id},{self.nfe_index},{self.t_before!r},{self.t_after!r}"


class _RolloutRecorder:
    def __init__(self, engine: DenoiseStep, scheduler_ref: list):
        self.engine = engine
        self.scheduler_ref = scheduler_ref
        self.steps: list[RolloutStep] = []
        self._count: dict[int, int] = {}

    def step(self, stream, levels_next, context, mask, conds=()):
        tick = self.scheduler_ref[0].state.tick_index
        for chunk, level in zip(stream, levels_next):
            n = self._count.get(chunk.chunk_id, 0)
            self._count[chunk.chunk_id] = n + 1
            self.steps.append(RolloutStep(chunk.chunk_id, n, chunk.t, level.t, tick))
        return self.engine.step(stream, levels_next, context, mask, conds)


def simulate_rollout(num_chunks: int, model: DenoiseStep, config: SessionConfig,
                     reference: Optional[Latent] = None) -> list[RolloutStep]:
    """Trajectory a chunked distillation trainer would consume: every (chunk, NFE) transition."""
    from .core import reference_latent

    holder: list = []
    recorder = _RolloutRecorder(model, holder)
    scheduler = ChunkScheduler(config, recorder, refine=False)
    holder.append(scheduler)
    scheduler.warmup(reference if reference is not None else reference_latent(config))
    scheduler.run(SyntheticConditions(num_chunks))
    return recorder.steps


def format_rollout(steps: Sequence[RolloutStep]) -> str:
    return "".join(s.to_line() + "\n" for s in steps)
