"""Two-stage denoise -> decode pipeline: discrete-event simulation, real threads, metrics,
and the sequence-parallel communication cost model."""

from __future__ import annotations

import enum
import heapq
import math
import queue
import statistics
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

US_PER_MS = 1000  # the simulation quantum is one microsecond


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class StageCost:
    denoise_ms_per_tick: float
    decode_ms_per_chunk: float
    speedup_factors: Mapping[str, float] = field(default_factory=dict)
    refine_ms: float = 0.0

    def __post_init__(self):
        if self.denoise_ms_per_tick <= 0 or self.decode_ms_per_chunk <= 0:
            raise ValueError("stage costs must be > 0")
        if self.refine_ms < 0:
            raise ValueError("refine_ms must be >= 0")
        for name, mult in self.speedup_factors.items():
            if not 0 < mult <= 1:
                raise ValueError(f"speedup factor {name}={mult} outside (0, 1]")

    @property
    def denoise_ms(self) -> float:
        return self.denoise_ms_per_tick * math.prod(self.speedup_factors.values())

    def tick_us(self, refined: bool = False) -> int:
        return round((self.denoise_ms + (self.refine_ms if refined else 0.0)) * US_PER_MS)

    @property
    def decode_us(self) -> int:
        return round(self.decode_ms_per_chunk * US_PER_MS)


@dataclass(frozen=True)
class PipelineEvent:
    event_type: str  # denoise_start | denoise_end | decode_start | decode_end | stall
    chunk_id: int  # -1 for ticks that emit nothing
    timestamp_us: int

    @property
    def timestamp_ms(self) -> float:
        return self.timestamp_us / US_PER_MS

    def to_line(self) -> str:
        return f"{self.event_type},{self.chunk_id},{self.timestamp_us / US_PER_MS:.3f}"


@dataclass(frozen=True)
class PipelineMetrics:
    ttff_s: Optional[float]
    rtf: Optional[float]
    mean_period_ms: Optional[float]
    steady_period_ms: Optional[float]
    jitter_ms: float
    max_queue_depth: int
    chunks: int
    elapsed_s: float

    @classmethod
    def empty(cls) -> "PipelineMetrics":
        return cls(None, None, None, None, 0.0, 0, 0, 0.0)

    def as_dict(self) -> dict:
        return {
            "ttff_s": self.ttff_s, "rtf": self.rtf, "mean_period_ms": self.mean_period_ms,
            "steady_period_ms": self.steady_period_ms, "jitter_ms": self.jitter_ms,
            "max_queue_depth": self.max_queue_depth, "chunks": self.chunks,
            "elapsed_s": self.elapsed_s,
        }


@dataclass
class PipelineRun:
    metrics: PipelineMetrics
    events: list[PipelineEvent]

    def event_log(self) -> str:
        return "".join(e.to_line() + "\n" for e in self.events)


@dataclass(frozen=True)
class ChunkTick:
    """Minimal emission descriptor: which denoise tick produced which chunk."""

    chunk_id: int
    tick_index: int
    refined_memory_flag: bool = False


def uniform_records(n_chunks: int, warmup_ticks: int = 0) -> list[ChunkTick]:
    return [ChunkTick(i, warmup_ticks + i) for i in range(n_chunks)]


def _tick_plan(records: Iterable) -> tuple[int, dict[int, tuple[int, bool]]]:
    emits = {}
    last_chunk = -1
    for r in records:
        if r.chunk_id <= last_chunk:
            raise ValueError("records must be ordered by chunk_id")
        last_chunk = r.chunk_id
        emits[r.tick_index] = (r.chunk_id, bool(getattr(r, "refined_memory_flag", False)))
    n_ticks = max(emits) + 1 if emits else 0
    return n_ticks, emits


def compute_metrics(events: Sequence[PipelineEvent], chunk_duration_s: float,
                    max_queue_depth: int = 0) -> PipelineMetrics:
    """Delivery metrics from an event log.

    TTFF is the first decode completion. RTF is steady-state video seconds per
    wall second between the first and last delivered chunk (TTFF accounts for
    the start-up latency separately); with a single chunk it falls back to
    ``chunk_duration / ttff``.
    """
    ends = [e.timestamp_us for e in events if e.event_type == "decode_end"]
    if not ends:
        raise MetricsError("event log contains no decoded chunks")
    ttff = ends[0] / 1e6
    periods = [(b - a) / US_PER_MS for a, b in zip(ends, ends[1:])]
    if periods:
        span = (ends[-1] - ends[0]) / 1e6
        rtf = chunk_duration_s * len(periods) / span if span > 0 else math.inf
        mean_period = statistics.fmean(periods)
        steady = statistics.median(periods[len(periods) // 2:])
        jitter = statistics.pstdev(periods)
    else:
        rtf = chunk_duration_s / ttff if ttff > 0 else math.inf
        mean_period = steady = None
        jitter = 0.0
    elapsed = max(e.timestamp_us for e in events) / 1e6
    return PipelineMetrics(ttff, rtf, mean_period, steady, jitter, max_queue_depth, len(ends), elapsed)


def run_pipelined(records: Iterable, costs: StageCost, *, clock: str = "sim",
                  queue_capacity: int = 2, chunk_duration_s: float = 0.48,
                  pace_ms: Optional[float] = None) -> PipelineRun:
    """Denoise ticks and chunk decodes run as two stages joined by a bounded queue.

    ``records`` supply ``chunk_id`` / ``tick_index`` pairs (EmissionRecords or
    ChunkTicks). With ``pace_ms`` set, tick j may not start before ``j * pace_ms``.
    A denoise stage that finishes a chunk while the queue is full stalls until
    the decoder frees a slot.
    """
    if queue_capacity < 1:
        raise ValueError("queue capacity must be >= 1")
    n_ticks, emits = _tick_plan(records)
    if clock == "sim":
        events, depth = _simulate(n_ticks, emits, costs, queue_capacity, pace_ms)
    elif clock == "realtime":
        events, depth = _run_threads(n_ticks, emits, costs, queue_capacity, pace_ms)
    else:
        raise ValueError(f"unknown clock {clock!r}")
    if not emits:
        return PipelineRun(PipelineMetrics.empty(), events)
    return PipelineRun(compute_metrics(events, chunk_duration_s, depth), events)


_DECODE_END, _DENOISE_END = 0, 1


def _simulate(n_ticks, emits, costs, capacity, pace_ms):
    events: list[PipelineEvent] = []
    heap: list = []
    seq = 0
    pending: deque[int] = deque()
    blocked: Optional[int] = None
    decoder_busy = False
    next_tick = 0
    max_depth = 0
    pace_us = round(pace_ms * US_PER_MS) if pace_ms else 0

    def push(at, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (at, kind, seq, payload))
        seq += 1

    def start_tick(now):
        nonlocal next_tick
        if next_tick >= n_ticks:
            return
        j = next_tick
        next_tick += 1
        start = max(now, pace_us * j)
        cid, refined = emits.get(j, (-1, False))
        events.append(PipelineEvent("denoise_start", cid, start))
        push(start + costs.tick_us(refined), _DENOISE_END, j)

    def try_decode(now):
        nonlocal decoder_busy, blocked, max_depth
        if decoder_busy or not pending:
            return
        cid = pending.popleft()
        decoder_busy = True
        events.append(PipelineEvent("decode_start", cid, now))
        push(now + costs.decode_us, _DECODE_END, cid)
        if blocked is not None:
            pending.append(blocked)
            max_depth = max(max_depth, len(pending))
            blocked = None
            start_tick(now)

    start_tick(0)
    while heap:
        now, kind, _, payload = heapq.heappop(heap)
        if kind == _DECODE_END:
            decoder_busy = False
            events.append(PipelineEvent("decode_end", payload, now))
            try_decode(now)
            continue
        j = payload
        cid = emits.get(j, (-1, False))[0]
        events.append(PipelineEvent("denoise_end", cid, now))
        if cid < 0:
            start_tick(now)
        elif len(pending) < capacity:
            pending.append(cid)
            max_depth = max(max_depth, len(pending))
            try_decode(now)
            start_tick(now)
        else:
            blocked = cid
            events.append(PipelineEvent("stall", cid, now))
    return events, max_depth


def _run_threads(n_ticks, emits, costs, capacity, pace_ms):
    events: list[PipelineEvent] = []
    lock = threading.Lock()
    chan: queue.Queue = queue.Queue(maxsize=capacity)
    t0 = time.monotonic()
    max_depth = 0

    def now_us():
        return round((time.monotonic() - t0) * 1e6)

    def record(kind, cid):
        with lock:
            events.append(PipelineEvent(kind, cid, now_us()))

    def denoiser():
        nonlocal max_depth
        for j in range(n_ticks):
            if pace_ms:
                delay = t0 + j * pace_ms / 1e3 - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            cid, refined = emits.get(j, (-1, False))
            record("denoise_start", cid)
            time.sleep(costs.tick_us(refined) / 1e6)
            record("denoise_end", cid)
            if cid >= 0:
                try:
                    chan.put_nowait(cid)
                except queue.Full:
                    record("stall", cid)
                    chan.put(cid)
                with lock:
                    max_depth = max(max_depth, chan.qsize())
        chan.put(None)

    def decoder():
        while True:
            cid = chan.get()
            if cid is None:
                return
            record("decode_start", cid)
            time.sleep(costs.decode_us / 1e6)
            record("decode_end", cid)

    workers = [threading.Thread(target=denoiser), threading.Thread(target=decoder)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    events.sort(key=lambda e: e.timestamp_us)
    return events, max_depth


def sequential_baseline(records: Iterable, costs: StageCost,
                        chunk_duration_s: float = 0.48) -> PipelineRun:
    """Same workload with the decode of every chunk serialized behind its denoise tick."""
    n_ticks, emits = _tick_plan(records)
    events = []
    now = 0
    for j in range(n_ticks):
        cid, refined = emits.get(j, (-1, False))
        events.append(PipelineEvent("denoise_start", cid, now))
        now += costs.tick_us(refined)
        events.append(PipelineEvent("denoise_end", cid, now))
        if cid >= 0:
            events.append(PipelineEvent("decode_start", cid, now))
            now += costs.decode_us
            events.append(PipelineEvent("decode_end", cid, now))
    if not emits:
        return PipelineRun(PipelineMetrics.empty(), events)
    return PipelineRun(compute_metrics(events, chunk_duration_s, 1), events)


class Strategy(enum.Enum):
    TOKEN_LEVEL = "token"
    FRAME_LEVEL = "frame"


@dataclass(frozen=True)
class CommConfig:
    workers: int
    layers: int
    frames: int
    tokens_per_frame: int
    context_frames: int
    bytes_per_token: int = 2 * 1536  # bf16 activations, hidden size 1536

    def __post_init__(self):
        for name in ("workers", "layers", "frames", "tokens_per_frame", "context_frames",
                     "bytes_per_token"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class CommCost:
    messages: int
    bytes: int


def comm_cost(strategy: Strategy, cfg: CommConfig) -> CommCost:
    """Declared all-to-all cost model for one forward pass.

    Token-level: two all-to-alls per layer, each peer pair exchanging its
    ``frames * tokens / W`` token shard. Frame-level: one exchange per layer
    in which every worker gathers the keys and values of the context frames.
    """
    w, layers = cfg.workers, cfg.layers
    pairs = w * (w - 1)
    if strategy is Strategy.TOKEN_LEVEL:
        messages = 2 * layers * pairs
        # pairs * (frames * T / W) tokens per collective == (W - 1) * frames * T
        nbytes = 2 * layers * (w - 1) * cfg.frames * cfg.tokens_per_frame * cfg.bytes_per_token
    else:
        messages = layers * pairs
        nbytes = layers * (w - 1) * 2 * cfg.context_frames * cfg.tokens_per_frame * cfg.bytes_per_token
    return CommCost(messages, nbytes)
