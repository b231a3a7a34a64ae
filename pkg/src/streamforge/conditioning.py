"""Conditioning ingestion: audio features, condition windows, prompt timeline, planner, traces."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Optional, Protocol, Sequence, Union

import numpy as np

from .core import SessionConfig

SAMPLE_RATE = 16000
FEATURE_RATE = 25
HOP = SAMPLE_RATE // FEATURE_RATE  # 640 samples per feature frame
FEATURE_DIM = 8

CROSS_PROMPT = "CrossPrompt"


class TraceError(ValueError):
    def __init__(self, message: str, offset: int = 0, line: int = 0):
        self.offset = offset
        self.line = line
        super().__init__(f"{message} (line {line}, byte {offset})" if line else message)


@dataclass(frozen=True, eq=False)
class AudioFeatureFrame:
    index: int
    features: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, AudioFeatureFrame):
            return NotImplemented
        return self.index == other.index and np.array_equal(self.features, other.features)

    __hash__ = None

    @property
    def rms(self) -> float:
        return float(self.features[0])


def _frame_features(windows: np.ndarray, dim: int) -> np.ndarray:
    """RMS plus ``dim - 1`` band energies for each row of ``windows``."""
    rms = np.sqrt(np.mean(windows * windows, axis=1))
    power = np.abs(np.fft.rfft(windows, axis=1)) ** 2 / windows.shape[1] ** 2
    bands = [band.sum(axis=1) for band in np.array_split(power[:, 1:], dim - 1, axis=1)]
    return np.column_stack([rms] + bands)


def aggregate_audio(pcm: Sequence[float], *, start_index: int = 0, dim: int = FEATURE_DIM,
                    sample_rate: int = SAMPLE_RATE) -> list[AudioFeatureFrame]:
    """Toy stand-in for an audio encoder: 25 feature frames per second of 16 kHz audio.

    Frame i covers samples ``[i*640, (i+1)*640)``; a trailing partial window is
    zero-padded. Features are RMS followed by ``dim - 1`` spectral band energies.
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"audio must be {SAMPLE_RATE} Hz, got {sample_rate}")
    pcm = np.asarray(pcm, dtype=np.float64).reshape(-1)
    n = math.ceil(len(pcm) / HOP)
    if n == 0:
        return []
    padded = np.zeros(n * HOP)
    padded[: len(pcm)] = pcm
    feats = _frame_features(padded.reshape(n, HOP), dim)
    return [AudioFeatureFrame(start_index + i, row) for i, row in enumerate(feats)]


def silent_frame(index: int, dim: int = FEATURE_DIM) -> AudioFeatureFrame:
    return AudioFeatureFrame(index, np.zeros(dim))


def features_per_chunk(config: SessionConfig) -> Fraction:
    return Fraction(config.frames_per_chunk) * FEATURE_RATE / Fraction(config.fps)


def chunk_feature_span(chunk_id: int, config: SessionConfig) -> tuple[int, int]:
    """Feature frames intersecting the chunk's video span, before overlap."""
    per = features_per_chunk(config)
    return math.floor(chunk_id * per), math.ceil((chunk_id + 1) * per)


def window_range(chunk_id: int, total: int, config: SessionConfig) -> range:
    start, end = chunk_feature_span(chunk_id, config)
    k = config.audio_overlap_features
    return range(max(0, start - k), min(total, end + k))


def window_for_chunk(chunk_id: int, frames: Sequence[AudioFeatureFrame],
                     config: SessionConfig) -> tuple[AudioFeatureFrame, ...]:
    r = window_range(chunk_id, len(frames), config)
    return tuple(frames[r.start:r.stop])


def _video_frame_pos(pts: float, fps: float) -> float:
    pos = pts * fps
    return float(round(pos)) if abs(pos - round(pos)) < 1e-9 else pos


def segment_prompts(events: Iterable["TraceEvent"], num_chunks: int,
                    config: SessionConfig) -> list[tuple[str, Optional[str]]]:
    """Per-chunk (active prompt, transition) for half-open chunk spans.

    A chunk takes the prompt active at its first frame and is tagged
    CrossPrompt when an update lands strictly inside its span.
    """
    prompts = sorted(
        ((_video_frame_pos(e.pts, config.fps), e.text) for e in events if e.kind == "prompt"),
        key=lambda p: p[0],
    )
    if num_chunks == 0:
        return []
    if not prompts or prompts[0][0] > 0:
        raise TraceError("trace has no initial prompt at pts <= 0")
    fpc = config.frames_per_chunk
    out = []
    for c in range(num_chunks):
        start, end = c * fpc, (c + 1) * fpc
        active = [text for pos, text in prompts if pos <= start][-1]
        inside = any(start < pos < end for pos, _ in prompts)
        out.append((active, CROSS_PROMPT if inside else None))
    return out


class ActionPlanner(Protocol):
    def plan(self, window: Sequence[AudioFeatureFrame], reference_digest: str,
             rng: Optional[np.random.Generator] = None) -> str: ...


def plan_action(window: Sequence[AudioFeatureFrame], reference_digest: str = "",
                rng: Optional[np.random.Generator] = None, threshold: float = 0.1) -> str:
    """Threshold rule on mean RMS: speaking gesture, listening nod, or idle."""
    if not window:
        return "idle"
    level = float(np.mean([f.rms for f in window]))
    if level > threshold:
        return "speaking-gesture"
    if level > threshold / 4:
        return "listening-nod"
    return "idle"


@dataclass(frozen=True)
class RuleBasedPlanner:
    threshold: float = 0.1

    def plan(self, window, reference_digest, rng=None):
        return plan_action(window, reference_digest, rng, self.threshold)


@dataclass(frozen=True, eq=False)
class ConditionSlice:
    chunk_id: int
    audio_window: tuple[AudioFeatureFrame, ...]
    prompt: str
    action_tag: str
    transition: Optional[str] = None

    def __eq__(self, other):
        if not isinstance(other, ConditionSlice):
            return NotImplemented
        return self.digest == other.digest and self.chunk_id == other.chunk_id

    __hash__ = None

    @property
    def window_indices(self) -> tuple[int, ...]:
        return tuple(f.index for f in self.audio_window)

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.prompt.encode())
        h.update(b"\0" + self.action_tag.encode())
        h.update(b"\0" + (self.transition or "").encode())
        for frame in self.audio_window:
            h.update(frame.index.to_bytes(8, "little", signed=True))
            h.update(np.ascontiguousarray(frame.features, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class TraceEvent:
    pts: float
    kind: str  # "audio" | "prompt" | "end"
    samples: Optional[np.ndarray] = None
    text: Optional[str] = None

    def __eq__(self, other):
        if not isinstance(other, TraceEvent):
            return NotImplemented
        if (self.pts, self.kind, self.text) != (other.pts, other.kind, other.text):
            return False
        if self.samples is None or other.samples is None:
            return self.samples is other.samples
        return np.array_equal(self.samples, other.samples)

    __hash__ = None


def _parse_audio_payload(payload: str) -> np.ndarray:
    parts = payload.split()
    if not parts:
        raise ValueError("empty audio payload")
    form = parts[0]
    if form == "samples":
        body = payload[len("samples"):].strip()
        return np.array([float(v) for v in body.split(",") if v.strip()], dtype=np.float64)
    if form == "silence" and len(parts) == 2:
        return np.zeros(int(parts[1]))
    if form == "tone" and len(parts) == 4:
        hz, amp, n = float(parts[1]), float(parts[2]), int(parts[3])
        return amp * np.sin(2 * np.pi * hz * np.arange(n) / SAMPLE_RATE)
    raise ValueError(f"unrecognised audio payload {form!r}")


def parse_trace(data: Union[bytes, str]) -> list[TraceEvent]:
    """Parse a line-delimited trace: ``<pts> <audio|prompt|end> [payload]``.

    Audio payloads are ``samples v1,v2,...``, ``silence N`` or
    ``tone HZ AMP N``. Blank lines and ``#`` comment lines are skipped.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    events: list[TraceEvent] = []
    offset = 0
    seen_end = False
    for lineno, raw in enumerate(data.split(b"\n"), 1):
        line_offset = offset
        offset += len(raw) + 1
        try:
            line = raw.decode("utf-8").strip()
        except UnicodeDecodeError:
            raise TraceError("invalid UTF-8", line_offset, lineno) from None
        if not line or line.startswith("#"):
            continue
        fields = line.split(None, 2)
        if len(fields) < 2:
            raise TraceError("expected '<pts> <kind> [payload]'", line_offset, lineno)
        try:
            pts = float(fields[0])
        except ValueError:
            raise TraceError(f"bad pts {fields[0]!r}", line_offset, lineno) from None
        if not math.isfinite(pts):
            raise TraceError("pts must be finite", line_offset, lineno)
        kind = fields[1].lower()
        payload = fields[2] if len(fields) > 2 else ""
        if seen_end:
            raise TraceError("event after end", line_offset, lineno)
        if events and pts < events[-1].pts:
            raise TraceError(f"pts {pts} < previous {events[-1].pts}", line_offset, lineno)
        if kind == "audio":
            try:
                events.append(TraceEvent(pts, "audio", samples=_parse_audio_payload(payload)))
            except ValueError as exc:
                raise TraceError(str(exc), line_offset, lineno) from None
        elif kind == "prompt":
            events.append(TraceEvent(pts, "prompt", text=payload))
        elif kind == "end":
            events.append(TraceEvent(pts, "end"))
            seen_end = True
        else:
            raise TraceError(f"unknown event kind {kind!r}", line_offset, lineno)
    if not seen_end:
        raise TraceError("trace has no end event", len(data))
    return events


def format_trace(events: Iterable[TraceEvent]) -> bytes:
    lines = []
    for e in events:
        if e.kind == "audio":
            body = ",".join(repr(float(v)) for v in e.samples)
            lines.append(f"{e.pts!r} audio samples {body}")
        elif e.kind == "prompt":
            lines.append(f"{e.pts!r} prompt {e.text}")
        else:
            lines.append(f"{e.pts!r} end")
    return ("\n".join(lines) + "\n").encode("utf-8")


class ConditionTimeline:
    """Incremental builder of per-chunk ConditionSlices.

    Audio and prompt updates arrive in order (from a trace or the wire);
    ``condition_for`` hands out a slice once its whole overlapped window is
    available, and returns None past the end of the session.
    """

    def __init__(self, config: SessionConfig, planner: Optional[ActionPlanner] = None,
                 reference_digest: str = ""):
        if config.audio_hz != SAMPLE_RATE:
            raise ValueError(f"audio_hz must be {SAMPLE_RATE}")
        self.config = config
        self.planner = planner or RuleBasedPlanner()
        self.reference_digest = reference_digest
        self.frames: list[AudioFeatureFrame] = []
        self.prompts: list[TraceEvent] = []
        self.samples_received = 0
        self._pending = np.zeros(0)
        self._num_chunks: Optional[int] = None
        self._segments: Optional[list] = None

    @classmethod
    def from_trace(cls, events: Sequence[TraceEvent], config: SessionConfig, **kwargs) -> "ConditionTimeline":
        timeline = cls(config, **kwargs)
        end_pts = 0.0
        for e in events:
            if e.kind == "audio":
                timeline.add_audio(e.samples, pts=e.pts)
            elif e.kind == "prompt":
                timeline.add_prompt(e.pts, e.text)
            else:
                end_pts = e.pts
        timeline.finish(end_pts)
        return timeline

    @property
    def finished(self) -> bool:
        return self._num_chunks is not None

    @property
    def num_chunks(self) -> Optional[int]:
        return self._num_chunks

    def add_audio(self, samples: Sequence[float], pts: Optional[float] = None) -> None:
        if self.finished:
            raise RuntimeError("timeline already finished")
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        if pts is not None:
            offset = round(pts * SAMPLE_RATE)
            if offset < self.samples_received - 1:
                raise TraceError(f"audio at pts {pts} overlaps earlier audio")
            if offset > self.samples_received:
                samples = np.concatenate([np.zeros(offset - self.samples_received), samples])
        self.samples_received += len(samples)
        buf = np.concatenate([self._pending, samples])
        whole = len(buf) // HOP * HOP
        if whole:
            self.frames.extend(aggregate_audio(buf[:whole], start_index=len(self.frames)))
        self._pending = buf[whole:]

    def add_prompt(self, pts: float, text: str) -> None:
        if self.finished:
            raise RuntimeError("timeline already finished")
        self.prompts.append(TraceEvent(pts, "prompt", text=text))

    def finish(self, end_pts: float = 0.0) -> int:
        """Close the timeline; returns the session's chunk count."""
        if self.finished:
            return self._num_chunks
        if len(self._pending):
            self.frames.extend(aggregate_audio(self._pending, start_index=len(self.frames)))
            self._pending = np.zeros(0)
        end_features = math.ceil(_video_frame_pos(end_pts, FEATURE_RATE)) if end_pts > 0 else 0
        total = max(len(self.frames), end_features)
        n = math.ceil(Fraction(total) / features_per_chunk(self.config))
        padded_len = chunk_feature_span(n - 1, self.config)[1] if n else 0
        while len(self.frames) < padded_len:
            self.frames.append(silent_frame(len(self.frames)))
        self._segments = segment_prompts(self.prompts, n, self.config)
        self._num_chunks = n
        return n

    def ready(self, chunk_id: int) -> bool:
        if self.finished:
            return True
        end = chunk_feature_span(chunk_id, self.config)[1] + self.config.audio_overlap_features
        return len(self.frames) >= end

    def condition_for(self, chunk_id: int) -> Optional[ConditionSlice]:
        if self.finished:
            if chunk_id >= self._num_chunks:
                return None
            prompt, transition = self._segments[chunk_id]
        else:
            if not self.ready(chunk_id):
                raise RuntimeError(f"conditioning for chunk {chunk_id} not yet available")
            prompt, transition = segment_prompts(self.prompts, chunk_id + 1, self.config)[-1]
        window = window_for_chunk(chunk_id, self.frames, self.config)
        action = self.planner.plan(window, self.reference_digest)
        return ConditionSlice(chunk_id, window, prompt, action, transition)
