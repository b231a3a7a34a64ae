"""Fixed-size stream buffer: reference, long-term queue, short-term slot, denoising stream."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import Chunk, Latent, SessionConfig


class BankError(RuntimeError):
    pass


class CapacityError(BankError):
    pass


class ScheduleError(BankError):
    pass


class SequencingError(BankError):
    pass


class StateError(BankError):
    pass


@dataclass(frozen=True, order=True)
class Group:
    """One attention group of the buffer layout.

    ``kind`` is one of ``Ref``, ``LT``, ``ST``, ``S`` (denoising stream).
    """

    kind: str
    index: int = 0

    KINDS = ("Ref", "LT", "ST", "S")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")

    @property
    def is_stream(self) -> bool:
        return self.kind == "S"

    def __str__(self) -> str:
        return self.kind if self.kind in ("Ref", "ST") else f"{self.kind}{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Group":
        text = text.strip()
        if text in ("Ref", "ST"):
            return cls(text)
        for kind in ("LT", "S"):
            if text.startswith(kind) and text[len(kind):].isdigit():
                return cls(kind, int(text[len(kind):]))
        raise ValueError(f"cannot parse group tag {text!r}")


REF = Group("Ref")
ST = Group("ST")


def parse_layout(text: str) -> tuple[Group, ...]:
    return tuple(Group.parse(part) for part in text.split(",") if part.strip())


@dataclass(frozen=True)
class ContextView:
    """Immutable snapshot of the bank handed to a denoise call."""

    reference: Latent
    long_term: tuple[Chunk, ...]
    short_term: Optional[Chunk]
    stream: tuple[Chunk, ...]

    @property
    def layout(self) -> tuple[Group, ...]:
        groups = [REF]
        groups += [Group("LT", i) for i in range(len(self.long_term))]
        if self.short_term is not None:
            groups.append(ST)
        groups += [Group("S", j) for j in range(len(self.stream))]
        return tuple(groups)

    def group(self, tag: Group):
        if tag.kind == "Ref":
            return self.reference
        if tag.kind == "LT":
            return self.long_term[tag.index]
        if tag.kind == "ST":
            return self.short_term
        return self.stream[tag.index]

    @property
    def memory(self) -> tuple[Chunk, ...]:
        """Clean context chunks, oldest first."""
        return self.long_term + ((self.short_term,) if self.short_term is not None else ())


class MemoryBank:
    """Single-writer state machine over the four buffer regions.

    Every mutation checks its preconditions and leaves the invariants intact
    or raises without side effects.
    """

    def __init__(self, reference: Latent, config: SessionConfig):
        if reference.data.shape != (config.latent_dim,):
            raise ValueError(
                f"reference dim {reference.data.shape[0]} != latent_dim {config.latent_dim}"
            )
        self.config = config
        self._reference = reference
        self.long_term: deque[Chunk] = deque()
        self.short_term: Optional[Chunk] = None
        self.stream: list[Chunk] = []
        self.last_admitted: int = -1

    @property
    def reference(self) -> Latent:
        return self._reference

    def admit_noise_chunk(self, chunk: Chunk) -> None:
        if len(self.stream) >= self.config.stream_chunks:
            raise CapacityError(f"denoising stream full ({len(self.stream)} chunks)")
        if chunk.noise_level.t != 1.0:
            raise ScheduleError(f"admitted chunk must be pure noise, got t={chunk.t}")
        if chunk.chunk_id != self.last_admitted + 1:
            raise SequencingError(
                f"expected chunk {self.last_admitted + 1}, got {chunk.chunk_id}"
            )
        if self.stream and self.stream[-1].noise_level.ladder_index >= chunk.noise_level.ladder_index:
            raise ScheduleError(f"stream tail chunk {self.stream[-1].chunk_id} has not advanced yet")
        self.stream.append(chunk)
        self.last_admitted = chunk.chunk_id

    def advance_stream(self, chunks: Sequence[Chunk]) -> None:
        """Write back the output of a denoise call (same chunks, each one level cleaner)."""
        if [c.chunk_id for c in chunks] != [c.chunk_id for c in self.stream]:
            raise StateError("denoiser returned a different set of chunks")
        for old, new in zip(self.stream, chunks):
            if new.noise_level.ladder_index != old.noise_level.ladder_index - 1:
                raise ScheduleError(
                    f"chunk {new.chunk_id}: level {old.noise_level} -> {new.noise_level}"
                )
        self.stream = list(chunks)
        self._check_stream_order()

    def promote_clean_chunk(self) -> Chunk:
        if not self.stream:
            raise StateError("promote on empty stream")
        head = self.stream[0]
        if not head.noise_level.is_clean:
            raise StateError(f"stream head chunk {head.chunk_id} not clean (t={head.t})")
        self.stream.pop(0)
        if self.short_term is not None:
            if len(self.long_term) >= self.config.long_term_capacity:
                self.long_term.popleft()
            self.long_term.append(self.short_term)
        self.short_term = head
        return head

    def replace_short_term(self, chunk: Chunk) -> None:
        if self.short_term is None:
            raise StateError("no short-term memory to replace")
        if chunk.chunk_id != self.short_term.chunk_id:
            raise StateError(
                f"replacement id {chunk.chunk_id} != short-term id {self.short_term.chunk_id}"
            )
        if not chunk.noise_level.is_clean:
            raise StateError("replacement short-term chunk must be clean")
        self.short_term = chunk

    def snapshot_context(self) -> ContextView:
        return ContextView(self._reference, tuple(self.long_term), self.short_term, tuple(self.stream))

    def check_invariants(self) -> None:
        cfg = self.config
        if len(self.long_term) > cfg.long_term_capacity:
            raise AssertionError(f"|long_term|={len(self.long_term)}")
        if len(self.stream) > cfg.stream_chunks:
            raise AssertionError(f"|stream|={len(self.stream)}")
        for chunk in self.long_term:
            if not chunk.noise_level.is_clean:
                raise AssertionError(f"long-term chunk {chunk.chunk_id} not clean")
        if self.short_term is not None and not self.short_term.noise_level.is_clean:
            raise AssertionError("short-term chunk not clean")
        self._check_stream_order()

    def _check_stream_order(self) -> None:
        levels = [c.noise_level.ladder_index for c in self.stream]
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise AssertionError(f"stream levels not increasing head to tail: {levels}")

    def dump(self) -> str:
        return render_context(self.snapshot_context())


def render_context(view: ContextView) -> str:
    """Deterministic text rendering: one line per group with ids and noise level."""
    lines = []
    for tag in view.layout:
        item = view.group(tag)
        if tag.kind == "Ref":
            lines.append(f"{tag}: latent {item.id}")
        else:
            ids = f"{item.latents[0].id}-{item.latents[-1].id}"
            lines.append(f"{tag}: chunk {item.chunk_id} latents {ids} t={item.t:.4f}")
    return "\n".join(lines)
