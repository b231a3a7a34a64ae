"""Domain types, the noise ladder, and session configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np


class ConfigError(ValueError):
    """Raised when a SessionConfig violates one or more invariants.

    ``violations`` is a list of ``(field, constraint)`` pairs.
    """

    def __init__(self, violations: list[tuple[str, str]]):
        self.violations = violations
        msg = "; ".join(f"{name}: {rule}" for name, rule in violations)
        super().__init__(f"invalid config: {msg}")


@dataclass(frozen=True, eq=False)
class Latent:
    id: int
    data: np.ndarray
    frames_covered: int = 1
    video_pts: float = 0.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True).reshape(-1)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        if self.frames_covered < 1:
            raise ValueError("frames_covered must be >= 1")

    def __eq__(self, other):
        if not isinstance(other, Latent):
            return NotImplemented
        return ((self.id, self.frames_covered, self.video_pts)
                == (other.id, other.frames_covered, other.video_pts)
                and np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True)
class NoiseLevel:
    """A point on the noise ladder.

    ``t`` is flow time (1 = pure noise, 0 = clean). ``ladder_index`` counts the
    denoising evaluations still needed to reach t = 0, so 0 is the cleanest
    level and the pure-noise level has index ``len(ladder)``.
    """

    t: float
    ladder_index: int

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"noise level t={self.t} outside [0, 1]")

    @property
    def is_clean(self) -> bool:
        return self.ladder_index == 0


CLEAN = NoiseLevel(0.0, 0)


@dataclass(frozen=True)
class Chunk:
    """A group of consecutive latents that share one noise level.

    ``history`` lists the flow times this chunk has traversed since it was
    last noised; ``cond_digest`` identifies the conditioning it was generated
    under (the toy denoisers derive their targets from it).
    """

    chunk_id: int
    latents: tuple[Latent, ...]
    noise_level: NoiseLevel
    cond_digest: str = ""
    history: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "latents", tuple(self.latents))
        ids = [lat.id for lat in self.latents]
        if any(b != a + 1 for a, b in zip(ids, ids[1:])):
            raise ValueError(f"chunk {self.chunk_id}: latent ids not consecutive: {ids}")
        if not self.history:
            object.__setattr__(self, "history", (self.noise_level.t,))

    @property
    def data(self) -> np.ndarray:
        """Latent vectors stacked into a ``(latents, latent_dim)`` array."""
        return np.stack([lat.data for lat in self.latents])

    @property
    def t(self) -> float:
        return self.noise_level.t

    def with_data(self, data: np.ndarray, level: NoiseLevel, *, reset_history: bool = False) -> "Chunk":
        """Return a copy holding ``data`` at ``level``; the history is extended."""
        data = np.asarray(data, dtype=np.float64)
        latents = tuple(
            dataclasses.replace(lat, data=row) for lat, row in zip(self.latents, data)
        )
        history = (level.t,) if reset_history else self.history + (level.t,)
        return Chunk(self.chunk_id, latents, level, self.cond_digest, history)


def make_chunk(chunk_id: int, data: np.ndarray, level: NoiseLevel, config: "SessionConfig",
               cond_digest: str = "") -> Chunk:
    """Build a chunk with latent ids and timestamps derived from its position."""
    data = np.asarray(data, dtype=np.float64)
    n = config.latents_per_chunk
    if data.shape != (n, config.latent_dim):
        raise ValueError(f"chunk data shape {data.shape} != {(n, config.latent_dim)}")
    latents = []
    for j in range(n):
        lid = chunk_id * n + j
        latents.append(Latent(lid, data[j], config.frames_per_latent,
                              float(lid * config.frames_per_latent / config.fps)))
    return Chunk(chunk_id, tuple(latents), level, cond_digest)


@dataclass(frozen=True)
class SessionConfig:
    fps: float = 25
    audio_hz: int = 16000
    latents_per_chunk: int = 3
    stream_chunks: int = 3
    micro_steps: int = 1
    frames_per_latent: int = 4
    long_term_capacity: int = 3
    latent_dim: int = 16
    refine_interval_chunks: int = 8
    refine_noise_t: Optional[float] = None
    audio_overlap_features: int = 2
    rng_seed: int = 0

    @property
    def ladder(self) -> list[float]:
        return build_noise_ladder(self.stream_chunks, self.micro_steps)

    @property
    def nfe_per_chunk(self) -> int:
        return self.stream_chunks * self.micro_steps

    @property
    def refine_t(self) -> float:
        """Injection level for memory refinement (defaults to the second ladder rung)."""
        if self.refine_noise_t is not None:
            return self.refine_noise_t
        ladder = self.ladder
        return ladder[1] if len(ladder) > 1 else 0.5

    @property
    def frames_per_chunk(self) -> int:
        return self.latents_per_chunk * self.frames_per_latent

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


_COUNT_FIELDS = (
    "audio_hz", "latents_per_chunk", "stream_chunks", "micro_steps",
    "frames_per_latent", "long_term_capacity", "latent_dim", "refine_interval_chunks",
)


def validate_config(config: SessionConfig) -> SessionConfig:
    """Return ``config`` unchanged, or raise ConfigError naming every violation."""
    violations: list[tuple[str, str]] = []
    for name in _COUNT_FIELDS:
        value = getattr(config, name)
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
            violations.append((name, "counts ≥ 1"))
    if not config.fps > 0:
        violations.append(("fps", "fps > 0"))
    if config.audio_overlap_features < 0:
        violations.append(("audio_overlap_features", "≥ 0"))
    if config.refine_noise_t is not None and not 0.0 < config.refine_noise_t < 1.0:
        violations.append(("refine_noise_t", "refine_noise_t ∈ (0,1)"))
    if violations:
        raise ConfigError(violations)
    return config


def build_noise_ladder(stream_chunks: int, micro_steps: int) -> list[float]:
    """Uniform descending partition of (0, 1]: ``[K/K, (K-1)/K, ..., 1/K]``."""
    if stream_chunks < 1 or micro_steps < 1:
        raise ConfigError([("stream_chunks × micro_steps", "counts ≥ 1")])
    k = stream_chunks * micro_steps
    return [i / k for i in range(k, 0, -1)]


def level_for(ladder: Sequence[float], remaining: int) -> NoiseLevel:
    """Noise level with ``remaining`` evaluations left before reaching t = 0."""
    if not 0 <= remaining <= len(ladder):
        raise ValueError(f"{remaining} remaining evaluations outside ladder of {len(ladder)}")
    if remaining == 0:
        return CLEAN
    return NoiseLevel(ladder[len(ladder) - remaining], remaining)


def pure_noise(ladder: Sequence[float]) -> NoiseLevel:
    return level_for(ladder, len(ladder))


def descent_path(ladder: Sequence[float], t_start: float) -> list[NoiseLevel]:
    """Levels visited when denoising from ``t_start`` down to 0.

    The first element is the starting level; ``t_start`` need not lie on the
    ladder, in which case it is followed by every ladder rung strictly below it.
    """
    below = [t for t in ladder if t < t_start - 1e-12]
    levels = [NoiseLevel(t_start, len(below) + 1)]
    for i, t in enumerate(below):
        levels.append(NoiseLevel(t, len(below) - i))
    levels.append(CLEAN)
    return levels


def chunk_duration(config: SessionConfig) -> float:
    return float(chunk_duration_exact(config))


def chunk_duration_exact(config: SessionConfig) -> Fraction:
    return Fraction(config.latents_per_chunk * config.frames_per_latent) / Fraction(config.fps)


def reference_latent(config: SessionConfig) -> Latent:
    """Seeded stand-in for the encoded reference image."""
    rng = np.random.default_rng([config.rng_seed, 0x5EF])
    return Latent(-1, rng.standard_normal(config.latent_dim), 1, 0.0)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(SessionConfig)}


def parse_config(text: str) -> SessionConfig:
    """Parse the ``key = value`` config format (``#`` starts a comment)."""
    values: dict[str, Union[int, float, None]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([(f"line {lineno}", "expected 'key = value'")])
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError([(key, "unknown key")])
        try:
            if key == "refine_noise_t":
                values[key] = None if value.lower() in ("", "none") else float(value)
            elif key == "fps":
                values[key] = float(value) if "." in value or "e" in value.lower() else int(value)
            else:
                values[key] = int(value)
        except ValueError:
            raise ConfigError([(key, f"cannot parse value {value!r}")]) from None
    return validate_config(SessionConfig(**values))


def load_config(path: Union[str, Path]) -> SessionConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config: SessionConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
