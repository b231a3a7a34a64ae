"""Length-prefixed binary framing for the streaming session service.

Frame layout: ``u32 LE payload length | u8 type | payload``.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

HEADER = struct.Struct("<IB")
HEADER_SIZE = HEADER.size  # 5
MAX_PAYLOAD = 64 * 1024 * 1024


class FrameType(enum.IntEnum):
    HELLO = 0x01
    AUDIO = 0x02
    PROMPT = 0x03
    CHUNK_OUT = 0x04
    METRICS = 0x05
    ERROR = 0x7E
    END = 0x7F


class ProtocolError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        self.message = message
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


@dataclass(frozen=True)
class WireFrame:
    type: FrameType
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode_frame(self)


def encode_frame(frame: WireFrame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(frame.payload)} bytes exceeds limit")
    return HEADER.pack(len(frame.payload), int(frame.type)) + bytes(frame.payload)


def decode_frame(data: bytes, offset: int = 0) -> Optional[tuple[WireFrame, int]]:
    """Decode one frame starting at ``offset``.

    Returns ``(frame, bytes_consumed)``, or None when more bytes are needed.
    Raises ProtocolError for an unknown type or an oversized length.
    """
    if len(data) - offset < HEADER_SIZE:
        return None
    length, type_byte = HEADER.unpack_from(data, offset)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared length {length} exceeds limit", offset)
    try:
        ftype = FrameType(type_byte)
    except ValueError:
        raise ProtocolError(f"unknown frame type 0x{type_byte:02x}", offset + 4) from None
    end = offset + HEADER_SIZE + length
    if len(data) < end:
        return None
    return WireFrame(ftype, bytes(data[offset + HEADER_SIZE:end])), HEADER_SIZE + length


class FrameDecoder:
    """Incremental decoder: feed bytes, iterate complete frames."""

    def __init__(self):
        self._buf = bytearray()
        self._consumed = 0  # absolute stream offset of _buf[0], for error reporting

    def feed(self, data: bytes) -> Iterator[WireFrame]:
        self._buf.extend(data)
        while True:
            try:
                result = decode_frame(self._buf)
            except ProtocolError as exc:
                raise ProtocolError(exc.message, self._consumed + exc.offset) from None
            if result is None:
                return
            frame, used = result
            del self._buf[:used]
            self._consumed += used
            yield frame

    @property
    def buffered(self) -> int:
        return len(self._buf)


# Typed payload helpers.

def hello(options: Optional[dict] = None) -> WireFrame:
    return WireFrame(FrameType.HELLO, json.dumps(options).encode() if options else b"")


def audio(samples) -> WireFrame:
    return WireFrame(FrameType.AUDIO, np.asarray(samples, dtype="<f4").tobytes())


def parse_audio(frame: WireFrame) -> np.ndarray:
    if len(frame.payload) % 4:
        raise ProtocolError("audio payload is not a whole number of f32 samples")
    return np.frombuffer(frame.payload, dtype="<f4").astype(np.float64)


_PTS = struct.Struct("<d")


def prompt(pts: float, text: str) -> WireFrame:
    return WireFrame(FrameType.PROMPT, _PTS.pack(pts) + text.encode("utf-8"))


def parse_prompt(frame: WireFrame) -> tuple[float, str]:
    if len(frame.payload) < _PTS.size:
        raise ProtocolError("prompt payload shorter than its pts field")
    (pts,) = _PTS.unpack_from(frame.payload)
    try:
        return pts, frame.payload[_PTS.size:].decode("utf-8")
    except UnicodeDecodeError:
        raise ProtocolError("prompt text is not UTF-8") from None


_CHUNK_HEAD = struct.Struct("<Qdd")


@dataclass(frozen=True)
class ChunkOut:
    chunk_id: int
    video_pts_start: float
    video_pts_end: float
    latents: np.ndarray  # (latents_per_chunk, latent_dim) float32
    emit_time: float


def chunk_out(chunk_id: int, start: float, end: float, latents: np.ndarray, emit_time: float) -> WireFrame:
    body = np.ascontiguousarray(latents, dtype="<f4").tobytes()
    payload = _CHUNK_HEAD.pack(chunk_id, start, end) + body + _PTS.pack(emit_time)
    return WireFrame(FrameType.CHUNK_OUT, payload)


def parse_chunk_out(frame: WireFrame, latents_per_chunk: int, latent_dim: int) -> ChunkOut:
    n_body = 4 * latents_per_chunk * latent_dim
    expected = _CHUNK_HEAD.size + n_body + _PTS.size
    if len(frame.payload) != expected:
        raise ProtocolError(f"chunk payload is {len(frame.payload)} bytes, expected {expected}")
    chunk_id, start, end = _CHUNK_HEAD.unpack_from(frame.payload)
    body = frame.payload[_CHUNK_HEAD.size:_CHUNK_HEAD.size + n_body]
    latents = np.frombuffer(body, dtype="<f4").reshape(latents_per_chunk, latent_dim)
    (emit,) = _PTS.unpack_from(frame.payload, _CHUNK_HEAD.size + n_body)
    return ChunkOut(chunk_id, start, end, latents, emit)


def metrics(doc: dict) -> WireFrame:
    return WireFrame(FrameType.METRICS, json.dumps(doc, sort_keys=True).encode())


def error(message: str) -> WireFrame:
    return WireFrame(FrameType.ERROR, message.encode("utf-8"))


def end() -> WireFrame:
    return WireFrame(FrameType.END)
