"""TCP session service speaking the framed wire protocol.

One session per connection. A reader task decodes frames into a bounded
queue (so a slow scheduler stops the reader consuming the socket), the
scheduler task turns conditioning into emissions, and a writer task sends
ChunkOut frames back, followed by a Metrics frame and End.
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
from typing import Callable

from . import protocol
from .conditioning import ConditionTimeline, TraceError
from .core import SessionConfig, reference_latent
from .denoise import ToyFlowModel
from .protocol import FrameDecoder, FrameType, ProtocolError, WireFrame
from .scheduler import ChunkScheduler, Phase, WallClock, _digest

log = logging.getLogger(__name__)

_EOF = object()


class SessionHandler:
    def __init__(self, config: SessionConfig, engine_factory: Callable = ToyFlowModel,
                 queue_size: int = 8):
        self.config = config
        self.engine_factory = engine_factory
        self.queue_size = queue_size

    async def __call__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        inbox: asyncio.Queue = asyncio.Queue(self.queue_size)
        outbox: asyncio.Queue = asyncio.Queue(self.queue_size)
        tasks = [
            asyncio.create_task(self._read(reader, inbox, outbox)),
            asyncio.create_task(self._schedule(inbox, outbox)),
            asyncio.create_task(self._write(writer, outbox)),
        ]
        try:
            await asyncio.gather(*tasks)
        except Exception:
            log.exception("session failed")
            for t in tasks:
                t.cancel()
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass

    async def _read(self, reader, inbox, outbox):
        decoder = FrameDecoder()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                for frame in decoder.feed(data):
                    await inbox.put(frame)
                    if frame.type == FrameType.END:
                        return
        except ProtocolError as exc:
            await outbox.put(protocol.error(str(exc)))
        await inbox.put(_EOF)

    async def _schedule(self, inbox, outbox):
        first = await inbox.get()
        if first is _EOF:
            await outbox.put(_EOF)
            return
        if first.type != FrameType.HELLO:
            await outbox.put(protocol.error("expected Hello as the first frame"))
            await outbox.put(_EOF)
            return
        config = self.config
        if first.payload:
            try:
                options = json.loads(first.payload)
                config = dataclasses.replace(config, **{k: v for k, v in options.items()
                                                       if k in ("rng_seed",)})
            except (ValueError, TypeError, AttributeError) as exc:
                await outbox.put(protocol.error(f"bad Hello payload: {exc}"))
                await outbox.put(_EOF)
                return
        reference = reference_latent(config)
        timeline = ConditionTimeline(config, reference_digest=_digest(reference))
        scheduler = ChunkScheduler(config, self.engine_factory(), clock=WallClock())
        scheduler.warmup(reference)
        emitted = []

        async def advance():
            while scheduler.state.phase != Phase.DONE:
                needs_cond = (scheduler.state.phase != Phase.DRAIN
                              and len(scheduler.bank.stream) < config.stream_chunks)
                if needs_cond and not timeline.ready(scheduler.bank.last_admitted + 1):
                    return
                record = scheduler.tick(timeline)
                if record is not None:
                    emitted.append(record)
                    await outbox.put(protocol.chunk_out(
                        record.chunk_id, *record.video_pts_range, record.chunk.data,
                        record.wall_time_emitted,
                    ))

        try:
            while True:
                frame = await inbox.get()
                if frame is _EOF or frame.type == FrameType.END:
                    timeline.finish()
                    await advance()
                    break
                try:
                    if frame.type == FrameType.AUDIO:
                        timeline.add_audio(protocol.parse_audio(frame))
                    elif frame.type == FrameType.PROMPT:
                        timeline.add_prompt(*protocol.parse_prompt(frame))
                    else:
                        raise ProtocolError(f"unexpected {frame.type.name} frame from client")
                except ProtocolError as exc:
                    await outbox.put(protocol.error(str(exc)))
                    continue
                await advance()
        except TraceError as exc:
            # conditioning cannot be completed (e.g. audio with no initial prompt)
            await outbox.put(protocol.error(str(exc)))

        await outbox.put(protocol.metrics({
            "chunks": len(emitted),
            "ttff_s": emitted[0].wall_time_emitted if emitted else None,
            "refinements": len(scheduler.state.refinements),
        }))
        await outbox.put(protocol.end())
        await outbox.put(_EOF)

    async def _write(self, writer, outbox):
        while True:
            frame = await outbox.get()
            if frame is _EOF:
                return
            writer.write(protocol.encode_frame(frame))
            await writer.drain()


async def start_server(config: SessionConfig, host: str = "127.0.0.1", port: int = 0,
                       engine_factory: Callable = ToyFlowModel) -> asyncio.base_events.Server:
    return await asyncio.start_server(SessionHandler(config, engine_factory), host, port)


def serve(config: SessionConfig, host: str, port: int) -> None:
    async def main():
        server = await start_server(config, host, port)
        addrs = ", ".join(str(s.getsockname()) for s in server.sockets)
        log.info("listening on %s", addrs)
        async with server:
            await server.serve_forever()

    asyncio.run(main())


async def run_client(host: str, port: int, frames: list[WireFrame],
                     timeout: float = 30.0) -> list[WireFrame]:
    """Send ``frames`` and collect every reply frame until End or disconnect."""
    reader, writer = await asyncio.open_connection(host, port)
    for frame in frames:
        writer.write(protocol.encode_frame(frame))
    await writer.drain()
    decoder = FrameDecoder()
    replies: list[WireFrame] = []
    try:
        while True:
            data = await asyncio.wait_for(reader.read(65536), timeout)
            if not data:
                break
            for frame in decoder.feed(data):
                replies.append(frame)
            if replies and replies[-1].type == FrameType.END:
                break
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except ConnectionError:
            pass
    return replies
