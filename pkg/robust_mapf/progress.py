"""
Live view of a training run: the run's JSON-lines training log streamed as
Server-Sent Events, plus the run manifest.

``robust-mapf serve-progress --run-dir runs/advppo`` serves this app with
uvicorn (``pip install robust-mapf[server]``).
"""

import functools
import json
import logging
from pathlib import Path
from typing import Any, AsyncIterator, Awaitable, Callable, Optional, Tuple, Union

import anyio
from anyio.streams.memory import MemoryObjectReceiveStream, MemoryObjectSendStream
from starlette.applications import Starlette
from starlette.requests import Request
from starlette.responses import JSONResponse, Response
from starlette.routing import Route
from starlette.types import Receive, Scope, Send

from robust_mapf.config import MANIFEST_FILENAME
from robust_mapf.event import SEPARATORS, ProgressEvent, ensure_bytes
from robust_mapf.ppo_core import LOG_FILENAME

logger = logging.getLogger(__name__)

__all__ = [
    "LOG_FILENAME",
    "MANIFEST_FILENAME",
    "SendTimeoutError",
    "ServerStatus",
    "TrainingProgressResponse",
    "create_app",
    "follow_training_log",
    "install_exit_hook",
]

# encoded frame and, for log events, the event set once it reached the client
Frame = Tuple[bytes, Optional[anyio.Event]]


class SendTimeoutError(TimeoutError):
    pass


class ServerStatus:
    """Process-wide shutdown flag; open streams end once the server starts exiting."""

    should_exit = False
    should_exit_event: Optional[anyio.Event] = None

    @classmethod
    def signal_exit(cls) -> None:
        cls.should_exit = True
        if cls.should_exit_event is not None:
            cls.should_exit_event.set()

    @classmethod
    async def wait_for_exit(cls) -> None:
        if cls.should_exit:
            return
        if cls.should_exit_event is None:
            cls.should_exit_event = anyio.Event()
        await cls.should_exit_event.wait()


def install_exit_hook() -> None:
    """Make uvicorn's signal handler also call ``ServerStatus.signal_exit``.

    Needs uvicorn; installing twice wraps the handler once.
    """
    from uvicorn.main import Server

    original = Server.handle_exit
    if getattr(original, "signals_progress_streams", False):
        return

    @functools.wraps(original)
    def handle_exit(self: Any, sig: int, frame: Any) -> None:
        ServerStatus.signal_exit()
        original(self, sig, frame)

    handle_exit.signals_progress_streams = True  # type: ignore[attr-defined]
    Server.handle_exit = handle_exit  # type: ignore[method-assign]
    logger.debug("progress streams now end on server shutdown")


async def follow_training_log(
    path: Union[str, Path],
    poll_interval: float = 1.0,
    follow: bool = True,
    finished: Optional[Callable[[], bool]] = None,
) -> AsyncIterator[ProgressEvent]:
    """Yield one event per training-log record, waiting for new lines if ``follow``.

    A followed stream ends once ``finished()`` reports true and the file is
    drained; the last frame is an ``end`` event.
    """
    path = anyio.Path(path)
    offset = 0
    pending = ""
    while True:
        if await path.exists():
            async with await anyio.open_file(path) as fh:
                await fh.seek(offset)
                chunk = await fh.read()
                offset = await fh.tell()
            pending += chunk
            *lines, pending = pending.split("\n")
            for line in lines:
                if line.strip():
                    yield ProgressEvent.from_record(json.loads(line))
            if chunk:
                continue
        done = finished is not None and finished()
        if not follow or done:
            break
        await anyio.sleep(poll_interval)
    yield ProgressEvent.end()


class TrainingProgressResponse(Response):
    """
    Streaming response pushing training-log events.

    One task reads the event source and one task pings; both hand frames to a
    single writer, so frames never interleave on the wire. The reader only
    advances the source once the writer has delivered its frame. A ping
    interval of 0 disables keep-alive pings. The stream ends when the source
    is exhausted, the client disconnects or the server shuts down.
    """

    DEFAULT_PING_INTERVAL = 15
    DEFAULT_SEPARATOR = "\r\n"
    media_type = "text/event-stream"

    def __init__(
        self,
        events: AsyncIterator[ProgressEvent],
        ping: Optional[float] = None,
        sep: Optional[str] = None,
        send_timeout: Optional[float] = None,
    ) -> None:
        if sep is not None and sep not in SEPARATORS:
            raise ValueError(f"sep must be one of: \\r\\n, \\r, \\n, got: {sep!r}")
        self.sep = sep or self.DEFAULT_SEPARATOR
        self.body_iterator = events
        self.status_code = 200
        self.background = None
        self.send_timeout = send_timeout
        self.ping_interval = self.DEFAULT_PING_INTERVAL if ping is None else ping
        self.init_headers({"Cache-Control": "no-store", "Connection": "keep-alive", "X-Accel-Buffering": "no"})

    @property
    def ping_interval(self) -> Union[int, float]:
        return self._ping_interval

    @ping_interval.setter
    def ping_interval(self, value: Union[int, float]) -> None:
        if not isinstance(value, (int, float)):
            raise TypeError("ping interval must be a number")
        if value < 0:
            raise ValueError("ping interval must not be negative")
        self._ping_interval = value

    async def _read_events(self, frames: MemoryObjectSendStream[Optional[Frame]]) -> None:
        try:
            async for event in self.body_iterator:
                delivered = anyio.Event()
                await frames.send((ensure_bytes(event, self.sep), delivered))
                await delivered.wait()
            await frames.send(None)
        finally:
            aclose = getattr(self.body_iterator, "aclose", None)
            if aclose is not None:
                with anyio.CancelScope(shield=True):
                    await aclose()

    async def _keep_alive(self, frames: MemoryObjectSendStream[Optional[Frame]]) -> None:
        if not self._ping_interval:
            return
        while True:
            await anyio.sleep(self._ping_interval)
            await frames.send((ProgressEvent.ping(self.sep).encode(), None))

    async def _write_body(self, send: Send, chunk: bytes, more_body: bool = True) -> None:
        with anyio.move_on_after(self.send_timeout) as scope:
            await send({"type": "http.response.body", "body": chunk, "more_body": more_body})
        if scope.cancelled_caught:
            raise SendTimeoutError(f"client did not accept a frame within {self.send_timeout}s")

    async def _write_frames(self, send: Send, frames: MemoryObjectReceiveStream[Optional[Frame]]) -> None:
        await send({"type": "http.response.start", "status": self.status_code, "headers": self.raw_headers})
        while (frame := await frames.receive()) is not None:
            chunk, delivered = frame
            logger.debug("chunk: %s", chunk)
            await self._write_body(send, chunk)
            if delivered is not None:
                delivered.set()
        await self._write_body(send, b"", more_body=False)

    @staticmethod
    async def _wait_for_disconnect(receive: Receive) -> None:
        while (await receive())["type"] != "http.disconnect":
            pass
        logger.debug("client disconnected from progress stream")

    async def __call__(self, scope: Scope, receive: Receive, send: Send) -> None:
        outgoing, incoming = anyio.create_memory_object_stream[Optional[Frame]]()
        with outgoing, incoming:
            async with anyio.create_task_group() as task_group:

                async def stop_all_after(task: Callable[..., Awaitable[None]], *args: Any) -> None:
                    await task(*args)
                    task_group.cancel_scope.cancel()

                task_group.start_soon(self._read_events, outgoing)
                task_group.start_soon(self._keep_alive, outgoing)
                task_group.start_soon(stop_all_after, self._write_frames, send, incoming)
                task_group.start_soon(stop_all_after, ServerStatus.wait_for_exit)
                await stop_all_after(self._wait_for_disconnect, receive)


def create_app(
    run_dir: Union[str, Path], poll_interval: float = 1.0, ping: Optional[float] = None
) -> Starlette:
    """App exposing ``/health``, ``/manifest`` and ``/progress`` for one run directory.

    ``/progress?follow=false`` replays the log and ends; by default the stream
    keeps following until the run's manifest appears.
    """
    run_dir = Path(run_dir)
    log_path = run_dir / LOG_FILENAME
    manifest_path = run_dir / MANIFEST_FILENAME

    async def health(request: Request) -> Response:
        return JSONResponse({"status": "ok", "run_dir": str(run_dir)})

    async def manifest(request: Request) -> Response:
        if not manifest_path.is_file():
            return JSONResponse({"detail": "run has not finished"}, status_code=404)
        return JSONResponse(json.loads(manifest_path.read_text()))

    async def progress(request: Request) -> Response:
        follow = request.query_params.get("follow", "true").lower() != "false"
        events = follow_training_log(log_path, poll_interval, follow, manifest_path.is_file)
        return TrainingProgressResponse(events, ping=ping)

    return Starlette(
        routes=[
            Route("/health", health),
            Route("/manifest", manifest),
            Route("/progress", progress),
        ]
    )
