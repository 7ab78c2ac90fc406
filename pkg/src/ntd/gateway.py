"""Detection service over a length-prefixed socket protocol.

Frames are a 4-byte big-endian payload length followed by that many bytes of
UTF-8 text in the flat key-value document format. A request carries
input_id, predicted_class and a space-separated embedding; the response
echoes the input_id with the verdict, score, threshold, class and service
latency. Malformed frames get an error response and the connection stays
open.

Each well-formed request is assigned a monotonically increasing index, and
its comparison-set randomness comes from a sub-seed derived from the
service seed and that index, so any verdict can be replayed offline with
request_rng().
"""

from __future__ import annotations

import asyncio
import logging
import socket
import struct
import threading
import time

import numpy as np

from . import docfmt
from .calibrate import ThresholdTable
from .detect import Query, detect_one
from .errors import FormatError, NtdError
from .featstore import ValidationStore
from .simdist import Metric

log = logging.getLogger(__name__)

LENGTH_PREFIX = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024
_DRAIN_CHUNK = 65536


def request_rng(service_seed: int, request_index: int) -> np.random.Generator:
    """The comparison-set generator the service uses for a given request."""
    return np.random.default_rng(
        np.random.SeedSequence(service_seed, spawn_key=(request_index,))
    )


def encode_frame(payload: str) -> bytes:
    data = payload.encode("utf-8")
    if len(data) > MAX_FRAME:
        raise FormatError(f"payload of {len(data)} bytes exceeds frame limit")
    return LENGTH_PREFIX.pack(len(data)) + data


def render_request(input_id: str, predicted_class: int, embedding: np.ndarray) -> str:
    return docfmt.render_kv(
        [
            ("input_id", input_id),
            ("predicted_class", str(predicted_class)),
            ("embedding", " ".join(docfmt.render_real(v) for v in embedding)),
        ]
    )


def parse_request(payload: str) -> Query:
    pairs = docfmt.parse_kv(payload)
    fields: dict[str, str] = {}
    for key, value in pairs:
        if key in fields:
            raise FormatError(f"duplicate key {key!r} in request")
        fields[key] = value
    for key in ("input_id", "predicted_class", "embedding"):
        if key not in fields:
            raise FormatError(f"request is missing {key!r}")
    if not fields["input_id"]:
        raise FormatError("input_id is empty")
    try:
        predicted = int(fields["predicted_class"])
    except ValueError:
        raise FormatError(
            f"bad predicted_class {fields['predicted_class']!r}"
        ) from None
    if predicted < 0:
        raise FormatError("predicted_class must be non-negative")
    try:
        embedding = np.array(
            [float(tok) for tok in fields["embedding"].split()], dtype=np.float64
        )
    except ValueError:
        raise FormatError("embedding contains non-numeric tokens") from None
    if embedding.size == 0:
        raise FormatError("embedding is empty")
    if not np.isfinite(embedding).all():
        raise FormatError("embedding contains non-finite values")
    return Query(
        input_id=fields["input_id"], predicted_class=predicted, embedding=embedding
    )


def render_response(
    input_id: str,
    decision: str,
    score: float,
    threshold: float,
    class_id: int,
    latency_us: int,
) -> str:
    return docfmt.render_kv(
        [
            ("input_id", input_id),
            ("decision", decision),
            ("score", docfmt.render_real(score)),
            ("threshold", docfmt.render_real(threshold)),
            ("class", str(class_id)),
            ("latency_us", str(latency_us)),
        ]
    )


def render_error(input_id: str, message: str) -> str:
    return docfmt.render_kv([("input_id", input_id), ("error", message)])


class GatewayServer:
    """Asyncio detection service around one store and one threshold table."""

    def __init__(
        self,
        store: ValidationStore,
        thresholds: ThresholdTable,
        n: int,
        metric: Metric,
        seed: int,
        host: str = "127.0.0.1",
        port: int = 0,
    ) -> None:
        self.store = store
        self.thresholds = thresholds
        self.n = n
        self.metric = metric
        self.seed = seed
        self.host = host
        self.port = port
        self.request_count = 0
        self._server: asyncio.base_events.Server | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._thread: threading.Thread | None = None

    # -- request handling ---------------------------------------------------

    def handle_payload(self, payload: str) -> str:
        """Turn one request payload into a response payload.

        Well-formed requests consume one request index even when detection
        itself fails, so replay indexes stay aligned with arrival order.
        """
        try:
            query = parse_request(payload)
        except (FormatError, NtdError) as exc:
            return render_error("", str(exc))
        index = self.request_count
        self.request_count += 1
        start = time.perf_counter()
        try:
            verdict = detect_one(
                query,
                self.store,
                self.thresholds,
                self.n,
                self.metric,
                request_rng(self.seed, index),
            )
        except NtdError as exc:
            return render_error(query.input_id, str(exc))
        latency_us = int(round((time.perf_counter() - start) * 1e6))
        return render_response(
            verdict.input_id,
            verdict.decision,
            verdict.score,
            verdict.threshold,
            verdict.class_id,
            latency_us,
        )

    async def _respond(self, writer: asyncio.StreamWriter, payload: str) -> None:
        writer.write(encode_frame(payload))
        await writer.drain()

    async def _handle_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        peer = writer.get_extra_info("peername")
        try:
            while True:
                try:
                    header = await reader.readexactly(LENGTH_PREFIX.size)
                except asyncio.IncompleteReadError as exc:
                    if exc.partial:
                        log.error("connection %s closed mid-header", peer)
                    break
                (length,) = LENGTH_PREFIX.unpack(header)
                if length == 0:
                    await self._respond(writer, render_error("", "empty frame"))
                    continue
                if length > MAX_FRAME:
                    await self._drain(reader, length)
                    await self._respond(
                        writer,
                        render_error(
                            "", f"frame of {length} bytes exceeds limit {MAX_FRAME}"
                        ),
                    )
                    continue
                try:
                    body = await reader.readexactly(length)
                except asyncio.IncompleteReadError as exc:
                    log.error(
                        "connection %s closed %d bytes into a %d-byte frame",
                        peer,
                        len(exc.partial),
                        length,
                    )
                    break
                try:
                    payload = body.decode("utf-8")
                except UnicodeDecodeError:
                    await self._respond(
                        writer, render_error("", "payload is not valid UTF-8")
                    )
                    continue
                await self._respond(writer, self.handle_payload(payload))
        except ConnectionError:
            log.error("connection %s dropped", peer)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass

    @staticmethod
    async def _drain(reader: asyncio.StreamReader, length: int) -> None:
        remaining = length
        while remaining > 0:
            chunk = await reader.read(min(_DRAIN_CHUNK, remaining))
            if not chunk:
                break
            remaining -= len(chunk)

    # -- lifecycle ------------------------------------------------------------

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle_connection, self.host, self.port
        )
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("listening on %s:%d", self.host, self.port)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    def start_in_thread(self) -> tuple[str, int]:
        """Run the server on a dedicated event loop thread; returns the bound
        address once it is accepting connections."""
        started = threading.Event()
        self._loop = asyncio.new_event_loop()

        def runner() -> None:
            asyncio.set_event_loop(self._loop)
            self._loop.run_until_complete(self.start())
            started.set()
            self._loop.run_forever()

        self._thread = threading.Thread(target=runner, daemon=True)
        self._thread.start()
        if not started.wait(timeout=10):
            raise RuntimeError("gateway server did not start within 10s")
        return self.host, self.port

    def stop_in_thread(self) -> None:
        if self._loop is None:
            return
        future = asyncio.run_coroutine_threadsafe(self.stop(), self._loop)
        future.result(timeout=10)
        self._loop.call_soon_threadsafe(self._loop.stop)
        if self._thread is not None:
            self._thread.join(timeout=10)
        self._loop.close()
        self._loop = None
        self._thread = None


class GatewayClient:
    """Blocking client for one connection; mainly for tests and scripts."""

    def __init__(self, host: str, port: int, timeout: float = 30.0) -> None:
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def send_frame(self, data: bytes) -> None:
        self.sock.sendall(data)

    def request_raw(self, payload: str) -> str:
        self.send_frame(encode_frame(payload))
        return self.read_response()

    def read_response(self) -> str:
        header = self._read_exactly(LENGTH_PREFIX.size)
        (length,) = LENGTH_PREFIX.unpack(header)
        return self._read_exactly(length).decode("utf-8")

    def _read_exactly(self, count: int) -> bytes:
        chunks = []
        remaining = count
        while remaining > 0:
            chunk = self.sock.recv(remaining)
            if not chunk:
                raise ConnectionError("server closed the connection")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "GatewayClient":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()
