"""Transports and clocks.

Node endpoints are written against one request/response interface with
two implementations: LoopbackTransport delivers frames in-process with
fault injection and a simulated clock (deterministic distributed tests),
TcpTransport speaks the real length-prefixed protocol over sockets.
Identical service code runs on both.
"""

from __future__ import annotations

import socket
import socketserver
import threading
import time

from mgvo import wire
from mgvo.errors import MgvoError

FAULT_HALT = "HALT"
FAULT_DELAY = "DELAY"


class TransportError(MgvoError):
    pass


class Unreachable(TransportError):
    pass


class TimedOut(TransportError):
    pass


class UnknownSite(TransportError):
    pass


class RealClock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)


class SimClock:
    """Manually advanced clock; the only time source in harness tests."""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance(self, ms: int) -> None:
        if ms < 0:
            raise ValueError("clock cannot move backwards")
        with self._lock:
            self._now += ms


class LoopbackTransport:
    """In-process delivery between registered endpoints.

    Supports HALT (connection refused semantics) and DELAY(ms) faults,
    counts messages by kind, and records a trace line
    `seq|from|to|kind|bytes` per delivered frame.
    """

    def __init__(self, clock):
        self.clock = clock
        self._endpoints = {}
        self._faults: dict[str, tuple[str, int]] = {}
        self._lock = threading.Lock()
        self._seq = 0
        self.trace: list[str] = []
        self.kind_counts: dict[str, int] = {}

    def register(self, address: str, handler) -> None:
        """handler: Callable[[wire.Frame], list[wire.Frame]]"""
        self._endpoints[address] = handler

    def set_fault(self, address: str, fault: "str | None", delay_ms: int = 0) -> None:
        if address not in self._endpoints:
            raise UnknownSite(address)
        with self._lock:
            if fault is None:
                self._faults.pop(address, None)
            else:
                self._faults[address] = (fault, delay_ms)

    def reset_counters(self) -> None:
        with self._lock:
            self.kind_counts = {}
            self.trace = []
            self._seq = 0

    def _record(self, src: str, dst: str, frame: wire.Frame, nbytes: int) -> None:
        with self._lock:
            self._seq += 1
            self.trace.append(f"{self._seq}|{src}|{dst}|{frame.kind}|{nbytes}")
            self.kind_counts[frame.kind] = self.kind_counts.get(frame.kind, 0) + 1

    def request(self, address: str, frame: wire.Frame,
                timeout_ms: "int | None" = None, origin: str = "client") -> list[wire.Frame]:
        handler = self._endpoints.get(address)
        with self._lock:
            fault = self._faults.get(address)
        if handler is None or (fault is not None and fault[0] == FAULT_HALT):
            raise Unreachable(address)
        if fault is not None and fault[0] == FAULT_DELAY:
            delay = fault[1]
            if timeout_ms is not None and delay > timeout_ms:
                self.clock.advance(timeout_ms)
                raise TimedOut(f"{address} did not answer within {timeout_ms} ms")
            self.clock.advance(delay)
        data = wire.encode_frame(frame)
        self._record(origin, address, frame, len(data))
        responses = handler(frame)
        for resp in responses:
            self._record(address, origin, resp, len(wire.encode_frame(resp)))
        return responses


class TcpTransport:
    """One connection per request against a frame-serving TCP endpoint."""

    def __init__(self, default_timeout_ms: int = 30000):
        self.default_timeout_ms = default_timeout_ms

    def request(self, address: str, frame: wire.Frame,
                timeout_ms: "int | None" = None, origin: str = "client") -> list[wire.Frame]:
        host, _, port = address.rpartition(":")
        timeout = (timeout_ms if timeout_ms is not None else self.default_timeout_ms) / 1000.0
        try:
            sock = socket.create_connection((host, int(port)), timeout=timeout)
        except socket.timeout as exc:
            raise TimedOut(f"{address}: {exc}") from None
        except OSError as exc:
            raise Unreachable(f"{address}: {exc}") from None
        try:
            sock.settimeout(timeout)
            sock.sendall(wire.encode_frame(frame))
            stream = wire.FrameStream()
            frames: list[wire.Frame] = []
            expected = 1
            while len(frames) < expected:
                try:
                    data = sock.recv(65536)
                except socket.timeout:
                    raise TimedOut(f"{address} did not answer within {timeout:.3f} s") from None
                if not data:
                    raise Unreachable(f"{address}: connection closed mid-response")
                for payload in stream.feed(data):
                    decoded = wire.decode_payload(payload)
                    if not frames:
                        expected = 1 + wire.response_followups(decoded)
                    frames.append(decoded)
            return frames
        finally:
            sock.close()


class _FrameRequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        stream = wire.FrameStream()
        while True:
            try:
                data = self.request.recv(65536)
            except OSError:
                return
            if not data:
                if stream.pending_bytes():
                    # declared length never arrived: answer, then hang up
                    err = wire.error_frame("", "MalformedFrame", "truncated frame at end of stream")
                    self._send(wire.encode_frame(err))
                return
            try:
                payloads = stream.feed(data)
            except wire.MalformedFrame as exc:
                err = wire.error_frame("", "MalformedFrame", str(exc))
                self._send(wire.encode_frame(err))
                return
            for payload in payloads:
                try:
                    frame = wire.decode_payload(payload)
                except wire.MalformedFrame as exc:
                    self._send(wire.encode_frame(wire.error_frame("", "MalformedFrame", str(exc))))
                    continue
                for resp in self.server.handler(frame):
                    self._send(wire.encode_frame(resp))

    def _send(self, data: bytes) -> None:
        try:
            self.request.sendall(data)
        except OSError:
            pass


class FrameServer(socketserver.ThreadingTCPServer):
    """Serves a frame handler over TCP, one thread per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str, port: int, handler):
        self.handler = handler
        super().__init__((host, port), _FrameRequestHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
