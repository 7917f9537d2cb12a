"""Length-prefixed wire protocol.

A frame is a 32-bit unsigned big-endian length followed by that many
bytes of UTF-8 JSON: `{"id": REQ_ID, "kind": K, "payload": {...},
"token": T}`. Encoding is canonical (sorted keys, no whitespace,
ensure_ascii off) so equal frames are byte-identical. Payloads are
capped at 16 MiB; larger file payloads use the chunked FILE_* sequence.

Every request kind K is answered by K_RESP (QUERY_REMOTE_REQ by
QUERY_REMOTE_RESP) or by ERROR. A RETRIEVE_RESP announces how many
FILE_CHUNK frames follow it on the same exchange; all frames of one
response echo the request id.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from mgvo.errors import MgvoError

MAX_PAYLOAD = 16 * 1024 * 1024  # 16 MiB

REQUEST_KINDS = (
    "AUTH",
    "VALIDATE",
    "REGISTER_SITE",
    "LIST_SITES",
    "ADD",
    "RETRIEVE",
    "QUERY",
    "QUERY_REMOTE_REQ",
    "ADD_ALG",
    "EXEC_ALG",
    "FILE_PUT_BEGIN",
    "FILE_CHUNK",
    "FILE_PUT_END",
)

RESPONSE_KIND = {
    kind: ("QUERY_REMOTE_RESP" if kind == "QUERY_REMOTE_REQ" else kind + "_RESP")
    for kind in REQUEST_KINDS
}

KINDS = frozenset(REQUEST_KINDS) | frozenset(RESPONSE_KIND.values()) | {"ERROR"}


class WireError(MgvoError):
    pass


class MalformedFrame(WireError):
    pass


class UnknownKind(WireError):
    def __init__(self, kind: str):
        super().__init__(f"kind {kind!r} is not served here")
        self.kind = kind


class Unauthenticated(WireError):
    pass


@dataclass(frozen=True)
class Frame:
    kind: str
    id: str
    payload: dict = field(default_factory=dict)
    token: "str | None" = None


def encode_frame(frame: Frame) -> bytes:
    """Canonical frame bytes: 4-byte big-endian length + JSON payload."""
    if frame.kind not in KINDS:
        raise MalformedFrame(f"unknown kind {frame.kind!r}")
    doc = {"id": frame.id, "kind": frame.kind, "payload": frame.payload, "token": frame.token}
    data = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(data) > MAX_PAYLOAD:
        raise MalformedFrame(f"payload of {len(data)} bytes exceeds the {MAX_PAYLOAD} cap")
    return struct.pack(">I", len(data)) + data


def _frame_from_json(data: bytes) -> Frame:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(f"payload is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or set(doc) != {"id", "kind", "payload", "token"}:
        raise MalformedFrame("frame object must have exactly id/kind/payload/token")
    kind, req_id, payload, token = doc["kind"], doc["id"], doc["payload"], doc["token"]
    if kind not in KINDS:
        raise MalformedFrame(f"unknown kind {kind!r}")
    if not isinstance(req_id, str) or not isinstance(payload, dict):
        raise MalformedFrame("id must be a string and payload an object")
    if token is not None and not isinstance(token, str):
        raise MalformedFrame("token must be a string or null")
    return Frame(kind, req_id, payload, token)


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one complete frame."""
    if len(data) < 4:
        raise MalformedFrame("frame shorter than its length prefix")
    (length,) = struct.unpack(">I", data[:4])
    if length > MAX_PAYLOAD:
        raise MalformedFrame(f"declared length {length} exceeds the {MAX_PAYLOAD} cap")
    if len(data) != 4 + length:
        raise MalformedFrame(f"length field says {length} bytes, got {len(data) - 4}")
    return _frame_from_json(data[4:])


class FrameStream:
    """Incremental decoder: feed arbitrary byte slices, get whole frames.

    The decoded sequence is independent of how the stream is sliced.
    feed() returns complete frame payloads; decode each with
    decode_payload so one bad frame cannot wedge the stream.
    """

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buffer.extend(data)
        payloads = []
        while True:
            if len(self._buffer) < 4:
                break
            (length,) = struct.unpack(">I", bytes(self._buffer[:4]))
            if length > MAX_PAYLOAD:
                raise MalformedFrame(f"declared length {length} exceeds the {MAX_PAYLOAD} cap")
            if len(self._buffer) < 4 + length:
                break
            payloads.append(bytes(self._buffer[4:4 + length]))
            del self._buffer[:4 + length]
        return payloads

    def feed_frames(self, data: bytes) -> list[Frame]:
        return [decode_payload(payload) for payload in self.feed(data)]

    def pending_bytes(self) -> int:
        return len(self._buffer)


def decode_payload(payload: bytes) -> Frame:
    """Decode one frame payload (the bytes after the length prefix)."""
    return _frame_from_json(payload)


def response_followups(first: Frame) -> int:
    """Trailing frames that complete a response (chunked RETRIEVE)."""
    if first.kind == "RETRIEVE_RESP":
        return int(first.payload.get("chunks", 0))
    return 0


def error_frame(req_id: str, code: str, message: str) -> Frame:
    return Frame("ERROR", req_id, {"code": code, "message": message})
