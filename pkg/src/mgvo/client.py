"""Client for the grid services.

Thin wrappers over wire frames: login against the central node, then
address any site for add/retrieve/query/algorithm calls. Large files
are uploaded through the chunked FILE_* sequence automatically.
"""

from __future__ import annotations

import base64
import secrets
from random import Random

from mgvo import storage, wire
from mgvo.errors import MgvoError
from mgvo.hashing import fnv1a64_hex
from mgvo.node import INLINE_FILE_LIMIT, RemoteError


class ClientError(MgvoError):
    pass


class GridClient:
    def __init__(self, transport_, central_address: str,
                 timeout_ms: "int | None" = None, seed: "int | None" = None):
        self.transport = transport_
        self.central_address = central_address
        self.timeout_ms = timeout_ms
        self.token: "str | None" = None
        self.user: "str | None" = None
        self.expires_at_ms: "int | None" = None
        self._rng = Random(seed if seed is not None else secrets.randbits(64))
        self._sites: dict[str, str] = {}

    def _new_id(self) -> str:
        return f"{self._rng.getrandbits(64):016x}"

    def _call(self, address: str, kind: str, payload: dict,
              with_token: bool = True) -> list[wire.Frame]:
        token = self.token if with_token else None
        frame = wire.Frame(kind, self._new_id(), payload, token)
        replies = self.transport.request(address, frame, self.timeout_ms)
        first = replies[0]
        if first.kind == "ERROR":
            raise RemoteError(str(first.payload.get("code", "Error")),
                              str(first.payload.get("message", "")))
        return replies

    # -- sessions ---------------------------------------------------------

    def login(self, user: str, secret: str, address: "str | None" = None) -> str:
        """Authenticate against the central node (or via any site)."""
        target = address if address is not None else self.central_address
        reply = self._call(target, "AUTH", {"user": user, "secret": secret},
                           with_token=False)[0]
        self.token = str(reply.payload["token"])
        self.user = str(reply.payload["user"])
        self.expires_at_ms = int(reply.payload["expires_at_ms"])
        return self.token

    def sites(self) -> list[dict]:
        reply = self._call(self.central_address, "LIST_SITES", {})[0]
        members = list(reply.payload.get("sites", []))
        self._sites = {entry["name"]: entry["address"] for entry in members}
        return members

    def site_address(self, name: str) -> str:
        if name not in self._sites:
            self.sites()
        address = self._sites.get(name)
        if address is None:
            raise ClientError(f"no such site {name!r}")
        return address

    # -- the six services ---------------------------------------------------

    def add(self, site: str, data: bytes) -> dict:
        address = self.site_address(site)
        if len(data) <= INLINE_FILE_LIMIT:
            payload = {"data": base64.b64encode(data).decode("ascii")}
            return self._call(address, "ADD", payload)[0].payload
        return self._chunked_upload(address, data, purpose="add")

    def retrieve(self, site: str, lfn: str) -> bytes:
        address = self.site_address(site)
        replies = self._call(address, "RETRIEVE", {"lfn": lfn})
        head = replies[0].payload
        data = b"".join(base64.b64decode(chunk.payload["data"]) for chunk in replies[1:])
        if len(data) != int(head["size"]) or fnv1a64_hex(data) != head["checksum"]:
            raise ClientError(f"retrieved payload for {lfn} fails verification")
        return data

    def query(self, site: str, text: str) -> str:
        """Returns the XML result set exactly as produced by the site."""
        address = self.site_address(site)
        return str(self._call(address, "QUERY", {"query": text})[0].payload["xml"])

    def add_algorithm(self, site: str, name: str, version: str,
                      data: "bytes | None" = None,
                      builtin_id: "str | None" = None) -> dict:
        address = self.site_address(site)
        payload: dict = {"name": name, "version": version}
        if builtin_id is not None:
            payload["builtin"] = builtin_id
        elif data is not None:
            payload["data"] = base64.b64encode(data).decode("ascii")
        return self._call(address, "ADD_ALG", payload)[0].payload

    def execute_algorithm(self, site: str, name: str, version: str,
                          input_lfn: str) -> dict:
        address = self.site_address(site)
        payload = {"name": name, "version": version, "input_lfn": input_lfn}
        return self._call(address, "EXEC_ALG", payload)[0].payload

    # -- chunked upload ------------------------------------------------------

    def _chunked_upload(self, address: str, data: bytes, purpose: str,
                        lfn: str = "") -> dict:
        transfer_id = self._new_id()
        self._call(address, "FILE_PUT_BEGIN",
                   {"transfer_id": transfer_id, "lfn": lfn, "size": len(data),
                    "checksum": fnv1a64_hex(data), "purpose": purpose})
        for seq, chunk in enumerate(storage.iter_chunks(data)):
            self._call(address, "FILE_CHUNK",
                       {"transfer_id": transfer_id, "seq": seq,
                        "data": base64.b64encode(chunk).decode("ascii")})
        return self._call(address, "FILE_PUT_END", {"transfer_id": transfer_id})[0].payload
