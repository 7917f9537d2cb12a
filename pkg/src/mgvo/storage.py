"""Per-site content store: logical file names to verified byte payloads.

Blobs are immutable; a new version means a new LFN. On-disk layout is
`<root>/<category>/<name>` plus a `<name>.meta` sidecar holding
`size|checksum`. Replicas of foreign LFNs live under
`<root>/replicas/<owner-site>/<category>/<name>` with the same sidecar
scheme so two sites' identically named files cannot collide.

Site-to-site transfer streams chunks of exactly CHUNK_SIZE bytes (the
last chunk may be shorter; a zero-byte blob is one empty chunk) and the
destination verifies the checksum before acknowledging.
"""

from __future__ import annotations

import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path

from mgvo.errors import MgvoError
from mgvo.hashing import fnv1a64_hex

CHUNK_SIZE = 262144  # 256 KiB

CATEGORIES = frozenset({"images", "smf", "reports", "algorithms"})

# The pseudo-site owning compiled-in algorithm LFNs.
BUILTIN_SITE = "_builtin"

_LFN_RE = re.compile(
    r"^lfn:/mgvo/(?P<site>[a-z0-9_][a-z0-9_-]*)/(?P<category>[a-z]+)/(?P<name>[A-Za-z0-9._-]+)$"
)


class StorageError(MgvoError):
    pass


class BadLfn(StorageError):
    pass


class AlreadyExists(StorageError):
    pass


class WrongSite(StorageError):
    pass


class NotFound(StorageError):
    pass


class ChecksumMismatch(StorageError):
    pass


class IoFailure(StorageError):
    pass


class SourceMissing(StorageError):
    pass


class DestinationExists(StorageError):
    pass


@dataclass(frozen=True)
class LFN:
    site: str
    category: str
    name: str

    def __str__(self) -> str:
        return f"lfn:/mgvo/{self.site}/{self.category}/{self.name}"

    @classmethod
    def parse(cls, text: str) -> "LFN":
        match = _LFN_RE.match(text)
        if match is None:
            raise BadLfn(f"malformed LFN {text!r}")
        category = match.group("category")
        if category not in CATEGORIES:
            raise BadLfn(f"unknown category {category!r} in {text!r}")
        return cls(match.group("site"), category, match.group("name"))


def builtin_lfn(algorithm_id: str) -> str:
    return str(LFN(BUILTIN_SITE, "algorithms", algorithm_id))


def chunk_count(size: int) -> int:
    """Chunks for a blob of the given size; a zero-byte blob is one chunk."""
    return max(1, (size + CHUNK_SIZE - 1) // CHUNK_SIZE)


def iter_chunks(data: bytes):
    """Yield the transfer chunks for a payload."""
    if not data:
        yield b""
        return
    for offset in range(0, len(data), CHUNK_SIZE):
        yield data[offset:offset + CHUNK_SIZE]


class StorageElement:
    """Blob store for one site. put is serialized per LFN; get is lock-free."""

    def __init__(self, site: str, root: Path):
        self.site = site
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, lfn_text: str) -> threading.Lock:
        with self._locks_guard:
            lock = self._locks.get(lfn_text)
            if lock is None:
                lock = self._locks[lfn_text] = threading.Lock()
            return lock

    def _paths(self, lfn: LFN) -> tuple[Path, Path]:
        if lfn.site == self.site:
            base = self.root / lfn.category
        else:
            base = self.root / "replicas" / lfn.site / lfn.category
        return base / lfn.name, base / (lfn.name + ".meta")

    def has(self, lfn_text: str) -> bool:
        data_path, meta_path = self._paths(LFN.parse(lfn_text))
        return data_path.exists() and meta_path.exists()

    def put(self, lfn_text: str, data: bytes) -> str:
        """Store an owned blob durably; returns its checksum."""
        lfn = LFN.parse(lfn_text)
        if lfn.site != self.site:
            raise WrongSite(f"{lfn_text} is owned by {lfn.site!r}, this site is {self.site!r}")
        return self._store(lfn_text, lfn, data)

    def put_replica(self, lfn_text: str, data: bytes, expected_checksum: str) -> str:
        """Store a verified replica of a foreign LFN."""
        lfn = LFN.parse(lfn_text)
        if lfn.site == self.site:
            raise WrongSite(f"{lfn_text} is owned locally; replicas are for foreign LFNs")
        if fnv1a64_hex(data) != expected_checksum:
            raise ChecksumMismatch(f"replica payload for {lfn_text} does not match declared checksum")
        return self._store(lfn_text, lfn, data)

    def _store(self, lfn_text: str, lfn: LFN, data: bytes) -> str:
        if lfn.name.endswith(".meta"):
            raise BadLfn(f"{lfn_text}: the .meta suffix is reserved for sidecars")
        with self._lock_for(lfn_text):
            data_path, meta_path = self._paths(lfn)
            if data_path.exists():
                raise AlreadyExists(lfn_text)
            checksum = fnv1a64_hex(data)
            try:
                data_path.parent.mkdir(parents=True, exist_ok=True)
                tmp = data_path.with_name(data_path.name + ".part")
                tmp.write_bytes(data)
                os.replace(tmp, data_path)
                meta_tmp = meta_path.with_name(meta_path.name + ".part")
                meta_tmp.write_text(f"{len(data)}|{checksum}\n", encoding="utf-8")
                os.replace(meta_tmp, meta_path)
            except OSError as exc:
                raise IoFailure(f"storing {lfn_text}: {exc}") from None
            return checksum

    def stat(self, lfn_text: str) -> tuple[int, str]:
        """(size, checksum) from the sidecar, without reading the blob."""
        _, meta_path = self._paths(LFN.parse(lfn_text))
        if not meta_path.exists():
            raise NotFound(lfn_text)
        size_text, checksum = meta_path.read_text(encoding="utf-8").strip().split("|")
        return int(size_text), checksum

    def get(self, lfn_text: str) -> bytes:
        """Read a blob, verifying its checksum against the sidecar."""
        data_path, meta_path = self._paths(LFN.parse(lfn_text))
        if not data_path.exists() or not meta_path.exists():
            raise NotFound(lfn_text)
        try:
            data = data_path.read_bytes()
            size_text, checksum = meta_path.read_text(encoding="utf-8").strip().split("|")
        except OSError as exc:
            raise IoFailure(f"reading {lfn_text}: {exc}") from None
        if len(data) != int(size_text) or fnv1a64_hex(data) != checksum:
            raise ChecksumMismatch(f"{lfn_text}: stored bytes do not match recorded checksum")
        return data
