"""Shared fixtures and independent reference implementations.

The reference implementations here (hashing, byte-level file assembly)
are deliberately written from the definitions rather than imported from
the package, so tests check two independent routes.
"""

from __future__ import annotations

import struct
from datetime import date, timedelta
from random import Random

import pytest

from mgvo.dicom import (
    DicomFile,
    DicomTag,
    make_element,
)


def reference_fnv1a64(data: bytes) -> int:
    """Brute-force FNV-1a 64 straight from the per-byte recurrence."""
    state = 0xCBF29CE484222325
    for byte in data:
        state = ((state ^ byte) * 0x100000001B3) % 2**64
    return state


def reference_fnv1a64_hex(data: bytes) -> str:
    return format(reference_fnv1a64(data), "016x")


# -- hand-rolled byte assembly (independent of write_dicom) -------------------


def raw_element(group: int, element: int, vr: str, value: bytes) -> bytes:
    """Assemble one explicit-VR little-endian element by hand."""
    head = struct.pack("<HH", group, element) + vr.encode("ascii")
    if vr == "OW":
        return head + struct.pack("<HI", 0, len(value)) + value
    return head + struct.pack("<H", len(value)) + value


def raw_file(*elements: bytes) -> bytes:
    return bytes(128) + b"DICM" + b"".join(elements)


# -- random valid subset files -------------------------------------------------

_TEXT_VRS = ("PN", "LO", "CS", "DA", "AS")
_TEXT_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789 ^.-"


def random_dicom_file(rng: Random) -> DicomFile:
    """A random valid DicomFile: required UID, random known and unknown
    tags with supported VRs, optionally a consistent pixel block."""
    elements = {}

    def put(tag, vr, value):
        elements[tag] = make_element(tag, vr, value)

    put(DicomTag(0x0008, 0x0018), "UI", _random_uid(rng))
    if rng.random() < 0.8:
        day = date(1995, 1, 1) + timedelta(days=rng.randrange(8000))
        put(DicomTag(0x0008, 0x0020), "DA", day.strftime("%Y%m%d"))
    if rng.random() < 0.8:
        put(DicomTag(0x0010, 0x0010), "PN", _random_text(rng))
        put(DicomTag(0x0010, 0x0020), "LO", _random_text(rng))
    if rng.random() < 0.5:
        put(DicomTag(0x0010, 0x0040), "CS", rng.choice("FM"))
    # a few unknown-but-supported elements, preserved verbatim
    for _ in range(rng.randrange(0, 4)):
        group = rng.choice([0x0009, 0x0019, 0x0021, 0x0033])
        tag = DicomTag(group, rng.randrange(0x10, 0xFF))
        vr = rng.choice(_TEXT_VRS + ("UI", "US", "OW"))
        if vr == "US":
            put(tag, vr, rng.randrange(0, 65536))
        elif vr == "OW":
            put(tag, vr, bytes(rng.randrange(256) for _ in range(2 * rng.randrange(0, 8))))
        elif vr == "UI":
            put(tag, vr, _random_uid(rng))
        else:
            put(tag, vr, _random_text(rng))
    if rng.random() < 0.6:
        rows = rng.randrange(1, 5)
        cols = rng.randrange(1, 5)
        pixels = bytes(rng.randrange(256) for _ in range(rows * cols * 2))
        put(DicomTag(0x0028, 0x0010), "US", rows)
        put(DicomTag(0x0028, 0x0011), "US", cols)
        put(DicomTag(0x0028, 0x0100), "US", 16)
        put(DicomTag(0x7FE0, 0x0010), "OW", pixels)
    ordered = tuple(elements[tag] for tag in sorted(elements))
    return DicomFile(ordered)


def _random_uid(rng: Random) -> str:
    return "1." + ".".join(str(rng.randrange(1, 10000)) for _ in range(rng.randrange(2, 6)))


def _random_text(rng: Random) -> str:
    return "".join(rng.choice(_TEXT_ALPHABET) for _ in range(rng.randrange(1, 16)))


@pytest.fixture
def rng() -> Random:
    return Random(0xD1C0)


# -- a bare in-process VO (no data) ------------------------------------------


class MiniVo:
    """Central + site nodes on a loopback transport, no synthetic data."""

    def __init__(self, tmp_path, site_names=("udine",), user="operator",
                 secret="grid-pass", seed=77):
        from random import Random as _Random

        from mgvo.central import CentralNode
        from mgvo.client import GridClient
        from mgvo.federation import FederationConfig
        from mgvo.node import SiteNode
        from mgvo.transport import LoopbackTransport, SimClock

        self.clock = SimClock()
        self.transport = LoopbackTransport(self.clock)
        self.central = CentralNode(self.clock, _Random(seed))
        self.central.register_user(user, secret)
        self.transport.register("central", self.central.handle_frame)
        self.nodes = {}
        for index, name in enumerate(site_names):
            node = SiteNode(
                name, "central", self.transport, self.clock,
                store_root=tmp_path / name / "store",
                catalog_log=tmp_path / name / "catalog.log",
                jobs_log=tmp_path / name / "jobs.log",
                seed=seed + index + 1,
                config=FederationConfig(fanout_parallel=False),
            )
            self.transport.register(name, node.handle_frame)
            node.register_with_central(name)
            self.nodes[name] = node
        self.client = GridClient(self.transport, "central", seed=seed + 100)
        self.token = self.client.login(user, secret)

    def node(self, name=None):
        if name is None:
            name = next(iter(self.nodes))
        return self.nodes[name]

    def close(self):
        for node in self.nodes.values():
            node.close()


@pytest.fixture
def mini_vo(tmp_path):
    vo = MiniVo(tmp_path)
    yield vo
    vo.close()


@pytest.fixture
def duo_vo(tmp_path):
    vo = MiniVo(tmp_path, site_names=("cambridge", "udine"))
    yield vo
    vo.close()
