"""Minimal DICOM Part-10 subset: read, write, anonymize.

The grid ingests a closed tag set encoded as explicit-VR little-endian
only (no sequences, no implicit VR, no compressed transfer syntaxes).
Files are immutable values; every operation returns a new DicomFile.

On-disk format: 128-byte zero preamble, "DICM", then data elements in
strictly ascending tag order. Text VRs pad to even length with a space,
UI pads with NUL, OW pads with a zero byte. OW uses the 4-byte length
form with a 2-byte reserved field; all other supported VRs use the
2-byte length form.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from datetime import date

from mgvo.errors import MgvoError
from mgvo.hashing import fnv1a64_hex

PREAMBLE_LEN = 128
MAGIC = b"DICM"

# VRs with the 4-byte length form (2 reserved bytes + u32 length).
LONG_FORM_VRS = frozenset({"OW"})
# VRs with the plain 2-byte length form.
SHORT_FORM_VRS = frozenset({"PN", "LO", "CS", "DA", "AS", "UI", "US"})
SUPPORTED_VRS = LONG_FORM_VRS | SHORT_FORM_VRS

MAX_SHORT_VALUE_LEN = 0xFFFE  # even, fits u16
MAX_LONG_VALUE_LEN = 0xFFFFFFFE  # even, fits u32 below the reserved sentinel


class DicomError(MgvoError):
    """Base class for DICOM subset errors."""


class MissingMagic(DicomError):
    pass


class UnsupportedVR(DicomError):
    def __init__(self, code: str):
        super().__init__(f"unsupported VR {code!r}")
        self.vr = code


class Truncated(DicomError):
    def __init__(self, offset: int):
        super().__init__(f"truncated at byte offset {offset}")
        self.offset = offset


class NonMonotonicTag(DicomError):
    def __init__(self, tag: "DicomTag"):
        super().__init__(f"tag {tag} out of order or duplicated")
        self.tag = tag


class PixelGeometryMismatch(DicomError):
    pass


class InvariantViolation(DicomError):
    pass


class MissingPatientId(DicomError):
    pass


@dataclass(frozen=True, order=True)
class DicomTag:
    group: int
    element: int

    def __str__(self) -> str:
        return f"({self.group:04X},{self.element:04X})"


# The supported tag set. DA values are "YYYYMMDD", AS values are "NNNY".
TAG_SOP_INSTANCE_UID = DicomTag(0x0008, 0x0018)  # UI
TAG_STUDY_DATE = DicomTag(0x0008, 0x0020)  # DA
TAG_PATIENT_NAME = DicomTag(0x0010, 0x0010)  # PN
TAG_PATIENT_ID = DicomTag(0x0010, 0x0020)  # LO
TAG_PATIENT_BIRTH_DATE = DicomTag(0x0010, 0x0030)  # DA
TAG_PATIENT_SEX = DicomTag(0x0010, 0x0040)  # CS
TAG_PATIENT_AGE = DicomTag(0x0010, 0x1010)  # AS
TAG_IMAGE_LATERALITY = DicomTag(0x0020, 0x0062)  # CS
TAG_ROWS = DicomTag(0x0028, 0x0010)  # US
TAG_COLUMNS = DicomTag(0x0028, 0x0011)  # US
TAG_BITS_ALLOCATED = DicomTag(0x0028, 0x0100)  # US
TAG_PIXEL_DATA = DicomTag(0x7FE0, 0x0010)  # OW

WELL_KNOWN_VRS = {
    TAG_SOP_INSTANCE_UID: "UI",
    TAG_STUDY_DATE: "DA",
    TAG_PATIENT_NAME: "PN",
    TAG_PATIENT_ID: "LO",
    TAG_PATIENT_BIRTH_DATE: "DA",
    TAG_PATIENT_SEX: "CS",
    TAG_PATIENT_AGE: "AS",
    TAG_IMAGE_LATERALITY: "CS",
    TAG_ROWS: "US",
    TAG_COLUMNS: "US",
    TAG_BITS_ALLOCATED: "US",
    TAG_PIXEL_DATA: "OW",
}

_PAD_BYTE = {"PN": b" ", "LO": b" ", "CS": b" ", "DA": b" ", "AS": b" ", "UI": b"\x00", "OW": b"\x00"}


@dataclass(frozen=True)
class DicomElement:
    tag: DicomTag
    vr: str
    value: bytes


def make_element(tag: DicomTag, vr: str, value: "bytes | str | int") -> DicomElement:
    """Build an element, encoding and padding the value per VR rules."""
    if vr not in SUPPORTED_VRS:
        raise UnsupportedVR(vr)
    if vr == "US":
        if isinstance(value, int):
            raw = struct.pack("<H", value)
        else:
            raw = bytes(value)
            if len(raw) % 2:
                raise InvariantViolation(f"US value for {tag} must be 16-bit words")
    elif isinstance(value, str):
        raw = value.encode("ascii")
    else:
        raw = bytes(value)
    if len(raw) % 2:
        raw += _PAD_BYTE[vr]
    limit = MAX_LONG_VALUE_LEN if vr in LONG_FORM_VRS else MAX_SHORT_VALUE_LEN
    if len(raw) > limit:
        raise InvariantViolation(f"value for {tag} exceeds {limit} bytes")
    return DicomElement(tag, vr, raw)


def _strip_padding(el: DicomElement) -> str:
    pad = " " if el.vr != "UI" else "\x00"
    return el.value.decode("ascii").rstrip(pad)


@dataclass(frozen=True)
class DicomFile:
    elements: tuple[DicomElement, ...]

    def find(self, tag: DicomTag) -> "DicomElement | None":
        for el in self.elements:
            if el.tag == tag:
                return el
        return None

    def text(self, tag: DicomTag) -> "str | None":
        """Element value decoded as text with trailing padding stripped."""
        el = self.find(tag)
        return None if el is None else _strip_padding(el)

    def us(self, tag: DicomTag) -> "int | None":
        el = self.find(tag)
        if el is None:
            return None
        return struct.unpack("<H", el.value[:2])[0]

    def da(self, tag: DicomTag) -> "date | None":
        text = self.text(tag)
        return None if text is None else parse_da(text)

    def with_element(self, el: DicomElement) -> "DicomFile":
        """Insert or replace an element, preserving ascending tag order."""
        kept = [e for e in self.elements if e.tag != el.tag]
        kept.append(el)
        kept.sort(key=lambda e: e.tag)
        return DicomFile(tuple(kept))

    def without(self, tag: DicomTag) -> "DicomFile":
        return DicomFile(tuple(e for e in self.elements if e.tag != tag))

    def validate(self) -> None:
        """Raise unless the file invariants hold."""
        prev: "DicomTag | None" = None
        for el in self.elements:
            if el.vr not in SUPPORTED_VRS:
                raise UnsupportedVR(el.vr)
            if prev is not None and el.tag <= prev:
                raise NonMonotonicTag(el.tag)
            prev = el.tag
            if len(el.value) % 2:
                raise InvariantViolation(f"odd value length at {el.tag}")
            limit = MAX_LONG_VALUE_LEN if el.vr in LONG_FORM_VRS else MAX_SHORT_VALUE_LEN
            if len(el.value) > limit:
                raise InvariantViolation(f"value too long at {el.tag}")
        if self.find(TAG_SOP_INSTANCE_UID) is None:
            raise InvariantViolation("missing SOPInstanceUID (0008,0018)")
        pixel = self.find(TAG_PIXEL_DATA)
        if pixel is not None:
            rows = self.us(TAG_ROWS)
            cols = self.us(TAG_COLUMNS)
            bits = self.us(TAG_BITS_ALLOCATED)
            if rows is None or cols is None or bits != 16:
                raise PixelGeometryMismatch(
                    "PixelData requires Rows, Columns and BitsAllocated=16"
                )
            if len(pixel.value) != rows * cols * 2:
                raise PixelGeometryMismatch(
                    f"PixelData length {len(pixel.value)} != {rows}x{cols}x2"
                )


def parse_da(text: str) -> date:
    """Parse a DA value "YYYYMMDD"."""
    if len(text) != 8 or not text.isdigit():
        raise InvariantViolation(f"bad DA value {text!r}")
    try:
        return date(int(text[:4]), int(text[4:6]), int(text[6:8]))
    except ValueError as exc:
        raise InvariantViolation(f"bad DA value {text!r}: {exc}") from None


def format_da(d: date) -> str:
    return f"{d.year:04d}{d.month:02d}{d.day:02d}"


def parse_dicom(data: bytes) -> DicomFile:
    """Parse explicit-VR little-endian bytes into a DicomFile.

    Unknown tags with supported VRs are preserved verbatim.
    """
    if len(data) < PREAMBLE_LEN + 4 or data[PREAMBLE_LEN:PREAMBLE_LEN + 4] != MAGIC:
        raise MissingMagic("no DICM magic at offset 128")
    offset = PREAMBLE_LEN + 4
    elements: list[DicomElement] = []
    prev: "DicomTag | None" = None
    total = len(data)
    while offset < total:
        if offset + 6 > total:
            raise Truncated(offset)
        group, element, vr_bytes = struct.unpack_from("<HH2s", data, offset)
        tag = DicomTag(group, element)
        try:
            vr = vr_bytes.decode("ascii")
        except UnicodeDecodeError:
            vr = repr(vr_bytes)
        if vr not in SUPPORTED_VRS:
            raise UnsupportedVR(vr)
        offset += 6
        if vr in LONG_FORM_VRS:
            if offset + 6 > total:
                raise Truncated(offset)
            length = struct.unpack_from("<I", data, offset + 2)[0]
            offset += 6
            if length > MAX_LONG_VALUE_LEN:
                raise InvariantViolation(f"value length {length} at {tag} exceeds cap")
        else:
            if offset + 2 > total:
                raise Truncated(offset)
            length = struct.unpack_from("<H", data, offset)[0]
            offset += 2
        if offset + length > total:
            raise Truncated(offset)
        if length % 2:
            raise InvariantViolation(f"odd value length at {tag}")
        if prev is not None and tag <= prev:
            raise NonMonotonicTag(tag)
        prev = tag
        elements.append(DicomElement(tag, vr, data[offset:offset + length]))
        offset += length
    parsed = DicomFile(tuple(elements))
    parsed.validate()
    return parsed


def write_dicom(file: DicomFile) -> bytes:
    """Serialize to the canonical byte form. Equal inputs give identical bytes."""
    try:
        file.validate()
    except DicomError as exc:
        if isinstance(exc, (NonMonotonicTag, PixelGeometryMismatch, UnsupportedVR)):
            raise InvariantViolation(str(exc)) from None
        raise
    out = bytearray(PREAMBLE_LEN)
    out += MAGIC
    for el in file.elements:
        out += struct.pack("<HH", el.tag.group, el.tag.element)
        out += el.vr.encode("ascii")
        if el.vr in LONG_FORM_VRS:
            out += struct.pack("<HI", 0, len(el.value))
        else:
            out += struct.pack("<H", len(el.value))
        out += el.value
    return bytes(out)


@dataclass(frozen=True)
class AnonRecord:
    original_patient_id: str
    pseudonym: str
    site_salt: str


def pseudonym_for(site_salt: str, patient_id: str) -> str:
    """Keyed FNV-1a pseudonym: hex64(fnv1a64(salt ++ ":" ++ patient id))."""
    return fnv1a64_hex(f"{site_salt}:{patient_id}".encode("utf-8"))


def age_in_years(birth: date, on: date) -> int:
    """Completed years between birth and the given date."""
    years = on.year - birth.year
    if (on.month, on.day) < (birth.month, birth.day):
        years -= 1
    return years


def anonymize(file: DicomFile, site_salt: str, study_date: date) -> tuple[DicomFile, AnonRecord]:
    """De-identify a file at ingestion.

    PatientName becomes "ANON", PatientID becomes the site-keyed pseudonym,
    PatientBirthDate is dropped and PatientAge is set to the completed age at
    study_date ("NNNY") when a birth date was present. A file whose
    PatientName is already "ANON" is treated as anonymized: its PatientID is
    kept as the pseudonym, which makes the operation idempotent.
    """
    pid_el = file.find(TAG_PATIENT_ID)
    if pid_el is None:
        raise MissingPatientId("no PatientID (0010,0020)")
    patient_id = _strip_padding(pid_el)
    if file.text(TAG_PATIENT_NAME) == "ANON":
        original, pseudonym = patient_id, patient_id
    else:
        original, pseudonym = patient_id, pseudonym_for(site_salt, patient_id)
    out = file.with_element(make_element(TAG_PATIENT_NAME, "PN", "ANON"))
    out = out.with_element(make_element(TAG_PATIENT_ID, "LO", pseudonym))
    birth = file.da(TAG_PATIENT_BIRTH_DATE)
    if birth is not None:
        years = age_in_years(birth, study_date)
        if not 0 <= years <= 999:
            raise InvariantViolation(f"age {years} outside 0..999")
        out = out.with_element(make_element(TAG_PATIENT_AGE, "AS", f"{years:03d}Y"))
        out = out.without(TAG_PATIENT_BIRTH_DATE)
    return out, AnonRecord(original, pseudonym, site_salt)
