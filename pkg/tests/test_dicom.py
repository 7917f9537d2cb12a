import struct
from datetime import date
from random import Random

import pytest

from conftest import random_dicom_file, raw_element, raw_file, reference_fnv1a64_hex
from dicom_fixtures import MALFORMED_FIXTURES

from mgvo.dicom import (
    DicomFile,
    DicomTag,
    InvariantViolation,
    MissingPatientId,
    TAG_PATIENT_AGE,
    TAG_PATIENT_BIRTH_DATE,
    TAG_PATIENT_ID,
    TAG_PATIENT_NAME,
    TAG_PATIENT_SEX,
    TAG_SOP_INSTANCE_UID,
    age_in_years,
    anonymize,
    make_element,
    parse_dicom,
    pseudonym_for,
    write_dicom,
)


def minimal_file(extra: "dict | None" = None) -> DicomFile:
    elements = {TAG_SOP_INSTANCE_UID: make_element(TAG_SOP_INSTANCE_UID, "UI", "1.2.840.99")}
    for tag, (vr, value) in (extra or {}).items():
        elements[tag] = make_element(tag, vr, value)
    return DicomFile(tuple(elements[tag] for tag in sorted(elements)))


class TestTagRendering:
    def test_canonical_uppercase_hex(self):
        assert str(DicomTag(0x7FE0, 0x0010)) == "(7FE0,0010)"
        assert str(DicomTag(0x0008, 0x0018)) == "(0008,0018)"


class TestParseWrite:
    def test_minimal_file_has_expected_layout(self):
        # 132-byte header + one UI element: 8-byte element header + value
        data = write_dicom(minimal_file())
        value = b"1.2.840.99"  # already even, no padding
        assert len(data) == 132 + 8 + len(value)
        assert data[:128] == bytes(128)
        assert data[128:132] == b"DICM"
        assert data[132:140] == struct.pack("<HH", 8, 0x18) + b"UI" + struct.pack("<H", 10)
        assert data[140:] == value

    def test_odd_length_values_are_padded_per_vr(self):
        ui = make_element(TAG_SOP_INSTANCE_UID, "UI", "1.2.3")
        assert ui.value == b"1.2.3\x00"
        cs = make_element(TAG_PATIENT_SEX, "CS", "F")
        assert cs.value == b"F "

    def test_write_is_deterministic(self):
        file = minimal_file({TAG_PATIENT_SEX: ("CS", "F")})
        assert write_dicom(file) == write_dicom(file)

    def test_accepts_hand_assembled_bytes_with_padded_value(self):
        data = raw_file(
            raw_element(0x0008, 0x0018, "UI", b"1.2.840.9\x00"),
            raw_element(0x0010, 0x0040, "CS", b"F "),
        )
        parsed = parse_dicom(data)
        element = parsed.find(TAG_PATIENT_SEX)
        assert element.value == b"F "  # padding preserved in the raw value
        assert parsed.text(TAG_PATIENT_SEX) == "F"

    def test_round_trip_on_hand_made_pixel_file(self):
        pixels = struct.pack("<4H", 5, 10, 300, 65535)
        data = raw_file(
            raw_element(0x0008, 0x0018, "UI", b"1.2\x00"),
            raw_element(0x0028, 0x0010, "US", struct.pack("<H", 2)),
            raw_element(0x0028, 0x0011, "US", struct.pack("<H", 2)),
            raw_element(0x0028, 0x0100, "US", struct.pack("<H", 16)),
            raw_element(0x7FE0, 0x0010, "OW", pixels),
        )
        parsed = parse_dicom(data)
        assert write_dicom(parsed) == data

    def test_round_trip_identity_randomized(self):
        rng = Random(0xA11CE)
        for _ in range(250):
            file = random_dicom_file(rng)
            assert parse_dicom(write_dicom(file)) == file

    def test_unknown_tags_with_supported_vrs_survive(self):
        unknown = raw_element(0x0033, 0x0011, "LO", b"vendor")
        data = raw_file(raw_element(0x0008, 0x0018, "UI", b"1.2\x00"), unknown)
        parsed = parse_dicom(data)
        assert parsed.text(DicomTag(0x0033, 0x0011)) == "vendor"
        assert write_dicom(parsed) == data

    def test_write_rejects_broken_invariants(self):
        bad_order = DicomFile((
            make_element(TAG_PATIENT_ID, "LO", "x"),
            make_element(TAG_SOP_INSTANCE_UID, "UI", "1.2"),
        ))
        with pytest.raises(InvariantViolation):
            write_dicom(bad_order)
        with pytest.raises(InvariantViolation):
            write_dicom(DicomFile(()))  # no SOP UID


class TestMalformedInputs:
    @pytest.mark.parametrize(
        "label,data,expected",
        MALFORMED_FIXTURES,
        ids=[label for label, _, _ in MALFORMED_FIXTURES],
    )
    def test_each_fixture_raises_its_designated_error(self, label, data, expected):
        with pytest.raises(expected):
            parse_dicom(data)


class TestAgeArithmetic:
    def test_day_before_birthday(self):
        assert age_in_years(date(1950, 3, 10), date(2003, 3, 9)) == 52

    def test_on_birthday(self):
        assert age_in_years(date(1950, 3, 10), date(2003, 3, 10)) == 53


class TestAnonymize:
    def _patient_file(self):
        return minimal_file({
            TAG_PATIENT_NAME: ("PN", "Doe^Jane"),
            TAG_PATIENT_ID: ("LO", "P-17"),
            TAG_PATIENT_BIRTH_DATE: ("DA", "19500310"),
            TAG_PATIENT_SEX: ("CS", "F"),
        })

    def test_replaces_name_and_id_drops_birth_date(self):
        anon, record = anonymize(self._patient_file(), "udine", date(2003, 3, 10))
        assert anon.text(TAG_PATIENT_NAME) == "ANON"
        assert anon.find(TAG_PATIENT_BIRTH_DATE) is None
        assert anon.text(TAG_PATIENT_AGE) == "053Y"
        assert record.original_patient_id == "P-17"
        assert anon.text(TAG_PATIENT_ID) == record.pseudonym

    def test_age_boundary_day_before(self):
        anon, _ = anonymize(self._patient_file(), "udine", date(2003, 3, 9))
        assert anon.text(TAG_PATIENT_AGE) == "052Y"

    def test_pseudonym_matches_reference_loop(self):
        _, record = anonymize(self._patient_file(), "udine", date(2003, 3, 10))
        assert record.pseudonym == reference_fnv1a64_hex(b"udine:P-17")

    def test_untouched_elements_stay(self):
        anon, _ = anonymize(self._patient_file(), "s", date(2003, 1, 1))
        assert anon.text(TAG_PATIENT_SEX) == "F"
        assert anon.text(TAG_SOP_INSTANCE_UID) == "1.2.840.99"

    def test_idempotent_with_same_salt(self):
        once, record_once = anonymize(self._patient_file(), "udine", date(2003, 3, 10))
        twice, record_twice = anonymize(once, "udine", date(2003, 3, 10))
        assert twice == once
        assert record_twice.pseudonym == record_once.pseudonym

    def test_requires_patient_id(self):
        with pytest.raises(MissingPatientId):
            anonymize(minimal_file(), "s", date(2003, 1, 1))

    def test_without_birth_date_age_is_left_alone(self):
        file = minimal_file({
            TAG_PATIENT_ID: ("LO", "P-9"),
            TAG_PATIENT_AGE: ("AS", "044Y"),
        })
        anon, _ = anonymize(file, "s", date(2003, 1, 1))
        assert anon.text(TAG_PATIENT_AGE) == "044Y"

    def test_pseudonym_stability_and_salt_separation(self):
        rng = Random(99)
        seen = set()
        collisions = 0
        for i in range(10_000):
            salt = f"site{rng.randrange(4)}"
            pid = f"P-{i}"
            first = pseudonym_for(salt, pid)
            assert first == pseudonym_for(salt, pid)
            if first in seen:
                collisions += 1
            seen.add(first)
        assert collisions == 0

    def test_different_salts_give_different_pseudonyms(self):
        assert pseudonym_for("udine", "P-17") != pseudonym_for("cambridge", "P-17")
