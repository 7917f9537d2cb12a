from datetime import date, timedelta
from random import Random

import pytest

from mgvo.catalog import (
    Catalog,
    DanglingSource,
    DuplicateSopUid,
    ImageMeta,
    KIND_ORIGINAL,
    KIND_SMF,
    NotFound,
    SexMismatch,
    VersionConflict,
    compile_query,
)
from mgvo.harness import OracleImage, OraclePatient, OracleStore, oracle_query, random_query_text
from mgvo.query import parse_query


def meta(sop, pseudonym="p" * 16, sex="F", age=50, lat="L",
         day=date(2003, 3, 10), size=100, checksum="c" * 16) -> ImageMeta:
    return ImageMeta(sop, pseudonym, sex, age, lat, day, size, checksum)


def lfn(site, name, category="images"):
    return f"lfn:/mgvo/{site}/{category}/{name}"


@pytest.fixture
def store(tmp_path):
    catalog = Catalog("udine", tmp_path / "catalog.log")
    yield catalog
    catalog.close()


class TestRegisterImage:
    def test_first_image_creates_the_patient(self, store):
        store.register_image(meta("1.1"), lfn("udine", "1.1"), KIND_ORIGINAL)
        assert store.patient_count == 1
        assert store.image_count == 1

    def test_second_image_same_patient_upserts(self, store):
        store.register_image(meta("1.1"), lfn("udine", "1.1"), KIND_ORIGINAL)
        store.register_image(meta("1.2"), lfn("udine", "1.2"), KIND_ORIGINAL)
        assert store.patient_count == 1
        assert store.image_count == 2

    def test_duplicate_sop_uid_rejected(self, store):
        store.register_image(meta("1.1"), lfn("udine", "1.1"), KIND_ORIGINAL)
        with pytest.raises(DuplicateSopUid):
            store.register_image(meta("1.1"), lfn("udine", "other"), KIND_ORIGINAL)

    def test_sex_mismatch_rejected(self, store):
        store.register_image(meta("1.1", sex="F"), lfn("udine", "1.1"), KIND_ORIGINAL)
        with pytest.raises(SexMismatch):
            store.register_image(meta("1.2", sex="M"), lfn("udine", "1.2"), KIND_ORIGINAL)

    def test_age_is_fixed_at_first_ingestion(self, store):
        store.register_image(meta("1.1", age=50), lfn("udine", "1.1"), KIND_ORIGINAL)
        store.register_image(meta("1.2", age=51), lfn("udine", "1.2"), KIND_ORIGINAL)
        rows = store.local_query(parse_query("SELECT patients WHERE patient.sex = 'F'"))
        assert rows[0].get("patient.age") == "50"

    def test_smf_needs_an_original_source(self, store):
        with pytest.raises(DanglingSource):
            store.register_image(meta("2.1"), lfn("udine", "2.1", "smf"), KIND_SMF,
                                 source_sop_uid="nope")

    def test_smf_source_must_be_original_not_derived(self, store):
        store.register_image(meta("1.1"), lfn("udine", "1.1"), KIND_ORIGINAL)
        store.register_image(meta("2.1"), lfn("udine", "2.1", "smf"), KIND_SMF,
                             source_sop_uid="1.1")
        with pytest.raises(DanglingSource):
            store.register_image(meta("3.1"), lfn("udine", "3.1", "smf"), KIND_SMF,
                                 source_sop_uid="2.1")

    def test_registration_never_decreases_counts(self, store):
        rng = Random(3)
        last = (0, 0)
        for i in range(50):
            store.register_image(meta(f"s{i}", pseudonym=f"{rng.randrange(10):016x}",
                                      sex="F"), lfn("udine", f"s{i}"), KIND_ORIGINAL)
            now = (store.patient_count, store.image_count)
            assert now >= last
            last = now


class TestAlgorithms:
    def test_register_twice_is_one_row(self, store):
        a = store.register_algorithm("smf-norm", "1", lfn("_builtin", "smf-norm",
                                                          "algorithms"), "c" * 16, True)
        b = store.register_algorithm("smf-norm", "1", lfn("_builtin", "smf-norm",
                                                          "algorithms"), "c" * 16, True)
        assert a == b
        assert store.find_algorithm("smf-norm", "1") == a

    def test_version_conflict_on_different_checksum(self, store):
        store.register_algorithm("cade", "2", lfn("udine", "cade-2", "algorithms"),
                                 "a" * 16, False)
        with pytest.raises(VersionConflict):
            store.register_algorithm("cade", "2", lfn("udine", "cade-2", "algorithms"),
                                     "b" * 16, False)


class TestLookupLfn:
    def test_read_your_write(self, store):
        store.register_image(meta("1.1", size=123, checksum="d" * 16),
                             lfn("udine", "1.1"), KIND_ORIGINAL)
        info = store.lookup_lfn(lfn("udine", "1.1"))
        assert (info.size_bytes, info.checksum, info.entry_kind) == (123, "d" * 16, "image")

    def test_algorithm_lookup(self, store):
        store.register_algorithm("cade", "1", lfn("udine", "cade-1", "algorithms"),
                                 "e" * 16, False)
        info = store.lookup_lfn(lfn("udine", "cade-1", "algorithms"))
        assert (info.checksum, info.entry_kind) == ("e" * 16, "algorithm")

    def test_not_found_on_fresh_catalog(self, store):
        with pytest.raises(NotFound):
            store.lookup_lfn(lfn("udine", "nothing"))


class TestLocalQuery:
    def test_empty_store_gives_empty_result(self, store):
        assert store.local_query(parse_query("SELECT patients WHERE patient.sex = 'F'")) == []

    def test_point_lookup(self, store):
        store.register_image(meta("1.1", pseudonym="a" * 16), lfn("udine", "1.1"),
                             KIND_ORIGINAL)
        rows = store.local_query(parse_query(f"SELECT patients WHERE patient.id = '{'a' * 16}'"))
        assert len(rows) == 1
        assert rows[0].get("patient.id") == "a" * 16

    def test_patients_with_image_predicates_require_one_matching_image(self, store):
        # patient has an early L image and a late R image; a conjunction
        # demanding an L image in the late window must not match
        store.register_image(meta("1.1", lat="L", day=date(2002, 1, 1)),
                             lfn("udine", "1.1"), KIND_ORIGINAL)
        store.register_image(meta("1.2", lat="R", day=date(2003, 6, 1)),
                             lfn("udine", "1.2"), KIND_ORIGINAL)
        hit = store.local_query(parse_query(
            "SELECT patients WHERE image.laterality = 'L'"))
        assert len(hit) == 1
        miss = store.local_query(parse_query(
            "SELECT patients WHERE image.laterality = 'L' "
            "AND image.study_date BETWEEN 20030101 AND 20031231"))
        assert miss == []

    def test_counting_identity(self, store):
        rng = Random(11)
        people = {f"{n:016x}": (rng.choice("FM"), rng.randint(30, 80)) for n in range(30)}
        for i in range(60):
            pseudonym = rng.choice(list(people))
            sex, age = people[pseudonym]
            store.register_image(
                meta(f"s{i}", pseudonym=pseudonym, sex=sex, age=age),
                lfn("udine", f"s{i}"), KIND_ORIGINAL)
        females = store.local_query(parse_query("SELECT patients WHERE patient.sex = 'F'"))
        males = store.local_query(parse_query("SELECT patients WHERE patient.sex = 'M'"))
        assert len(females) + len(males) == store.patient_count

    def test_compile_query_is_a_separate_step(self):
        compiled = compile_query(parse_query(
            "SELECT images WHERE patient.age BETWEEN 50 AND 60 AND image.laterality = 'L'"))
        assert len(compiled.patient_preds) == 1
        assert len(compiled.image_preds) == 1


def _random_rows(store: Catalog, oracle: OracleStore, rng: Random, count: int):
    pseudonyms = [f"{rng.getrandbits(64):016x}" for _ in range(max(4, count // 5))]
    sexes = {p: rng.choice("FM") for p in pseudonyms}
    ages = {p: rng.randint(30, 80) for p in pseudonyms}
    for i in range(count):
        p = rng.choice(pseudonyms)
        day = date(2002, 6, 1) + timedelta(days=rng.randint(0, 700))
        sop = f"r{i}"
        image_lfn = lfn("udine", sop)
        store.register_image(ImageMeta(sop, p, sexes[p], ages[p], rng.choice("LR"),
                                       day, 10, "c" * 16), image_lfn, KIND_ORIGINAL)
        if not any(x.pseudonym == p for x in oracle.patients):
            oracle.patients.append(OraclePatient("udine", p, sexes[p], ages[p]))
        oracle.images.append(OracleImage("udine", sop, image_lfn, p,
                                         store.find_image(sop).laterality, day,
                                         KIND_ORIGINAL))


class TestOracleEquivalence:
    def test_matches_brute_force_filter_on_random_stores(self, store):
        rng = Random(0xFEED)
        oracle = OracleStore()
        _random_rows(store, oracle, rng, 200)
        pseudonyms = [p.pseudonym for p in oracle.patients]
        for _ in range(100):
            text = random_query_text(rng, pseudonyms)
            formal = parse_query(text)
            mine = sorted(row.fields for row in store.local_query(formal))
            reference = sorted(row.fields for row in oracle_query(formal, oracle))
            assert mine == reference, text

    def test_matches_brute_force_filter_at_ten_thousand_rows(self, tmp_path):
        big = Catalog("udine", tmp_path / "big.log")
        rng = Random(0xB16)
        oracle = OracleStore()
        _random_rows(big, oracle, rng, 10_000)
        pseudonyms = [p.pseudonym for p in oracle.patients]
        try:
            for _ in range(25):
                formal = parse_query(random_query_text(rng, pseudonyms))
                mine = sorted(row.fields for row in big.local_query(formal))
                reference = sorted(row.fields for row in oracle_query(formal, oracle))
                assert mine == reference
        finally:
            big.close()


class TestPersistence:
    def test_replay_restores_the_same_state(self, tmp_path):
        path = tmp_path / "catalog.log"
        first = Catalog("udine", path)
        first.register_image(meta("1.1"), lfn("udine", "1.1"), KIND_ORIGINAL)
        first.register_image(meta("2.1"), lfn("udine", "2.1", "smf"), KIND_SMF,
                             source_sop_uid="1.1")
        first.register_algorithm("smf-norm", "1",
                                 lfn("_builtin", "smf-norm", "algorithms"), "c" * 16, True)
        first.close()
        second = Catalog("udine", path)
        assert second.patient_count == 1
        assert second.image_count == 2
        assert second.image_count_of_kind(KIND_SMF) == 1
        assert second.find_algorithm("smf-norm", "1").builtin is True
        smf = second.find_image("2.1")
        assert smf.source_sop_uid == "1.1"
        assert smf.study_date == date(2003, 3, 10)
        second.close()

    def test_log_lines_have_the_documented_shape(self, tmp_path, store):
        store.register_image(meta("1.1"), lfn("udine", "1.1"), KIND_ORIGINAL)
        lines = (store._log_path.read_text().splitlines())
        assert lines[0] == f"P|{'p' * 16}|F|50"
        assert lines[1] == (f"I|1.1|{lfn('udine', '1.1')}|{'p' * 16}|L|20030310|"
                            f"ORIGINAL||100|{'c' * 16}")
