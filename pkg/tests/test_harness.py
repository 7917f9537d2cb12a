import os
from random import Random

import pytest

from mgvo import query as q
from mgvo.harness import (
    Fault,
    GridHarness,
    OracleStore,
    Scenario,
    ScenarioError,
    SiteSpec,
    oracle_query,
    two_site_holdings_scenario,
    random_query_text,
)
from mgvo.hashing import fnv1a64_hex
from mgvo.node import RemoteError
from mgvo.storage import CHUNK_SIZE
from mgvo.transport import FAULT_DELAY, FAULT_HALT, UnknownSite


class TestScenarioModel:
    def test_text_round_trip(self):
        scenario = Scenario(42, [SiteSpec("alpha", 5, 12), SiteSpec("beta", 3, 7)],
                            [Fault("beta", FAULT_HALT), Fault("alpha", FAULT_DELAY, 2500)],
                            ["SELECT patients WHERE patient.sex = 'F'"])
        parsed = Scenario.from_text(scenario.to_text())
        assert parsed == scenario

    def test_site_count_bounds(self):
        with pytest.raises(ScenarioError):
            Scenario(1, []).validate()
        with pytest.raises(ScenarioError):
            Scenario(1, [SiteSpec(f"s{i}", 1, 1) for i in range(5)]).validate()

    def test_images_must_cover_patients(self):
        with pytest.raises(ScenarioError):
            Scenario(1, [SiteSpec("a", 5, 4)]).validate()

    def test_fault_must_name_a_site(self):
        with pytest.raises(ScenarioError):
            Scenario(1, [SiteSpec("a", 1, 1)], [Fault("b", FAULT_HALT)]).validate()

    def test_holdings_fixture_dimensions(self):
        scenario = two_site_holdings_scenario()
        assert [(s.name, s.n_patients, s.n_images) for s in scenario.sites] == [
            ("cambridge", 813, 2798), ("udine", 489, 4663)]


class TestDeterminism:
    def test_same_seed_gives_byte_identical_catalog_logs(self, tmp_path):
        scenario = Scenario(77, [SiteSpec("alpha", 4, 9), SiteSpec("beta", 3, 6)])
        first = GridHarness(scenario, tmp_path / "one")
        second = GridHarness(scenario, tmp_path / "two")
        try:
            for site in ("alpha", "beta"):
                a = first.catalog_log_path(site).read_bytes()
                b = second.catalog_log_path(site).read_bytes()
                assert a == b
        finally:
            first.close()
            second.close()

    def test_different_seeds_diverge(self, tmp_path):
        a = GridHarness(Scenario(1, [SiteSpec("alpha", 3, 5)]), tmp_path / "one")
        b = GridHarness(Scenario(2, [SiteSpec("alpha", 3, 5)]), tmp_path / "two")
        try:
            assert (a.catalog_log_path("alpha").read_bytes()
                    != b.catalog_log_path("alpha").read_bytes())
        finally:
            a.close()
            b.close()

    def test_message_trace_is_reproducible_with_sequential_fanout(self, tmp_path):
        scenario = Scenario(5, [SiteSpec("alpha", 2, 3), SiteSpec("beta", 2, 3)],
                            queries=["SELECT patients WHERE patient.sex = 'F'"])
        traces = []
        for sub in ("one", "two"):
            harness = GridHarness(scenario, tmp_path / sub)
            try:
                for text in scenario.queries:
                    harness.federated_query(text)
                traces.append(list(harness.transport.trace))
            finally:
                harness.close()
        assert traces[0] == traces[1]

    def test_requested_counts_equal_catalog_counts(self, tmp_path):
        scenario = Scenario(9, [SiteSpec("alpha", 7, 20), SiteSpec("beta", 5, 5)])
        harness = GridHarness(scenario, tmp_path)
        try:
            for spec in scenario.sites:
                node = harness.nodes[spec.name]
                assert node.catalog.patient_count == spec.n_patients
                assert node.catalog.image_count == spec.n_images
        finally:
            harness.close()

    def test_trace_lines_have_the_documented_shape(self, tmp_path):
        harness = GridHarness(Scenario(3, [SiteSpec("alpha", 1, 1)]), tmp_path)
        try:
            harness.federated_query("SELECT patients WHERE patient.sex = 'F'")
            line = harness.transport.trace[0]
            seq, src, dst, kind, nbytes = line.split("|")
            assert seq == "1"
            assert kind in ("LIST_SITES", "QUERY")
            int(nbytes)
        finally:
            harness.close()


class TestOracle:
    def test_empty_oracle_answers_empty(self):
        formal = q.parse_query("SELECT patients WHERE patient.sex = 'F'")
        assert oracle_query(formal, OracleStore()) == []

    def test_point_query_on_a_single_row(self, tmp_path):
        harness = GridHarness(Scenario(13, [SiteSpec("alpha", 1, 1)]), tmp_path)
        try:
            oracle = harness.oracle()
            target = oracle.patients[0].pseudonym
            rows = oracle_query(
                q.parse_query(f"SELECT patients WHERE patient.id = '{target}'"), oracle)
            assert len(rows) == 1
            assert rows[0].get("patient.id") == target
        finally:
            harness.close()

    def test_agrees_with_local_query_on_a_single_site(self, tmp_path):
        harness = GridHarness(Scenario(29, [SiteSpec("alpha", 20, 60)]), tmp_path)
        try:
            oracle = harness.oracle()
            node = harness.nodes["alpha"]
            rng = Random(4)
            pseudonyms = [p.pseudonym for p in oracle.patients]
            for _ in range(100):
                formal = q.parse_query(random_query_text(rng, pseudonyms))
                mine = sorted(r.fields for r in node.catalog.local_query(formal))
                reference = sorted(r.fields for r in oracle_query(formal, oracle))
                assert mine == reference
        finally:
            harness.close()


class TestFaultControls:
    def test_unknown_site_fault_rejected(self, tmp_path):
        harness = GridHarness(Scenario(3, [SiteSpec("alpha", 1, 1)]), tmp_path)
        try:
            with pytest.raises(UnknownSite):
                harness.inject_fault("nowhere", FAULT_HALT)
        finally:
            harness.close()

    def test_fault_containment(self, tmp_path):
        scenario = Scenario(8, [SiteSpec("alpha", 3, 5), SiteSpec("beta", 3, 5),
                                SiteSpec("gamma", 3, 5)])
        harness = GridHarness(scenario, tmp_path)
        try:
            text = "SELECT images WHERE image.laterality = 'R'"
            before = {part.site: sorted(r.fields for r in part.rows)
                      for part in harness.federated_query(text).sites}
            harness.inject_fault("beta", FAULT_HALT)
            after = {part.site: sorted(r.fields for r in part.rows)
                     for part in harness.federated_query(text).sites}
            assert after["alpha"] == before["alpha"]
            assert after["gamma"] == before["gamma"]
        finally:
            harness.close()


class TestReferentialIntegrity:
    def test_catalog_rows_reference_real_patients_sources_and_blobs(self, tmp_path):
        harness = GridHarness(Scenario(61, [SiteSpec("alpha", 6, 15),
                                            SiteSpec("beta", 4, 10)]), tmp_path)
        try:
            harness.client.add_algorithm("alpha", "smf-norm", "1", builtin_id="smf-norm")
            for image in harness.oracle().images[:3]:
                harness.client.execute_algorithm("alpha", "smf-norm", "1", image.lfn)
            for name, node in harness.nodes.items():
                patients, images = node.catalog.snapshot()
                known = {p.pseudonym for p in patients}
                by_sop = {i.sop_uid: i for i in images}
                for image in images:
                    assert image.pseudonym in known
                    assert node.storage.has(image.lfn), image.lfn
                    if image.kind == "SMF":
                        source = by_sop[image.source_sop_uid]
                        assert source.kind == "ORIGINAL"
        finally:
            harness.close()


class TestTransfer:
    @pytest.fixture
    def duo(self, tmp_path):
        harness = GridHarness(
            Scenario(55, [SiteSpec("alpha", 1, 1), SiteSpec("beta", 1, 1)]), tmp_path)
        yield harness
        harness.close()

    def test_transfer_then_get_at_destination(self, duo):
        data = os.urandom(CHUNK_SIZE + 17)
        lfn = "lfn:/mgvo/alpha/reports/blob-1"
        duo.nodes["alpha"].storage.put(lfn, data)
        checksum = duo.transfer(lfn, "alpha", "beta")
        assert checksum == fnv1a64_hex(data)
        assert duo.nodes["beta"].storage.get(lfn) == data

    def test_transfer_of_missing_source(self, duo):
        from mgvo.storage import SourceMissing
        with pytest.raises(SourceMissing):
            duo.transfer("lfn:/mgvo/alpha/reports/none", "alpha", "beta")

    def test_transfer_to_existing_destination(self, duo):
        lfn = "lfn:/mgvo/alpha/reports/blob-2"
        duo.nodes["alpha"].storage.put(lfn, b"x")
        duo.transfer(lfn, "alpha", "beta")
        with pytest.raises(RemoteError) as err:
            duo.transfer(lfn, "alpha", "beta")
        assert err.value.code == "DestinationExists"

    def test_ownership_is_unchanged_by_transfers(self, duo):
        text = "SELECT images WHERE image.kind = 'ORIGINAL'"
        before = sorted(r.fields for r in duo.federated_query(text).all_rows())
        image_lfn = duo.oracle().images[0].lfn
        duo.transfer(image_lfn, "alpha", "beta")
        after = sorted(r.fields for r in duo.federated_query(text).all_rows())
        assert after == before
