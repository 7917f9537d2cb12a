"""Deterministic multi-node test fabric.

Builds a whole VO in-process: simulated clock, loopback transport with
fault injection, a central node, and per-site nodes populated with
synthetic files ingested through the real ADD path. The same seed always
produces byte-identical catalog logs and, with parallel fan-out
disabled, identical message traces.

The centralized oracle replays the per-site catalog logs directly
(bypassing every network path) and answers queries with a naive full
scan written independently of the catalog's compiled evaluator; it is
the reference that federated results are measured against.

Scenario text format: `key=value` lines, blank lines between blocks.
`site=<name>` opens a site section whose `patients=` / `images=` lines
follow; `seed=`, `fault=<site>:HALT` / `fault=<site>:DELAY:<ms>` and
`query=<text>` lines apply to the whole scenario.
"""

from __future__ import annotations

import shutil
import struct
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from random import Random

from mgvo import query as q
from mgvo import results
from mgvo.central import CentralNode
from mgvo.client import GridClient
from mgvo.dicom import (
    DicomFile,
    TAG_BITS_ALLOCATED,
    TAG_COLUMNS,
    TAG_IMAGE_LATERALITY,
    TAG_PATIENT_BIRTH_DATE,
    TAG_PATIENT_ID,
    TAG_PATIENT_NAME,
    TAG_PATIENT_SEX,
    TAG_PIXEL_DATA,
    TAG_ROWS,
    TAG_SOP_INSTANCE_UID,
    TAG_STUDY_DATE,
    format_da,
    make_element,
    parse_da,
    write_dicom,
)
from mgvo.errors import MgvoError
from mgvo.federation import FederationConfig
from mgvo.node import SiteNode
from mgvo.transport import FAULT_DELAY, FAULT_HALT, LoopbackTransport, SimClock

HARNESS_USER = "operator"
HARNESS_SECRET = "grid-pass"

# Hard sanity caps; the randomized equivalence suites stay within
# 200 patients / 1000 images per site, the canned two-site fixture
# mirrors real holdings (813/2798 and 489/4663).
MAX_PATIENTS = 1000
MAX_IMAGES = 5000

_STUDY_WINDOW_START = date(2002, 6, 1)
_STUDY_WINDOW_DAYS = 700


class ScenarioError(MgvoError):
    pass


@dataclass(frozen=True)
class SiteSpec:
    name: str
    n_patients: int
    n_images: int

    def validate(self) -> None:
        if not 0 <= self.n_patients <= MAX_PATIENTS:
            raise ScenarioError(f"{self.name}: n_patients {self.n_patients} out of range")
        if not 0 <= self.n_images <= MAX_IMAGES:
            raise ScenarioError(f"{self.name}: n_images {self.n_images} out of range")
        if self.n_images < self.n_patients:
            raise ScenarioError(
                f"{self.name}: every patient needs at least one image "
                f"({self.n_patients} patients > {self.n_images} images)")


@dataclass(frozen=True)
class Fault:
    site: str
    kind: str  # FAULT_HALT or FAULT_DELAY
    delay_ms: int = 0


@dataclass
class Scenario:
    seed: int
    sites: list[SiteSpec]
    faults: list[Fault] = field(default_factory=list)
    queries: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if not 1 <= len(self.sites) <= 4:
            raise ScenarioError(f"{len(self.sites)} sites; a VO has 1 to 4")
        names = [spec.name for spec in self.sites]
        if len(set(names)) != len(names):
            raise ScenarioError("duplicate site names")
        for spec in self.sites:
            spec.validate()
        for fault in self.faults:
            if fault.site not in names:
                raise ScenarioError(f"fault for unknown site {fault.site!r}")
            if fault.kind not in (FAULT_HALT, FAULT_DELAY):
                raise ScenarioError(f"unknown fault kind {fault.kind!r}")

    def to_text(self) -> str:
        lines = [f"seed={self.seed}"]
        for fault in self.faults:
            if fault.kind == FAULT_HALT:
                lines.append(f"fault={fault.site}:HALT")
            else:
                lines.append(f"fault={fault.site}:DELAY:{fault.delay_ms}")
        for text in self.queries:
            lines.append(f"query={text}")
        for spec in self.sites:
            lines.append("")
            lines.append(f"site={spec.name}")
            lines.append(f"patients={spec.n_patients}")
            lines.append(f"images={spec.n_images}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Scenario":
        seed = None
        sites: list[SiteSpec] = []
        faults: list[Fault] = []
        queries: list[str] = []
        current: "dict | None" = None

        def flush():
            if current is not None:
                sites.append(SiteSpec(current["name"], current.get("patients", 0),
                                      current.get("images", 0)))

        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ScenarioError(f"line {lineno}: expected key=value")
            if key == "seed":
                seed = int(value)
            elif key == "site":
                flush()
                current = {"name": value}
            elif key in ("patients", "images"):
                if current is None:
                    raise ScenarioError(f"line {lineno}: {key}= before any site=")
                current[key] = int(value)
            elif key == "fault":
                parts = value.split(":")
                if len(parts) == 2 and parts[1] == "HALT":
                    faults.append(Fault(parts[0], FAULT_HALT))
                elif len(parts) == 3 and parts[1] == "DELAY":
                    faults.append(Fault(parts[0], FAULT_DELAY, int(parts[2])))
                else:
                    raise ScenarioError(f"line {lineno}: bad fault {value!r}")
            elif key == "query":
                queries.append(value)
            else:
                raise ScenarioError(f"line {lineno}: unknown key {key!r}")
        flush()
        if seed is None:
            raise ScenarioError("scenario has no seed=")
        scenario = cls(seed, sites, faults, queries)
        scenario.validate()
        return scenario


def two_site_holdings_scenario(seed: int = 5050) -> Scenario:
    """The canned two-site fixture sized like real hospital holdings
    (813/2798 and 489/4663); all content synthetic."""
    return Scenario(seed, [
        SiteSpec("cambridge", 813, 2798),
        SiteSpec("udine", 489, 4663),
    ])


# -- synthetic files ----------------------------------------------------------


def synthetic_file(rng: Random, sop_uid: str, patient_id: str, sex: str,
                   age_years: int, laterality: str, study_date: date) -> DicomFile:
    """A 4x4-pixel subset file with a birth date that yields the given
    completed age at the study date."""
    anniversary = _years_before(study_date, age_years)
    birth = anniversary - timedelta(days=rng.randint(0, 360))
    pixels = struct.pack("<16H", *(rng.randrange(0, 65536) for _ in range(16)))
    elements = (
        make_element(TAG_SOP_INSTANCE_UID, "UI", sop_uid),
        make_element(TAG_STUDY_DATE, "DA", format_da(study_date)),
        make_element(TAG_PATIENT_NAME, "PN", f"Synthetic^{patient_id}"),
        make_element(TAG_PATIENT_ID, "LO", patient_id),
        make_element(TAG_PATIENT_BIRTH_DATE, "DA", format_da(birth)),
        make_element(TAG_PATIENT_SEX, "CS", sex),
        make_element(TAG_IMAGE_LATERALITY, "CS", laterality),
        make_element(TAG_ROWS, "US", 4),
        make_element(TAG_COLUMNS, "US", 4),
        make_element(TAG_BITS_ALLOCATED, "US", 16),
        make_element(TAG_PIXEL_DATA, "OW", pixels),
    )
    return DicomFile(elements)


def _years_before(day: date, years: int) -> date:
    try:
        return day.replace(year=day.year - years)
    except ValueError:  # Feb 29 and no leap year that far back
        return day.replace(year=day.year - years, day=28)


def random_query_text(rng: Random, pseudonyms: "list[str] | None" = None) -> str:
    """A random valid conjunctive query over the generator's value ranges."""
    target = rng.choice(["patients", "images"])
    attrs = [q.ATTR_PATIENT_SEX, q.ATTR_PATIENT_AGE, q.ATTR_IMAGE_LATERALITY,
             q.ATTR_IMAGE_KIND, q.ATTR_IMAGE_STUDY_DATE]
    if pseudonyms:
        attrs.append(q.ATTR_PATIENT_ID)
    chosen = rng.sample(attrs, rng.randint(1, min(3, len(attrs))))
    terms = []
    for attr in chosen:
        if attr == q.ATTR_PATIENT_SEX:
            terms.append(f"patient.sex = '{rng.choice('FM')}'")
        elif attr == q.ATTR_IMAGE_LATERALITY:
            terms.append(f"image.laterality = '{rng.choice('LR')}'")
        elif attr == q.ATTR_IMAGE_KIND:
            terms.append(f"image.kind = '{rng.choice(['ORIGINAL', 'SMF'])}'")
        elif attr == q.ATTR_PATIENT_ID:
            terms.append(f"patient.id = '{rng.choice(pseudonyms)}'")
        elif attr == q.ATTR_PATIENT_AGE:
            if rng.random() < 0.5:
                lo = rng.randint(25, 80)
                terms.append(f"patient.age BETWEEN {lo} AND {rng.randint(lo, 85)}")
            else:
                terms.append(f"patient.age = '{rng.randint(30, 80)}'")
        else:
            start = _STUDY_WINDOW_START + timedelta(days=rng.randint(0, _STUDY_WINDOW_DAYS))
            end = start + timedelta(days=rng.randint(0, 365))
            terms.append(
                f"image.study_date BETWEEN {format_da(start)} AND {format_da(end)}")
    return f"SELECT {target} WHERE " + " AND ".join(terms)


# -- the in-process VO -----------------------------------------------------------


class GridHarness:
    """A populated in-process VO plus the controls tests need."""

    def __init__(self, scenario: Scenario, root: Path):
        scenario.validate()
        self.scenario = scenario
        self.root = Path(root)
        self.clock = SimClock()
        self.transport = LoopbackTransport(self.clock)
        self.central = CentralNode(self.clock, Random(scenario.seed ^ 0xC3A7))
        self.central.register_user(HARNESS_USER, HARNESS_SECRET)
        self.transport.register("central", self.central.handle_frame)
        self.nodes: dict[str, SiteNode] = {}
        for index, spec in enumerate(scenario.sites):
            site_dir = self.root / spec.name
            node = SiteNode(
                spec.name, "central", self.transport, self.clock,
                store_root=site_dir / "store",
                catalog_log=site_dir / "catalog.log",
                jobs_log=site_dir / "jobs.log",
                seed=scenario.seed ^ (0xBEEF + index),
                config=FederationConfig(fanout_parallel=False),
            )
            self.transport.register(spec.name, node.handle_frame)
            node.register_with_central(spec.name)
            self.nodes[spec.name] = node
        self.client = GridClient(self.transport, "central", seed=scenario.seed ^ 0xF00D)
        self.client.login(HARNESS_USER, HARNESS_SECRET)
        self._populate()
        for fault in scenario.faults:
            self.inject_fault(fault.site, fault.kind, fault.delay_ms)
        self.transport.reset_counters()

    def _populate(self) -> None:
        rng = Random(self.scenario.seed)
        for site_index, spec in enumerate(self.scenario.sites):
            patients = []
            for i in range(spec.n_patients):
                patients.append({
                    "pid": f"P-{site_index}-{i:05d}",
                    "sex": rng.choice("FM"),
                    "age": rng.randint(30, 80),
                })
            for j in range(spec.n_images):
                patient = patients[j] if j < len(patients) else rng.choice(patients)
                study = _STUDY_WINDOW_START + timedelta(days=rng.randint(0, _STUDY_WINDOW_DAYS))
                file = synthetic_file(
                    rng,
                    sop_uid=f"1.2.826.0.1.{site_index + 1}.{j + 1}",
                    patient_id=patient["pid"],
                    sex=patient["sex"],
                    age_years=patient["age"],
                    laterality=rng.choice("LR"),
                    study_date=study,
                )
                self.client.add(spec.name, write_dicom(file))

    # -- controls ---------------------------------------------------------------

    def inject_fault(self, site: str, kind: str, delay_ms: int = 0) -> None:
        self.transport.set_fault(site, kind, delay_ms)

    def clear_fault(self, site: str) -> None:
        self.transport.set_fault(site, None)

    def advance_clock(self, ms: int) -> None:
        self.clock.advance(ms)

    def federated_query(self, text: str, origin: "str | None" = None) -> results.ResultSet:
        site = origin if origin is not None else self.scenario.sites[0].name
        xml = self.client.query(site, text)
        return results.parse_resultset(xml)

    def transfer(self, lfn: str, from_site: str, to_site: str) -> str:
        return self.nodes[from_site].push_file(lfn, to_site, self.client.token)

    def remote_request_count(self) -> int:
        return self.transport.kind_counts.get("QUERY_REMOTE_REQ", 0)

    def catalog_log_path(self, site: str) -> Path:
        return self.root / site / "catalog.log"

    def dump_trace(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.transport.trace) + "\n", encoding="utf-8")

    def oracle(self) -> "OracleStore":
        return OracleStore.from_logs(
            {spec.name: self.catalog_log_path(spec.name) for spec in self.scenario.sites})

    def close(self) -> None:
        for node in self.nodes.values():
            node.close()

    def destroy(self) -> None:
        self.close()
        shutil.rmtree(self.root, ignore_errors=True)


def generate_scenario(scenario: Scenario, root: Path) -> GridHarness:
    """Build and populate an in-process VO for the given scenario."""
    return GridHarness(scenario, root)


# -- the centralized oracle ----------------------------------------------------------


@dataclass(frozen=True)
class OraclePatient:
    site: str
    pseudonym: str
    sex: str
    age_years: int


@dataclass(frozen=True)
class OracleImage:
    site: str
    sop_uid: str
    lfn: str
    pseudonym: str
    laterality: str
    study_date: date
    kind: str


class OracleStore:
    """Union of all sites' rows, tagged with the owning site, built by
    replaying catalog logs directly."""

    def __init__(self):
        self.patients: list[OraclePatient] = []
        self.images: list[OracleImage] = []

    @classmethod
    def from_logs(cls, logs: dict[str, Path]) -> "OracleStore":
        store = cls()
        for site, path in logs.items():
            for line in Path(path).read_text(encoding="utf-8").splitlines():
                if not line:
                    continue
                fields = line.split("|")
                if fields[0] == "P":
                    store.patients.append(
                        OraclePatient(site, fields[1], fields[2], int(fields[3])))
                elif fields[0] == "I":
                    store.images.append(OracleImage(
                        site, fields[1], fields[2], fields[3], fields[4],
                        parse_da(fields[5]), fields[6]))
        return store


def _oracle_patient_matches(pred: q.Predicate, patient: OraclePatient) -> bool:
    if pred.attr == q.ATTR_PATIENT_ID:
        return patient.pseudonym == pred.operands[0]
    if pred.attr == q.ATTR_PATIENT_SEX:
        return patient.sex == pred.operands[0]
    if pred.attr == q.ATTR_PATIENT_AGE:
        if pred.op == q.OP_EQ:
            return patient.age_years == pred.operands[0]
        lo, hi = pred.operands
        return lo <= patient.age_years <= hi
    raise ScenarioError(f"not a patient attribute: {pred.attr}")


def _oracle_image_matches(pred: q.Predicate, image: OracleImage) -> bool:
    if pred.attr == q.ATTR_IMAGE_LATERALITY:
        return image.laterality == pred.operands[0]
    if pred.attr == q.ATTR_IMAGE_KIND:
        return image.kind == pred.operands[0]
    if pred.attr == q.ATTR_IMAGE_STUDY_DATE:
        if pred.op == q.OP_EQ:
            return image.study_date == pred.operands[0]
        lo, hi = pred.operands
        return lo <= image.study_date <= hi
    raise ScenarioError(f"not an image attribute: {pred.attr}")


def oracle_query(formal: q.FormalQuery, store: OracleStore) -> list[results.Row]:
    """Naive full-scan evaluation, the independent reference."""
    patient_preds = [p for p in formal.conjuncts if p.attr.startswith("patient.")]
    image_preds = [p for p in formal.conjuncts if p.attr.startswith("image.")]
    out = []
    if formal.target == q.TARGET_PATIENTS:
        for patient in store.patients:
            if not all(_oracle_patient_matches(p, patient) for p in patient_preds):
                continue
            if image_preds:
                found = False
                for image in store.images:
                    if image.site != patient.site or image.pseudonym != patient.pseudonym:
                        continue
                    if all(_oracle_image_matches(p, image) for p in image_preds):
                        found = True
                        break
                if not found:
                    continue
            out.append(results.patient_row(patient.site, patient.pseudonym,
                                           patient.sex, patient.age_years))
        return out
    patients_by_key = {(p.site, p.pseudonym): p for p in store.patients}
    for image in store.images:
        if not all(_oracle_image_matches(p, image) for p in image_preds):
            continue
        patient = patients_by_key[(image.site, image.pseudonym)]
        if not all(_oracle_patient_matches(p, patient) for p in patient_preds):
            continue
        out.append(results.image_row(image.site, image.sop_uid, image.lfn, image.kind,
                                     image.laterality, format_da(image.study_date),
                                     image.pseudonym))
    return out
