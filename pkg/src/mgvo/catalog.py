"""Per-site metadata store: patients, images, algorithms.

An indexed in-memory store with write-through persistence to an
append-only record log, replayed at startup. Translation from a
FormalQuery to native predicates is a distinct step (compile_query) so a
relational backend could be substituted without touching callers.

Log format, one record per line (LF, UTF-8); `|` is forbidden in values:

    P|pseudonym|sex|age
    I|sop|lfn|pseudonym|lat|date|kind|source|size|checksum
    A|name|version|lfn|checksum|builtin

Concurrency: single writer (mutations serialized by a lock), readers get
consistent snapshots.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Callable

from mgvo import query as q
from mgvo import results
from mgvo.dicom import format_da, parse_da
from mgvo.errors import MgvoError

KIND_ORIGINAL = "ORIGINAL"
KIND_SMF = "SMF"


class CatalogError(MgvoError):
    pass


class DuplicateSopUid(CatalogError):
    pass


class DuplicateLfn(CatalogError):
    pass


class SexMismatch(CatalogError):
    pass


class DanglingSource(CatalogError):
    pass


class VersionConflict(CatalogError):
    pass


class NotFound(CatalogError):
    pass


@dataclass(frozen=True)
class PatientRow:
    pseudonym: str
    sex: str
    age_years: int


@dataclass(frozen=True)
class ImageRow:
    sop_uid: str
    lfn: str
    pseudonym: str
    laterality: str
    study_date: date
    kind: str
    source_sop_uid: "str | None"
    size_bytes: int
    checksum: str


@dataclass(frozen=True)
class AlgorithmRow:
    name: str
    version: str
    lfn: str
    checksum: str
    builtin: bool


@dataclass(frozen=True)
class ImageMeta:
    """Attributes extracted from an anonymized file at ingestion."""
    sop_uid: str
    pseudonym: str
    sex: str
    age_years: int
    laterality: str
    study_date: date
    size_bytes: int
    checksum: str


@dataclass(frozen=True)
class LfnInfo:
    size_bytes: "int | None"
    checksum: str
    entry_kind: str  # "image" or "algorithm"


@dataclass(frozen=True)
class CompiledQuery:
    """A FormalQuery lowered to native row predicates."""
    target: str
    patient_preds: tuple[Callable[[PatientRow], bool], ...]
    image_preds: tuple[Callable[[ImageRow], bool], ...]


def _patient_pred(pred: q.Predicate) -> Callable[[PatientRow], bool]:
    if pred.attr == q.ATTR_PATIENT_ID:
        target = pred.operands[0]
        return lambda p: p.pseudonym == target
    if pred.attr == q.ATTR_PATIENT_SEX:
        target = pred.operands[0]
        return lambda p: p.sex == target
    # patient.age
    if pred.op == q.OP_EQ:
        target = pred.operands[0]
        return lambda p: p.age_years == target
    lo, hi = pred.operands
    return lambda p: lo <= p.age_years <= hi


def _image_pred(pred: q.Predicate) -> Callable[[ImageRow], bool]:
    if pred.attr == q.ATTR_IMAGE_LATERALITY:
        target = pred.operands[0]
        return lambda i: i.laterality == target
    if pred.attr == q.ATTR_IMAGE_KIND:
        target = pred.operands[0]
        return lambda i: i.kind == target
    # image.study_date
    if pred.op == q.OP_EQ:
        target = pred.operands[0]
        return lambda i: i.study_date == target
    lo, hi = pred.operands
    return lambda i: lo <= i.study_date <= hi


def compile_query(formal: q.FormalQuery) -> CompiledQuery:
    """Lower a FormalQuery to predicates over catalog rows."""
    patient_preds = []
    image_preds = []
    for pred in formal.conjuncts:
        if pred.attr.startswith("patient."):
            patient_preds.append(_patient_pred(pred))
        else:
            image_preds.append(_image_pred(pred))
    return CompiledQuery(formal.target, tuple(patient_preds), tuple(image_preds))


def _check_value(value: str, what: str) -> str:
    if "|" in value or "\n" in value:
        raise CatalogError(f"{what} {value!r} contains a reserved character")
    return value


class Catalog:
    """Site-local store. Mutations funnel through one internal writer lock."""

    def __init__(self, site: str, log_path: "Path | None" = None):
        self.site = site
        self._patients: dict[str, PatientRow] = {}
        self._images: dict[str, ImageRow] = {}
        self._images_by_lfn: dict[str, ImageRow] = {}
        self._algorithms: dict[tuple[str, str], AlgorithmRow] = {}
        self._algorithms_by_lfn: dict[str, AlgorithmRow] = {}
        self._lock = threading.Lock()
        self._log_path = Path(log_path) if log_path is not None else None
        self._log_handle = None
        if self._log_path is not None:
            if self._log_path.exists():
                self._replay(self._log_path)
            self._log_path.parent.mkdir(parents=True, exist_ok=True)
            self._log_handle = open(self._log_path, "a", encoding="utf-8", newline="\n")

    # -- counts ----------------------------------------------------------

    @property
    def patient_count(self) -> int:
        return len(self._patients)

    @property
    def image_count(self) -> int:
        return len(self._images)

    def image_count_of_kind(self, kind: str) -> int:
        return sum(1 for row in self._images.values() if row.kind == kind)

    # -- registration ----------------------------------------------------

    def register_image(self, meta: ImageMeta, lfn: str, kind: str,
                       source_sop_uid: "str | None" = None) -> ImageRow:
        """Upsert the patient, insert the image row, append to the log."""
        with self._lock:
            return self._register_image_locked(meta, lfn, kind, source_sop_uid, log=True)

    def _register_image_locked(self, meta: ImageMeta, lfn: str, kind: str,
                               source_sop_uid: "str | None", log: bool) -> ImageRow:
        for value, what in ((meta.sop_uid, "sop_uid"), (lfn, "lfn"),
                            (meta.pseudonym, "pseudonym")):
            _check_value(value, what)
        if meta.sop_uid in self._images:
            raise DuplicateSopUid(meta.sop_uid)
        if lfn in self._images_by_lfn:
            raise DuplicateLfn(lfn)
        if kind == KIND_SMF:
            source = self._images.get(source_sop_uid or "")
            if source is None or source.kind != KIND_ORIGINAL:
                raise DanglingSource(
                    f"SMF image {meta.sop_uid} needs an ORIGINAL source, got {source_sop_uid!r}"
                )
        elif source_sop_uid is not None:
            raise CatalogError("source_sop_uid is only valid for SMF rows")
        patient = self._patients.get(meta.pseudonym)
        new_patient = None
        if patient is None:
            new_patient = PatientRow(meta.pseudonym, meta.sex, meta.age_years)
        elif patient.sex != meta.sex:
            raise SexMismatch(
                f"pseudonym {meta.pseudonym} registered as {patient.sex}, got {meta.sex}"
            )
        row = ImageRow(meta.sop_uid, lfn, meta.pseudonym, meta.laterality,
                       meta.study_date, kind, source_sop_uid, meta.size_bytes,
                       meta.checksum)
        if new_patient is not None:
            self._patients[meta.pseudonym] = new_patient
            if log:
                self._append(f"P|{new_patient.pseudonym}|{new_patient.sex}|{new_patient.age_years}")
        self._images[row.sop_uid] = row
        self._images_by_lfn[row.lfn] = row
        if log:
            self._append(
                "I|{}|{}|{}|{}|{}|{}|{}|{}|{}".format(
                    row.sop_uid, row.lfn, row.pseudonym, row.laterality,
                    format_da(row.study_date), row.kind, row.source_sop_uid or "",
                    row.size_bytes, row.checksum,
                )
            )
        return row

    def register_algorithm(self, name: str, version: str, lfn: str, checksum: str,
                           builtin: bool) -> AlgorithmRow:
        """Insert an algorithm row; identical re-registration is a no-op."""
        with self._lock:
            return self._register_algorithm_locked(name, version, lfn, checksum,
                                                   builtin, log=True)

    def _register_algorithm_locked(self, name: str, version: str, lfn: str,
                                   checksum: str, builtin: bool, log: bool) -> AlgorithmRow:
        for value, what in ((name, "name"), (version, "version"), (lfn, "lfn")):
            _check_value(value, what)
        existing = self._algorithms.get((name, version))
        if existing is not None:
            if existing.checksum != checksum:
                raise VersionConflict(f"{name} {version} already registered with a different checksum")
            return existing
        row = AlgorithmRow(name, version, lfn, checksum, builtin)
        self._algorithms[(name, version)] = row
        self._algorithms_by_lfn[lfn] = row
        if log:
            flag = "true" if builtin else "false"
            self._append(f"A|{name}|{version}|{lfn}|{checksum}|{flag}")
        return row

    # -- lookups ---------------------------------------------------------

    def find_algorithm(self, name: str, version: str) -> "AlgorithmRow | None":
        return self._algorithms.get((name, version))

    def find_image_by_lfn(self, lfn: str) -> "ImageRow | None":
        return self._images_by_lfn.get(lfn)

    def find_image(self, sop_uid: str) -> "ImageRow | None":
        return self._images.get(sop_uid)

    def lookup_lfn(self, lfn: str) -> LfnInfo:
        """Resolve an image or algorithm LFN to its size/checksum."""
        image = self._images_by_lfn.get(lfn)
        if image is not None:
            return LfnInfo(image.size_bytes, image.checksum, "image")
        algo = self._algorithms_by_lfn.get(lfn)
        if algo is not None:
            return LfnInfo(None, algo.checksum, "algorithm")
        raise NotFound(lfn)

    # -- query evaluation --------------------------------------------------

    def snapshot(self) -> tuple[list[PatientRow], list[ImageRow]]:
        with self._lock:
            return list(self._patients.values()), list(self._images.values())

    def local_query(self, formal: q.FormalQuery) -> list[results.Row]:
        """Evaluate the conjunction against local rows only.

        PATIENTS queries with image.* terms return patients having at
        least one image matching all image.* terms. Rows are ordered by
        primary key (pseudonym or sop_uid).
        """
        compiled = compile_query(formal)
        patients, images = self.snapshot()
        if compiled.target == q.TARGET_PATIENTS:
            by_patient: dict[str, list[ImageRow]] = {}
            if compiled.image_preds:
                for img in images:
                    by_patient.setdefault(img.pseudonym, []).append(img)
            out = []
            for patient in sorted(patients, key=lambda p: p.pseudonym):
                if not all(test(patient) for test in compiled.patient_preds):
                    continue
                if compiled.image_preds:
                    candidates = by_patient.get(patient.pseudonym, [])
                    if not any(all(test(img) for test in compiled.image_preds)
                               for img in candidates):
                        continue
                out.append(results.patient_row(self.site, patient.pseudonym,
                                               patient.sex, patient.age_years))
            return out
        by_pseudonym = {p.pseudonym: p for p in patients}
        out = []
        for img in sorted(images, key=lambda i: i.sop_uid):
            if not all(test(img) for test in compiled.image_preds):
                continue
            patient = by_pseudonym[img.pseudonym]
            if not all(test(patient) for test in compiled.patient_preds):
                continue
            out.append(results.image_row(self.site, img.sop_uid, img.lfn, img.kind,
                                         img.laterality, format_da(img.study_date),
                                         img.pseudonym))
        return out

    # -- persistence -------------------------------------------------------

    def _append(self, line: str) -> None:
        if self._log_handle is not None:
            self._log_handle.write(line + "\n")
            self._log_handle.flush()

    def _replay(self, path: Path) -> None:
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            fields = line.split("|")
            kind = fields[0]
            try:
                if kind == "P":
                    _, pseudonym, sex, age = fields
                    self._patients[pseudonym] = PatientRow(pseudonym, sex, int(age))
                elif kind == "I":
                    (_, sop, lfn, pseudonym, lat, day, img_kind, source, size,
                     checksum) = fields
                    row = ImageRow(sop, lfn, pseudonym, lat, parse_da(day), img_kind,
                                   source or None, int(size), checksum)
                    self._images[sop] = row
                    self._images_by_lfn[lfn] = row
                elif kind == "A":
                    _, name, version, lfn, checksum, flag = fields
                    row = AlgorithmRow(name, version, lfn, checksum, flag == "true")
                    self._algorithms[(name, version)] = row
                    self._algorithms_by_lfn[lfn] = row
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
            except ValueError as exc:
                raise CatalogError(f"{path}:{lineno}: corrupt record: {exc}") from None

    def close(self) -> None:
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None
