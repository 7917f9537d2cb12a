"""Site node: the per-hospital endpoint serving the six grid services.

AUTH is proxied to the central node; every other request needs a token,
validated centrally and cached for min(60 s, remaining lifetime).
ADD anonymizes at ingress, stores the canonical bytes, and registers the
catalog row, so raw identities never leave the ingesting site. RETRIEVE
streams chunked responses. EXEC_ALG brokers jobs to the site owning the
input file, staging executable blobs there first when needed.
"""

from __future__ import annotations

import base64
import re
import secrets
import threading
from pathlib import Path
from random import Random

from mgvo import catalog as cat
from mgvo import compute, federation, storage, transport, wire
from mgvo import query as q
from mgvo import results
from mgvo.central import SiteInfo
from mgvo.dicom import (
    TAG_IMAGE_LATERALITY,
    TAG_PATIENT_AGE,
    TAG_PATIENT_ID,
    TAG_PATIENT_SEX,
    TAG_SOP_INSTANCE_UID,
    TAG_STUDY_DATE,
    DicomFile,
    anonymize,
    make_element,
    parse_dicom,
    write_dicom,
)
from mgvo.errors import MgvoError
from mgvo.hashing import fnv1a64_hex

# Above this many raw bytes the client must use the chunked FILE_* path
# (base64 of anything larger would approach the 16 MiB frame cap).
INLINE_FILE_LIMIT = 12 * 1024 * 1024

TOKEN_CACHE_TTL_MS = 60 * 1000

_AGE_RE = re.compile(r"^(\d{3})Y$")


class NodeError(MgvoError):
    pass


class MissingAttribute(NodeError):
    pass


class RemoteError(MgvoError):
    """An ERROR frame from a peer, re-raised with its original code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self._code = code

    @property
    def code(self) -> str:
        return self._code


class SiteNode:
    def __init__(self, name: str, central_address: str, transport_, clock,
                 store_root: Path, catalog_log: "Path | None" = None,
                 jobs_log: "Path | None" = None, site_salt: "str | None" = None,
                 seed: "int | None" = None,
                 config: "federation.FederationConfig | None" = None):
        self.site = name
        self.central_address = central_address
        self.transport = transport_
        self.clock = clock
        self.site_salt = site_salt if site_salt is not None else name
        self.config = config if config is not None else federation.FederationConfig()
        self.storage = storage.StorageElement(name, Path(store_root))
        self.catalog = cat.Catalog(name, catalog_log)
        self.jobs_log = Path(jobs_log) if jobs_log is not None else None
        self._rng = Random(seed if seed is not None else secrets.randbits(64))
        self._rng_lock = threading.Lock()
        self._token_cache: dict[str, tuple[str, int, int]] = {}  # token -> (user, cache_exp, exp)
        self._members: dict[str, str] = {}
        self._uploads: dict[str, dict] = {}
        self._uploads_lock = threading.Lock()
        self._job_locks: dict[tuple[str, str, str], threading.Lock] = {}
        self._job_locks_guard = threading.Lock()

    def new_id(self) -> str:
        with self._rng_lock:
            return f"{self._rng.getrandbits(64):016x}"

    def close(self) -> None:
        self.catalog.close()

    # -- central interactions ------------------------------------------------

    def _central(self, kind: str, payload: dict, token: "str | None" = None) -> wire.Frame:
        frame = wire.Frame(kind, self.new_id(), payload, token)
        reply = self.transport.request(self.central_address, frame, origin=self.site)[0]
        if reply.kind == "ERROR":
            raise RemoteError(str(reply.payload.get("code", "Error")),
                              str(reply.payload.get("message", "")))
        return reply

    def register_with_central(self, own_address: str) -> None:
        self._central("REGISTER_SITE", {"name": self.site, "address": own_address})

    def refresh_members(self, token: str) -> "list[SiteInfo]":
        """Fetch the authoritative member list; done before every fan-out."""
        reply = self._central("LIST_SITES", {}, token)
        members = [SiteInfo(entry["name"], entry["address"])
                   for entry in reply.payload.get("sites", [])]
        self._members = {info.name: info.address for info in members}
        return members

    def _site_address(self, site_name: str, token: str) -> "str | None":
        if site_name not in self._members:
            self.refresh_members(token)
        return self._members.get(site_name)

    def _require_user(self, frame: wire.Frame) -> str:
        token = frame.token
        if not token:
            raise wire.Unauthenticated("request carries no token")
        now = self.clock.now_ms()
        cached = self._token_cache.get(token)
        if cached is not None:
            user, cache_exp, exp = cached
            if now < cache_exp and now < exp:
                return user
            self._token_cache.pop(token, None)
        try:
            reply = self._central("VALIDATE", {"token": token})
        except RemoteError as exc:
            raise wire.Unauthenticated(str(exc)) from None
        except transport.TransportError as exc:
            raise wire.Unauthenticated(f"cannot validate token: {exc}") from None
        user = str(reply.payload["user"])
        expires_at = int(reply.payload["expires_at_ms"])
        cache_exp = now + min(TOKEN_CACHE_TTL_MS, max(0, expires_at - now))
        self._token_cache[token] = (user, cache_exp, expires_at)
        return user

    # -- ingestion -------------------------------------------------------------

    def _image_meta(self, anon: DicomFile, size: int, checksum: str) -> cat.ImageMeta:
        sop = anon.text(TAG_SOP_INSTANCE_UID)
        pseudonym = anon.text(TAG_PATIENT_ID)
        sex = anon.text(TAG_PATIENT_SEX)
        lat = anon.text(TAG_IMAGE_LATERALITY)
        study = anon.da(TAG_STUDY_DATE)
        age_text = anon.text(TAG_PATIENT_AGE)
        if study is None:
            raise MissingAttribute("StudyDate (0008,0020) is required")
        if not pseudonym:
            raise MissingAttribute("PatientID (0010,0020) is required")
        if sex not in ("F", "M"):
            raise MissingAttribute("PatientSex (0010,0040) must be F or M")
        if lat not in ("L", "R"):
            raise MissingAttribute("ImageLaterality (0020,0062) must be L or R")
        if age_text is None:
            raise MissingAttribute("PatientBirthDate or PatientAge is required")
        match = _AGE_RE.match(age_text)
        if match is None:
            raise MissingAttribute(f"PatientAge {age_text!r} is not NNNY")
        return cat.ImageMeta(sop, pseudonym, sex, int(match.group(1)), lat, study,
                             size, checksum)

    def ingest_dicom(self, raw: bytes) -> dict:
        """The Add service: anonymize at ingress, store, register."""
        parsed = parse_dicom(raw)
        study = parsed.da(TAG_STUDY_DATE)
        if study is None:
            raise MissingAttribute("StudyDate (0008,0020) is required")
        anon, record = anonymize(parsed, self.site_salt, study)
        data = write_dicom(anon)
        meta_probe = self._image_meta(anon, len(data), "")
        lfn = str(storage.LFN(self.site, "images", meta_probe.sop_uid))
        checksum = self.storage.put(lfn, data)
        meta = cat.ImageMeta(meta_probe.sop_uid, meta_probe.pseudonym, meta_probe.sex,
                             meta_probe.age_years, meta_probe.laterality,
                             meta_probe.study_date, len(data), checksum)
        self.catalog.register_image(meta, lfn, cat.KIND_ORIGINAL)
        return {
            "lfn": lfn,
            "sop_uid": meta.sop_uid,
            "pseudonym": record.pseudonym,
            "size": len(data),
            "checksum": checksum,
        }

    # -- transfers ---------------------------------------------------------------

    def push_file(self, lfn_text: str, to_site: str, token: str) -> str:
        """Stream a blob to a peer, which records it as a verified replica."""
        if not self.storage.has(lfn_text):
            raise storage.SourceMissing(lfn_text)
        data = self.storage.get(lfn_text)
        checksum = fnv1a64_hex(data)
        address = self._site_address(to_site, token)
        if address is None:
            raise transport.UnknownSite(to_site)
        transfer_id = self.new_id()
        self._peer(address, "FILE_PUT_BEGIN",
                   {"transfer_id": transfer_id, "lfn": lfn_text, "size": len(data),
                    "checksum": checksum, "purpose": "replica"}, token)
        for seq, chunk in enumerate(storage.iter_chunks(data)):
            self._peer(address, "FILE_CHUNK",
                       {"transfer_id": transfer_id, "seq": seq,
                        "data": base64.b64encode(chunk).decode("ascii")}, token)
        reply = self._peer(address, "FILE_PUT_END", {"transfer_id": transfer_id}, token)
        return str(reply.payload["checksum"])

    def _peer(self, address: str, kind: str, payload: dict, token: str) -> wire.Frame:
        frame = wire.Frame(kind, self.new_id(), payload, token)
        reply = self.transport.request(address, frame,
                                       self.config.per_site_timeout_ms,
                                       origin=self.site)[0]
        if reply.kind == "ERROR":
            raise RemoteError(str(reply.payload.get("code", "Error")),
                              str(reply.payload.get("message", "")))
        return reply

    def _pull_replica(self, lfn_text: str, expected_checksum: str, token: str) -> None:
        owner = storage.LFN.parse(lfn_text).site
        address = self._site_address(owner, token)
        if address is None:
            raise transport.UnknownSite(owner)
        frame = wire.Frame("RETRIEVE", self.new_id(), {"lfn": lfn_text}, token)
        replies = self.transport.request(address, frame,
                                         self.config.per_site_timeout_ms,
                                         origin=self.site)
        first = replies[0]
        if first.kind == "ERROR":
            raise RemoteError(str(first.payload.get("code", "Error")),
                              str(first.payload.get("message", "")))
        data = b"".join(base64.b64decode(chunk.payload["data"]) for chunk in replies[1:])
        self.storage.put_replica(lfn_text, data, expected_checksum)

    # -- algorithm execution --------------------------------------------------------

    def _job_lock(self, key: tuple[str, str, str]) -> threading.Lock:
        with self._job_locks_guard:
            lock = self._job_locks.get(key)
            if lock is None:
                lock = self._job_locks[key] = threading.Lock()
            return lock

    def _log_job(self, job: compute.JobRecord) -> None:
        if self.jobs_log is not None:
            self.jobs_log.parent.mkdir(parents=True, exist_ok=True)
            with open(self.jobs_log, "a", encoding="utf-8", newline="\n") as handle:
                handle.write(job.log_line() + "\n")

    def add_algorithm(self, name: str, version: str, data: "bytes | None",
                      builtin_id: "str | None") -> dict:
        """The AddAlgorithm service; idempotent for identical re-adds."""
        if builtin_id is not None:
            if builtin_id not in compute.BUILTIN_ALGORITHMS:
                raise compute.AlgorithmNotFound(f"no builtin algorithm {builtin_id!r}")
            lfn = storage.builtin_lfn(builtin_id)
            checksum = fnv1a64_hex(f"builtin:{builtin_id}".encode("ascii"))
            row = self.catalog.register_algorithm(name, version, lfn, checksum, True)
            return {"lfn": row.lfn, "checksum": row.checksum}
        if data is None:
            raise MissingAttribute("algorithm payload or builtin id required")
        lfn = str(storage.LFN(self.site, "algorithms", f"{name}-{version}"))
        checksum = fnv1a64_hex(data)
        existing = self.catalog.find_algorithm(name, version)
        if existing is not None and existing.checksum != checksum:
            raise cat.VersionConflict(
                f"{name} {version} already registered with a different checksum")
        try:
            self.storage.put(lfn, data)
        except storage.AlreadyExists:
            _, stored = self.storage.stat(lfn)
            if stored != checksum:
                raise cat.VersionConflict(
                    f"{name} {version} blob exists with a different checksum") from None
        row = self.catalog.register_algorithm(name, version, lfn, checksum, False)
        return {"lfn": row.lfn, "checksum": row.checksum}

    def execute_algorithm(self, token: str, name: str, version: str,
                          input_lfn: str, descriptor: "dict | None" = None) -> compute.JobRecord:
        """The ExecuteAlgorithm service with the data-locality broker rule."""
        lfn = storage.LFN.parse(input_lfn)
        if lfn.site != self.site:
            if descriptor is None:
                row = self.catalog.find_algorithm(name, version)
                if row is None:
                    raise compute.AlgorithmNotFound(f"{name} {version} is not registered here")
                descriptor = {"name": row.name, "version": row.version, "lfn": row.lfn,
                              "checksum": row.checksum, "builtin": row.builtin}
            address = self._site_address(lfn.site, token)
            if address is None:
                raise compute.InputNotFound(f"{input_lfn}: site {lfn.site!r} is not a member")
            reply = self._peer(address, "EXEC_ALG",
                               {"name": name, "version": version, "input_lfn": input_lfn,
                                "algorithm": descriptor}, token)
            return _job_from_payload(reply.payload)
        return self._execute_local(token, name, version, input_lfn, descriptor)

    def _resolve_algorithm(self, name: str, version: str,
                           descriptor: "dict | None") -> tuple[str, str, bool]:
        """(lfn, checksum, builtin) from the local catalog or a forwarded
        descriptor."""
        row = self.catalog.find_algorithm(name, version)
        if row is not None:
            return row.lfn, row.checksum, row.builtin
        if descriptor is not None and descriptor.get("name") == name \
                and descriptor.get("version") == version:
            return (str(descriptor["lfn"]), str(descriptor["checksum"]),
                    bool(descriptor["builtin"]))
        raise compute.AlgorithmNotFound(f"{name} {version} is not registered here")

    def _execute_local(self, token: str, name: str, version: str, input_lfn: str,
                       descriptor: "dict | None") -> compute.JobRecord:
        started = self.clock.now_ms()
        algo_lfn, algo_checksum, builtin = self._resolve_algorithm(name, version, descriptor)
        image = self.catalog.find_image_by_lfn(input_lfn)
        if image is None:
            raise compute.InputNotFound(input_lfn)
        if image.kind != cat.KIND_ORIGINAL:
            raise compute.ExecutionFailed(
                f"{input_lfn} is a derived image; algorithms run on ORIGINAL inputs")
        out_lfn = compute.output_lfn_for(self.site, name, version, image.sop_uid)
        with self._job_lock((name, version, input_lfn)):
            if self.catalog.find_image_by_lfn(out_lfn) is not None:
                job = compute.JobRecord(self.new_id(), name, version, input_lfn, out_lfn,
                                        compute.STATUS_DONE, self.site,
                                        self.clock.now_ms() - started)
                self._log_job(job)
                return job
            input_bytes = self.storage.get(input_lfn)
            try:
                if builtin:
                    builtin_id = storage.LFN.parse(algo_lfn).name
                    out_bytes = compute.run_builtin(builtin_id, input_bytes)
                else:
                    if not self.storage.has(algo_lfn):
                        self._pull_replica(algo_lfn, algo_checksum, token)
                    out_bytes = compute.run_executable(self.storage.get(algo_lfn), input_bytes)
                out_file = parse_dicom(out_bytes)
            except compute.ExecutionFailed:
                self._log_job(compute.JobRecord(self.new_id(), name, version, input_lfn,
                                                None, compute.STATUS_FAILED, self.site,
                                                self.clock.now_ms() - started))
                raise
            except MgvoError as exc:
                self._log_job(compute.JobRecord(self.new_id(), name, version, input_lfn,
                                                None, compute.STATUS_FAILED, self.site,
                                                self.clock.now_ms() - started))
                raise compute.ExecutionFailed(f"output parse error: {exc}") from None
            uid = compute.derived_sop_uid(image.sop_uid, name, version)
            out_file = out_file.with_element(make_element(TAG_SOP_INSTANCE_UID, "UI", uid))
            out_bytes = write_dicom(out_file)
            try:
                meta_probe = self._image_meta(out_file, len(out_bytes), "")
            except MissingAttribute as exc:
                raise compute.ExecutionFailed(f"output is missing attributes: {exc}") from None
            try:
                checksum = self.storage.put(out_lfn, out_bytes)
            except storage.AlreadyExists:
                _, checksum = self.storage.stat(out_lfn)
                if checksum != fnv1a64_hex(out_bytes):
                    raise compute.ExecutionFailed(
                        f"{out_lfn} exists with different content") from None
            meta = cat.ImageMeta(meta_probe.sop_uid, meta_probe.pseudonym, meta_probe.sex,
                                 meta_probe.age_years, meta_probe.laterality,
                                 meta_probe.study_date, len(out_bytes), checksum)
            try:
                self.catalog.register_image(meta, out_lfn, cat.KIND_SMF,
                                            source_sop_uid=image.sop_uid)
            except (cat.DuplicateSopUid, cat.DuplicateLfn):
                pass  # lost a race with an identical job; same derived row
            job = compute.JobRecord(self.new_id(), name, version, input_lfn, out_lfn,
                                    compute.STATUS_DONE, self.site,
                                    self.clock.now_ms() - started)
            self._log_job(job)
            return job

    # -- dispatch ---------------------------------------------------------------

    def handle_frame(self, frame: wire.Frame) -> list[wire.Frame]:
        try:
            return self._dispatch(frame)
        except MgvoError as exc:
            return [wire.error_frame(frame.id, exc.code, str(exc))]
        except Exception as exc:  # a bug must not drop the connection
            return [wire.error_frame(frame.id, "InternalError", f"{type(exc).__name__}: {exc}")]

    def _dispatch(self, frame: wire.Frame) -> list[wire.Frame]:
        kind = frame.kind
        payload = frame.payload
        if kind == "AUTH":
            reply = self.transport.request(self.central_address, frame, origin=self.site)[0]
            return [reply]
        if kind not in wire.REQUEST_KINDS:
            raise wire.UnknownKind(kind)
        self._require_user(frame)
        req_id = frame.id

        if kind == "ADD":
            raw = _b64_field(payload, "data")
            body = self.ingest_dicom(raw)
        elif kind == "RETRIEVE":
            return self._respond_retrieve(req_id, str(payload.get("lfn", "")))
        elif kind == "QUERY":
            formal = q.parse_query(str(payload.get("query", "")))
            if formal.scope == q.SCOPE_LOCAL_ONLY:
                started = self.clock.now_ms()
                rows = self.catalog.local_query(formal)
                part = results.ok_result(self.site, rows, self.clock.now_ms() - started)
                result_set = results.merge_results([part], self.new_id())
            else:
                result_set = federation.execute_federated(self, formal, frame.token)
            body = {"xml": results.serialize_resultset(result_set),
                    "query_id": result_set.query_id}
        elif kind == "QUERY_REMOTE_REQ":
            formal = q.parse_query(str(payload.get("query", "")))
            part = federation.handle_remote(self, formal)
            body = {"site_xml": results.serialize_siteresult(part),
                    "query_id": str(payload.get("query_id", ""))}
        elif kind == "ADD_ALG":
            data = _b64_field(payload, "data") if "data" in payload else None
            builtin_id = payload.get("builtin")
            body = self.add_algorithm(str(payload.get("name", "")),
                                      str(payload.get("version", "")),
                                      data, builtin_id)
        elif kind == "EXEC_ALG":
            job = self.execute_algorithm(frame.token, str(payload.get("name", "")),
                                         str(payload.get("version", "")),
                                         str(payload.get("input_lfn", "")),
                                         payload.get("algorithm"))
            body = _job_to_payload(job)
        elif kind == "FILE_PUT_BEGIN":
            body = self._upload_begin(payload)
        elif kind == "FILE_CHUNK":
            body = self._upload_chunk(payload)
        elif kind == "FILE_PUT_END":
            body = self._upload_end(payload)
        elif kind == "LIST_SITES":
            reply = self._central("LIST_SITES", {}, frame.token)
            body = reply.payload
        else:
            raise wire.UnknownKind(kind)
        return [wire.Frame(wire.RESPONSE_KIND[kind], req_id, body, None)]

    def _respond_retrieve(self, req_id: str, lfn_text: str) -> list[wire.Frame]:
        data = self.storage.get(lfn_text)
        chunks = list(storage.iter_chunks(data))
        head = wire.Frame("RETRIEVE_RESP", req_id,
                          {"lfn": lfn_text, "size": len(data),
                           "checksum": fnv1a64_hex(data), "chunks": len(chunks)})
        frames = [head]
        for seq, chunk in enumerate(chunks):
            frames.append(wire.Frame("FILE_CHUNK", req_id,
                                     {"seq": seq,
                                      "data": base64.b64encode(chunk).decode("ascii")}))
        return frames

    # -- chunked uploads ------------------------------------------------------------

    def _upload_begin(self, payload: dict) -> dict:
        purpose = str(payload.get("purpose", "replica"))
        if purpose not in ("replica", "add"):
            raise wire.MalformedFrame(f"unknown upload purpose {purpose!r}")
        transfer_id = str(payload.get("transfer_id", ""))
        size = int(payload.get("size", -1))
        checksum = str(payload.get("checksum", ""))
        if not transfer_id or size < 0:
            raise wire.MalformedFrame("upload needs transfer_id and size")
        lfn_text = str(payload.get("lfn", ""))
        if purpose == "replica":
            lfn = storage.LFN.parse(lfn_text)
            if lfn.site == self.site:
                raise storage.WrongSite(f"{lfn_text} is owned by the destination site")
            if self.storage.has(lfn_text):
                raise storage.DestinationExists(lfn_text)
        with self._uploads_lock:
            self._uploads[transfer_id] = {
                "purpose": purpose, "lfn": lfn_text, "size": size,
                "checksum": checksum, "parts": [],
            }
        return {"transfer_id": transfer_id}

    def _upload_chunk(self, payload: dict) -> dict:
        transfer_id = str(payload.get("transfer_id", ""))
        data = _b64_field(payload, "data")
        seq = int(payload.get("seq", -1))
        with self._uploads_lock:
            state = self._uploads.get(transfer_id)
            if state is None:
                raise storage.NotFound(f"unknown transfer {transfer_id!r}")
            if seq != len(state["parts"]):
                self._uploads.pop(transfer_id, None)
                raise storage.IoFailure(f"transfer {transfer_id}: chunk {seq} out of order")
            if len(data) > storage.CHUNK_SIZE:
                self._uploads.pop(transfer_id, None)
                raise storage.IoFailure(f"transfer {transfer_id}: oversized chunk")
            state["parts"].append(data)
            received = len(state["parts"])
        return {"transfer_id": transfer_id, "received": received}

    def _upload_end(self, payload: dict) -> dict:
        transfer_id = str(payload.get("transfer_id", ""))
        with self._uploads_lock:
            state = self._uploads.pop(transfer_id, None)
        if state is None:
            raise storage.NotFound(f"unknown transfer {transfer_id!r}")
        data = b"".join(state["parts"])
        if len(data) != state["size"] or fnv1a64_hex(data) != state["checksum"]:
            raise storage.ChecksumMismatch(
                f"transfer {transfer_id} aborted: assembled payload fails verification")
        if state["purpose"] == "replica":
            checksum = self.storage.put_replica(state["lfn"], data, state["checksum"])
            return {"lfn": state["lfn"], "checksum": checksum}
        return self.ingest_dicom(data)


def _b64_field(payload: dict, key: str) -> bytes:
    try:
        return base64.b64decode(str(payload.get(key, "")), validate=True)
    except (ValueError, TypeError) as exc:
        raise wire.MalformedFrame(f"field {key!r} is not valid base64: {exc}") from None


def _job_to_payload(job: compute.JobRecord) -> dict:
    return {
        "job_id": job.job_id, "name": job.name, "version": job.version,
        "input_lfn": job.input_lfn, "output_lfn": job.output_lfn,
        "status": job.status, "site": job.site, "elapsed_ms": job.elapsed_ms,
    }


def _job_from_payload(payload: dict) -> compute.JobRecord:
    return compute.JobRecord(
        str(payload["job_id"]), str(payload["name"]), str(payload["version"]),
        str(payload["input_lfn"]),
        None if payload.get("output_lfn") is None else str(payload["output_lfn"]),
        str(payload["status"]), str(payload["site"]), int(payload["elapsed_ms"]),
    )
