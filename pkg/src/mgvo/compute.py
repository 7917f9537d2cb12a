"""Algorithm execution primitives.

Derived files are produced at the site owning the input (the broker's
single placement rule) and registered back into that site's catalog with
kind=SMF. The pixel-normalization builtin is a deterministic stand-in
exercising the execute-derive-requery workflow.

External executables run with the contract argv = [input-path,
output-path], exit 0 on success; their output must parse as a valid
subset file. They are trusted code, not sandboxed.
"""

from __future__ import annotations

import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

from mgvo.dicom import (
    DicomFile,
    TAG_PIXEL_DATA,
    TAG_SOP_INSTANCE_UID,
    make_element,
    parse_dicom,
    write_dicom,
)
from mgvo.errors import MgvoError
from mgvo.hashing import fnv1a64_hex

STATUS_DONE = "DONE"
STATUS_FAILED = "FAILED"

SMF_NORM_NAME = "smf-norm"
SMF_NORM_VERSION = "1"


class ComputeError(MgvoError):
    pass


class AlgorithmNotFound(ComputeError):
    pass


class InputNotFound(ComputeError):
    pass


class ExecutionFailed(ComputeError):
    pass


class NoPixelData(ComputeError):
    pass


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    name: str
    version: str
    input_lfn: str
    output_lfn: "str | None"
    status: str
    site: str
    elapsed_ms: int

    def log_line(self) -> str:
        return "|".join([
            self.job_id, self.name, self.version, self.input_lfn,
            self.output_lfn or "", self.status, self.site, str(self.elapsed_ms),
        ])


def derived_sop_uid(input_sop_uid: str, name: str, version: str) -> str:
    """Deterministic SOP UID for a derived file."""
    return fnv1a64_hex(f"{input_sop_uid}:{name}:{version}".encode("utf-8"))


def output_lfn_for(owning_site: str, name: str, version: str, input_sop_uid: str) -> str:
    return f"lfn:/mgvo/{owning_site}/smf/{name}-{version}-{input_sop_uid}"


def smf_norm(input_file: DicomFile) -> DicomFile:
    """Full-range linear rescale of the 16-bit pixel samples.

    out = round((v - min) * 65535 / (max - min)), all samples 0 when the
    image is constant. Rounding is half-up. Non-pixel elements are
    preserved; the SOP instance UID becomes the derived UID.
    """
    pixel = input_file.find(TAG_PIXEL_DATA)
    if pixel is None:
        raise NoPixelData("input has no PixelData (7FE0,0010)")
    input_file.validate()
    count = len(pixel.value) // 2
    samples = struct.unpack(f"<{count}H", pixel.value)
    if samples:
        lo, hi = min(samples), max(samples)
    else:
        lo = hi = 0
    if hi == lo:
        rescaled = (0,) * count
    else:
        span = hi - lo
        rescaled = tuple((2 * (v - lo) * 65535 + span) // (2 * span) for v in samples)
    out = input_file.with_element(
        make_element(TAG_PIXEL_DATA, "OW", struct.pack(f"<{count}H", *rescaled))
    )
    old_uid = input_file.text(TAG_SOP_INSTANCE_UID)
    new_uid = derived_sop_uid(old_uid, SMF_NORM_NAME, SMF_NORM_VERSION)
    return out.with_element(make_element(TAG_SOP_INSTANCE_UID, "UI", new_uid))


def _run_smf_norm(input_bytes: bytes) -> bytes:
    return write_dicom(smf_norm(parse_dicom(input_bytes)))


# Compiled-in algorithms: id -> bytes-to-bytes callable.
BUILTIN_ALGORITHMS = {
    SMF_NORM_NAME: _run_smf_norm,
}


def run_builtin(algorithm_id: str, input_bytes: bytes) -> bytes:
    fn = BUILTIN_ALGORITHMS.get(algorithm_id)
    if fn is None:
        raise AlgorithmNotFound(f"no builtin algorithm {algorithm_id!r}")
    try:
        return fn(input_bytes)
    except MgvoError as exc:
        raise ExecutionFailed(f"builtin {algorithm_id} failed: {exc}") from None


def run_executable(executable: bytes, input_bytes: bytes) -> bytes:
    """Run an uploaded executable: argv = [input, output], exit 0 = success."""
    with tempfile.TemporaryDirectory(prefix="mgvo-job-") as workdir:
        work = Path(workdir)
        exe_path = work / "algorithm"
        in_path = work / "input"
        out_path = work / "output"
        exe_path.write_bytes(executable)
        exe_path.chmod(0o700)
        in_path.write_bytes(input_bytes)
        try:
            proc = subprocess.run(
                [str(exe_path), str(in_path), str(out_path)],
                capture_output=True,
                timeout=300,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ExecutionFailed(f"could not run executable: {exc}") from None
        if proc.returncode != 0:
            detail = proc.stderr.decode("utf-8", "replace").strip()
            raise ExecutionFailed(f"exit status {proc.returncode}: {detail}")
        if not out_path.exists():
            raise ExecutionFailed("executable wrote no output file")
        return out_path.read_bytes()
