"""Result rows, per-site results, and the XML result-set wire form.

Schema: root `<resultset query-id="HEX16">` with one `<site>` child per
responding site. OK sites carry `<row>` children made of `<f n="FIELD">`
value elements; error sites carry a `message` attribute and no children.
Serialization is deterministic byte output (single line, attributes in
fixed order) and escapes the five XML entities everywhere.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass

from mgvo.errors import MgvoError

STATUS_OK = "OK"
STATUS_ERROR = "ERROR"

# Fixed row field order per query target.
PATIENT_FIELDS = ("site", "patient.id", "patient.sex", "patient.age")
IMAGE_FIELDS = (
    "site",
    "image.sop_uid",
    "image.lfn",
    "image.kind",
    "image.laterality",
    "image.study_date",
    "patient.id",
)


class ResultError(MgvoError):
    pass


class XmlSyntaxError(ResultError):
    def __init__(self, position: int, message: str):
        super().__init__(f"xml syntax error at {position}: {message}")
        self.position = position


class SchemaError(ResultError):
    pass


class DuplicateSite(ResultError):
    def __init__(self, name: str):
        super().__init__(f"duplicate site {name!r}")
        self.name = name


@dataclass(frozen=True)
class Row:
    fields: tuple[tuple[str, str], ...]

    def get(self, name: str) -> "str | None":
        for key, value in self.fields:
            if key == name:
                return value
        return None

    def names(self) -> tuple[str, ...]:
        return tuple(key for key, _ in self.fields)


def patient_row(site: str, pseudonym: str, sex: str, age_years: int) -> Row:
    values = (site, pseudonym, sex, str(age_years))
    return Row(tuple(zip(PATIENT_FIELDS, values)))


def image_row(site: str, sop_uid: str, lfn: str, kind: str, laterality: str,
              study_date: str, pseudonym: str) -> Row:
    values = (site, sop_uid, lfn, kind, laterality, study_date, pseudonym)
    return Row(tuple(zip(IMAGE_FIELDS, values)))


@dataclass(frozen=True)
class SiteResult:
    site: str
    status: str
    rows: tuple[Row, ...] = ()
    message: "str | None" = None
    elapsed_ms: int = 0


def ok_result(site: str, rows, elapsed_ms: int = 0) -> SiteResult:
    return SiteResult(site, STATUS_OK, tuple(rows), None, elapsed_ms)


def error_result(site: str, message: str, elapsed_ms: int = 0) -> SiteResult:
    return SiteResult(site, STATUS_ERROR, (), message, elapsed_ms)


@dataclass(frozen=True)
class ResultSet:
    query_id: str
    sites: tuple[SiteResult, ...] = ()

    def row_count(self) -> int:
        return sum(len(s.rows) for s in self.sites)

    def all_rows(self) -> list[Row]:
        return [row for s in self.sites for row in s.rows]


def merge_results(parts, query_id: str) -> ResultSet:
    """Concatenate per-site results in arrival order; at most one part per
    site. Rows are never deduplicated: each row is owned by exactly one
    site."""
    seen = set()
    for part in parts:
        if part.site in seen:
            raise DuplicateSite(part.site)
        seen.add(part.site)
    return ResultSet(query_id, tuple(parts))


_ESCAPES = (("&", "&amp;"), ("<", "&lt;"), (">", "&gt;"), ('"', "&quot;"), ("'", "&apos;"))


def xml_escape(text: str) -> str:
    for raw, entity in _ESCAPES:
        text = text.replace(raw, entity)
    return text


def serialize_siteresult(part: SiteResult) -> str:
    """One `<site>` fragment, the unit shipped back from a remote site."""
    attrs = (
        f'name="{xml_escape(part.site)}" status="{part.status.lower()}"'
        f' elapsed-ms="{part.elapsed_ms}"'
    )
    if part.status == STATUS_ERROR:
        return f'<site {attrs} message="{xml_escape(part.message or "")}"/>'
    if not part.rows:
        return f"<site {attrs}/>"
    chunks = [f"<site {attrs}>"]
    for row in part.rows:
        chunks.append("<row>")
        for name, value in row.fields:
            chunks.append(f'<f n="{xml_escape(name)}">{xml_escape(value)}</f>')
        chunks.append("</row>")
    chunks.append("</site>")
    return "".join(chunks)


def serialize_resultset(result: ResultSet) -> str:
    root_attrs = f'query-id="{xml_escape(result.query_id)}"'
    if not result.sites:
        return f"<resultset {root_attrs}/>"
    body = "".join(serialize_siteresult(part) for part in result.sites)
    return f"<resultset {root_attrs}>{body}</resultset>"


def _parse_xml(text: str) -> ET.Element:
    try:
        return ET.fromstring(text)
    except ET.ParseError as exc:
        line, column = exc.position
        # map line/column back to a flat character offset
        offset = sum(len(l) + 1 for l in text.splitlines()[: line - 1]) + column
        raise XmlSyntaxError(offset, str(exc)) from None


def _site_from_element(el: ET.Element) -> SiteResult:
    if el.tag != "site":
        raise SchemaError(f"expected <site>, found <{el.tag}>")
    name = el.get("name")
    status = el.get("status")
    elapsed = el.get("elapsed-ms")
    if name is None or status not in ("ok", "error") or elapsed is None:
        raise SchemaError("site element missing name/status/elapsed-ms")
    try:
        elapsed_ms = int(elapsed)
    except ValueError:
        raise SchemaError(f"bad elapsed-ms {elapsed!r}") from None
    if elapsed_ms < 0:
        raise SchemaError(f"negative elapsed-ms {elapsed_ms}")
    if status == "error":
        message = el.get("message")
        if message is None:
            raise SchemaError(f"error site {name!r} has no message")
        if len(el) != 0:
            raise SchemaError(f"error site {name!r} has children")
        return error_result(name, message, elapsed_ms)
    rows = []
    for row_el in el:
        if row_el.tag != "row":
            raise SchemaError(f"expected <row>, found <{row_el.tag}>")
        fields = []
        names = set()
        for f_el in row_el:
            if f_el.tag != "f" or f_el.get("n") is None:
                raise SchemaError("row fields must be <f n=...> elements")
            field_name = f_el.get("n")
            if field_name in names:
                raise SchemaError(f"duplicate field {field_name!r} in row")
            names.add(field_name)
            fields.append((field_name, f_el.text or ""))
        rows.append(Row(tuple(fields)))
    return ok_result(name, rows, elapsed_ms)


def parse_siteresult(xml: str) -> SiteResult:
    return _site_from_element(_parse_xml(xml))


def parse_resultset(xml: str) -> ResultSet:
    root = _parse_xml(xml)
    if root.tag != "resultset":
        raise SchemaError(f"expected <resultset>, found <{root.tag}>")
    query_id = root.get("query-id")
    if query_id is None:
        raise SchemaError("resultset has no query-id")
    parts = [_site_from_element(el) for el in root]
    try:
        return merge_results(parts, query_id)
    except DuplicateSite as exc:
        raise SchemaError(str(exc)) from None
