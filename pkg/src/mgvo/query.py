"""Formal query language: conjunctive attribute predicates over patients
and images.

Grammar (keywords case-insensitive, whitespace-insensitive):

    SELECT <patients|images> WHERE <term> { AND <term> } [ /*LOCAL*/ ]
    term := <attr> = '<literal>'
          | <attr> BETWEEN <lo> AND <hi>        (inclusive on both ends)

Attributes: patient.id, patient.sex, patient.age, image.laterality,
image.kind, image.study_date. BETWEEN applies only to patient.age and
image.study_date; dates are written as bare YYYYMMDD tokens. image.*
predicates on a PATIENTS query mean "patient has at least one image
satisfying all image.* terms". The trailing /*LOCAL*/ marker scopes the
query to the receiving site and is what stops federated re-propagation.

serialize_query emits the canonical spelling: uppercase keywords, terms
sorted by attribute name, single spaces. parse(serialize(q)) == q.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import date

from mgvo.dicom import format_da, parse_da, InvariantViolation
from mgvo.errors import MgvoError

TARGET_PATIENTS = "PATIENTS"
TARGET_IMAGES = "IMAGES"
TARGETS = frozenset({TARGET_PATIENTS, TARGET_IMAGES})

SCOPE_FEDERATED = "FEDERATED"
SCOPE_LOCAL_ONLY = "LOCAL_ONLY"

OP_EQ = "EQ"
OP_BETWEEN = "BETWEEN"

ATTR_PATIENT_ID = "patient.id"
ATTR_PATIENT_SEX = "patient.sex"
ATTR_PATIENT_AGE = "patient.age"
ATTR_IMAGE_LATERALITY = "image.laterality"
ATTR_IMAGE_KIND = "image.kind"
ATTR_IMAGE_STUDY_DATE = "image.study_date"

ATTRIBUTES = frozenset({
    ATTR_PATIENT_ID,
    ATTR_PATIENT_SEX,
    ATTR_PATIENT_AGE,
    ATTR_IMAGE_LATERALITY,
    ATTR_IMAGE_KIND,
    ATTR_IMAGE_STUDY_DATE,
})

RANGE_ATTRIBUTES = frozenset({ATTR_PATIENT_AGE, ATTR_IMAGE_STUDY_DATE})

ENUM_DOMAINS = {
    ATTR_PATIENT_SEX: frozenset({"F", "M"}),
    ATTR_IMAGE_LATERALITY: frozenset({"L", "R"}),
    ATTR_IMAGE_KIND: frozenset({"ORIGINAL", "SMF"}),
}

LOCAL_MARKER = "/*LOCAL*/"


class QueryError(MgvoError):
    pass


class QuerySyntaxError(QueryError):
    def __init__(self, position: int, message: str):
        super().__init__(f"syntax error at {position}: {message}")
        self.position = position


class UnknownAttribute(QueryError):
    def __init__(self, name: str):
        super().__init__(f"unknown attribute {name!r}")
        self.name = name


class DuplicateAttribute(QueryError):
    def __init__(self, name: str):
        super().__init__(f"duplicate attribute {name!r}")
        self.name = name


class DomainError(QueryError):
    def __init__(self, attr: str, literal: str):
        super().__init__(f"{literal!r} outside the value domain of {attr}")
        self.attr = attr
        self.literal = literal


class RangeInverted(QueryError):
    def __init__(self, lo, hi):
        super().__init__(f"inverted range [{lo}, {hi}]")
        self.lo = lo
        self.hi = hi


@dataclass(frozen=True)
class Predicate:
    attr: str
    op: str
    operands: tuple  # (literal,) for EQ, (lo, hi) for BETWEEN


@dataclass(frozen=True)
class FormalQuery:
    target: str
    conjuncts: tuple[Predicate, ...]
    scope: str = SCOPE_FEDERATED

    def __post_init__(self):
        # conjunct order carries no meaning (one predicate per attribute);
        # keep it canonical so equal queries compare equal
        ordered = tuple(sorted(self.conjuncts, key=lambda p: p.attr))
        object.__setattr__(self, "conjuncts", ordered)

    def with_scope(self, scope: str) -> "FormalQuery":
        return FormalQuery(self.target, self.conjuncts, scope)


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<word>[A-Za-z_][A-Za-z0-9_.]*)"
    r"|(?P<number>\d+)"
    r"|(?P<literal>'[^'\n]*')"
    r"|(?P<eq>=)"
    r"|(?P<local>/\*LOCAL\*/))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            rest = text[pos:]
            if rest.strip() == "":
                break
            raise QuerySyntaxError(pos + len(rest) - len(rest.lstrip()), "unexpected character")
        kind = match.lastgroup
        value = match.group(kind)
        tokens.append((kind, value, match.start(kind)))
        pos = match.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.idx = 0

    def _peek(self):
        return self.tokens[self.idx] if self.idx < len(self.tokens) else None

    def _next(self, expect_kind: "str | None" = None, keyword: "str | None" = None,
              label: "str | None" = None):
        what = label or keyword or expect_kind
        tok = self._peek()
        if tok is None:
            raise QuerySyntaxError(len(self.text), f"expected {what}, found end of input")
        kind, value, pos = tok
        if expect_kind is not None and kind != expect_kind:
            raise QuerySyntaxError(pos, f"expected {what}, found {value!r}")
        if keyword is not None and value.upper() != keyword:
            raise QuerySyntaxError(pos, f"expected {keyword}, found {value!r}")
        self.idx += 1
        return tok

    def parse(self) -> FormalQuery:
        self._next("word", "SELECT")
        kind, value, pos = self._next("word")
        target = value.upper()
        if target not in TARGETS:
            raise QuerySyntaxError(pos, f"expected patients or images, found {value!r}")
        self._next("word", "WHERE")
        conjuncts = [self._term()]
        while True:
            tok = self._peek()
            if tok is None:
                scope = SCOPE_FEDERATED
                break
            if tok[0] == "local":
                self.idx += 1
                if self._peek() is not None:
                    raise QuerySyntaxError(self._peek()[2], "trailing input after /*LOCAL*/")
                scope = SCOPE_LOCAL_ONLY
                break
            self._next("word", "AND")
            conjuncts.append(self._term())
        seen = set()
        for pred in conjuncts:
            if pred.attr in seen:
                raise DuplicateAttribute(pred.attr)
            seen.add(pred.attr)
        return FormalQuery(target, tuple(conjuncts), scope)

    def _term(self) -> Predicate:
        kind, value, pos = self._next("word")
        attr = value.lower()
        if attr in ("and", "between", "select", "where"):
            raise QuerySyntaxError(pos, f"expected attribute, found {value!r}")
        if attr not in ATTRIBUTES:
            raise UnknownAttribute(value)
        tok = self._peek()
        if tok is None:
            raise QuerySyntaxError(len(self.text), "expected = or BETWEEN")
        if tok[0] == "eq":
            self.idx += 1
            _, literal_tok, lit_pos = self._next("literal", label="quoted literal")
            literal = literal_tok[1:-1]
            return Predicate(attr, OP_EQ, (_typed_literal(attr, literal),))
        if tok[0] == "word" and tok[1].upper() == "BETWEEN":
            if attr not in RANGE_ATTRIBUTES:
                raise DomainError(attr, "BETWEEN")
            self.idx += 1
            lo = _typed_bound(attr, *self._next("number", label="range bound")[1:])
            self._next("word", "AND")
            hi = _typed_bound(attr, *self._next("number", label="range bound")[1:])
            if lo > hi:
                raise RangeInverted(lo, hi)
            return Predicate(attr, OP_BETWEEN, (lo, hi))
        raise QuerySyntaxError(tok[2], f"expected = or BETWEEN, found {tok[1]!r}")


def _typed_literal(attr: str, literal: str):
    if attr in ENUM_DOMAINS:
        if literal not in ENUM_DOMAINS[attr]:
            raise DomainError(attr, literal)
        return literal
    if attr == ATTR_PATIENT_AGE:
        if not literal.isdigit():
            raise DomainError(attr, literal)
        return int(literal)
    if attr == ATTR_IMAGE_STUDY_DATE:
        try:
            return parse_da(literal)
        except InvariantViolation:
            raise DomainError(attr, literal) from None
    # patient.id: free text, but '|' is reserved by the catalog log format
    if literal == "" or "|" in literal:
        raise DomainError(attr, literal)
    return literal


def _typed_bound(attr: str, token: str, pos: int):
    if attr == ATTR_PATIENT_AGE:
        return int(token)
    try:
        return parse_da(token)
    except InvariantViolation:
        raise DomainError(attr, token) from None


def parse_query(text: str) -> FormalQuery:
    """Parse query text into a FormalQuery. Scope defaults to FEDERATED."""
    return _Parser(text).parse()


def _operand_text(value) -> str:
    if isinstance(value, date):
        return format_da(value)
    return str(value)


def serialize_query(q: FormalQuery) -> str:
    """Canonical text form; a function of the query's content, not its
    source spelling."""
    terms = []
    for pred in sorted(q.conjuncts, key=lambda p: p.attr):
        if pred.op == OP_EQ:
            terms.append(f"{pred.attr} = '{_operand_text(pred.operands[0])}'")
        else:
            lo, hi = pred.operands
            terms.append(f"{pred.attr} BETWEEN {_operand_text(lo)} AND {_operand_text(hi)}")
    text = f"SELECT {q.target.lower()} WHERE " + " AND ".join(terms)
    if q.scope == SCOPE_LOCAL_ONLY:
        text += f" {LOCAL_MARKER}"
    return text
