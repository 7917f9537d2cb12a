"""Central node: membership registry, authentication, token validation.

Grid certificates are replaced by token sessions validated centrally:
sites check tokens against this node and cache positive answers. Secrets
are stored as salted FNV-1a digests (non-cryptographic, a stand-in that
preserves the trust topology rather than a security mechanism).
"""

from __future__ import annotations

import re
import secrets
import threading
from dataclasses import dataclass
from random import Random

from mgvo import wire
from mgvo.errors import MgvoError
from mgvo.hashing import fnv1a64_hex
from mgvo.storage import BUILTIN_SITE

TOKEN_LIFETIME_MS = 3600 * 1000

_SITE_NAME_RE = re.compile(r"^[a-z][a-z0-9_-]*$")


class AuthError(MgvoError):
    pass


class UnknownUser(AuthError):
    pass


class BadSecret(AuthError):
    pass


class InvalidToken(AuthError):
    pass


class Expired(AuthError):
    pass


class DuplicateSite(MgvoError):
    def __init__(self, name: str):
        super().__init__(f"site name {name!r} already registered")
        self.name = name


class BadSiteName(MgvoError):
    pass


@dataclass(frozen=True)
class SiteInfo:
    name: str
    address: str


@dataclass(frozen=True)
class Session:
    token: str
    user: str
    expires_at_ms: int


class CentralNode:
    """Authoritative membership list and session registry."""

    def __init__(self, clock, rng: "Random | None" = None):
        self.clock = clock
        self._rng = rng if rng is not None else Random(secrets.randbits(64))
        self._users: dict[str, tuple[str, str]] = {}  # user -> (salt, digest)
        self._sessions: dict[str, Session] = {}
        self._sites: dict[str, SiteInfo] = {}
        self._lock = threading.Lock()

    # -- users and sessions -------------------------------------------------

    def register_user(self, user: str, secret: str) -> None:
        salt = f"{self._rng.getrandbits(64):016x}"
        with self._lock:
            self._users[user] = (salt, fnv1a64_hex((salt + secret).encode("utf-8")))

    def authenticate(self, user: str, secret: str) -> Session:
        with self._lock:
            entry = self._users.get(user)
            if entry is None:
                raise UnknownUser(user)
            salt, digest = entry
            if fnv1a64_hex((salt + secret).encode("utf-8")) != digest:
                raise BadSecret(f"wrong secret for {user!r}")
            while True:
                token = f"{self._rng.getrandbits(128):032x}"
                if token not in self._sessions:
                    break
            session = Session(token, user, self.clock.now_ms() + TOKEN_LIFETIME_MS)
            self._sessions[token] = session
            return session

    def validate_token(self, token: str) -> Session:
        with self._lock:
            session = self._sessions.get(token)
        if session is None:
            raise InvalidToken("no such session")
        if self.clock.now_ms() >= session.expires_at_ms:
            raise Expired(f"session for {session.user!r} expired")
        return session

    def revoke_token(self, token: str) -> None:
        with self._lock:
            self._sessions.pop(token, None)

    # -- membership ----------------------------------------------------------

    def register_site(self, name: str, address: str) -> list[SiteInfo]:
        if name == BUILTIN_SITE or not _SITE_NAME_RE.match(name):
            raise BadSiteName(f"bad site name {name!r}")
        with self._lock:
            if name in self._sites:
                raise DuplicateSite(name)
            self._sites[name] = SiteInfo(name, address)
        return self.list_sites()

    def list_sites(self) -> list[SiteInfo]:
        with self._lock:
            return sorted(self._sites.values(), key=lambda info: info.name)

    # -- wire dispatch ---------------------------------------------------------

    def handle_frame(self, frame: wire.Frame) -> list[wire.Frame]:
        try:
            return [self._dispatch(frame)]
        except MgvoError as exc:
            return [wire.error_frame(frame.id, exc.code, str(exc))]
        except Exception as exc:  # a bug must not drop the connection
            return [wire.error_frame(frame.id, "InternalError", f"{type(exc).__name__}: {exc}")]

    def _dispatch(self, frame: wire.Frame) -> wire.Frame:
        kind, payload = frame.kind, frame.payload
        if kind == "AUTH":
            session = self.authenticate(str(payload.get("user", "")), str(payload.get("secret", "")))
            body = {"token": session.token, "user": session.user,
                    "expires_at_ms": session.expires_at_ms}
        elif kind == "VALIDATE":
            session = self.validate_token(str(payload.get("token", "")))
            body = {"user": session.user, "expires_at_ms": session.expires_at_ms}
        elif kind == "REGISTER_SITE":
            members = self.register_site(str(payload.get("name", "")), str(payload.get("address", "")))
            body = {"sites": [{"name": m.name, "address": m.address} for m in members]}
        elif kind == "LIST_SITES":
            if frame.token is None:
                raise wire.Unauthenticated("LIST_SITES requires a token")
            try:
                self.validate_token(frame.token)
            except AuthError as exc:
                raise wire.Unauthenticated(str(exc)) from None
            body = {"sites": [{"name": m.name, "address": m.address} for m in self.list_sites()]}
        elif kind in wire.KINDS:
            raise wire.UnknownKind(kind)
        else:
            raise wire.MalformedFrame(f"unknown kind {kind!r}")
        return wire.Frame(wire.RESPONSE_KIND[kind], frame.id, body, None)
