"""Query federation: decompose, fan out, merge.

A federated query is decomposed into a local part and one remote part
per member site, every part scoped LOCAL_ONLY (the hop limit that makes
re-propagation impossible: an N-site query costs exactly N-1 remote
requests). Sub-queries move to the data; each site answers from its own
catalog and ships one XML site fragment back. Failures never abort the
query: an unreachable or slow site contributes an ERROR entry while the
other sites' rows stand.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from mgvo import query as q
from mgvo import results, transport, wire
from mgvo.errors import MgvoError


class FederationError(MgvoError):
    pass


class NotAMember(FederationError):
    pass


class ScopeViolation(FederationError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    per_site_timeout_ms: int = 5000
    fanout_parallel: bool = True

    def __post_init__(self):
        if self.per_site_timeout_ms <= 0:
            raise FederationError("per_site_timeout_ms must be positive")


@dataclass(frozen=True)
class QueryPlan:
    query_id: str
    origin_site: str
    local_part: q.FormalQuery
    remote_parts: tuple[tuple[str, q.FormalQuery], ...]  # (site, sub-query), name order


def analyze(formal: q.FormalQuery, origin: str, members: list[str], query_id: str) -> QueryPlan:
    """Decompose a federated query into local and per-remote-site parts."""
    if formal.scope != q.SCOPE_FEDERATED:
        raise ScopeViolation("analyze requires a FEDERATED-scope query")
    if origin not in members:
        raise NotAMember(f"{origin!r} is not a member of the VO")
    local = formal.with_scope(q.SCOPE_LOCAL_ONLY)
    remotes = tuple(
        (site, formal.with_scope(q.SCOPE_LOCAL_ONLY))
        for site in sorted(members)
        if site != origin
    )
    return QueryPlan(query_id, origin, local, remotes)


def handle_remote(node, formal: q.FormalQuery) -> results.SiteResult:
    """Evaluate a shipped sub-query against the local catalog only."""
    if formal.scope != q.SCOPE_LOCAL_ONLY:
        raise ScopeViolation(
            f"remote endpoint got a {formal.scope} query; expected LOCAL_ONLY"
        )
    started = node.clock.now_ms()
    rows = node.catalog.local_query(formal)
    return results.ok_result(node.site, rows, node.clock.now_ms() - started)


def _ask_site(node, token: str, query_id: str, site: str, address: str,
              sub_query: q.FormalQuery, timeout_ms: int) -> results.SiteResult:
    payload = {"query": q.serialize_query(sub_query), "query_id": query_id}
    frame = wire.Frame("QUERY_REMOTE_REQ", node.new_id(), payload, token)
    started = node.clock.now_ms()
    try:
        responses = node.transport.request(address, frame, timeout_ms, origin=node.site)
    except transport.TimedOut:
        return results.error_result(site, "timeout", node.clock.now_ms() - started)
    except transport.Unreachable:
        return results.error_result(site, "unreachable", node.clock.now_ms() - started)
    except MgvoError as exc:
        return results.error_result(site, str(exc), node.clock.now_ms() - started)
    reply = responses[0]
    elapsed = node.clock.now_ms() - started
    if reply.kind == "ERROR":
        message = str(reply.payload.get("message", reply.payload.get("code", "remote error")))
        return results.error_result(site, message, elapsed)
    try:
        part = results.parse_siteresult(str(reply.payload.get("site_xml", "")))
    except MgvoError as exc:
        return results.error_result(site, f"bad remote payload: {exc}", elapsed)
    if part.site != site:
        return results.error_result(site, f"answer came from {part.site!r}", elapsed)
    return part


def execute_federated(node, formal: q.FormalQuery, token: str) -> results.ResultSet:
    """Run the full pipeline: analyze, evaluate locally, fan out, merge.

    The originating site's own result always comes first; remote parts
    follow in site-name order. Every failure is a per-site ERROR entry.
    """
    members = node.refresh_members(token)
    addresses = {info.name: info.address for info in members}
    plan = analyze(formal, node.site, list(addresses), node.new_id())
    started = node.clock.now_ms()
    local_rows = node.catalog.local_query(plan.local_part)
    parts = [results.ok_result(node.site, local_rows, node.clock.now_ms() - started)]
    timeout_ms = node.config.per_site_timeout_ms
    if plan.remote_parts:
        def ask(entry):
            site, sub_query = entry
            return _ask_site(node, token, plan.query_id, site, addresses[site],
                             sub_query, timeout_ms)

        if node.config.fanout_parallel and len(plan.remote_parts) > 1:
            with ThreadPoolExecutor(max_workers=len(plan.remote_parts)) as pool:
                parts.extend(pool.map(ask, plan.remote_parts))
        else:
            parts.extend(ask(entry) for entry in plan.remote_parts)
    return results.merge_results(parts, plan.query_id)
