"""Command-line surface: launch nodes and exercise the six services.

Machine-parseable output goes to stdout, diagnostics to stderr.
Exit codes: 0 success, 1 usage error, 2 protocol/auth error, 3 partial
results (a query answered with at least one ERROR site entry).
"""

from __future__ import annotations

import argparse
import os
import signal
import sys
from pathlib import Path
from random import Random

from mgvo import results, transport
from mgvo.central import CentralNode
from mgvo.client import GridClient
from mgvo.errors import MgvoError
from mgvo.node import SiteNode

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PROTOCOL = 2
EXIT_PARTIAL = 3

DEFAULT_TOKEN_CACHE = Path.home() / ".mgvo" / "token"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_PROTOCOL):
        super().__init__(message)
        self.exit_code = exit_code


def _central_address(args) -> str:
    address = getattr(args, "central", None) or os.environ.get("MGVO_CENTRAL")
    if not address:
        raise CliError("no central node given (--central or MGVO_CENTRAL)", EXIT_USAGE)
    return address


def _token_cache_path(args) -> Path:
    return Path(getattr(args, "token_cache", None) or DEFAULT_TOKEN_CACHE)


def _save_token(path: Path, user: str, token: str, expires_at_ms: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"{user} {token} {expires_at_ms}\n", encoding="utf-8")
    try:
        os.chmod(path, 0o600)
    except OSError:
        pass  # platform without POSIX modes


def _load_token(path: Path) -> tuple[str, str, int]:
    if not path.exists():
        raise CliError(f"not logged in (no token cache at {path})")
    user, token, expires = path.read_text(encoding="utf-8").split()
    return user, token, int(expires)


def _client(args) -> GridClient:
    client = GridClient(transport.TcpTransport(), _central_address(args),
                        timeout_ms=getattr(args, "timeout_ms", None))
    _, token, _ = _load_token(_token_cache_path(args))
    client.token = token
    return client


def _pick_site(client: GridClient, args) -> str:
    site = getattr(args, "site", None)
    if site:
        return site
    members = client.sites()
    if not members:
        raise CliError("the VO has no registered sites")
    return members[0]["name"]


# -- commands ---------------------------------------------------------------


def cmd_serve(args) -> int:
    if args.role == "central":
        clock = transport.RealClock()
        central = CentralNode(clock, Random(args.seed) if args.seed is not None else None)
        for entry in args.user or []:
            user, _, secret = entry.partition(":")
            if not user or not secret:
                raise CliError(f"bad --user {entry!r}, expected NAME:SECRET", EXIT_USAGE)
            central.register_user(user, secret)
        host, port = _split_listen(args.listen)
        try:
            server = transport.FrameServer(host, port, central.handle_frame)
        except OSError as exc:
            print(f"cannot bind {args.listen}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"READY central {server.address}", flush=True)
        _serve_until_signalled(server)
        return EXIT_OK

    central_address = _central_address(args)
    host, port = _split_listen(args.listen)
    config = None
    if args.timeout_ms is not None:
        from mgvo.federation import FederationConfig
        config = FederationConfig(per_site_timeout_ms=args.timeout_ms)
    node = SiteNode(
        args.name, central_address, transport.TcpTransport(), transport.RealClock(),
        store_root=Path(args.store_root),
        catalog_log=Path(args.store_root) / "catalog.log",
        jobs_log=Path(args.store_root) / "jobs.log",
        site_salt=args.salt,
        config=config,
    )
    try:
        server = transport.FrameServer(host, port, node.handle_frame)
    except OSError as exc:
        print(f"cannot bind {args.listen}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        node.register_with_central(server.address)
    except transport.TransportError as exc:
        print(f"central unreachable: {exc}", file=sys.stderr)
        server.server_close()
        return EXIT_USAGE
    except MgvoError as exc:
        print(f"registration failed: {exc}", file=sys.stderr)
        server.server_close()
        return EXIT_USAGE
    print(f"READY {args.name} {server.address}", flush=True)
    _serve_until_signalled(server)
    node.close()
    return EXIT_OK


def _split_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    return host or "127.0.0.1", int(port)


def _serve_until_signalled(server) -> None:
    def stop(_signum, _frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()


def cmd_login(args) -> int:
    client = GridClient(transport.TcpTransport(), _central_address(args))
    client.login(args.user, args.secret)
    _save_token(_token_cache_path(args), client.user, client.token, client.expires_at_ms)
    print(client.token)
    print(f"logged in as {client.user}", file=sys.stderr)
    return EXIT_OK


def cmd_sites(args) -> int:
    client = _client(args)
    for entry in client.sites():
        print(f"{entry['name']} {entry['address']}")
    return EXIT_OK


def cmd_add(args) -> int:
    client = _client(args)
    site = _pick_site(client, args)
    data = Path(args.file).read_bytes()
    answer = client.add(site, data)
    print(answer["lfn"])
    print(f"added to {site}: pseudonym {answer['pseudonym']}, "
          f"{answer['size']} bytes, checksum {answer['checksum']}", file=sys.stderr)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    client = _client(args)
    site = getattr(args, "site", None)
    if not site:
        # default to the owning site named inside the LFN
        from mgvo.storage import LFN
        site = LFN.parse(args.lfn).site
    data = client.retrieve(site, args.lfn)
    Path(args.out).write_bytes(data)
    print(f"retrieved {len(data)} bytes from {site} into {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_query(args) -> int:
    client = _client(args)
    site = _pick_site(client, args)
    xml = client.query(site, args.text)
    print(xml)
    result = results.parse_resultset(xml)
    errors = 0
    for part in result.sites:
        if part.status == results.STATUS_OK:
            print(f"{part.site}: {len(part.rows)} rows ({part.elapsed_ms} ms)",
                  file=sys.stderr)
        else:
            errors += 1
            print(f"{part.site}: ERROR {part.message}", file=sys.stderr)
    print(f"total rows: {result.row_count()}", file=sys.stderr)
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_add_alg(args) -> int:
    client = _client(args)
    site = _pick_site(client, args)
    if args.builtin:
        answer = client.add_algorithm(site, args.name, args.version, builtin_id=args.builtin)
    else:
        answer = client.add_algorithm(site, args.name, args.version,
                                      data=Path(args.file).read_bytes())
    print(answer["lfn"])
    return EXIT_OK


def cmd_exec_alg(args) -> int:
    client = _client(args)
    site = _pick_site(client, args)
    job = client.execute_algorithm(site, args.name, args.version, args.input_lfn)
    print(job["output_lfn"] or "")
    print(f"job {job['job_id']} {job['status']} at {job['site']} "
          f"({job['elapsed_ms']} ms)", file=sys.stderr)
    return EXIT_OK


# -- argument wiring ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgvo", description="desk-scale federated data grid")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run a central or site node")
    serve.add_argument("role", choices=["central", "site"])
    serve.add_argument("--listen", required=True, help="HOST:PORT to bind")
    serve.add_argument("--central", help="central node HOST:PORT (site role)")
    serve.add_argument("--name", help="site name (site role)")
    serve.add_argument("--store-root", help="site blob/catalog directory (site role)")
    serve.add_argument("--salt", help="site pseudonymization salt (default: site name)")
    serve.add_argument("--user", action="append",
                       help="NAME:SECRET to provision (central role, repeatable)")
    serve.add_argument("--seed", type=int, help="deterministic token generator (tests)")
    serve.add_argument("--timeout-ms", dest="timeout_ms", type=int,
                       help="per-site fan-out timeout (site role, default 5000)")
    serve.set_defaults(fn=cmd_serve)

    login = sub.add_parser("login", help="authenticate and cache the session token")
    login.add_argument("--user", required=True)
    login.add_argument("--secret", required=True)
    login.set_defaults(fn=cmd_login)

    sites_p = sub.add_parser("sites", help="list VO member sites")
    sites_p.set_defaults(fn=cmd_sites)

    add = sub.add_parser("add", help="ingest a file (anonymized at the site)")
    add.add_argument("file")
    add.set_defaults(fn=cmd_add)

    retrieve = sub.add_parser("retrieve", help="download a grid file")
    retrieve.add_argument("lfn")
    retrieve.add_argument("out")
    retrieve.set_defaults(fn=cmd_retrieve)

    query = sub.add_parser("query", help="run a federated query")
    query.add_argument("text")
    query.set_defaults(fn=cmd_query)

    add_alg = sub.add_parser("add-alg", help="register an algorithm")
    add_alg.add_argument("--name", required=True)
    add_alg.add_argument("--version", required=True)
    add_alg.add_argument("--file", help="executable payload")
    add_alg.add_argument("--builtin", help="compiled-in algorithm id")
    add_alg.set_defaults(fn=cmd_add_alg)

    exec_alg = sub.add_parser("exec-alg", help="run an algorithm on a grid file")
    exec_alg.add_argument("--name", required=True)
    exec_alg.add_argument("--version", required=True)
    exec_alg.add_argument("--input", dest="input_lfn", required=True)
    exec_alg.set_defaults(fn=cmd_exec_alg)

    for sub_parser in (login, sites_p, add, retrieve, query, add_alg, exec_alg):
        sub_parser.add_argument("--central", help="central node HOST:PORT "
                                                  "(default: MGVO_CENTRAL)")
        sub_parser.add_argument("--token-cache", dest="token_cache",
                                help=f"session file (default {DEFAULT_TOKEN_CACHE})")
        sub_parser.add_argument("--timeout-ms", dest="timeout_ms", type=int)
    for sub_parser in (add, query, add_alg, exec_alg, retrieve):
        sub_parser.add_argument("--site", help="target site (default: first member)")

    return parser


def main(argv: "list[str] | None" = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (MgvoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
