"""``commons`` command-line client and single-node server launcher.

Exit codes: 0 ok, 2 usage error, 3 denied, 4 not found, 5 conflict,
6 integrity/hash mismatch, 7 network.
"""

from __future__ import annotations

import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import click
import yaml

from .accessctl import PrincipalId
from .client import CommonsClient
from .config import GatewayConfig, load_config
from .errors import CommonsError, MalformedRequest
from .idmodel import canonical_json
from .metering import KINDS, Allocation, Meter, UsageEvent, capacity_report

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "http://127.0.0.1:8080"
DEFAULT_PROFILE = Path("~/.config/datacommons/profile.yaml")

# Every gateway route and the command that reaches it.
ROUTE_COMMANDS = {
    ("GET", "/alias/{name:path}"): "resolve",
    ("POST", "/alias"): "mint",
    ("PUT", "/alias/{name:path}"): "update-urls",
    ("DELETE", "/alias/{name:path}"): "delete",
    ("GET", "/urls/"): "resolve-hash",
    ("GET", "/urls"): "resolve-hash",
    ("GET", "/dedup"): "dedup",
    ("POST", "/meta/schemas"): "meta schema",
    ("POST", "/meta/query"): "meta query",
    ("GET", "/meta/{name:path}"): "meta get",
    ("PUT", "/meta/{name:path}"): "meta put",
    ("GET", "/acl/{name:path}"): "acl show",
    ("PUT", "/acl/{name:path}"): "acl grant",
    ("GET", "/attr/{name:path}"): "attr get",
    ("PUT", "/attr/{name:path}"): "attr set",
    ("GET", "/groups/{group}"): "group show",
    ("PUT", "/groups/{group}"): "group set",
    ("PUT", "/buckets/{bucket}"): "put-object",
    ("PUT", "/objects/{bucket}/{key:path}"): "put-object",
    ("GET", "/peer/changes"): "peer changes",
    ("GET", "/peer/object"): "peer fetch",
    ("PUT", "/peer/object"): "peer push",
    ("POST", "/usage/events"): "usage record",
    ("PUT", "/usage/allocations"): "usage allocate",
    ("GET", "/usage/invoice"): "usage invoice",
    ("GET", "/usage/report"): "usage report",
    ("POST", "/usage/capacity"): "usage capacity",
}


class Context:
    def __init__(self, endpoint: str, principal: str | None, fmt: str, http=None):
        self.endpoint = endpoint
        self.principal = principal
        self.format = fmt
        self.http = http

    def client(self, peer: str | None = None) -> CommonsClient:
        return CommonsClient(self.endpoint, self.principal, http=self.http, peer=peer)

    @property
    def actor(self) -> PrincipalId:
        return PrincipalId.parse(self.principal)


def emit(ctx: Context, doc: Any) -> None:
    if ctx.format == "json":
        click.echo(canonical_json(doc).decode("utf-8"))
    elif ctx.format == "table" and isinstance(doc, dict):
        for key, value in doc.items():
            click.echo(f"{key}\t{value if isinstance(value, str) else json.dumps(value)}")
    elif ctx.format == "table" and isinstance(doc, list):
        for item in doc:
            click.echo(item if isinstance(item, str) else json.dumps(item))
    else:
        click.echo(json.dumps(doc, indent=2, ensure_ascii=False))


def fail(exc: CommonsError) -> None:
    message = " ".join(str(exc).split())
    click.echo(f"error: {exc.code}: {message}", err=True)
    sys.exit(exc.exit_code)


class CommonsGroup(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CommonsError as exc:
            fail(exc)


def _load_profile(path: str | None) -> dict:
    candidate = Path(path).expanduser() if path else DEFAULT_PROFILE.expanduser()
    if candidate.is_file():
        with open(candidate, encoding="utf-8") as fh:
            return yaml.safe_load(fh) or {}
    if path:
        raise click.UsageError(f"profile not found: {path}")
    return {}


@click.group(cls=CommonsGroup)
@click.option("--endpoint", envvar="COMMONS_ENDPOINT", help="Gateway base url.")
@click.option("--principal", envvar="COMMONS_PRINCIPAL", help="Acting principal (user name).")
@click.option("--profile", "profile_path", help="Profile file with endpoint/principal/format.")
@click.option("--json", "as_json", is_flag=True, help="Emit the raw response document.")
@click.option("--format", "fmt", type=click.Choice(["json", "table", "pretty"]), default=None)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, endpoint, principal, profile_path, as_json, fmt, verbose):
    """Client for a data commons node."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    profile = _load_profile(profile_path)
    http = ctx.obj.get("http") if isinstance(ctx.obj, dict) else None
    fmt = "json" if as_json else (fmt or profile.get("format") or "pretty")
    ctx.obj = Context(endpoint or profile.get("endpoint") or DEFAULT_ENDPOINT,
                      principal or profile.get("principal"), fmt, http)


pass_ctx = click.make_pass_decorator(Context)


# -- server --------------------------------------------------------------------

def _local_config(config_path: str | None, data_dir: str | None) -> GatewayConfig:
    config = load_config(config_path)
    if data_dir:
        config.data_dir = Path(data_dir)
    return config


def _open_commons(config_path: str | None, data_dir: str | None):
    from .commons import Commons
    return Commons.from_config(_local_config(config_path, data_dir))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--bind", help="HOST:PORT (overrides config and COMMONS_BIND).")
@click.option("--data-dir", type=click.Path(file_okay=False))
@click.option("--authority")
@click.option("--load-nexrad", is_flag=True, help="Seed the NEXRAD reference record.")
def serve(config_path, bind, data_dir, authority, load_nexrad):
    """Run the gateway and stores in one process."""
    import uvicorn

    from .commons import Commons
    from .config import parse_bind
    from .fixtures import load_nexrad
    from .gateway import create_app

    config = _local_config(config_path, data_dir)
    if bind:
        config.host, config.port = parse_bind(bind)
    if authority:
        config.authority = authority
    commons = Commons.from_config(config)
    if load_nexrad:
        load_nexrad(commons)
    app = create_app(commons, config.principal_header)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")


# -- alias and hash layer ----------------------------------------------------------

@main.command()
@click.argument("name")
@click.option("--md5", required=True)
@click.option("--sha1")
@click.option("--sha256")
@click.option("--size", type=int, required=True)
@click.option("--url", "urls", multiple=True)
@click.option("--release", type=click.Choice(["public", "controlled"]), default="public")
@click.option("--authority")
@pass_ctx
def mint(ctx, name, md5, sha1, sha256, size, urls, release, authority):
    """Mint a digital ID over already-stored content."""
    hashes = {"md5": md5, **({"sha1": sha1} if sha1 else {}), **({"sha256": sha256} if sha256 else {})}
    doc = {"name": name, "hashes": hashes, "size": size, "urls": list(urls), "release": release}
    if authority:
        doc["authority"] = authority
    emit(ctx, ctx.client().mint(doc))


@main.command()
@click.argument("name")
@pass_ctx
def resolve(ctx, name):
    """Resolve a digital ID (suffix pass-through applies)."""
    emit(ctx, ctx.client().resolve(name))


@main.command("resolve-hash")
@click.option("--hash", "hash_", required=True, help="ALG:HEX, e.g. md5:1e24...")
@click.option("--size", type=int, required=True)
@pass_ctx
def resolve_hash(ctx, hash_, size):
    emit(ctx, ctx.client().resolve_hash(hash_, size))


@main.command("update-urls")
@click.argument("name")
@click.argument("urls", nargs=-1)
@click.option("--release", type=click.Choice(["public", "controlled"]))
@pass_ctx
def update_urls(ctx, name, urls, release):
    """Replace the urls (and optionally the release class) of a digital ID."""
    patch: dict[str, Any] = {}
    if urls:
        patch["urls"] = list(urls)
    if release:
        patch["release"] = release
    emit(ctx, ctx.client().update(name, patch))


@main.command()
@click.argument("name")
@pass_ctx
def delete(ctx, name):
    """Tombstone a digital ID; its content stays resolvable by hash."""
    emit(ctx, ctx.client().delete(name))


@main.command()
@pass_ctx
def dedup(ctx):
    """List hash records shared by two or more digital IDs."""
    emit(ctx, ctx.client().dedup())


@main.command("put-object")
@click.argument("bucket")
@click.argument("key")
@click.argument("source", type=click.File("rb"))
@click.option("--mint", "alias", help="Also mint this digital ID over the stored object.")
@click.option("--release", type=click.Choice(["public", "controlled"]), default="public")
@pass_ctx
def put_object(ctx, bucket, key, source, alias, release):
    """Upload SOURCE ('-' for stdin) into BUCKET/KEY."""
    client = ctx.client()
    client.create_bucket(bucket)
    stored = client.put_object(bucket, key, source.read())
    if alias:
        stored = client.mint({"name": alias, "hashes": stored["hashes"], "size": stored["size"],
                              "urls": [stored["locator"]], "release": release})
    emit(ctx, stored)


# -- metadata --------------------------------------------------------------------------

def _read_json(source) -> Any:
    try:
        return json.load(source)
    except ValueError as exc:
        raise click.UsageError(f"invalid JSON: {exc}") from None


def _parse_pairs(pairs, json_values: bool) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise click.UsageError(f"expected KEY=VALUE, got {pair!r}")
        if json_values:
            try:
                value = json.loads(value)
            except ValueError:
                pass
        out[key] = value
    return out


@main.group()
def meta():
    """Metadata documents and schemas."""


@meta.command("put")
@click.argument("name")
@click.argument("source", type=click.File("r"))
@click.option("--type", "type_name")
@pass_ctx
def meta_put(ctx, name, source, type_name):
    emit(ctx, ctx.client().meta_put(name, _read_json(source), type_name))


@meta.command("get")
@click.argument("name")
@click.option("--type", "type_name")
@pass_ctx
def meta_get(ctx, name, type_name):
    emit(ctx, ctx.client().meta_get(name, type_name))


@meta.command("query")
@click.argument("conditions", nargs=-1)
@pass_ctx
def meta_query(ctx, conditions):
    """Conjunctive exact match: PATH=VALUE ... (values parsed as JSON when possible)."""
    emit(ctx, ctx.client().meta_query(_parse_pairs(conditions, json_values=True)))


@meta.command("schema")
@click.argument("type_name")
@click.argument("source", type=click.File("r"))
@pass_ctx
def meta_schema(ctx, type_name, source):
    """Register a metadata type (administrators only)."""
    emit(ctx, ctx.client().register_schema(type_name, _read_json(source)))


# -- ACLs, attributes, groups --------------------------------------------------------------

@main.group()
def acl():
    """Read/write grants on a digital ID or one of its documents."""


@acl.command("show")
@click.argument("name")
@click.option("--meta", "meta_type", help="Target the metadata document of this type ('' = untyped).")
@pass_ctx
def acl_show(ctx, name, meta_type):
    emit(ctx, ctx.client().acl_get(name, meta_type))


def _acl_change(op):
    @click.argument("name")
    @click.argument("principal")
    @click.argument("rights", nargs=-1, required=True, type=click.Choice(["read", "write"]))
    @click.option("--meta", "meta_type")
    @pass_ctx
    def command(ctx, name, principal, rights, meta_type):
        emit(ctx, ctx.client().acl_change(name, op, principal, rights, meta_type))
    command.__doc__ = f"{op.capitalize()} RIGHTS for PRINCIPAL (user:NAME, group:NAME, anonymous)."
    return command


acl.command("grant")(_acl_change("grant"))
acl.command("revoke")(_acl_change("revoke"))


@main.group()
def attr():
    """Key-value attributes of a digital ID."""


@attr.command("get")
@click.argument("name")
@pass_ctx
def attr_get(ctx, name):
    emit(ctx, ctx.client().attr_get(name))


@attr.command("set")
@click.argument("name")
@click.argument("pairs", nargs=-1, required=True)
@pass_ctx
def attr_set(ctx, name, pairs):
    emit(ctx, ctx.client().attr_set(name, _parse_pairs(pairs, json_values=False)))


@main.group()
def group():
    """Flat user groups used in grants."""


@group.command("show")
@click.argument("name")
@pass_ctx
def group_show(ctx, name):
    emit(ctx, ctx.client().group_get(name))


@group.command("set")
@click.argument("name")
@click.argument("members", nargs=-1)
@pass_ctx
def group_set(ctx, name, members):
    emit(ctx, ctx.client().group_set(name, members))


# -- peer surface ------------------------------------------------------------------------------

@main.group()
def peer():
    """Raw access to a node's peer endpoints."""


@peer.command("changes")
@click.option("--as-peer", "as_peer", required=True, help="Peer name to present.")
@click.option("--since", type=int, default=0)
@click.option("--limit", type=int, default=500)
@pass_ctx
def peer_changes(ctx, as_peer, since, limit):
    emit(ctx, ctx.client(peer=as_peer).peer_changes(since, limit))


@peer.command("fetch")
@click.option("--hash", "hash_", required=True)
@click.option("--size", type=int, required=True)
@click.option("--as-peer", "as_peer")
@click.option("-o", "--output", type=click.File("wb"), default="-")
@pass_ctx
def peer_fetch(ctx, hash_, size, as_peer, output):
    """Download a verified object by hash."""
    output.write(ctx.client(peer=as_peer).peer_object(hash_, size))


@peer.command("push")
@click.option("--hash", "hash_", required=True)
@click.option("--size", type=int, required=True)
@click.option("--as-peer", "as_peer", required=True)
@click.argument("source", type=click.File("rb"))
@pass_ctx
def peer_push(ctx, hash_, size, as_peer, source):
    emit(ctx, ctx.client(peer=as_peer).peer_push(hash_, size, source.read()))


# -- local operator commands (work on a data directory) -------------------------------------

local_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False)),
    click.option("--data-dir", type=click.Path(file_okay=False)),
]


def with_local(fn):
    for option in reversed(local_options):
        fn = option(fn)
    return fn


@main.command("export")
@with_local
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--no-payload", is_flag=True)
@click.argument("aliases", nargs=-1, required=True)
@pass_ctx
def export_cmd(ctx, config_path, data_dir, out_dir, no_payload, aliases):
    """Write a portability bundle for ALIASES."""
    from .peering import export_bundle

    commons = _open_commons(config_path, data_dir)
    bundle = export_bundle(commons, aliases, out_dir, actor=ctx.actor,
                           include_payload=not no_payload)
    emit(ctx, {"path": str(bundle.path), "entries": len(bundle.entries),
               "bundle_digest": bundle.bundle_digest.to_dict()})


@main.command("import")
@with_local
@click.option("--bucket", default="imported")
@click.argument("bundle", type=click.Path(exists=True, file_okay=False))
@pass_ctx
def import_cmd(ctx, config_path, data_dir, bucket, bundle):
    """Load a portability bundle into the local commons."""
    from .peering import import_bundle

    commons = _open_commons(config_path, data_dir)
    emit(ctx, import_bundle(commons, bundle, bucket, actor=ctx.actor).to_dict())


@main.command()
@with_local
@click.option("--peer", "peer_name", required=True)
@click.option("--since", type=int, help="Start cursor (default: last checkpoint).")
@pass_ctx
def sync(ctx, config_path, data_dir, peer_name, since):
    """Pull the change feed of a peer."""
    from .peering import sync_from_peer

    commons = _open_commons(config_path, data_dir)
    emit(ctx, sync_from_peer(commons, peer_name, since=since, actor=ctx.actor).to_dict())


@main.command()
@with_local
@click.option("--peer", "peer_name", required=True)
@click.argument("aliases", nargs=-1, required=True)
@pass_ctx
def migrate(ctx, config_path, data_dir, peer_name, aliases):
    """Move ALIASES' objects to a peer, updating urls step by step."""
    from .peering import staged_migration

    commons = _open_commons(config_path, data_dir)
    reports = staged_migration(commons, aliases, peer_name, actor=ctx.actor)
    emit(ctx, [r.to_dict() for r in reports])
    if any(r.status == "failed" for r in reports):
        sys.exit(6)


# -- metering ------------------------------------------------------------------------------------

@main.group()
def usage():
    """Usage events, invoices and reports (gateway, or a local --log file)."""


def _local_meter(log_path: str | None) -> Meter | None:
    return Meter(log_path) if log_path else None


@usage.command("record")
@click.option("--actor", required=True)
@click.option("--kind", type=click.Choice(KINDS), default="core_hours")
@click.option("--quantity", required=True)
@click.option("--unit-price")
@click.option("--peer", "peer_tag")
@click.option("--timestamp", help="ISO-8601, default now (UTC).")
@click.option("--log", "log_path", type=click.Path(dir_okay=False))
@pass_ctx
def usage_record(ctx, actor, kind, quantity, unit_price, peer_tag, timestamp, log_path):
    doc = {"actor": actor, "kind": kind, "quantity": quantity, "unit_price": unit_price,
           "peer_tag": peer_tag,
           "timestamp": timestamp or datetime.now(timezone.utc).isoformat()}
    meter = _local_meter(log_path)
    if meter is not None:
        emit(ctx, meter.record_usage(UsageEvent.from_dict(doc)).to_dict())
    else:
        emit(ctx, ctx.client().usage_record(doc))


@usage.command("allocate")
@click.option("--actor", required=True)
@click.option("--kind", type=click.Choice(KINDS), default="core_hours")
@click.option("--cap", required=True)
@click.option("--soft", is_flag=True)
@pass_ctx
def usage_allocate(ctx, actor, kind, cap, soft):
    emit(ctx, ctx.client().usage_allocate({"actor": actor, "kind": kind, "cap": cap, "hard": not soft}))


@usage.command("invoice")
@click.option("--actor", required=True)
@click.option("--period", required=True, help="YYYY-MM")
@click.option("--text", is_flag=True, help="Human-readable statement.")
@click.option("--log", "log_path", type=click.Path(exists=True, dir_okay=False))
@pass_ctx
def usage_invoice(ctx, actor, period, text, log_path):
    meter = _local_meter(log_path)
    if meter is not None:
        invoice = meter.monthly_invoice(PrincipalId.parse(actor), period)
        if text:
            click.echo(invoice.to_text())
        else:
            emit(ctx, invoice.to_dict())
        return
    result = ctx.client().usage_invoice(actor, period, text)
    if text:
        click.echo(result, nl=False)
    else:
        emit(ctx, result)


@usage.command("report")
@click.option("--period", help="YYYY-MM (default: the period of the newest event).")
@click.option("--thresholds", required=True, help="Comma-separated core-hour cutoffs.")
@click.option("--log", "log_path", type=click.Path(exists=True, dir_okay=False))
@pass_ctx
def usage_report(ctx, period, thresholds, log_path):
    """Count users reaching each core-hour cutoff in one month."""
    try:
        cutoffs = [int(t) for t in thresholds.split(",") if t.strip()]
    except ValueError:
        raise click.UsageError("thresholds must be comma-separated integers") from None
    meter = _local_meter(log_path)
    if meter is not None:
        if period is None:
            events = meter.events()
            if not events:
                raise MalformedRequest("empty log and no --period given")
            period = max(e.timestamp for e in events).strftime("%Y-%m")
        rows = [{"cutoff": int(c), "users": n} for c, n in meter.threshold_report(period, cutoffs)]
    else:
        if period is None:
            raise click.UsageError("--period is required when querying a gateway")
        rows = ctx.client().usage_report(period, cutoffs)
    if ctx.format == "json":
        emit(ctx, rows)
    else:
        click.echo("core_hours\tusers")
        for row in rows:
            click.echo(f"{row['cutoff']}\t{row['users']}")


@usage.command("capacity")
@click.option("--compute-used", type=float, required=True)
@click.option("--compute-total", type=float, required=True)
@click.option("--storage-used", type=float, required=True)
@click.option("--storage-total", type=float, required=True)
@click.option("--offline", is_flag=True, help="Compute locally instead of asking the gateway.")
@pass_ctx
def usage_capacity(ctx, compute_used, compute_total, storage_used, storage_total, offline):
    """Utilization against the 85% compute / 80% storage targets."""
    used = {"compute": compute_used, "storage": storage_used}
    totals = {"compute": compute_total, "storage": storage_total}
    if offline:
        emit(ctx, capacity_report(used, totals).to_dict())
    else:
        emit(ctx, ctx.client().usage_capacity(used, totals))


@usage.command("fixture")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--period", default=None)
def usage_fixture(out_path, period):
    """Write the synthetic monthly usage log used by the threshold report checks."""
    from .fixtures import FIXTURE_PERIOD, monthly_usage_log

    meter = Meter(out_path)
    for event in monthly_usage_log(period or FIXTURE_PERIOD):
        meter.record_usage(event)
    click.echo(f"wrote {len(meter.events())} events to {out_path}")


if __name__ == "__main__":
    main()
