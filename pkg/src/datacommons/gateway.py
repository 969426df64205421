"""HTTP surface of a commons node.

The two read endpoints reproduce the published resolver documents::

    GET /alias/ark:/31807/DC0-...                     -> hashes, authority, metadata, name, release, rev, size, urls
    GET /urls/?hash=md5:<hex>&size=<bytes>            -> hashes, size, urls
"""

from __future__ import annotations

import logging
from typing import Any

from fastapi import Body, FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from starlette.concurrency import run_in_threadpool

from .accessctl import PrincipalId
from .commons import Commons
from .config import DEFAULT_PRINCIPAL_HEADER
from .errors import (
    AccessDenied, CommonsError, HashMismatch, MalformedQuery, MalformedRequest, NotFound,
    UnsupportedAlgorithm,
)
from .idmodel import DIGEST_LENGTHS, HashSet, digest_stream
from .index import alias_target
from .metastore import MetadataSchema, doc_target
from .metering import (
    CORE_HOURS, EGRESS_BYTES, Allocation, UsageEvent, capacity_report,
)
from .objectstore import is_local
from .peering import PEER_HEADER, object_name, publish_url, published_entry

log = logging.getLogger(__name__)

PEER_BUCKET = "peer-ingest"


def parse_hash_query(hash_param: str | None, size_param: str | None) -> tuple[str, str, int]:
    if not hash_param or size_param is None or size_param == "":
        raise MalformedQuery("both hash=<alg>:<hex> and size=<bytes> are required")
    alg, sep, digest = hash_param.partition(":")
    if not sep or not alg or not digest:
        raise MalformedQuery(f"hash must look like md5:<hex>, got {hash_param!r}")
    if not size_param.isdigit():
        raise MalformedQuery(f"size must be a non-negative integer, got {size_param!r}")
    alg, digest = alg.lower(), digest.lower()
    if alg not in DIGEST_LENGTHS:
        raise UnsupportedAlgorithm(f"unsupported digest algorithm {alg!r}")
    if len(digest) != DIGEST_LENGTHS[alg] or any(c not in "0123456789abcdef" for c in digest):
        raise MalformedQuery(f"{alg} digest must be {DIGEST_LENGTHS[alg]} hex characters")
    return alg, digest, int(size_param)


def _json_body(value: Any) -> Any:
    if value is None:
        raise MalformedRequest("a JSON body is required")
    return value


def create_app(commons: Commons, principal_header: str = DEFAULT_PRINCIPAL_HEADER) -> FastAPI:
    app = FastAPI(title=f"data commons {commons.name}", docs_url=None, redoc_url=None)
    app.state.commons = commons

    @app.exception_handler(CommonsError)
    async def commons_error(request: Request, exc: CommonsError):
        return JSONResponse(status_code=exc.status, content=exc.to_dict())

    @app.exception_handler(RequestValidationError)
    async def bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "malformed", "message": str(exc)})

    def principal(request: Request) -> PrincipalId:
        return PrincipalId.parse(request.headers.get(principal_header))

    def calling_peer(request: Request) -> str | None:
        name = request.headers.get(PEER_HEADER)
        return name if name and commons.peers.get(name) is not None else None

    def require_admin(actor: PrincipalId) -> None:
        if actor.is_anonymous or actor.name not in commons.admins:
            raise AccessDenied("administrator privileges required")

    def meter_egress(request: Request, nbytes: int) -> None:
        peer = calling_peer(request)
        actor = principal(request)
        if actor.is_anonymous and peer:
            actor = PrincipalId.user(peer)
        commons.meter.record_usage(
            UsageEvent(actor=actor, kind=EGRESS_BYTES, quantity=nbytes, peer_tag=peer))

    # -- alias layer ----------------------------------------------------------

    @app.get("/alias/{name:path}")
    def get_alias(name: str, request: Request):
        return commons.index.resolve_with_suffix(name, principal(request)).to_dict()

    @app.post("/alias", status_code=201)
    def post_alias(request: Request, body: dict = Body(None)):
        body = _json_body(body)
        try:
            record = commons.index.mint(
                body["name"], HashSet(body["hashes"]), body["size"], body.get("urls", []),
                actor=principal(request), authority=body.get("authority"),
                release=body.get("release", "public"), metadata=body.get("metadata"),
            )
        except KeyError as exc:
            raise MalformedRequest(f"missing field {exc.args[0]}") from None
        return record.to_dict()

    @app.put("/alias/{name:path}")
    def put_alias(name: str, request: Request, body: dict = Body(None)):
        return commons.index.update_record(name, _json_body(body), principal(request)).to_dict()

    @app.delete("/alias/{name:path}")
    def delete_alias(name: str, request: Request):
        return commons.index.delete_alias(name, principal(request)).to_dict()

    # -- hash layer -------------------------------------------------------------

    @app.get("/urls/")
    @app.get("/urls", include_in_schema=False)
    def get_urls(hash: str | None = None, size: str | None = None):
        alg, digest, nbytes = parse_hash_query(hash, size)
        return commons.index.resolve_hash(alg, digest, nbytes).to_dict()

    @app.get("/dedup")
    def get_dedup():
        return [
            {**rec.to_dict(), "aliases": [a.raw for a in names]}
            for rec, names in commons.index.detect_duplicates()
        ]

    # -- metadata -----------------------------------------------------------------

    @app.post("/meta/schemas", status_code=201)
    def post_schema(request: Request, body: dict = Body(None)):
        body = _json_body(body)
        if "type_name" not in body or "schema" not in body:
            raise MalformedRequest("schema registration needs type_name and schema")
        schema = MetadataSchema(body["type_name"], body["schema"])
        return commons.meta.register_schema(schema, principal(request)).to_dict()

    @app.post("/meta/query")
    def post_query(request: Request, body: Any = Body(None)):
        return commons.meta.query(_json_body(body), principal(request))

    @app.get("/meta/{name:path}")
    def get_meta(name: str, request: Request, type: str | None = None):
        return commons.meta.get_document(name, type or None, principal(request)).to_dict()

    @app.put("/meta/{name:path}")
    def put_meta(name: str, request: Request, type: str | None = None, body: Any = Body(None)):
        doc = commons.meta.put_document(name, type or None, _json_body(body), principal(request))
        return doc.to_dict()

    # -- ACLs, attributes, groups ---------------------------------------------------

    def acl_target(name: str, meta: str | None) -> tuple[str, str]:
        record = commons.index.get_record(name)
        if record is None:
            raise NotFound(f"unknown alias: {name}")
        if meta is None:
            return alias_target(name), record.release
        doc = commons.meta.find(name, meta or None)
        if doc is None:
            raise NotFound(f"no {meta or 'untyped'} metadata for {name}")
        return doc_target(doc.doc_id), record.release

    @app.get("/acl/{name:path}")
    def get_acl(name: str, request: Request, meta: str | None = None):
        target, release = acl_target(name, meta)
        commons.access.require(target, release, principal(request), "read")
        return commons.access.get(target).to_dict()

    @app.put("/acl/{name:path}")
    def put_acl(name: str, request: Request, meta: str | None = None, body: dict = Body(None)):
        body = _json_body(body)
        op = body.get("op", "grant")
        if op not in ("grant", "revoke") or "principal" not in body or "rights" not in body:
            raise MalformedRequest("body must hold op (grant|revoke), principal and rights")
        target, release = acl_target(name, meta)
        change = commons.access.grant if op == "grant" else commons.access.revoke
        acl = change(target, release, PrincipalId.parse(body["principal"]), body["rights"],
                     principal(request))
        return acl.to_dict()

    @app.get("/attr/{name:path}")
    def get_attr(name: str, request: Request):
        return commons.index.attributes_get(name, principal(request))

    @app.put("/attr/{name:path}")
    def put_attr(name: str, request: Request, body: dict = Body(None)):
        return commons.index.attributes_set(name, _json_body(body), principal(request))

    @app.get("/groups/{group}")
    def get_group(group: str):
        return sorted(commons.access.directory().membership.get(group, frozenset()))

    @app.put("/groups/{group}")
    def put_group(group: str, request: Request, body: dict = Body(None)):
        require_admin(principal(request))
        members = _json_body(body).get("members", [])
        commons.access.set_group(group, members)
        return sorted(set(members))

    # -- objects ----------------------------------------------------------------------

    @app.put("/buckets/{bucket}", status_code=201)
    def put_bucket(bucket: str, request: Request):
        if principal(request).is_anonymous:
            raise AccessDenied("anonymous callers cannot create buckets")
        commons.objects.create_bucket(bucket)
        return {"bucket": bucket}

    @app.put("/objects/{bucket}/{key:path}", status_code=201)
    async def put_object(bucket: str, key: str, request: Request):
        if principal(request).is_anonymous:
            raise AccessDenied("anonymous callers cannot store objects")
        content = await request.body()
        stored = await run_in_threadpool(commons.objects.put, bucket, key, content)
        return {"locator": stored.locator, "size": stored.size, "hashes": stored.hashes.to_dict()}

    # -- peer surface ------------------------------------------------------------------

    @app.get("/peer/changes")
    def peer_changes(request: Request, since: int = Query(0, ge=0), limit: int = Query(500, gt=0, le=5000)):
        if calling_peer(request) is None:
            raise AccessDenied("change feed is only served to peers")
        entries, cursor = commons.feed.read(since, limit)
        body = {
            "changes": [published_entry(e, commons.public_url) for e in entries],
            "next": cursor,
            "head": commons.feed.head(),
        }
        response = JSONResponse(body)
        meter_egress(request, len(response.body))
        return response

    def readable_hash(request: Request, md5: str, nbytes: int) -> bool:
        if calling_peer(request) is not None:
            return True
        actor = principal(request)
        for record in commons.index.records():
            if record.hash_key == (md5, nbytes) and commons.access.allowed(
                    alias_target(record.name), record.release, actor, "read"):
                return True
        return False

    @app.get("/peer/object")
    def get_peer_object(request: Request, hash: str | None = None, size: str | None = None):
        alg, digest, nbytes = parse_hash_query(hash, size)
        record = commons.index.resolve_hash(alg, digest, nbytes)
        if not readable_hash(request, record.hashes.md5, nbytes):
            raise AccessDenied("no readable identifier refers to this object")
        local = [u for u in record.urls if is_local(u)]
        source = commons.objects.first_verifiable(local, record.hashes, record.size)
        if source is None:
            raise NotFound(f"no verifiable local copy of md5:{record.hashes.md5}")
        content = commons.objects.read_verified(source, record.hashes, record.size)
        meter_egress(request, len(content))
        return Response(content, media_type="application/octet-stream")

    @app.put("/peer/object")
    async def put_peer_object(request: Request, hash: str | None = None, size: str | None = None):
        if calling_peer(request) is None:
            raise AccessDenied("only peers may push objects")
        alg, digest, nbytes = parse_hash_query(hash, size)
        if alg != "md5":
            raise MalformedQuery("objects are pushed by md5")
        declared = {"md5": digest}
        for extra in ("sha1", "sha256"):
            if extra in request.query_params:
                declared[extra] = request.query_params[extra]
        expected = HashSet(declared)
        content = await request.body()
        return await run_in_threadpool(_store_pushed, commons, expected, nbytes, content)

    # -- metering ------------------------------------------------------------------------

    @app.post("/usage/events", status_code=201)
    def post_usage(request: Request, body: dict = Body(None)):
        require_admin(principal(request))
        event = commons.meter.record_usage(UsageEvent.from_dict(_json_body(body)))
        return event.to_dict()

    @app.put("/usage/allocations")
    def put_allocation(request: Request, body: dict = Body(None)):
        require_admin(principal(request))
        body = _json_body(body)
        allocation = Allocation(PrincipalId.parse(body.get("actor")), body.get("kind", CORE_HOURS),
                                body.get("cap", 0), bool(body.get("hard", True)))
        commons.meter.set_allocation(allocation)
        return {"actor": str(allocation.actor), "kind": allocation.kind,
                "cap": str(allocation.cap), "hard": allocation.hard}

    @app.get("/usage/invoice")
    def get_invoice(request: Request, actor: str, period: str, format: str = "json"):
        caller = principal(request)
        subject = PrincipalId.parse(actor)
        if caller != subject:
            require_admin(caller)
        invoice = commons.meter.monthly_invoice(subject, period)
        if format == "text":
            return PlainTextResponse(invoice.to_text() + "\n")
        return invoice.to_dict()

    @app.get("/usage/report")
    def get_report(request: Request, period: str, thresholds: str):
        require_admin(principal(request))
        try:
            cutoffs = [int(t) for t in thresholds.split(",") if t.strip()]
        except ValueError:
            raise MalformedQuery("thresholds must be comma-separated integers") from None
        return [{"cutoff": int(c), "users": n}
                for c, n in commons.meter.threshold_report(period, cutoffs)]

    @app.post("/usage/capacity")
    def post_capacity(body: dict = Body(None)):
        body = _json_body(body)
        return capacity_report(body.get("used", {}), body.get("totals", {}),
                               body.get("targets")).to_dict()

    return app


def _store_pushed(commons: Commons, expected: HashSet, size: int, content: bytes) -> dict:
    observed, nbytes = digest_stream(content, {"md5", "sha256", *expected.algorithms()})
    if nbytes != size:
        raise HashMismatch("size", size, nbytes, "pushed object")
    for alg, value in expected.items():
        if alg in observed.algorithms() and observed.get(alg) != value:
            raise HashMismatch(alg, value, observed.get(alg), "pushed object")
    commons.objects.create_bucket(PEER_BUCKET)
    stored = commons.objects.put(PEER_BUCKET, object_name(expected.md5, size), content)
    record = commons.index.register_hash(observed.merged(expected), size, [stored.locator])
    doc = record.to_dict()
    doc["urls"] = [publish_url(u, record.key, commons.public_url) for u in record.urls]
    return doc
