"""Moving data between commons: portability bundles, change-feed sync and staged migration.

A bundle is a directory::

    manifest.json        canonical JSON, one entry per alias
    objects/<md5>-<size> payload bytes
    bundle.digest        {"md5": ..., "sha256": ...} over manifest.json
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable

import httpx

from . import feed as changes
from .accessctl import READ, WRITE, PrincipalId
from .errors import (
    BundleCorrupt, CommonsError, FeedGap, HashConflict, HashMismatch, NetworkError,
    NotFound, PeerUnreachable, ValidationFailed, from_payload, MalformedRequest,
)
from .idmodel import (
    DigitalIdRecord, HashRecord, HashSet, canonical_json, digest_stream, union_urls,
)
from .index import alias_target
from .metastore import MetadataDocument, MetadataSchema, doc_target
from .metering import EGRESS_BYTES, UsageEvent
from .storage import Database

if TYPE_CHECKING:
    from .commons import Commons

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "datacommons-bundle/1"
MANIFEST = "manifest.json"
DIGEST_FILE = "bundle.digest"
OBJECTS_DIR = "objects"
PEER_HEADER = "X-Commons-Peer"


def object_name(md5: str, size: int) -> str:
    return f"{md5}-{size}"


@dataclass(frozen=True)
class PeerAgreement:
    peer_name: str
    endpoint: str
    no_cost: bool = True

    def to_dict(self) -> dict:
        return {"peer_name": self.peer_name, "endpoint": self.endpoint, "no_cost": self.no_cost}


class PeerRegistry:
    """Peer agreements plus the sync cursor kept for each peer."""

    def __init__(self, db: Database):
        self.db = db
        db.executescript(
            """
            CREATE TABLE IF NOT EXISTS peers (
                name TEXT PRIMARY KEY,
                endpoint TEXT NOT NULL,
                no_cost INTEGER NOT NULL,
                cursor INTEGER NOT NULL DEFAULT 0
            );
            """
        )

    def add(self, agreement: PeerAgreement) -> PeerAgreement:
        if not agreement.peer_name:
            raise MalformedRequest("peer name must be non-empty")
        with self.db.transaction() as conn:
            conn.execute(
                "INSERT INTO peers (name, endpoint, no_cost) VALUES (?, ?, ?)"
                " ON CONFLICT (name) DO UPDATE SET endpoint = excluded.endpoint,"
                " no_cost = excluded.no_cost",
                (agreement.peer_name, agreement.endpoint.rstrip("/"), int(agreement.no_cost)),
            )
        return agreement

    def get(self, name: str) -> PeerAgreement | None:
        with self.db.transaction() as conn:
            row = conn.execute("SELECT * FROM peers WHERE name = ?", (name,)).fetchone()
        return PeerAgreement(row["name"], row["endpoint"], bool(row["no_cost"])) if row else None

    def require(self, name: str) -> PeerAgreement:
        agreement = self.get(name)
        if agreement is None:
            raise NotFound(f"no peering agreement with {name}")
        return agreement

    def all(self) -> list[PeerAgreement]:
        with self.db.transaction() as conn:
            rows = conn.execute("SELECT * FROM peers ORDER BY name").fetchall()
        return [PeerAgreement(r["name"], r["endpoint"], bool(r["no_cost"])) for r in rows]

    def no_cost(self, name: str) -> bool:
        agreement = self.get(name)
        return agreement is not None and agreement.no_cost

    def cursor(self, name: str) -> int:
        with self.db.transaction() as conn:
            row = conn.execute("SELECT cursor FROM peers WHERE name = ?", (name,)).fetchone()
        return row["cursor"] if row else 0

    def set_cursor(self, name: str, cursor: int) -> None:
        with self.db.transaction() as conn:
            conn.execute("UPDATE peers SET cursor = ? WHERE name = ?", (cursor, name))


class PeerClient:
    """HTTP client for another commons' ``/peer`` endpoints."""

    def __init__(self, agreement: PeerAgreement, http: httpx.Client, our_name: str):
        self.agreement = agreement
        self.http = http
        self.headers = {PEER_HEADER: our_name}

    @property
    def base(self) -> str:
        return self.agreement.endpoint.rstrip("/")

    def object_url(self, md5: str, size: int) -> str:
        return f"{self.base}/peer/object?hash=md5:{md5}&size={size}"

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            resp = self.http.request(method, f"{self.base}{path}", headers=self.headers, **kwargs)
        except httpx.HTTPError as exc:
            raise PeerUnreachable(f"{self.agreement.peer_name}: {exc}") from exc
        if resp.status_code >= 400:
            try:
                payload = resp.json()
            except ValueError:
                payload = {"message": resp.text}
            raise from_payload(resp.status_code, payload)
        return resp

    def changes(self, since: int, limit: int = 500) -> dict:
        return self._request("GET", "/peer/changes", params={"since": since, "limit": limit}).json()

    def put_object(self, hashes: HashSet, size: int, content: bytes) -> HashRecord:
        params = {"hash": f"md5:{hashes.md5}", "size": size}
        for alg, value in hashes.items():
            if alg != "md5":
                params[alg] = value
        resp = self._request("PUT", "/peer/object", params=params, content=content)
        return HashRecord.from_dict(resp.json())


def publish_url(url: str, record_hash: tuple[str, int], public_url: str | None) -> str:
    """Express a ``local://`` locator as this commons' peer object url."""
    if public_url and url.startswith("local://"):
        md5, size = record_hash
        return f"{public_url.rstrip('/')}/peer/object?hash=md5:{md5}&size={size}"
    return url


def published_entry(entry: dict, public_url: str | None) -> dict:
    """Rewrite local locators in a feed entry so the peer can reach them."""
    kind, doc = entry["kind"], entry["doc"]
    if kind == changes.ALIAS:
        record = DigitalIdRecord.from_dict(doc)
        urls = union_urls(publish_url(u, record.hash_key, public_url) for u in record.urls)
        if urls != record.urls:
            doc = record.updated(urls=urls).to_dict()
    elif kind == changes.HASH:
        key = (doc["hashes"]["md5"], doc["size"])
        doc = {**doc, "urls": list(union_urls(publish_url(u, key, public_url) for u in doc["urls"]))}
    return {**entry, "doc": doc}


# -- portability bundles -------------------------------------------------------

@dataclass
class PortabilityBundle:
    path: Path
    manifest: dict
    bundle_digest: HashSet

    @property
    def entries(self) -> list[dict]:
        return self.manifest["entries"]

    @classmethod
    def open(cls, path: str | Path) -> PortabilityBundle:
        """Read a bundle directory and check its manifest digest."""
        path = Path(path)
        try:
            raw = (path / MANIFEST).read_bytes()
            digest = HashSet(_loads((path / DIGEST_FILE).read_bytes()))
        except (OSError, ValueError, CommonsError) as exc:
            raise BundleCorrupt(f"unreadable bundle at {path}: {exc}") from exc
        observed, _ = digest_stream(raw, digest.algorithms())
        if observed != digest:
            raise BundleCorrupt("manifest does not match bundle.digest")
        try:
            manifest = _loads(raw)
        except ValueError as exc:
            raise BundleCorrupt(f"manifest is not JSON: {exc}") from exc
        if manifest.get("format") != BUNDLE_FORMAT:
            raise BundleCorrupt(f"unknown bundle format {manifest.get('format')!r}")
        return cls(path, manifest, digest)


def _loads(raw: bytes) -> Any:
    return json.loads(raw.decode("utf-8"))


def export_bundle(commons: Commons, aliases: Iterable[str], dest: str | Path, *,
                  actor: PrincipalId, include_payload: bool = True) -> PortabilityBundle:
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / OBJECTS_DIR).mkdir(exist_ok=True)
    entries, type_names = [], set()
    for name in aliases:
        record = commons.index.resolve_alias(name, actor)
        docs = []
        for doc in commons.meta.documents(record.name):
            if commons.access.allowed(doc_target(doc.doc_id), record.release, actor, READ):
                docs.append(doc.to_dict())
                if doc.type_name:
                    type_names.add(doc.type_name)
        obj = None
        if include_payload and record.urls:
            obj = f"{OBJECTS_DIR}/{object_name(*record.hash_key)}"
            if not (dest / obj).exists():
                _pack_object(commons, record, dest / obj)
        entries.append({
            "record": record.to_dict(),
            "attributes": commons.index.attributes_get(record.name, actor),
            "metadata": docs,
            "object": obj,
        })
    schemas = [s.to_dict() for s in commons.meta.schemas() if s.type_name in type_names]
    manifest = {"format": BUNDLE_FORMAT, "source": commons.authority,
                "schemas": schemas, "entries": entries}
    raw = canonical_json(manifest)
    (dest / MANIFEST).write_bytes(raw)
    digest, _ = digest_stream(raw, ("md5", "sha256"))
    (dest / DIGEST_FILE).write_bytes(canonical_json(digest.to_dict()))
    log.info("exported %d aliases to %s", len(entries), dest)
    return PortabilityBundle(dest, manifest, digest)


def _pack_object(commons: Commons, record: DigitalIdRecord, target: Path) -> None:
    error: Exception | None = None
    for url in record.urls:
        try:
            with commons.objects.open_verified(url, record.hashes, record.size) as src:
                tmp = target.with_suffix(".part")
                with open(tmp, "wb") as out:
                    shutil.copyfileobj(src, out)
                tmp.replace(target)
            return
        except HashMismatch as exc:
            error = exc
        except (NotFound, NetworkError, MalformedRequest) as exc:
            error = error or exc
    if isinstance(error, HashMismatch):
        raise error
    raise HashMismatch("availability", "a verifiable copy", f"none ({error})", record.name)


@dataclass
class ImportReport:
    created: list[str] = field(default_factory=list)
    merged: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"created": self.created, "merged": self.merged,
                "skipped": [{"name": n, "reason": r} for n, r in self.skipped]}


def import_bundle(commons: Commons, bundle: PortabilityBundle | str | Path, local_bucket: str,
                  *, actor: PrincipalId) -> ImportReport:
    if not isinstance(bundle, PortabilityBundle):
        bundle = PortabilityBundle.open(bundle)
    commons.objects.create_bucket(local_bucket)
    for doc in bundle.manifest.get("schemas", []):
        if commons.meta.get_schema(doc["type_name"]) is None:
            commons.meta.apply_schema(MetadataSchema(doc["type_name"], doc["schema"]))
    report = ImportReport()
    for entry in bundle.entries:
        name = entry.get("record", {}).get("name", "?")
        try:
            outcome = _import_entry(commons, bundle, entry, local_bucket, actor)
        except (HashMismatch, HashConflict, ValidationFailed, MalformedRequest) as exc:
            report.skipped.append((name, f"{exc.code}: {exc}"))
            continue
        if outcome == "created":
            report.created.append(name)
        elif outcome == "merged":
            report.merged.append(name)
    return report


def _import_entry(commons: Commons, bundle: PortabilityBundle, entry: dict,
                  bucket: str, actor: PrincipalId) -> str:
    incoming = DigitalIdRecord.from_dict(entry["record"])
    existing = commons.index.get_record(incoming.name)
    if existing is not None:
        if existing.hash_key != incoming.hash_key or existing.hashes.conflicts_with(incoming.hashes):
            raise HashConflict(f"{incoming.name} exists here with different content")
    held = commons.index.get_hash(*incoming.hash_key)
    if held is not None and held.hashes.conflicts_with(incoming.hashes):
        raise HashConflict(f"md5:{incoming.hashes.md5} is held here with different digests")

    urls = incoming.urls
    if entry.get("object"):
        urls = (_store_payload(commons, bundle, entry["object"], incoming, bucket),)

    if existing is None:
        commons.index.apply_record(incoming.updated(urls=urls), owner=actor)
        outcome = "created"
        attrs = dict(entry.get("attributes") or {})
    else:
        merged = union_urls(existing.urls, urls)
        if merged != existing.urls:
            commons.index.apply_record(existing.updated(urls=merged))
        outcome = "merged"
        attrs = {**(entry.get("attributes") or {}), **commons.index.attributes_get(existing.name, actor)}
    if attrs:
        commons.index.apply_attributes(incoming.name, attrs)
    for doc in entry.get("metadata", []):
        doc = MetadataDocument.from_dict(doc)
        if outcome == "merged" and (commons.meta.by_id(doc.doc_id) or commons.meta.find(doc.subject, doc.type_name)):
            continue
        commons.meta.apply_document(doc, owner=actor)
    return outcome


def _store_payload(commons: Commons, bundle: PortabilityBundle, rel: str,
                   record: DigitalIdRecord, bucket: str) -> str:
    key = object_name(*record.hash_key)
    locator = f"local://{bucket}/{key}"
    path = commons.objects.path_for(bucket, key)
    if path.exists():
        try:
            commons.objects.open_verified(locator, record.hashes, record.size).close()
            return locator
        except HashMismatch:
            pass
    src = bundle.path / rel
    if not src.is_file():
        raise HashMismatch("availability", rel, "missing from bundle", record.name)
    with open(src, "rb") as fh:
        observed, size = digest_stream(fh, record.hashes.algorithms())
    if size != record.size:
        raise HashMismatch("size", record.size, size, rel)
    for alg, value in record.hashes.items():
        if observed.get(alg) != value:
            raise HashMismatch(alg, value, observed.get(alg), rel)
    with open(src, "rb") as fh:
        stored = commons.objects.put(bucket, key, fh)
    if stored.hashes.md5 != record.hashes.md5 or stored.size != record.size:
        commons.objects.delete(stored.locator)
        raise HashMismatch("md5", record.hashes.md5, stored.hashes.md5, stored.locator)
    return stored.locator


# -- change-feed sync -----------------------------------------------------------

@dataclass
class SyncResult:
    applied: int
    cursor: int

    def to_dict(self) -> dict:
        return {"applied": self.applied, "cursor": self.cursor}


def apply_change(commons: Commons, entry: dict, owner: PrincipalId | None) -> bool:
    kind, doc = entry["kind"], entry["doc"]
    if kind == changes.HASH:
        before = commons.index.get_hash(doc["hashes"]["md5"], doc["size"])
        after = commons.index.register_hash(HashSet(doc["hashes"]), doc["size"], doc["urls"])
        return before != after
    if kind == changes.ALIAS:
        record = DigitalIdRecord.from_dict(doc)
        current = commons.index.get_record(record.name)
        if current is not None and current.rev == record.rev and current == record:
            return False
        return commons.index.apply_record(record, owner=owner)
    if kind == changes.ATTR:
        if not commons.index.exists(doc["name"]):
            return False
        return commons.index.apply_attributes(doc["name"], doc["attributes"])
    if kind == changes.SCHEMA:
        before = commons.meta.get_schema(doc["type_name"])
        after = commons.meta.apply_schema(MetadataSchema(doc["type_name"], doc["schema"]))
        return before != after
    if kind == changes.META:
        if not commons.index.exists(doc["subject"]):
            return False
        return commons.meta.apply_document(MetadataDocument.from_dict(doc), owner=owner)
    if kind == changes.TOMBSTONE:
        return commons.index.apply_tombstone(doc["name"])
    log.warning("ignoring unknown change kind %s", kind)
    return False


def sync_from_peer(commons: Commons, peer_name: str, *, since: int | None = None,
                   actor: PrincipalId | None = None, batch: int = 500) -> SyncResult:
    """Pull the peer's change feed from ``since`` (default: the stored cursor).

    The cursor is checkpointed after every applied entry, so an interrupted
    sync resumes where it stopped. Entries already reflected locally are
    skipped, which makes re-running from an old cursor apply nothing.
    """
    agreement = commons.peers.require(peer_name)
    client = commons.peer_client(agreement)
    cursor = commons.peers.cursor(peer_name) if since is None else since
    applied = 0
    while True:
        page = client.changes(cursor, batch)
        entries = page.get("changes", [])
        if not entries:
            break
        for entry in entries:
            if entry["seq"] <= cursor:
                raise FeedGap(f"peer feed went backwards at {entry['seq']}")
            try:
                if apply_change(commons, entry, actor):
                    applied += 1
            except ValidationFailed as exc:
                log.warning("skipping %s %s from %s: %s", entry["kind"], entry["key"], peer_name, exc)
            cursor = entry["seq"]
            commons.peers.set_cursor(peer_name, cursor)
        if cursor >= page.get("head", cursor):
            break
    commons.peers.set_cursor(peer_name, max(cursor, commons.peers.cursor(peer_name)))
    log.info("synced %d changes from %s (cursor %d)", applied, peer_name, cursor)
    return SyncResult(applied, cursor)


# -- staged migration -----------------------------------------------------------

TRANSFERRED = "transferred"
APPENDED = "appended"
RETIRED = "retired"


@dataclass
class MigrationProgress:
    alias: str
    status: str = "pending"
    steps: list[str] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {"alias": self.alias, "status": self.status, "steps": self.steps, "error": self.error}


def staged_migration(commons: Commons, aliases: Iterable[str], target_peer: str, *,
                     actor: PrincipalId,
                     on_step: Callable[[str, str], None] | None = None) -> list[MigrationProgress]:
    """Move each alias's object to ``target_peer`` without a window of zero locators.

    Per alias: copy and verify at the target, add the target url, then drop
    the other urls. ``on_step(alias, step)`` runs after each step; an exception
    it raises aborts the whole run (re-running resumes). Failures of a single
    alias are recorded and the run moves on.
    """
    agreement = commons.peers.require(target_peer)
    client = commons.peer_client(agreement)
    notify = on_step or (lambda alias, step: None)
    reports = []
    for name in aliases:
        progress = MigrationProgress(name)
        reports.append(progress)
        try:
            _migrate_one(commons, client, name, actor, progress, notify)
        except CommonsError as exc:
            progress.status = "failed"
            progress.error = f"{exc.code}: {exc}"
            log.warning("migration of %s failed: %s", name, exc)
    return reports


def _migrate_one(commons: Commons, client: PeerClient, name: str, actor: PrincipalId,
                 progress: MigrationProgress, notify: Callable[[str, str], None]) -> None:
    record = commons.index.resolve_alias(name, actor)
    commons.access.require(alias_target(name), record.release, actor, WRITE)
    target_url = client.object_url(*record.hash_key)
    if record.urls == (target_url,):
        progress.status = "already-migrated"
        return

    target_ok = target_url in record.urls and commons.objects.first_verifiable(
        [target_url], record.hashes, record.size) is not None
    if not target_ok:
        source = commons.objects.first_verifiable(
            [u for u in record.urls if u != target_url], record.hashes, record.size)
        if source is None:
            raise HashMismatch("availability", "a verifiable source copy", "none", name)
        payload = commons.objects.read_verified(source, record.hashes, record.size)
        client.put_object(record.hashes, record.size, payload)
        commons.objects.open_verified(target_url, record.hashes, record.size).close()
        commons.meter.record_usage(UsageEvent(
            actor=actor, kind=EGRESS_BYTES, quantity=record.size,
            peer_tag=client.agreement.peer_name))
        progress.steps.append(TRANSFERRED)
        notify(name, TRANSFERRED)

    if target_url not in record.urls:
        record = commons.index.update_record(
            name, {"urls": list(union_urls(record.urls, [target_url]))}, actor)
        progress.steps.append(APPENDED)
        notify(name, APPENDED)

    record = commons.index.update_record(name, {"urls": [target_url]}, actor)
    progress.steps.append(RETIRED)
    progress.status = "migrated"
    notify(name, RETIRED)
