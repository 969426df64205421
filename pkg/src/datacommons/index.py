"""Two-layer identifier index: mutable aliases over immutable (md5, size) hash records."""

from __future__ import annotations

import dataclasses
import logging
from typing import Any, Iterable, Iterator, Mapping

from . import feed as changes
from .accessctl import READ, WRITE, AccessControl, AccessControlList, PrincipalId
from .errors import (
    AccessDenied, AliasExists, HashConflict, MalformedRequest, NotFound, UnsupportedAlgorithm,
)
from .feed import ChangeFeed
from .idmodel import (
    DIGEST_LENGTHS, PUBLIC, AliasId, DigitalIdRecord, HashRecord, HashSet, parse_alias,
    union_urls, validate_attributes,
)
from .storage import Database, dumps, loads

log = logging.getLogger(__name__)

PATCHABLE = frozenset({"urls", "release", "metadata", "hashes", "size"})


def alias_target(name: str) -> str:
    return f"alias:{name}"


class Index:
    def __init__(self, db: Database, access: AccessControl, feed: ChangeFeed,
                 authority: str = "local-commons", admins: Iterable[str] = ()):
        self.db = db
        self.access = access
        self.feed = feed
        self.authority = authority
        self.admins = frozenset(admins)
        db.executescript(
            """
            CREATE TABLE IF NOT EXISTS hashes (
                md5 TEXT NOT NULL,
                size INTEGER NOT NULL,
                doc TEXT NOT NULL,
                PRIMARY KEY (md5, size)
            );
            CREATE TABLE IF NOT EXISTS aliases (
                name TEXT PRIMARY KEY,
                md5 TEXT NOT NULL,
                size INTEGER NOT NULL,
                doc TEXT NOT NULL,
                FOREIGN KEY (md5, size) REFERENCES hashes (md5, size)
            );
            CREATE INDEX IF NOT EXISTS aliases_by_hash ON aliases (md5, size);
            CREATE TABLE IF NOT EXISTS attributes (
                name TEXT NOT NULL,
                key TEXT NOT NULL,
                value TEXT NOT NULL,
                PRIMARY KEY (name, key)
            );
            CREATE TABLE IF NOT EXISTS tombstones (
                name TEXT PRIMARY KEY,
                doc TEXT NOT NULL
            );
            """
        )

    # -- hash layer ---------------------------------------------------------

    def get_hash(self, md5: str, size: int) -> HashRecord | None:
        with self.db.transaction() as conn:
            row = conn.execute(
                "SELECT doc FROM hashes WHERE md5 = ? AND size = ?", (md5, size)
            ).fetchone()
        return HashRecord.from_dict(loads(row["doc"])) if row else None

    def register_hash(self, hashes: HashSet, size: int, urls: Iterable[str] = ()) -> HashRecord:
        """Create the hash record for (md5, size) or merge digests and urls into it."""
        with self.db.transaction() as conn:
            existing = self.get_hash(hashes.md5, size)
            if existing is None:
                record = HashRecord(hashes, size, union_urls(urls))
            else:
                clash = existing.hashes.conflicts_with(hashes)
                if clash:
                    raise HashConflict(
                        f"md5:{hashes.md5} size {size} already registered with different "
                        f"{', '.join(clash)} digest"
                    )
                record = HashRecord(
                    existing.hashes.merged(hashes), size, union_urls(existing.urls, urls)
                )
                if record == existing:
                    return existing
            self._write_hash(conn, record)
        return record

    def _write_hash(self, conn, record: HashRecord) -> None:
        conn.execute(
            "INSERT OR REPLACE INTO hashes (md5, size, doc) VALUES (?, ?, ?)",
            (record.hashes.md5, record.size, dumps(record.to_dict())),
        )
        self.feed.append(changes.HASH, f"{record.hashes.md5}:{record.size}", record.to_dict())

    def _relocate_hash(self, conn, key: tuple[str, int], removed: set[str], added: Iterable[str]) -> None:
        existing = self.get_hash(*key)
        if existing is None:
            return
        kept = [u for u in existing.urls if u not in removed]
        record = dataclasses.replace(existing, urls=union_urls(added, kept))
        if record != existing:
            self._write_hash(conn, record)

    def resolve_hash(self, algorithm: str, digest: str, size: int) -> HashRecord:
        algorithm = algorithm.lower()
        if algorithm not in DIGEST_LENGTHS:
            raise UnsupportedAlgorithm(f"unsupported digest algorithm: {algorithm}")
        digest = digest.lower()
        if algorithm == "md5":
            record = self.get_hash(digest, size)
            if record is not None:
                return record
        else:
            for record in self.hash_records():
                if record.size == size and record.hashes.get(algorithm) == digest:
                    return record
        raise NotFound(f"no object with {algorithm}:{digest} and size {size}")

    def hash_records(self) -> Iterator[HashRecord]:
        with self.db.transaction() as conn:
            rows = conn.execute("SELECT doc FROM hashes ORDER BY md5, size").fetchall()
        for row in rows:
            yield HashRecord.from_dict(loads(row["doc"]))

    # -- alias layer --------------------------------------------------------

    def get_record(self, name: str) -> DigitalIdRecord | None:
        with self.db.transaction() as conn:
            row = conn.execute("SELECT doc FROM aliases WHERE name = ?", (name,)).fetchone()
        return DigitalIdRecord.from_dict(loads(row["doc"])) if row else None

    def exists(self, name: str) -> bool:
        return self.get_record(name) is not None

    def is_tombstoned(self, name: str) -> bool:
        with self.db.transaction() as conn:
            return conn.execute("SELECT 1 FROM tombstones WHERE name = ?", (name,)).fetchone() is not None

    def records(self) -> Iterator[DigitalIdRecord]:
        with self.db.transaction() as conn:
            rows = conn.execute("SELECT doc FROM aliases ORDER BY name").fetchall()
        for row in rows:
            yield DigitalIdRecord.from_dict(loads(row["doc"]))

    def _write_record(self, conn, record: DigitalIdRecord) -> None:
        conn.execute(
            "INSERT OR REPLACE INTO aliases (name, md5, size, doc) VALUES (?, ?, ?, ?)",
            (record.name, record.hashes.md5, record.size, dumps(record.to_dict())),
        )
        self.feed.append(changes.ALIAS, record.name, record.to_dict())

    def can_mint(self, authority: str, actor: PrincipalId) -> bool:
        if actor.is_anonymous:
            return False
        return authority == self.authority or actor.name in self.admins

    def mint(
        self,
        alias: AliasId | str,
        hashes: HashSet,
        size: int,
        urls: Iterable[str] = (),
        *,
        actor: PrincipalId,
        authority: str | None = None,
        release: str = PUBLIC,
        metadata: str | None = None,
    ) -> DigitalIdRecord:
        name = alias.raw if isinstance(alias, AliasId) else parse_alias(alias).raw
        authority = authority or self.authority
        if not self.can_mint(authority, actor):
            raise AccessDenied(f"{actor} may not mint identifiers under {authority}")
        record = DigitalIdRecord.create(
            name=name, hashes=hashes, size=size, authority=authority,
            metadata=metadata, release=release, urls=tuple(urls),
        )
        with self.db.transaction() as conn:
            if self.exists(name) or self.is_tombstoned(name):
                raise AliasExists(f"alias already in use: {name}")
            self.register_hash(hashes, size, record.urls)
            self._write_record(conn, record)
            self.access.bootstrap_owner(alias_target(name), actor)
        log.info("minted %s -> md5:%s size %d", name, hashes.md5, size)
        return record

    def resolve_alias(self, alias: AliasId | str, actor: PrincipalId) -> DigitalIdRecord:
        name = str(alias)
        record = self.get_record(name)
        if record is None:
            raise NotFound(f"unknown alias: {name}")
        self.access.require(alias_target(name), record.release, actor, READ)
        return record

    def match_prefix(self, path: str) -> tuple[DigitalIdRecord, str] | None:
        """Longest stored alias that equals ``path`` or prefixes it at a ``/``."""
        record = self.get_record(path)
        if record is not None:
            return record, ""
        cut = len(path)
        while True:
            cut = path.rfind("/", 0, cut)
            if cut <= 0:
                return None
            record = self.get_record(path[:cut])
            if record is not None:
                return record, path[cut + 1:]

    def resolve_with_suffix(self, path: str, actor: PrincipalId) -> DigitalIdRecord:
        found = self.match_prefix(path)
        if found is None:
            raise NotFound(f"no alias prefixes {path}")
        record, remainder = found
        self.access.require(alias_target(record.name), record.release, actor, READ)
        if not remainder:
            return record
        urls = tuple(f"{u.rstrip('/')}/{remainder}" for u in record.urls)
        return dataclasses.replace(record, urls=urls)

    def update_record(self, alias: AliasId | str, patch: Mapping[str, Any],
                      actor: PrincipalId) -> DigitalIdRecord:
        name = str(alias)
        unknown = set(patch) - PATCHABLE
        if unknown:
            raise MalformedRequest(f"fields cannot be patched: {sorted(unknown)}")
        if ("hashes" in patch) != ("size" in patch):
            raise MalformedRequest("hashes and size must be patched together")
        with self.db.transaction() as conn:
            current = self.get_record(name)
            if current is None:
                raise NotFound(f"unknown alias: {name}")
            self.access.require(alias_target(name), current.release, actor, WRITE)
            changes_: dict[str, Any] = {}
            if "urls" in patch:
                changes_["urls"] = tuple(patch["urls"])
            if "release" in patch:
                changes_["release"] = patch["release"]
            if "metadata" in patch:
                changes_["metadata"] = patch["metadata"]
            if "hashes" in patch:
                hashes = patch["hashes"]
                changes_["hashes"] = hashes if isinstance(hashes, HashSet) else HashSet(hashes)
                changes_["size"] = patch["size"]
            return self._apply_update(conn, current, changes_)

    def _apply_update(self, conn, current: DigitalIdRecord, fields: dict[str, Any]) -> DigitalIdRecord:
        updated = current.updated(**fields)
        if updated == current:
            return current
        if updated.hash_key != current.hash_key:
            self.register_hash(updated.hashes, updated.size, updated.urls)
        else:
            if updated.hashes != current.hashes:
                self.register_hash(updated.hashes, updated.size)
            if updated.urls != current.urls:
                removed = set(current.urls) - set(updated.urls)
                self._relocate_hash(conn, updated.hash_key, removed, updated.urls)
        self._write_record(conn, updated)
        return updated

    def delete_alias(self, alias: AliasId | str, actor: PrincipalId) -> DigitalIdRecord:
        """Tombstone an alias; its hash record stays resolvable."""
        name = str(alias)
        with self.db.transaction() as conn:
            current = self.get_record(name)
            if current is None:
                raise NotFound(f"unknown alias: {name}")
            self.access.require(alias_target(name), current.release, actor, WRITE)
            self._tombstone(conn, current)
        return current

    def _tombstone(self, conn, record: DigitalIdRecord) -> None:
        conn.execute("DELETE FROM aliases WHERE name = ?", (record.name,))
        conn.execute("DELETE FROM attributes WHERE name = ?", (record.name,))
        conn.execute(
            "INSERT OR REPLACE INTO tombstones (name, doc) VALUES (?, ?)",
            (record.name, dumps(record.to_dict())),
        )
        self.access.drop(alias_target(record.name))
        self.feed.append(changes.TOMBSTONE, record.name, {"name": record.name})

    # -- replication entry points (no authorization; callers check) ----------

    def apply_record(self, record: DigitalIdRecord, owner: PrincipalId | None = None) -> bool:
        """Insert or replace ``record`` verbatim. Returns True if the store changed."""
        with self.db.transaction() as conn:
            current = self.get_record(record.name)
            if current == record:
                return False
            self.register_hash(record.hashes, record.size, record.urls)
            if current is not None and current.hash_key == record.hash_key:
                removed = set(current.urls) - set(record.urls)
                self._relocate_hash(conn, record.hash_key, removed, record.urls)
            conn.execute("DELETE FROM tombstones WHERE name = ?", (record.name,))
            self._write_record(conn, record)
            if current is None and owner is not None:
                self.access.bootstrap_owner(alias_target(record.name), owner)
        return True

    def apply_tombstone(self, name: str) -> bool:
        with self.db.transaction() as conn:
            current = self.get_record(name)
            if current is None:
                return False
            self._tombstone(conn, current)
        return True

    def apply_attributes(self, name: str, pairs: Mapping[str, str]) -> bool:
        pairs = validate_attributes(pairs)
        with self.db.transaction() as conn:
            if not self.exists(name):
                raise NotFound(f"unknown alias: {name}")
            if self._attributes(conn, name) == pairs:
                return False
            conn.execute("DELETE FROM attributes WHERE name = ?", (name,))
            conn.executemany(
                "INSERT INTO attributes (name, key, value) VALUES (?, ?, ?)",
                [(name, k, v) for k, v in pairs.items()],
            )
            self.feed.append(changes.ATTR, name, {"name": name, "attributes": pairs})
        return True

    # -- duplicates, attributes, ACLs ----------------------------------------

    def detect_duplicates(self) -> list[tuple[HashRecord, list[AliasId]]]:
        with self.db.transaction() as conn:
            rows = conn.execute(
                "SELECT md5, size, name FROM aliases WHERE (md5, size) IN ("
                " SELECT md5, size FROM aliases GROUP BY md5, size HAVING COUNT(*) >= 2)"
                " ORDER BY md5, size, name"
            ).fetchall()
            groups: dict[tuple[str, int], list[AliasId]] = {}
            for row in rows:
                groups.setdefault((row["md5"], row["size"]), []).append(parse_alias(row["name"]))
            return [(self.get_hash(*key), names) for key, names in groups.items()]

    def _attributes(self, conn, name: str) -> dict[str, str]:
        rows = conn.execute(
            "SELECT key, value FROM attributes WHERE name = ? ORDER BY key", (name,)
        ).fetchall()
        return {r["key"]: r["value"] for r in rows}

    def attributes_get(self, alias: AliasId | str, actor: PrincipalId) -> dict[str, str]:
        name = str(alias)
        self.resolve_alias(name, actor)
        with self.db.transaction() as conn:
            return self._attributes(conn, name)

    def attributes_set(self, alias: AliasId | str, pairs: Mapping[str, str],
                       actor: PrincipalId) -> dict[str, str]:
        name = str(alias)
        pairs = validate_attributes(pairs)
        with self.db.transaction() as conn:
            record = self.get_record(name)
            if record is None:
                raise NotFound(f"unknown alias: {name}")
            self.access.require(alias_target(name), record.release, actor, WRITE)
            merged = {**self._attributes(conn, name), **pairs}
            self.apply_attributes(name, merged)
            return merged

    def get_acl(self, alias: AliasId | str, actor: PrincipalId) -> AccessControlList:
        name = str(alias)
        self.resolve_alias(name, actor)
        return self.access.get(alias_target(name))

    def grant(self, alias: AliasId | str, principal: PrincipalId, rights: Iterable[str],
              actor: PrincipalId) -> AccessControlList:
        record = self._require_record(str(alias))
        return self.access.grant(alias_target(record.name), record.release, principal, rights, actor)

    def revoke(self, alias: AliasId | str, principal: PrincipalId, rights: Iterable[str],
               actor: PrincipalId) -> AccessControlList:
        record = self._require_record(str(alias))
        return self.access.revoke(alias_target(record.name), record.release, principal, rights, actor)

    def _require_record(self, name: str) -> DigitalIdRecord:
        record = self.get_record(name)
        if record is None:
            raise NotFound(f"unknown alias: {name}")
        return record
