"""Append-only change log that peers pull from with a monotonically increasing cursor."""

from __future__ import annotations

from .errors import FeedGap, MalformedRequest
from .storage import Database, dumps, loads

ALIAS = "alias"
HASH = "hash"
ATTR = "attr"
META = "meta"
SCHEMA = "schema"
TOMBSTONE = "tombstone"
KINDS = (ALIAS, HASH, ATTR, META, SCHEMA, TOMBSTONE)


class ChangeFeed:
    def __init__(self, db: Database):
        self.db = db
        db.executescript(
            """
            CREATE TABLE IF NOT EXISTS changes (
                seq INTEGER PRIMARY KEY AUTOINCREMENT,
                kind TEXT NOT NULL,
                key TEXT NOT NULL,
                doc TEXT NOT NULL
            );
            CREATE TABLE IF NOT EXISTS feed_state (
                name TEXT PRIMARY KEY,
                value INTEGER NOT NULL
            );
            """
        )

    def append(self, kind: str, key: str, doc: dict) -> int:
        if kind not in KINDS:
            raise ValueError(f"unknown change kind {kind}")
        with self.db.transaction() as conn:
            cur = conn.execute(
                "INSERT INTO changes (kind, key, doc) VALUES (?, ?, ?)", (kind, key, dumps(doc))
            )
            return cur.lastrowid

    def head(self) -> int:
        with self.db.transaction() as conn:
            row = conn.execute("SELECT MAX(seq) AS seq FROM changes").fetchone()
            return max(row["seq"] or 0, self._pruned_through(conn))

    def _pruned_through(self, conn) -> int:
        row = conn.execute("SELECT value FROM feed_state WHERE name = 'pruned_through'").fetchone()
        return row["value"] if row else 0

    def read(self, since: int = 0, limit: int = 500) -> tuple[list[dict], int]:
        """Entries with ``seq > since`` (at most ``limit``) and the cursor to resume from."""
        if since < 0 or limit <= 0:
            raise MalformedRequest("cursor must be >= 0 and limit > 0")
        with self.db.transaction() as conn:
            pruned = self._pruned_through(conn)
            if since < pruned:
                raise FeedGap(f"cursor {since} predates retained history (pruned through {pruned})")
            rows = conn.execute(
                "SELECT seq, kind, key, doc FROM changes WHERE seq > ? ORDER BY seq LIMIT ?",
                (since, limit),
            ).fetchall()
        entries = [
            {"seq": r["seq"], "kind": r["kind"], "key": r["key"], "doc": loads(r["doc"])}
            for r in rows
        ]
        return entries, (entries[-1]["seq"] if entries else since)

    def compact(self, keep_last: int) -> int:
        """Drop all but the newest ``keep_last`` entries; returns the new prune point."""
        with self.db.transaction() as conn:
            head = conn.execute("SELECT MAX(seq) AS seq FROM changes").fetchone()["seq"] or 0
            cutoff = max(head - keep_last, self._pruned_through(conn))
            conn.execute("DELETE FROM changes WHERE seq <= ?", (cutoff,))
            conn.execute(
                "INSERT OR REPLACE INTO feed_state (name, value) VALUES ('pruned_through', ?)",
                (cutoff,),
            )
        return cutoff
