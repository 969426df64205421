"""Searchable metadata documents attached to digital IDs, optionally typed by a schema.

The schema language is deliberately small::

    {"required": ["instrument", "date"],
     "properties": {"instrument": {"type": "string", "enum": ["NEXRAD", "MODIS"]},
                    "date": {"type": "string"},
                    "site": {"type": "object", "required": ["lat"],
                             "properties": {"lat": {"type": "number"}}},
                    "bands": {"type": "array", "items": {"type": "integer"}}}}

``type`` may be a single name or a non-empty list (a union). Untyped
documents are stored without any checks.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from . import feed as changes
from .accessctl import READ, WRITE, AccessControl, AccessControlList, PrincipalId, check
from .errors import (
    MalformedPredicate, MalformedRequest, MalformedSchema, NotFound, SchemaExists,
    UnknownSubject, ValidationFailed, AccessDenied,
)
from .feed import ChangeFeed
from .idmodel import canonical_json
from .index import Index, alias_target
from .storage import Database, dumps, loads

TYPES = ("string", "integer", "number", "boolean", "object", "array", "null")
_FIELD_KEYS = {"type", "enum", "required", "properties", "items"}
_SCALARS = (str, int, float, bool, type(None))


def doc_target(doc_id: str) -> str:
    return f"doc:{doc_id}"


def _json_type(value: Any) -> str | None:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, float):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, Mapping):
        return "object"
    if isinstance(value, list):
        return "array"
    return None


def _type_matches(value: Any, allowed: Iterable[str]) -> bool:
    actual = _json_type(value)
    allowed = set(allowed)
    return actual in allowed or (actual == "integer" and "number" in allowed)


def _types_of(constraint: Mapping[str, Any]) -> list[str] | None:
    declared = constraint.get("type")
    if declared is None:
        return None
    return [declared] if isinstance(declared, str) else list(declared)


def check_schema(schema: Any, path: str = "") -> None:
    """Raise MalformedSchema unless ``schema`` is a satisfiable constraint document."""
    where = path or "<root>"
    if not isinstance(schema, Mapping):
        raise MalformedSchema(f"{where}: constraint must be an object")
    extra = set(schema) - _FIELD_KEYS
    if extra:
        raise MalformedSchema(f"{where}: unknown keywords {sorted(extra)}")
    types = None
    if "type" in schema:
        declared = schema["type"]
        if isinstance(declared, str):
            types = [declared]
        elif isinstance(declared, list):
            types = declared
        else:
            raise MalformedSchema(f"{where}: type must be a name or a list of names")
        if not types:
            raise MalformedSchema(f"{where}: empty type union admits no value")
        unknown = [t for t in types if t not in TYPES]
        if unknown:
            raise MalformedSchema(f"{where}: unknown types {unknown}")
        if len(set(types)) != len(types):
            raise MalformedSchema(f"{where}: duplicate types in union")
    if "enum" in schema:
        enum = schema["enum"]
        if not isinstance(enum, list) or not enum:
            raise MalformedSchema(f"{where}: enum must be a non-empty list")
        if types is not None and not any(_type_matches(v, types) for v in enum):
            raise MalformedSchema(f"{where}: no enum value satisfies type {types}")
    structural = {"required", "properties"} & set(schema)
    if structural and types is not None and "object" not in types:
        raise MalformedSchema(f"{where}: required/properties need type object")
    if "items" in schema and types is not None and "array" not in types:
        raise MalformedSchema(f"{where}: items needs type array")
    if "required" in schema:
        required = schema["required"]
        if (not isinstance(required, list)
                or not all(isinstance(r, str) and r for r in required)
                or len(set(required)) != len(required)):
            raise MalformedSchema(f"{where}: required must list distinct field names")
    if "properties" in schema:
        props = schema["properties"]
        if not isinstance(props, Mapping):
            raise MalformedSchema(f"{where}: properties must be an object")
        for name, sub in props.items():
            if not isinstance(name, str) or not name:
                raise MalformedSchema(f"{where}: property names must be non-empty")
            check_schema(sub, f"{path}.{name}" if path else name)
    if "items" in schema:
        check_schema(schema["items"], f"{path}[]" if path else "[]")


def validate(body: Any, schema: Mapping[str, Any], path: str = "") -> list[tuple[str, str]]:
    """All violations of ``schema`` in ``body`` as (dotted path, message) pairs."""
    errors: list[tuple[str, str]] = []
    types = _types_of(schema)
    if types is not None and not _type_matches(body, types):
        errors.append((path, f"expected {' or '.join(types)}, got {_json_type(body)}"))
        return errors
    if "enum" in schema and not any(_strict_equal(body, v) for v in schema["enum"]):
        errors.append((path, f"value not in {schema['enum']!r}"))
    if isinstance(body, Mapping):
        for name in schema.get("required", []):
            if name not in body:
                errors.append((_join(path, name), "required field missing"))
        for name, sub in schema.get("properties", {}).items():
            if name in body:
                errors.extend(validate(body[name], sub, _join(path, name)))
    elif isinstance(body, list) and "items" in schema:
        for i, item in enumerate(body):
            errors.extend(validate(item, schema["items"], _join(path, str(i))))
    return errors


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def _strict_equal(a: Any, b: Any) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if type(a) in (int, float) and type(b) in (int, float):
        return a == b
    return type(a) is type(b) and a == b


_MISSING = object()


def lookup(body: Any, path: str) -> Any:
    node = body
    for segment in path.split("."):
        if isinstance(node, Mapping):
            if segment not in node:
                return _MISSING
            node = node[segment]
        elif isinstance(node, list) and segment.isdigit():
            idx = int(segment)
            if idx >= len(node):
                return _MISSING
            node = node[idx]
        else:
            return _MISSING
    return node


def check_predicate(predicate: Any) -> dict[str, Any]:
    if not isinstance(predicate, Mapping):
        raise MalformedPredicate("predicate must be an object of field-path: value pairs")
    for path, value in predicate.items():
        if not isinstance(path, str) or not path or any(not s for s in path.split(".")):
            raise MalformedPredicate(f"bad field path {path!r}")
        if not isinstance(value, _SCALARS):
            raise MalformedPredicate(f"{path}: only scalar values can be matched")
    return dict(predicate)


def matches(body: Any, predicate: Mapping[str, Any]) -> bool:
    for path, expected in predicate.items():
        found = lookup(body, path)
        if found is _MISSING or not _strict_equal(found, expected):
            return False
    return True


@dataclass(frozen=True)
class MetadataSchema:
    type_name: str
    schema: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"type_name": self.type_name, "schema": dict(self.schema)}


@dataclass(frozen=True)
class MetadataDocument:
    doc_id: str
    subject: str
    type_name: str | None
    body: Any

    def to_dict(self) -> dict[str, Any]:
        return {"doc_id": self.doc_id, "subject": self.subject,
                "type_name": self.type_name, "body": self.body}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> MetadataDocument:
        return cls(doc["doc_id"], doc["subject"], doc.get("type_name"), doc["body"])


class MetaStore:
    def __init__(self, db: Database, index: Index, access: AccessControl, feed: ChangeFeed,
                 admins: Iterable[str] = ()):
        self.db = db
        self.index = index
        self.access = access
        self.feed = feed
        self.admins = frozenset(admins)
        db.executescript(
            """
            CREATE TABLE IF NOT EXISTS schemas (
                type_name TEXT PRIMARY KEY,
                schema TEXT NOT NULL
            );
            CREATE TABLE IF NOT EXISTS documents (
                doc_id TEXT PRIMARY KEY,
                subject TEXT NOT NULL,
                type_name TEXT NOT NULL,
                body TEXT NOT NULL,
                UNIQUE (subject, type_name)
            );
            """
        )

    # -- schemas --------------------------------------------------------------

    def register_schema(self, schema: MetadataSchema, actor: PrincipalId) -> MetadataSchema:
        if actor.is_anonymous or actor.name not in self.admins:
            raise AccessDenied("only administrators may register metadata schemas")
        return self.apply_schema(schema, replace=False)

    def apply_schema(self, schema: MetadataSchema, replace: bool = True) -> MetadataSchema:
        if not isinstance(schema.type_name, str) or not schema.type_name:
            raise MalformedSchema("type_name must be a non-empty string")
        check_schema(schema.schema)
        with self.db.transaction() as conn:
            existing = self.get_schema(schema.type_name)
            if existing is not None:
                if not replace:
                    raise SchemaExists(f"schema already registered: {schema.type_name}")
                if existing == schema:
                    return existing
            conn.execute(
                "INSERT OR REPLACE INTO schemas (type_name, schema) VALUES (?, ?)",
                (schema.type_name, dumps(schema.schema)),
            )
            self.feed.append(changes.SCHEMA, schema.type_name, schema.to_dict())
        return schema

    def get_schema(self, type_name: str) -> MetadataSchema | None:
        with self.db.transaction() as conn:
            row = conn.execute(
                "SELECT schema FROM schemas WHERE type_name = ?", (type_name,)
            ).fetchone()
        return MetadataSchema(type_name, loads(row["schema"])) if row else None

    def schemas(self) -> list[MetadataSchema]:
        with self.db.transaction() as conn:
            rows = conn.execute("SELECT type_name, schema FROM schemas ORDER BY type_name").fetchall()
        return [MetadataSchema(r["type_name"], loads(r["schema"])) for r in rows]

    # -- documents ------------------------------------------------------------

    def _row_to_doc(self, row) -> MetadataDocument:
        return MetadataDocument(row["doc_id"], row["subject"], row["type_name"] or None,
                                loads(row["body"]))

    def find(self, subject: str, type_name: str | None) -> MetadataDocument | None:
        with self.db.transaction() as conn:
            row = conn.execute(
                "SELECT * FROM documents WHERE subject = ? AND type_name = ?",
                (subject, type_name or ""),
            ).fetchone()
        return self._row_to_doc(row) if row else None

    def by_id(self, doc_id: str) -> MetadataDocument | None:
        with self.db.transaction() as conn:
            row = conn.execute("SELECT * FROM documents WHERE doc_id = ?", (doc_id,)).fetchone()
        return self._row_to_doc(row) if row else None

    def documents(self, subject: str | None = None) -> list[MetadataDocument]:
        with self.db.transaction() as conn:
            if subject is None:
                rows = conn.execute("SELECT * FROM documents ORDER BY subject, type_name").fetchall()
            else:
                rows = conn.execute(
                    "SELECT * FROM documents WHERE subject = ? ORDER BY type_name", (subject,)
                ).fetchall()
        return [self._row_to_doc(r) for r in rows]

    def _validate(self, type_name: str | None, body: Any) -> None:
        if type_name is None:
            return
        schema = self.get_schema(type_name)
        if schema is None:
            raise NotFound(f"unknown metadata type: {type_name}")
        errors = validate(body, schema.schema)
        if errors:
            raise ValidationFailed(errors)

    def put_document(self, subject: str, type_name: str | None, body: Any,
                     actor: PrincipalId) -> MetadataDocument:
        type_name = type_name or None
        with self.db.transaction():
            record = self.index.get_record(subject)
            if record is None:
                raise UnknownSubject(f"no digital ID {subject}")
            existing = self.find(subject, type_name)
            if existing is not None:
                self.access.require(doc_target(existing.doc_id), record.release, actor, WRITE)
            else:
                self.access.require(alias_target(subject), record.release, actor, WRITE)
            self._validate(type_name, body)
            doc = MetadataDocument(
                existing.doc_id if existing else uuid.uuid4().hex, subject, type_name, body
            )
            self.apply_document(doc, owner=actor, validate_body=False)
        return doc

    def apply_document(self, doc: MetadataDocument, owner: PrincipalId | None = None,
                       validate_body: bool = True) -> bool:
        """Store ``doc`` verbatim (replication path). Returns True if the store changed."""
        with self.db.transaction() as conn:
            if not self.index.exists(doc.subject):
                raise UnknownSubject(f"no digital ID {doc.subject}")
            if validate_body:
                self._validate(doc.type_name, doc.body)
            current = self.by_id(doc.doc_id)
            if current is not None and canonical_json(current.to_dict()) == canonical_json(doc.to_dict()):
                return False
            slot = self.find(doc.subject, doc.type_name)
            if slot is not None and slot.doc_id != doc.doc_id:
                conn.execute("DELETE FROM documents WHERE doc_id = ?", (slot.doc_id,))
            conn.execute(
                "INSERT OR REPLACE INTO documents (doc_id, subject, type_name, body) VALUES (?, ?, ?, ?)",
                (doc.doc_id, doc.subject, doc.type_name or "", dumps(doc.body)),
            )
            if current is None and owner is not None:
                self.access.bootstrap_owner(doc_target(doc.doc_id), owner)
            self.feed.append(changes.META, doc.doc_id, doc.to_dict())
            self._link(doc)
        return True

    def _link(self, doc: MetadataDocument) -> None:
        record = self.index.get_record(doc.subject)
        if record.metadata is not None and self.by_id(record.metadata) is not None:
            return
        self.index.apply_record(record.updated(metadata=doc.doc_id))

    def get_document(self, subject: str, type_name: str | None,
                     actor: PrincipalId) -> MetadataDocument:
        record = self.index.get_record(subject)
        doc = self.find(subject, type_name) if record is not None else None
        if doc is None:
            raise NotFound(f"no {type_name or 'untyped'} metadata for {subject}")
        self.access.require(doc_target(doc.doc_id), record.release, actor, READ)
        return doc

    def _doc_for_acl(self, doc_id: str) -> tuple[MetadataDocument, str]:
        doc = self.by_id(doc_id)
        if doc is None:
            raise NotFound(f"unknown metadata document {doc_id}")
        return doc, self.index.get_record(doc.subject).release

    def grant(self, doc_id: str, principal: PrincipalId, rights: Iterable[str],
              actor: PrincipalId) -> AccessControlList:
        doc, release = self._doc_for_acl(doc_id)
        return self.access.grant(doc_target(doc.doc_id), release, principal, rights, actor)

    def revoke(self, doc_id: str, principal: PrincipalId, rights: Iterable[str],
               actor: PrincipalId) -> AccessControlList:
        doc, release = self._doc_for_acl(doc_id)
        return self.access.revoke(doc_target(doc.doc_id), release, principal, rights, actor)

    # -- search ---------------------------------------------------------------

    def query(self, predicate: Mapping[str, Any], actor: PrincipalId) -> list[str]:
        """Subjects with a readable document matching every conjunct, sorted."""
        predicate = check_predicate(predicate)
        with self.db.transaction() as conn:
            rows = conn.execute(
                "SELECT d.doc_id, d.subject, d.body, a.doc AS record FROM documents d"
                " JOIN aliases a ON a.name = d.subject"
            ).fetchall()
            acl_rows = conn.execute(
                "SELECT target, principal, rights FROM acl WHERE target LIKE 'doc:%'"
            ).fetchall()
            groups = self.access.directory()
        acls: dict[str, dict[PrincipalId, frozenset[str]]] = {}
        for r in acl_rows:
            acls.setdefault(r["target"], {})[PrincipalId.parse(r["principal"])] = frozenset(
                r["rights"].split(","))
        hits = set()
        for row in rows:
            if row["subject"] in hits:
                continue
            if not matches(loads(row["body"]), predicate):
                continue
            release = loads(row["record"])["release"]
            acl = AccessControlList(acls.get(doc_target(row["doc_id"]), {}))
            if check(acl, release, actor, READ, groups):
                hits.add(row["subject"])
        return sorted(hits)

    def audit(self) -> list[tuple[str, list[tuple[str, str]]]]:
        """Re-validate every typed document; returns the failures."""
        failures = []
        for doc in self.documents():
            if doc.type_name is None:
                continue
            schema = self.get_schema(doc.type_name)
            errors = [("", "schema missing")] if schema is None else validate(doc.body, schema.schema)
            if errors:
                failures.append((doc.doc_id, errors))
        return failures
