"""Identifier and record value types, canonical serialization and digests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Mapping, Union

from .errors import MalformedAlias, MalformedRequest, UnsupportedAlgorithm

ARK = "ARK"
DOI = "DOI"
PLAIN = "PLAIN"

PUBLIC = "public"
CONTROLLED = "controlled"
RELEASES = (PUBLIC, CONTROLLED)

DIGEST_LENGTHS = {"md5": 32, "sha1": 40, "sha256": 64}
SUPPORTED_ALGORITHMS = tuple(DIGEST_LENGTHS)

# Field order of the published alias document; canonical form sorts instead.
RECORD_FIELDS = ("hashes", "authority", "metadata", "name", "release", "rev", "size", "urls")
HASH_RECORD_FIELDS = ("hashes", "size", "urls")

_ARK_RE = re.compile(r"^ark:/(\d+)/(\S+)$", re.IGNORECASE)
_DOI_RE = re.compile(r"^doi:(10\.\d+(?:\.\d+)*)/(\S+)$", re.IGNORECASE)
_HEX_RE = re.compile(r"^[0-9a-f]+$")
_REV_RE = re.compile(r"^[0-9a-f]{8}$")

CHUNK_SIZE = 1 << 20


def canonical_json(obj: Any) -> bytes:
    """UTF-8 JSON with sorted keys, list order kept and no whitespace."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


@dataclass(frozen=True)
class AliasId:
    raw: str
    scheme: str = PLAIN
    naan: str | None = None

    def __str__(self) -> str:
        return self.raw


def parse_alias(raw: str) -> AliasId:
    """Classify ``raw`` as an ARK, DOI or plain identifier.

    The string is kept verbatim. A value that claims the ``ark:`` or ``doi:``
    prefix but does not follow that scheme's syntax is rejected rather than
    silently treated as plain.
    """
    if not isinstance(raw, str) or not raw:
        raise MalformedAlias("alias must be a non-empty string")
    if any(ch.isspace() for ch in raw):
        raise MalformedAlias(f"alias contains whitespace: {raw!r}")
    lowered = raw.lower()
    if lowered.startswith("ark:"):
        m = _ARK_RE.match(raw)
        if not m:
            raise MalformedAlias(f"not a valid ARK: {raw!r}")
        return AliasId(raw, ARK, m.group(1))
    if lowered.startswith("doi:"):
        if not _DOI_RE.match(raw):
            raise MalformedAlias(f"not a valid DOI: {raw!r}")
        return AliasId(raw, DOI)
    return AliasId(raw, PLAIN)


class HashSet:
    """Digests of one piece of content, keyed by lowercase algorithm name."""

    __slots__ = ("_digests",)

    def __init__(self, digests: Mapping[str, str]):
        cleaned = {}
        for alg, hexdigest in dict(digests).items():
            alg = str(alg).lower()
            if alg not in DIGEST_LENGTHS:
                raise UnsupportedAlgorithm(f"unsupported digest algorithm: {alg}")
            if not isinstance(hexdigest, str):
                raise MalformedRequest(f"{alg} digest must be a string")
            hexdigest = hexdigest.lower()
            if len(hexdigest) != DIGEST_LENGTHS[alg] or not _HEX_RE.match(hexdigest):
                raise MalformedRequest(
                    f"{alg} digest must be {DIGEST_LENGTHS[alg]} hex characters"
                )
            cleaned[alg] = hexdigest
        if "md5" not in cleaned:
            raise MalformedRequest("an md5 digest is required")
        self._digests = dict(sorted(cleaned.items()))

    @property
    def md5(self) -> str:
        return self._digests["md5"]

    def get(self, alg: str) -> str | None:
        return self._digests.get(alg)

    def algorithms(self) -> list[str]:
        return list(self._digests)

    def items(self):
        return self._digests.items()

    def to_dict(self) -> dict[str, str]:
        return dict(self._digests)

    def conflicts_with(self, other: HashSet) -> list[str]:
        """Algorithms present in both sets whose digests differ."""
        return [
            alg for alg, value in self._digests.items()
            if alg in other._digests and other._digests[alg] != value
        ]

    def merged(self, other: HashSet) -> HashSet:
        return HashSet({**other._digests, **self._digests})

    def __eq__(self, other: object) -> bool:
        return isinstance(other, HashSet) and self._digests == other._digests

    def __hash__(self) -> int:
        return hash(tuple(self._digests.items()))

    def __repr__(self) -> str:
        return f"HashSet({self._digests!r})"


class Digester:
    """Incremental multi-algorithm digest over a byte stream."""

    def __init__(self, algorithms: Iterable[str] = ("md5",)):
        algs = []
        for alg in algorithms:
            alg = alg.lower()
            if alg not in DIGEST_LENGTHS:
                raise UnsupportedAlgorithm(f"unsupported digest algorithm: {alg}")
            if alg not in algs:
                algs.append(alg)
        if "md5" not in algs:
            raise UnsupportedAlgorithm("md5 must be among the requested algorithms")
        self._hashers = {alg: hashlib.new(alg) for alg in algs}
        self.size = 0

    def update(self, chunk: bytes) -> None:
        for h in self._hashers.values():
            h.update(chunk)
        self.size += len(chunk)

    def hashset(self) -> HashSet:
        return HashSet({alg: h.hexdigest() for alg, h in self._hashers.items()})


ByteSource = Union[bytes, bytearray, memoryview, IO[bytes], Iterable[bytes]]


def iter_chunks(content: ByteSource, chunk_size: int = CHUNK_SIZE):
    if isinstance(content, (bytes, bytearray, memoryview)):
        view = memoryview(content)
        for start in range(0, len(view), chunk_size):
            yield bytes(view[start:start + chunk_size])
        return
    read = getattr(content, "read", None)
    if read is not None:
        while True:
            chunk = read(chunk_size)
            if not chunk:
                return
            yield chunk
    else:
        for chunk in content:
            if chunk:
                yield bytes(chunk)


def digest_stream(content: ByteSource, algorithms: Iterable[str] = ("md5",)) -> tuple[HashSet, int]:
    """Digest ``content`` in a single pass; returns the hash set and byte count."""
    digester = Digester(algorithms)
    for chunk in iter_chunks(content):
        digester.update(chunk)
    return digester.hashset(), digester.size


def validate_attributes(pairs: Mapping[str, str]) -> dict[str, str]:
    if not isinstance(pairs, Mapping):
        raise MalformedRequest("attributes must be a JSON object")
    out = {}
    for key, value in pairs.items():
        if not isinstance(key, str) or not key:
            raise MalformedRequest("attribute keys must be non-empty strings")
        if not isinstance(value, str):
            raise MalformedRequest(f"attribute {key!r} must have a string value")
        out[key] = value
    return out


def compute_rev(doc: Mapping[str, Any]) -> str:
    """First 8 hex chars of sha256 over the canonical record, ``rev`` excluded."""
    body = {k: v for k, v in doc.items() if k != "rev"}
    return hashlib.sha256(canonical_json(body)).hexdigest()[:8]


@dataclass(frozen=True)
class HashRecord:
    hashes: HashSet
    size: int
    urls: tuple[str, ...] = ()

    @property
    def key(self) -> tuple[str, int]:
        return (self.hashes.md5, self.size)

    def to_dict(self) -> dict[str, Any]:
        return {"hashes": self.hashes.to_dict(), "size": self.size, "urls": list(self.urls)}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> HashRecord:
        return cls(HashSet(doc["hashes"]), _check_size(doc["size"]), _check_urls(doc.get("urls", [])))


@dataclass(frozen=True)
class DigitalIdRecord:
    """Alias-layer document. Build through :meth:`create` so ``rev`` is filled in."""

    name: str
    hashes: HashSet
    size: int
    authority: str
    metadata: str | None = None
    release: str = PUBLIC
    urls: tuple[str, ...] = ()
    rev: str = field(default="", compare=True)

    def __post_init__(self):
        parse_alias(self.name)
        _check_size(self.size)
        if not isinstance(self.authority, str) or not self.authority:
            raise MalformedRequest("authority must be a non-empty string")
        if self.release not in RELEASES:
            raise MalformedRequest(f"release must be one of {RELEASES}")
        if self.metadata is not None and not isinstance(self.metadata, str):
            raise MalformedRequest("metadata must be a record id string or null")
        object.__setattr__(self, "urls", _check_urls(self.urls))
        if not self.rev:
            object.__setattr__(self, "rev", compute_rev(self._body()))
        elif not _REV_RE.match(self.rev):
            raise MalformedRequest(f"rev must be 8 lowercase hex characters: {self.rev!r}")

    @classmethod
    def create(cls, **fields: Any) -> DigitalIdRecord:
        fields.pop("rev", None)
        return cls(**fields)

    @property
    def alias(self) -> AliasId:
        return parse_alias(self.name)

    @property
    def hash_key(self) -> tuple[str, int]:
        return (self.hashes.md5, self.size)

    @property
    def pending(self) -> bool:
        return not self.urls

    def _body(self) -> dict[str, Any]:
        return {
            "hashes": self.hashes.to_dict(),
            "authority": self.authority,
            "metadata": self.metadata,
            "name": self.name,
            "release": self.release,
            "size": self.size,
            "urls": list(self.urls),
        }

    def to_dict(self) -> dict[str, Any]:
        body = self._body()
        return {key: (self.rev if key == "rev" else body[key]) for key in RECORD_FIELDS}

    def canonical(self) -> bytes:
        return canonical_json(self.to_dict())

    def updated(self, **changes: Any) -> DigitalIdRecord:
        """Copy with ``changes`` applied and ``rev`` recomputed."""
        changes["rev"] = ""
        return dataclasses.replace(self, **changes)

    def verify_rev(self) -> bool:
        return self.rev == compute_rev(self._body())

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], *, keep_rev: bool = True) -> DigitalIdRecord:
        missing = [k for k in RECORD_FIELDS if k != "rev" and k not in doc]
        if missing:
            raise MalformedRequest(f"record is missing fields: {', '.join(missing)}")
        return cls(
            name=doc["name"],
            hashes=HashSet(doc["hashes"]),
            size=doc["size"],
            authority=doc["authority"],
            metadata=doc.get("metadata"),
            release=doc["release"],
            urls=tuple(doc["urls"]),
            rev=(doc.get("rev") or "") if keep_rev else "",
        )


def _check_size(size: Any) -> int:
    if isinstance(size, bool) or not isinstance(size, int) or size < 0:
        raise MalformedRequest("size must be a non-negative integer")
    return size


def _check_urls(urls: Iterable[str]) -> tuple[str, ...]:
    if isinstance(urls, str):
        raise MalformedRequest("urls must be a list of strings")
    out = tuple(urls)
    for url in out:
        if not isinstance(url, str) or not url or any(ch.isspace() for ch in url):
            raise MalformedRequest(f"invalid url: {url!r}")
    return out


def union_urls(*lists: Iterable[str]) -> tuple[str, ...]:
    """Union preserving first-seen order."""
    seen: dict[str, None] = {}
    for urls in lists:
        for url in urls:
            seen.setdefault(url, None)
    return tuple(seen)
