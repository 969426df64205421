"""Byte storage behind hash-layer urls, with digest verification on every read.

Local objects live at ``<root>/<bucket>/<percent-encoded key>`` and are
addressed as ``local://<bucket>/<key>``. ``http(s)://`` locators are fetched
read-only through an ``httpx.Client``.
"""

from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable
from urllib.parse import quote, unquote, urlsplit

import httpx

from .errors import BucketMissing, HashMismatch, MalformedRequest, NetworkError, NotFound, StorageFull
from .idmodel import CHUNK_SIZE, ByteSource, Digester, HashSet, iter_chunks

log = logging.getLogger(__name__)

LOCAL_SCHEME = "local"
SPOOL_LIMIT = 8 << 20


@dataclass(frozen=True)
class StoredObject:
    locator: str
    size: int
    hashes: HashSet


def local_locator(bucket: str, key: str) -> str:
    return f"{LOCAL_SCHEME}://{bucket}/{quote(key, safe='/-_.~')}"


def parse_local(locator: str) -> tuple[str, str]:
    parts = urlsplit(locator)
    if parts.scheme != LOCAL_SCHEME or not parts.netloc or len(parts.path) < 2:
        raise MalformedRequest(f"not a local locator: {locator}")
    return parts.netloc, unquote(parts.path[1:])


def is_local(locator: str) -> bool:
    return locator.startswith(f"{LOCAL_SCHEME}://")


def _check_name(bucket: str) -> str:
    if not bucket or "/" in bucket or bucket in (".", "..") or bucket.startswith("."):
        raise MalformedRequest(f"invalid bucket name {bucket!r}")
    return bucket


class ObjectStore:
    def __init__(self, root: str | Path, *, capacity_bytes: int | None = None,
                 http: httpx.Client | None = None, algorithms: Iterable[str] = ("md5", "sha256")):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.capacity_bytes = capacity_bytes
        self.algorithms = tuple(algorithms)
        self._http = http

    @property
    def http(self) -> httpx.Client:
        if self._http is None:
            self._http = httpx.Client(timeout=60.0, follow_redirects=True)
        return self._http

    def create_bucket(self, bucket: str) -> None:
        (self.root / _check_name(bucket)).mkdir(exist_ok=True)

    def has_bucket(self, bucket: str) -> bool:
        return (self.root / bucket).is_dir()

    def path_for(self, bucket: str, key: str) -> Path:
        if not key:
            raise MalformedRequest("object key must be non-empty")
        return self.root / _check_name(bucket) / quote(key, safe="")

    def local_path(self, locator: str) -> Path:
        return self.path_for(*parse_local(locator))

    def used_bytes(self) -> int:
        total = 0
        for bucket in self.root.iterdir():
            if bucket.is_dir():
                total += sum(f.stat().st_size for f in bucket.iterdir()
                             if f.is_file() and not f.name.startswith(".tmp"))
        return total

    def put(self, bucket: str, key: str, content: ByteSource) -> StoredObject:
        if not self.has_bucket(bucket):
            raise BucketMissing(f"no such bucket: {bucket}")
        final = self.path_for(bucket, key)
        digester = Digester(self.algorithms)
        fd, tmp = tempfile.mkstemp(prefix=".tmp", dir=final.parent)
        try:
            with os.fdopen(fd, "wb") as out:
                for chunk in iter_chunks(content):
                    digester.update(chunk)
                    out.write(chunk)
                out.flush()
                os.fsync(out.fileno())
            if self.capacity_bytes is not None:
                replaced = final.stat().st_size if final.exists() else 0
                if self.used_bytes() - replaced + digester.size > self.capacity_bytes:
                    raise StorageFull(
                        f"storing {digester.size} bytes would exceed capacity {self.capacity_bytes}"
                    )
            os.replace(tmp, final)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return StoredObject(local_locator(bucket, key), digester.size, digester.hashset())

    def delete(self, locator: str) -> None:
        try:
            self.local_path(locator).unlink()
        except FileNotFoundError:
            raise NotFound(f"no object at {locator}") from None

    def _raw_chunks(self, locator: str):
        if is_local(locator):
            path = self.local_path(locator)
            try:
                fh = open(path, "rb")
            except FileNotFoundError:
                raise NotFound(f"no object at {locator}") from None
            with fh:
                yield from iter_chunks(fh)
            return
        scheme = urlsplit(locator).scheme
        if scheme not in ("http", "https"):
            raise MalformedRequest(f"unsupported locator scheme: {locator}")
        try:
            with self.http.stream("GET", locator) as resp:
                if resp.status_code == 404:
                    raise NotFound(f"no object at {locator}")
                if resp.status_code >= 400:
                    raise NetworkError(f"GET {locator} returned {resp.status_code}")
                yield from resp.iter_bytes(CHUNK_SIZE)
        except httpx.HTTPError as exc:
            raise NetworkError(f"GET {locator} failed: {exc}") from exc

    def open_verified(self, locator: str, expected: HashSet, size: int) -> IO[bytes]:
        """Fetch ``locator`` into a spool and return it only if size and digests match.

        Nothing is handed back until the whole object has been checked, so a
        caller never sees a prefix of a corrupt object.
        """
        digester = Digester(["md5", *expected.algorithms()])
        spool = tempfile.SpooledTemporaryFile(max_size=SPOOL_LIMIT)
        try:
            for chunk in self._raw_chunks(locator):
                digester.update(chunk)
                if digester.size > size:
                    raise HashMismatch("size", size, f">{size}", locator)
                spool.write(chunk)
            if digester.size != size:
                raise HashMismatch("size", size, digester.size, locator)
            observed = digester.hashset()
            for alg, value in expected.items():
                if observed.get(alg) != value:
                    raise HashMismatch(alg, value, observed.get(alg), locator)
        except BaseException:
            spool.close()
            raise
        spool.seek(0)
        return spool

    def read_verified(self, locator: str, expected: HashSet, size: int) -> bytes:
        with self.open_verified(locator, expected, size) as fh:
            return fh.read()

    def get_verified(self, locator: str, expected: HashSet, size: int):
        """Verify eagerly, then return an iterator over the object's chunks."""
        fh = self.open_verified(locator, expected, size)

        def chunks():
            with fh:
                yield from iter_chunks(fh)

        return chunks()

    def first_verifiable(self, urls: Iterable[str], expected: HashSet, size: int) -> str | None:
        for url in urls:
            try:
                self.open_verified(url, expected, size).close()
            except (HashMismatch, NotFound, NetworkError, MalformedRequest) as exc:
                log.debug("locator %s failed verification: %s", url, exc)
                continue
            return url
        return None
