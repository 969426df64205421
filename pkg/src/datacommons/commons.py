"""One commons node: the stores wired together over a data directory."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable

import httpx

from .accessctl import AccessControl, PrincipalId
from .config import GatewayConfig
from .feed import ChangeFeed
from .idmodel import PUBLIC, ByteSource, DigitalIdRecord
from .index import Index
from .metastore import MetaStore
from .metering import Meter
from .objectstore import ObjectStore
from .peering import PEER_HEADER, PeerAgreement, PeerClient, PeerRegistry
from .storage import Database

log = logging.getLogger(__name__)


class Commons:
    """Index, metadata, ACLs, objects, metering and peers of a single node.

    ``http`` is the client used for every outgoing request (remote locators
    and peer endpoints); it is tagged with this node's peer name.
    """

    def __init__(self, data_dir: str | Path, *, name: str = "local",
                 authority: str = "local-commons", admins: Iterable[str] = ("admin",),
                 public_url: str | None = None, http: httpx.Client | None = None,
                 capacity_bytes: int | None = None, prices=None,
                 default_bucket: str = "data", peers: Iterable[PeerAgreement] = ()):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.name = name
        self.authority = authority
        self.admins = frozenset(admins)
        self.public_url = public_url
        self.default_bucket = default_bucket
        self.http = http or httpx.Client(timeout=60.0, follow_redirects=True)
        self.http.headers[PEER_HEADER] = name

        self.db = Database(self.data_dir / "commons.db")
        self.access = AccessControl(self.db)
        self.feed = ChangeFeed(self.db)
        self.index = Index(self.db, self.access, self.feed, authority, self.admins)
        self.meta = MetaStore(self.db, self.index, self.access, self.feed, self.admins)
        self.peers = PeerRegistry(self.db)
        for agreement in peers:
            self.peers.add(agreement)
        self.objects = ObjectStore(self.data_dir / "objects", capacity_bytes=capacity_bytes,
                                   http=self.http)
        self.objects.create_bucket(default_bucket)
        self.meter = Meter(self.data_dir / "usage.jsonl", prices=prices, no_cost=self.peers.no_cost)

    @classmethod
    def from_config(cls, config: GatewayConfig, http: httpx.Client | None = None) -> Commons:
        return cls(
            config.data_dir, name=config.name, authority=config.authority,
            admins=config.admins, public_url=config.advertised_url, http=http,
            capacity_bytes=config.capacity_bytes, prices=config.prices or None,
            default_bucket=config.default_bucket, peers=config.peers,
        )

    def peer_client(self, agreement: PeerAgreement | str) -> PeerClient:
        if isinstance(agreement, str):
            agreement = self.peers.require(agreement)
        return PeerClient(agreement, self.http, self.name)

    def ingest(self, alias: str, content: ByteSource, *, actor: PrincipalId,
               bucket: str | None = None, key: str | None = None, release: str = PUBLIC,
               authority: str | None = None) -> DigitalIdRecord:
        """Store ``content`` locally and mint ``alias`` over it."""
        bucket = bucket or self.default_bucket
        self.objects.create_bucket(bucket)
        stored = self.objects.put(bucket, key or alias, content)
        return self.index.mint(alias, stored.hashes, stored.size, [stored.locator],
                               actor=actor, release=release, authority=authority)

    def verify_record(self, record: DigitalIdRecord) -> str | None:
        """First locator of ``record`` whose bytes verify, or None."""
        return self.objects.first_verifiable(record.urls, record.hashes, record.size)

    def close(self) -> None:
        self.db.close()

