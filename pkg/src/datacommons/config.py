"""Gateway/node configuration from a YAML file with environment overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import MalformedRequest
from .peering import PeerAgreement

DEFAULT_PRINCIPAL_HEADER = "X-Commons-Principal"


@dataclass
class GatewayConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    principal_header: str = DEFAULT_PRINCIPAL_HEADER
    authority: str = "local-commons"
    name: str = "local"
    public_url: str | None = None
    data_dir: Path = Path("commons-data")
    admins: list[str] = field(default_factory=lambda: ["admin"])
    peers: list[PeerAgreement] = field(default_factory=list)
    capacity_bytes: int | None = None
    prices: dict[str, str] = field(default_factory=dict)
    default_bucket: str = "data"

    def __post_init__(self):
        if not self.authority:
            raise MalformedRequest("authority must be non-empty")
        if not 0 < int(self.port) < 65536:
            raise MalformedRequest(f"invalid port {self.port}")
        self.port = int(self.port)
        self.data_dir = Path(self.data_dir)

    @property
    def bind(self) -> str:
        return f"{self.host}:{self.port}"

    @property
    def advertised_url(self) -> str:
        return self.public_url or f"http://{self.host}:{self.port}"


def parse_bind(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise MalformedRequest(f"bind address must be HOST:PORT, got {value!r}")
    return host or "127.0.0.1", int(port)


def from_mapping(doc: Mapping[str, Any]) -> GatewayConfig:
    doc = dict(doc)
    peers = [
        PeerAgreement(p["name"], p["endpoint"], bool(p.get("no_cost", True)))
        for p in doc.pop("peers", None) or []
    ]
    if "bind" in doc:
        doc["host"], doc["port"] = parse_bind(doc.pop("bind"))
    known = set(GatewayConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise MalformedRequest(f"unknown configuration keys: {sorted(unknown)}")
    return GatewayConfig(peers=peers, **doc)


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> GatewayConfig:
    env = os.environ if env is None else env
    doc: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    if env.get("COMMONS_BIND"):
        doc["bind"] = env["COMMONS_BIND"]
    if env.get("COMMONS_AUTHORITY"):
        doc["authority"] = env["COMMONS_AUTHORITY"]
    if env.get("COMMONS_DATA_DIR"):
        doc["data_dir"] = env["COMMONS_DATA_DIR"]
    return from_mapping(doc)
