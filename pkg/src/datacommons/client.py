"""Thin HTTP client for a commons gateway; errors come back as CommonsError subclasses."""

from __future__ import annotations

from typing import Any, Iterable

import httpx

from .config import DEFAULT_PRINCIPAL_HEADER
from .errors import NetworkError, from_payload
from .peering import PEER_HEADER


class CommonsClient:
    def __init__(self, endpoint: str, principal: str | None = None, *,
                 http: httpx.Client | None = None, peer: str | None = None,
                 principal_header: str = DEFAULT_PRINCIPAL_HEADER):
        self.endpoint = endpoint.rstrip("/")
        self.http = http or httpx.Client(timeout=60.0)
        self.headers = {}
        if principal:
            self.headers[principal_header] = principal
        if peer:
            self.headers[PEER_HEADER] = peer

    def request(self, method: str, path: str, *, raw: bool = False, **kwargs) -> Any:
        try:
            resp = self.http.request(method, self.endpoint + path, headers=self.headers, **kwargs)
        except httpx.HTTPError as exc:
            raise NetworkError(f"{method} {self.endpoint}{path}: {exc}") from exc
        if resp.status_code >= 400:
            try:
                payload = resp.json()
            except ValueError:
                payload = {"message": resp.text.strip()}
            raise from_payload(resp.status_code, payload)
        if raw:
            return resp
        return resp.json()

    # alias / hash layer
    def resolve(self, name: str) -> dict:
        return self.request("GET", f"/alias/{name}")

    def mint(self, doc: dict) -> dict:
        return self.request("POST", "/alias", json=doc)

    def update(self, name: str, patch: dict) -> dict:
        return self.request("PUT", f"/alias/{name}", json=patch)

    def delete(self, name: str) -> dict:
        return self.request("DELETE", f"/alias/{name}")

    def resolve_hash(self, hash_: str, size: int) -> dict:
        return self.request("GET", "/urls/", params={"hash": hash_, "size": size})

    def dedup(self) -> list:
        return self.request("GET", "/dedup")

    # metadata
    def register_schema(self, type_name: str, schema: dict) -> dict:
        return self.request("POST", "/meta/schemas", json={"type_name": type_name, "schema": schema})

    def meta_get(self, name: str, type_name: str | None = None) -> dict:
        return self.request("GET", f"/meta/{name}", params=_type_params(type_name))

    def meta_put(self, name: str, body: Any, type_name: str | None = None) -> dict:
        return self.request("PUT", f"/meta/{name}", params=_type_params(type_name), json=body)

    def meta_query(self, predicate: dict) -> list:
        return self.request("POST", "/meta/query", json=predicate)

    # access control, attributes, groups
    def acl_get(self, name: str, meta: str | None = None) -> dict:
        return self.request("GET", f"/acl/{name}", params=_meta_params(meta))

    def acl_change(self, name: str, op: str, principal: str, rights: Iterable[str],
                   meta: str | None = None) -> dict:
        body = {"op": op, "principal": principal, "rights": list(rights)}
        return self.request("PUT", f"/acl/{name}", params=_meta_params(meta), json=body)

    def attr_get(self, name: str) -> dict:
        return self.request("GET", f"/attr/{name}")

    def attr_set(self, name: str, pairs: dict) -> dict:
        return self.request("PUT", f"/attr/{name}", json=pairs)

    def group_get(self, group: str) -> list:
        return self.request("GET", f"/groups/{group}")

    def group_set(self, group: str, members: Iterable[str]) -> list:
        return self.request("PUT", f"/groups/{group}", json={"members": list(members)})

    # objects and peer surface
    def create_bucket(self, bucket: str) -> dict:
        return self.request("PUT", f"/buckets/{bucket}")

    def put_object(self, bucket: str, key: str, content: bytes) -> dict:
        return self.request("PUT", f"/objects/{bucket}/{key}", content=content)

    def peer_changes(self, since: int = 0, limit: int = 500) -> dict:
        return self.request("GET", "/peer/changes", params={"since": since, "limit": limit})

    def peer_object(self, hash_: str, size: int) -> bytes:
        return self.request("GET", "/peer/object", params={"hash": hash_, "size": size},
                            raw=True).content

    def peer_push(self, hash_: str, size: int, content: bytes, **digests: str) -> dict:
        params = {"hash": hash_, "size": size, **digests}
        return self.request("PUT", "/peer/object", params=params, content=content)

    # metering
    def usage_record(self, event: dict) -> dict:
        return self.request("POST", "/usage/events", json=event)

    def usage_allocate(self, doc: dict) -> dict:
        return self.request("PUT", "/usage/allocations", json=doc)

    def usage_invoice(self, actor: str, period: str, text: bool = False):
        params = {"actor": actor, "period": period, "format": "text" if text else "json"}
        if text:
            return self.request("GET", "/usage/invoice", params=params, raw=True).text
        return self.request("GET", "/usage/invoice", params=params)

    def usage_report(self, period: str, thresholds: Iterable[int]) -> list:
        params = {"period": period, "thresholds": ",".join(str(t) for t in thresholds)}
        return self.request("GET", "/usage/report", params=params)

    def usage_capacity(self, used: dict, totals: dict, targets: dict | None = None) -> dict:
        return self.request("POST", "/usage/capacity",
                            json={"used": used, "totals": totals, "targets": targets})


def _type_params(type_name: str | None) -> dict:
    return {"type": type_name} if type_name else {}


def _meta_params(meta: str | None) -> dict:
    return {} if meta is None else {"meta": meta}
