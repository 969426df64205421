from __future__ import annotations

import warnings

warnings.filterwarnings("ignore", message="Using `httpx` with `starlette.testclient`")

import httpx
import pytest
from fastapi.testclient import TestClient

from datacommons.accessctl import PrincipalId
from datacommons.commons import Commons
from datacommons.gateway import create_app
from datacommons.peering import PeerAgreement

ADMIN = PrincipalId.user("admin")
ALICE = PrincipalId.user("alice")
BOB = PrincipalId.user("bob")

_HOP_HEADERS = {"content-length", "content-encoding", "transfer-encoding", "connection"}


class Network:
    """Commons nodes reachable from each other at ``http://<name>`` without sockets."""

    def __init__(self, root):
        self.root = root
        self.nodes: dict[str, Commons] = {}
        self.clients: dict[str, TestClient] = {}
        self.down: set[str] = set()
        self.transport = httpx.MockTransport(self._route)

    def _route(self, request: httpx.Request) -> httpx.Response:
        host = request.url.host
        if host not in self.clients or host in self.down:
            raise httpx.ConnectError(f"cannot reach {host}", request=request)
        headers = {k: v for k, v in request.headers.items() if k.lower() != "host"}
        resp = self.clients[host].request(
            request.method, request.url.raw_path.decode("ascii"),
            headers=headers, content=request.read(),
        )
        out_headers = [(k, v) for k, v in resp.headers.items() if k.lower() not in _HOP_HEADERS]
        return httpx.Response(resp.status_code, headers=out_headers, content=resp.content)

    def http(self) -> httpx.Client:
        return httpx.Client(transport=self.transport)

    def add(self, name: str, **kwargs) -> Commons:
        kwargs.setdefault("authority", f"{name}-commons")
        node = Commons(self.root / name, name=name, public_url=f"http://{name}",
                       http=self.http(), **kwargs)
        self.nodes[name] = node
        self.clients[name] = TestClient(create_app(node), base_url=f"http://{name}")
        return node

    def peer(self, a: str, b: str, no_cost: bool = True) -> None:
        """Register a mutual agreement between nodes ``a`` and ``b``."""
        self.nodes[a].peers.add(PeerAgreement(b, f"http://{b}", no_cost))
        self.nodes[b].peers.add(PeerAgreement(a, f"http://{a}", no_cost))

    def close(self) -> None:
        for client in self.clients.values():
            client.close()
        for node in self.nodes.values():
            node.close()


@pytest.fixture
def commons(tmp_path):
    node = Commons(tmp_path / "node", name="test", authority="test-commons")
    yield node
    node.close()


@pytest.fixture
def app_client(commons):
    with TestClient(create_app(commons), base_url="http://test") as client:
        yield client


@pytest.fixture
def network(tmp_path):
    net = Network(tmp_path)
    yield net
    net.close()


# One line per acceptance criterion, printed after the run.
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
