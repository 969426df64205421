import hashlib
import json

import pytest

from datacommons.accessctl import ANONYMOUS
from datacommons.errors import BundleCorrupt, FeedGap, NetworkError, NotFound
from datacommons.metering import EGRESS_BYTES
from datacommons.peering import (
    PeerAgreement, PortabilityBundle, export_bundle, import_bundle, staged_migration,
    sync_from_peer,
)

from conftest import ADMIN, ALICE, BOB


def _ingest_many(node, n, prefix="obj", actor=ALICE):
    names = []
    for i in range(n):
        name = f"{prefix}-{i:03d}"
        node.ingest(name, f"payload {prefix} {i}\n".encode() * 10, actor=actor)
        names.append(name)
    return names


def _record_view(node, name):
    rec = node.index.resolve_alias(name, ADMIN)
    return rec.hashes, rec.size, rec.name


def test_bundle_round_trip_preserves_identity_and_bytes(tmp_path, network):
    a, b = network.add("a"), network.add("b")
    names = _ingest_many(a, 5)
    a.index.attributes_set(names[0], {"project": "matsu"}, ALICE)
    a.meta.put_document(names[1], None, {"site": "KDVN"}, ALICE)
    bundle = export_bundle(a, names, tmp_path / "bundle", actor=ALICE)

    report = import_bundle(b, bundle.path, "imported", actor=BOB)
    assert sorted(report.created) == names and not report.skipped
    for name in names:
        assert _record_view(b, name) == _record_view(a, name)
        rec = b.index.resolve_alias(name, BOB)
        data = b.objects.read_verified(rec.urls[0], rec.hashes, rec.size)
        assert hashlib.md5(data).hexdigest() == rec.hashes.md5
    assert b.index.attributes_get(names[0], BOB) == {"project": "matsu"}
    assert b.meta.get_document(names[1], None, BOB).body == {"site": "KDVN"}


def test_double_import_is_noop(tmp_path, network):
    a, b = network.add("a"), network.add("b")
    names = _ingest_many(a, 3)
    export_bundle(a, names, tmp_path / "bundle", actor=ALICE)
    import_bundle(b, tmp_path / "bundle", "imported", actor=BOB)
    before = [b.index.get_record(n) for n in names]
    head = b.feed.head()
    again = import_bundle(b, tmp_path / "bundle", "imported", actor=BOB)
    assert sorted(again.merged) == names and not again.created
    assert [b.index.get_record(n) for n in names] == before
    assert b.feed.head() == head


def test_tampered_payload_is_rejected(tmp_path, network):
    a, b = network.add("a"), network.add("b")
    names = _ingest_many(a, 2)
    bundle = export_bundle(a, names, tmp_path / "bundle", actor=ALICE)
    obj = bundle.path / bundle.entries[0]["object"]
    obj.write_bytes(obj.read_bytes()[:-1] + b"?")
    report = import_bundle(b, bundle.path, "imported", actor=BOB)
    assert report.created == [names[1]]
    assert report.skipped[0][0] == names[0]
    assert report.skipped[0][1].startswith("hash_mismatch")
    assert not b.index.exists(names[0])


def test_tampered_manifest_is_rejected(tmp_path, network):
    a = network.add("a")
    names = _ingest_many(a, 1)
    bundle = export_bundle(a, names, tmp_path / "bundle", actor=ALICE)
    manifest = bundle.path / "manifest.json"
    doc = json.loads(manifest.read_text())
    doc["entries"][0]["record"]["size"] += 1
    manifest.write_text(json.dumps(doc))
    with pytest.raises(BundleCorrupt):
        PortabilityBundle.open(bundle.path)


def test_import_conflicting_content_is_skipped(tmp_path, network):
    a, b = network.add("a"), network.add("b")
    a.ingest("shared", b"version from a", actor=ALICE)
    b.ingest("shared", b"version from b", actor=BOB)
    export_bundle(a, ["shared"], tmp_path / "bundle", actor=ALICE)
    report = import_bundle(b, tmp_path / "bundle", "imported", actor=BOB)
    assert report.skipped and report.skipped[0][1].startswith("hash_conflict")
    kept = b.index.get_record("shared")
    assert b.objects.read_verified(kept.urls[0], kept.hashes, kept.size) == b"version from b"


def test_sync_replicates_and_is_idempotent(network):
    a, b = network.add("a"), network.add("b")
    network.peer("a", "b")
    names = _ingest_many(a, 20)
    a.index.attributes_set(names[3], {"k": "v"}, ALICE)
    first = sync_from_peer(b, "a", actor=BOB)
    assert first.applied > 0
    for name in names:
        assert _record_view(b, name) == _record_view(a, name)
    assert b.index.attributes_get(names[3], BOB) == {"k": "v"}
    second = sync_from_peer(b, "a", actor=BOB)
    assert second.applied == 0
    replay = sync_from_peer(b, "a", since=0, actor=BOB)
    assert replay.applied == 0


def test_synced_urls_fetch_bytes_from_origin(network):
    a, b = network.add("a"), network.add("b")
    network.peer("a", "b")
    a.ingest("x", b"origin bytes", actor=ALICE)
    sync_from_peer(b, "a", actor=BOB)
    rec = b.index.get_record("x")
    assert rec.urls == (f"http://a/peer/object?hash=md5:{rec.hashes.md5}&size={rec.size}",)
    assert rec.verify_rev()
    assert b.objects.read_verified(rec.urls[0], rec.hashes, rec.size) == b"origin bytes"


def test_sync_carries_deletes_and_updates(network):
    a, b = network.add("a"), network.add("b")
    network.peer("a", "b")
    _ingest_many(a, 3)
    sync_from_peer(b, "a", actor=BOB)
    a.index.delete_alias("obj-000", ALICE)
    a.index.update_record("obj-001", {"urls": ["https://mirror/obj-001"]}, ALICE)
    sync_from_peer(b, "a", actor=BOB)
    assert not b.index.exists("obj-000")
    assert b.index.get_record("obj-001").urls == ("https://mirror/obj-001",)


def test_sync_from_compacted_feed_reports_gap(network):
    a, b = network.add("a"), network.add("b")
    network.peer("a", "b")
    _ingest_many(a, 5)
    a.feed.compact(keep_last=2)
    with pytest.raises(FeedGap):
        sync_from_peer(b, "a", actor=BOB)


def test_unreachable_peer(network):
    a, b = network.add("a"), network.add("b")
    network.peer("a", "b")
    network.down.add("a")
    with pytest.raises(NetworkError):
        sync_from_peer(b, "a", actor=BOB)
    with pytest.raises(NotFound):
        sync_from_peer(b, "stranger", actor=BOB)


def test_sync_egress_is_zero_cost_between_peers(network):
    a, b = network.add("a"), network.add("b")
    network.peer("a", "b", no_cost=True)
    a.ingest("x", b"bytes", actor=ALICE)
    sync_from_peer(b, "a", actor=BOB)
    rec = b.index.get_record("x")
    b.objects.read_verified(rec.urls[0], rec.hashes, rec.size)
    peer_events = [e for e in a.meter.events() if e.peer_tag == "b"]
    assert peer_events and all(e.amount == 0 for e in peer_events)


def test_staged_migration_moves_object(network):
    a, b = network.add("a"), network.add("b")
    network.peer("a", "b")
    a.ingest("x", b"migrating bytes", actor=ALICE)
    seen = []
    progress = staged_migration(a, ["x"], "b", actor=ALICE, on_step=lambda n, s: seen.append(s))
    assert progress[0].status == "migrated"
    assert seen == ["transferred", "appended", "retired"]
    rec = a.index.resolve_alias("x", ANONYMOUS)
    assert len(rec.urls) == 1 and rec.urls[0].startswith("http://b/peer/object")
    assert a.objects.read_verified(rec.urls[0], rec.hashes, rec.size) == b"migrating bytes"
    egress = [e for e in a.meter.events() if e.kind == EGRESS_BYTES and e.peer_tag == "b"]
    assert egress and egress[0].amount == 0
    again = staged_migration(a, ["x"], "b", actor=ALICE)
    assert again[0].status == "already-migrated"


class Crash(Exception):
    pass


@pytest.mark.parametrize("crash_at", ["transferred", "appended", "retired"])
def test_migration_fault_injection_never_loses_locators(network, crash_at):
    a, b = network.add("a"), network.add("b")
    network.peer("a", "b")
    a.ingest("x", b"fragile bytes", actor=ALICE)
    before = a.index.get_record("x")

    def boom(name, step):
        if step == crash_at:
            raise Crash(step)

    with pytest.raises(Crash):
        staged_migration(a, ["x"], "b", actor=ALICE, on_step=boom)
    mid = a.index.get_record("x")
    assert (mid.hashes, mid.size) == (before.hashes, before.size)
    assert mid.urls and a.verify_record(mid) is not None
    staged_migration(a, ["x"], "b", actor=ALICE)
    final = a.index.get_record("x")
    assert final.urls[0].startswith("http://b/") and len(final.urls) == 1
    assert a.verify_record(final) == final.urls[0]


def test_migration_without_agreement(network):
    a = network.add("a")
    a.ingest("x", b"bytes", actor=ALICE)
    with pytest.raises(NotFound):
        staged_migration(a, ["x"], "b", actor=ALICE)


def test_peer_registry_persists_cursor(network):
    a = network.add("a")
    a.peers.add(PeerAgreement("z", "http://z", False))
    a.peers.set_cursor("z", 42)
    assert a.peers.cursor("z") == 42
    assert not a.peers.no_cost("z")
    assert a.peers.no_cost("unknown") is False


def test_import_digest_for_hash_record_is_registered(tmp_path, network):
    a, b = network.add("a"), network.add("b")
    a.ingest("x", b"hash layer", actor=ALICE)
    export_bundle(a, ["x"], tmp_path / "bundle", actor=ALICE)
    import_bundle(b, tmp_path / "bundle", "imported", actor=BOB)
    md5 = hashlib.md5(b"hash layer").hexdigest()
    rec = b.index.resolve_hash("md5", md5, len(b"hash layer"))
    assert rec.hashes.md5 == md5 and rec.urls
