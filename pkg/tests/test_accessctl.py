import pytest
from hypothesis import given, strategies as st

from datacommons.accessctl import (
    ANONYMOUS, AccessControlList, GroupDirectory, PrincipalId, check,
)
from datacommons.errors import AccessDenied, MalformedRequest
from datacommons.idmodel import HashSet

from conftest import ALICE, BOB

U = PrincipalId.user("u")
G = PrincipalId.group("g")


def test_principal_parsing():
    assert PrincipalId.parse(None) == ANONYMOUS
    assert PrincipalId.parse("anonymous") == ANONYMOUS
    assert PrincipalId.parse("alice") == ALICE
    assert PrincipalId.parse("group:ops") == PrincipalId.group("ops")
    assert str(PrincipalId.parse("user:bob")) == "user:bob"
    with pytest.raises(MalformedRequest):
        PrincipalId("group", "")


def test_public_read_is_open():
    assert check(AccessControlList(), "public", ANONYMOUS, "read")


def test_controlled_default_deny():
    assert not check(AccessControlList(), "controlled", ANONYMOUS, "read")
    assert not check(AccessControlList(), "controlled", U, "read")


def test_group_write_reaches_members():
    acl = AccessControlList().granted(G, ["write"])
    groups = GroupDirectory({"g": frozenset({"u"})})
    assert check(acl, "controlled", U, "write", groups)
    assert not check(acl, "controlled", U, "read", groups)
    assert not check(acl, "controlled", U, "write")


def test_acl_round_trip():
    acl = AccessControlList().granted(ALICE, ["read", "write"]).granted(G, "read")
    assert AccessControlList.from_dict(acl.to_dict()) == acl
    assert acl.to_dict() == {"group:g": ["read"], "user:alice": ["read", "write"]}


def test_granting_held_rights_is_noop():
    acl = AccessControlList().granted(U, ["read"])
    assert acl.granted(U, ["read"]) == acl


principals = st.sampled_from([U, G, ANONYMOUS, PrincipalId.user("v")])
rights = st.sets(st.sampled_from(["read", "write"]), min_size=1)
ops = st.lists(st.tuples(principals, rights), max_size=6)


def _build(pairs):
    acl = AccessControlList()
    for p, r in pairs:
        acl = acl.granted(p, r)
    return acl


@given(ops, principals, rights, st.sampled_from(["public", "controlled"]))
def test_grant_is_monotone_and_revoke_antitone(pairs, who, new_rights, release):
    acl = _build(pairs)
    groups = GroupDirectory({"g": frozenset({"u"})})
    actors = [U, PrincipalId.user("v"), ANONYMOUS]
    more = acl.granted(who, new_rights)
    less = acl.revoked(who, new_rights)
    for actor in actors:
        for right in ("read", "write"):
            before = check(acl, release, actor, right, groups)
            if before:
                assert check(more, release, actor, right, groups)
            if not before:
                assert not check(less, release, actor, right, groups)


def _mint(commons, name, release="controlled", actor=ALICE):
    return commons.index.mint(name, HashSet({"md5": "a" * 32}), 1, ["https://h/x"],
                              actor=actor, release=release)


def test_owner_bootstrap_and_grant(commons):
    _mint(commons, "rec")
    with pytest.raises(AccessDenied):
        commons.index.resolve_alias("rec", BOB)
    commons.index.grant("rec", BOB, ["read"], ALICE)
    assert commons.index.resolve_alias("rec", BOB).name == "rec"


def test_non_writer_cannot_grant(commons):
    _mint(commons, "rec")
    with pytest.raises(AccessDenied):
        commons.index.grant("rec", BOB, ["read"], BOB)


def test_grant_then_revoke_replay(commons):
    _mint(commons, "rec")
    commons.index.grant("rec", BOB, ["read", "write"], ALICE)
    commons.index.revoke("rec", BOB, ["write"], ALICE)
    # replay oracle: after grant{r,w} then revoke{w}, bob holds exactly {read}
    assert commons.access.allowed("alias:rec", "controlled", BOB, "read")
    assert not commons.access.allowed("alias:rec", "controlled", BOB, "write")
    commons.index.revoke("rec", BOB, ["read"], ALICE)
    assert not commons.access.allowed("alias:rec", "controlled", BOB, "read")


def test_group_membership_from_directory(commons):
    _mint(commons, "rec")
    commons.access.set_group("team", ["bob"])
    commons.index.grant("rec", PrincipalId.group("team"), ["read"], ALICE)
    assert commons.index.resolve_alias("rec", BOB)
    commons.access.set_group("team", [])
    with pytest.raises(AccessDenied):
        commons.index.resolve_alias("rec", BOB)
