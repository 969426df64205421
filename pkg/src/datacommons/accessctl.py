"""Per-identifier and per-document access control lists.

Authorization is default-deny: public records are readable by everyone, and
anything else needs a grant to the actor or to a group the actor belongs to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import AccessDenied, MalformedRequest
from .idmodel import PUBLIC, RELEASES
from .storage import Database

READ = "read"
WRITE = "write"
RIGHTS = (READ, WRITE)

USER = "user"
GROUP = "group"
ANONYMOUS_KIND = "anonymous"
KINDS = (USER, GROUP, ANONYMOUS_KIND)


@dataclass(frozen=True, order=True)
class PrincipalId:
    kind: str
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MalformedRequest(f"unknown principal kind {self.kind!r}")
        if self.kind == ANONYMOUS_KIND and self.name:
            raise MalformedRequest("the anonymous principal has no name")
        if self.kind != ANONYMOUS_KIND and not self.name:
            raise MalformedRequest(f"{self.kind} principal needs a name")

    @classmethod
    def user(cls, name: str) -> PrincipalId:
        return cls(USER, name)

    @classmethod
    def group(cls, name: str) -> PrincipalId:
        return cls(GROUP, name)

    @classmethod
    def parse(cls, text: str | None) -> PrincipalId:
        """``user:NAME``, ``group:NAME``, ``anonymous``; a bare name is a user."""
        if text is None or text == "" or text == ANONYMOUS_KIND:
            return ANONYMOUS
        kind, sep, name = text.partition(":")
        if sep and kind in (USER, GROUP):
            return cls(kind, name)
        return cls(USER, text)

    @property
    def is_anonymous(self) -> bool:
        return self.kind == ANONYMOUS_KIND

    def __str__(self) -> str:
        return ANONYMOUS_KIND if self.is_anonymous else f"{self.kind}:{self.name}"


ANONYMOUS = PrincipalId(ANONYMOUS_KIND)


def _rights(rights: Iterable[str]) -> frozenset[str]:
    if isinstance(rights, str):
        rights = [rights]
    out = frozenset(rights)
    bad = out - set(RIGHTS)
    if bad:
        raise MalformedRequest(f"unknown rights: {sorted(bad)}")
    return out


@dataclass(frozen=True)
class AccessControlList:
    entries: Mapping[PrincipalId, frozenset[str]] = field(default_factory=dict)

    def rights_of(self, principal: PrincipalId) -> frozenset[str]:
        return self.entries.get(principal, frozenset())

    def granted(self, principal: PrincipalId, rights: Iterable[str]) -> AccessControlList:
        entries = dict(self.entries)
        entries[principal] = self.rights_of(principal) | _rights(rights)
        return AccessControlList(entries)

    def revoked(self, principal: PrincipalId, rights: Iterable[str]) -> AccessControlList:
        entries = dict(self.entries)
        remaining = self.rights_of(principal) - _rights(rights)
        if remaining:
            entries[principal] = remaining
        else:
            entries.pop(principal, None)
        return AccessControlList(entries)

    def to_dict(self) -> dict[str, list[str]]:
        return {
            str(p): sorted(r) for p, r in sorted(self.entries.items()) if r
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Iterable[str]]) -> AccessControlList:
        return cls({PrincipalId.parse(p): _rights(r) for p, r in doc.items()})


@dataclass(frozen=True)
class GroupDirectory:
    membership: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def groups_of(self, user: str) -> set[str]:
        return {g for g, members in self.membership.items() if user in members}


def check(
    acl: AccessControlList,
    release: str,
    actor: PrincipalId,
    right: str,
    groups: GroupDirectory | None = None,
) -> bool:
    if right not in RIGHTS:
        raise MalformedRequest(f"unknown right {right!r}")
    if release not in RELEASES:
        raise MalformedRequest(f"unknown release {release!r}")
    if right == READ and release == PUBLIC:
        return True
    if right in acl.rights_of(actor):
        return True
    if actor.kind == USER and groups is not None:
        for group in groups.groups_of(actor.name):
            if right in acl.rights_of(PrincipalId.group(group)):
                return True
    return False


class AccessControl:
    """ACL and group storage. Targets are strings such as ``alias:<raw>``."""

    def __init__(self, db: Database):
        self.db = db
        db.executescript(
            """
            CREATE TABLE IF NOT EXISTS acl (
                target TEXT NOT NULL,
                principal TEXT NOT NULL,
                rights TEXT NOT NULL,
                PRIMARY KEY (target, principal)
            );
            CREATE TABLE IF NOT EXISTS group_members (
                grp TEXT NOT NULL,
                member TEXT NOT NULL,
                PRIMARY KEY (grp, member)
            );
            """
        )

    def get(self, target: str) -> AccessControlList:
        with self.db.transaction() as conn:
            rows = conn.execute(
                "SELECT principal, rights FROM acl WHERE target = ?", (target,)
            ).fetchall()
        return AccessControlList(
            {PrincipalId.parse(r["principal"]): frozenset(r["rights"].split(",")) for r in rows}
        )

    def replace(self, target: str, acl: AccessControlList) -> None:
        with self.db.transaction() as conn:
            conn.execute("DELETE FROM acl WHERE target = ?", (target,))
            conn.executemany(
                "INSERT INTO acl (target, principal, rights) VALUES (?, ?, ?)",
                [(target, str(p), ",".join(sorted(r))) for p, r in acl.entries.items() if r],
            )

    def bootstrap_owner(self, target: str, owner: PrincipalId) -> None:
        if owner.is_anonymous:
            return
        with self.db.transaction():
            self.replace(target, self.get(target).granted(owner, RIGHTS))

    def drop(self, target: str) -> None:
        with self.db.transaction() as conn:
            conn.execute("DELETE FROM acl WHERE target = ?", (target,))

    def directory(self) -> GroupDirectory:
        with self.db.transaction() as conn:
            rows = conn.execute("SELECT grp, member FROM group_members").fetchall()
        members: dict[str, set[str]] = {}
        for r in rows:
            members.setdefault(r["grp"], set()).add(r["member"])
        return GroupDirectory({g: frozenset(m) for g, m in members.items()})

    def set_group(self, group: str, members: Iterable[str]) -> None:
        if not group:
            raise MalformedRequest("group name must be non-empty")
        with self.db.transaction() as conn:
            conn.execute("DELETE FROM group_members WHERE grp = ?", (group,))
            conn.executemany(
                "INSERT INTO group_members (grp, member) VALUES (?, ?)",
                [(group, m) for m in sorted(set(members))],
            )

    def allowed(self, target: str, release: str, actor: PrincipalId, right: str) -> bool:
        return check(self.get(target), release, actor, right, self.directory())

    def require(self, target: str, release: str, actor: PrincipalId, right: str) -> None:
        if not self.allowed(target, release, actor, right):
            raise AccessDenied(f"{actor} lacks {right} on {target.partition(':')[2]}")

    def grant(self, target: str, release: str, principal: PrincipalId,
              rights: Iterable[str], actor: PrincipalId) -> AccessControlList:
        with self.db.transaction():
            self.require(target, release, actor, WRITE)
            acl = self.get(target).granted(principal, rights)
            self.replace(target, acl)
        return acl

    def revoke(self, target: str, release: str, principal: PrincipalId,
               rights: Iterable[str], actor: PrincipalId) -> AccessControlList:
        with self.db.transaction():
            self.require(target, release, actor, WRITE)
            acl = self.get(target).revoked(principal, rights)
            self.replace(target, acl)
        return acl
