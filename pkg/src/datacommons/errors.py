"""Exception hierarchy shared by every layer of the commons.

Each class carries the HTTP status the gateway maps it to and the exit code
the CLI returns for it.
"""


class CommonsError(Exception):
    status = 500
    exit_code = 1
    code = "internal"

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


class MalformedRequest(CommonsError):
    status = 400
    exit_code = 2
    code = "malformed"


class MalformedAlias(MalformedRequest):
    code = "malformed_alias"


class MalformedQuery(MalformedRequest):
    code = "malformed_query"


class MalformedPredicate(MalformedRequest):
    code = "malformed_predicate"


class MalformedSchema(MalformedRequest):
    code = "malformed_schema"


class UnsupportedAlgorithm(MalformedRequest):
    code = "unsupported_algorithm"


class ValidationFailed(MalformedRequest):
    code = "validation_failed"

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = list(errors)
        detail = "; ".join(f"{path or '<root>'}: {msg}" for path, msg in self.errors)
        super().__init__(f"document failed validation: {detail}")

    @property
    def paths(self) -> list[str]:
        return [path for path, _ in self.errors]

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["paths"] = self.paths
        return out


class AccessDenied(CommonsError):
    status = 403
    exit_code = 3
    code = "access_denied"


class NotFound(CommonsError):
    status = 404
    exit_code = 4
    code = "not_found"


class UnknownSubject(NotFound):
    code = "unknown_subject"


class BucketMissing(NotFound):
    code = "bucket_missing"


class Conflict(CommonsError):
    status = 409
    exit_code = 5
    code = "conflict"


class AliasExists(Conflict):
    code = "alias_exists"


class HashConflict(Conflict):
    code = "hash_conflict"


class SchemaExists(Conflict):
    code = "schema_exists"


class AllocationExceeded(Conflict):
    code = "allocation_exceeded"


class StorageFull(CommonsError):
    status = 507
    exit_code = 5
    code = "storage_full"


class IntegrityError(CommonsError):
    status = 502
    exit_code = 6
    code = "integrity"


class HashMismatch(IntegrityError):
    """Content did not re-digest to the expected value.

    ``algorithm`` is ``"size"`` when the byte count itself disagreed.
    """

    code = "hash_mismatch"

    def __init__(self, algorithm: str, expected, observed, locator: str = ""):
        self.algorithm = algorithm
        self.expected = expected
        self.observed = observed
        self.locator = locator
        where = f" at {locator}" if locator else ""
        super().__init__(
            f"{algorithm} mismatch{where}: expected {expected}, observed {observed}"
        )


class BundleCorrupt(IntegrityError):
    code = "bundle_corrupt"


class FeedGap(Conflict):
    code = "feed_gap"


class NetworkError(CommonsError):
    status = 502
    exit_code = 7
    code = "network"


class PeerUnreachable(NetworkError):
    code = "peer_unreachable"


BY_CODE = {
    cls.code: cls
    for cls in [
        CommonsError, MalformedRequest, MalformedAlias, MalformedQuery,
        MalformedPredicate, MalformedSchema, UnsupportedAlgorithm, AccessDenied,
        NotFound, UnknownSubject, BucketMissing, Conflict, AliasExists,
        HashConflict, SchemaExists, AllocationExceeded, StorageFull,
        IntegrityError, BundleCorrupt, FeedGap, NetworkError, PeerUnreachable,
    ]
}


def from_payload(status: int, payload: dict) -> CommonsError:
    """Rebuild an exception from a gateway error body (client side)."""
    code = payload.get("error", "") if isinstance(payload, dict) else ""
    message = payload.get("message", "") if isinstance(payload, dict) else str(payload)
    if code == "validation_failed":
        return ValidationFailed([(p, "invalid") for p in payload.get("paths", [])])
    if code == "hash_mismatch":
        return IntegrityError(message)
    cls = BY_CODE.get(code)
    if cls is None:
        cls = {400: MalformedRequest, 403: AccessDenied, 404: NotFound,
               409: Conflict}.get(status, CommonsError)
    return cls(message)
