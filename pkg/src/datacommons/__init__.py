"""Data commons kernel service."""

from .accessctl import ANONYMOUS, AccessControlList, PrincipalId, check
from .commons import Commons
from .idmodel import AliasId, DigitalIdRecord, HashRecord, HashSet, compute_rev, digest_stream, parse_alias

__all__ = [
    "ANONYMOUS", "AccessControlList", "AliasId", "Commons", "DigitalIdRecord", "HashRecord",
    "HashSet", "PrincipalId", "check", "compute_rev", "digest_stream", "parse_alias",
]
__version__ = "0.1.0"
