"""Reference data: the NEXRAD resolver record and a synthetic monthly usage log.

The usage log is generated, not observed: it is built so that the number of
users reaching 20k/50k/100k/200k core hours in one month is 120/34/23/5.
"""

from __future__ import annotations

import calendar
import random
from datetime import datetime, timedelta, timezone

from .accessctl import PrincipalId
from .idmodel import HashSet
from .metering import CORE_HOURS, UsageEvent

NEXRAD_ALIAS = "ark:/31807/DC0-7b2c1002-e3c4-41ea-8edc-8fcee4ff3f47"
NEXRAD_MD5 = "1e24480435408b664b756be0822028a3"
NEXRAD_SIZE = 45893621760
NEXRAD_AUTHORITY = "noaa-commons"
NEXRAD_URLS = (
    "https://<osdc>/noaa-nexrad-l2/NWS_NEXRAD_NXL2DP_KDVN_201509_01.tar",
    "https://<osdc>/noaa-nexrad-l2/NWS_NEXRAD_NXL2DP_KDVN_201509_02.tar",
)
NEXRAD_METADATA_ID = "nexrad-kdvn-201509"
NEXRAD_METADATA = {
    "instrument": "NEXRAD",
    "site": "KDVN",
    "product": "Level II",
    "month": "2015-09",
}

THRESHOLDS = (20000, 50000, 100000, 200000)
THRESHOLD_COUNTS = (120, 34, 23, 5)
FIXTURE_PERIOD = "2015-11"


def load_nexrad(commons, actor: PrincipalId | None = None):
    """Register the NEXRAD record (and its metadata document) in ``commons``."""
    from .metastore import MetadataDocument

    actor = actor or PrincipalId.user(next(iter(sorted(commons.admins)), "admin"))
    if commons.index.get_record(NEXRAD_ALIAS) is None:
        commons.index.mint(
            NEXRAD_ALIAS, HashSet({"md5": NEXRAD_MD5}), NEXRAD_SIZE, NEXRAD_URLS,
            actor=actor, authority=NEXRAD_AUTHORITY, release="public",
        )
        commons.meta.apply_document(
            MetadataDocument(NEXRAD_METADATA_ID, NEXRAD_ALIAS, None, NEXRAD_METADATA),
            owner=actor,
        )
    return commons.index.get_record(NEXRAD_ALIAS)


def _bracket_sizes(counts=THRESHOLD_COUNTS) -> list[int]:
    # users whose monthly total falls between consecutive cutoffs
    return [a - b for a, b in zip(counts, counts[1:])] + [counts[-1]]


def monthly_usage_log(period: str = FIXTURE_PERIOD, seed: int = 2015,
                     light_users: int = 66) -> list[UsageEvent]:
    """Core-hour events for one month reproducing the threshold counts.

    Each user's monthly total is drawn inside its bracket and then split into
    several jobs spread over the month.
    """
    rng = random.Random(seed)
    year, month = (int(p) for p in period.split("-"))
    start = datetime(year, month, 1, tzinfo=timezone.utc)
    seconds = calendar.monthrange(year, month)[1] * 86400
    bounds = list(THRESHOLDS) + [400000]
    totals: list[int] = [rng.randrange(100, THRESHOLDS[0]) for _ in range(light_users)]
    for i, n in enumerate(_bracket_sizes()):
        totals += [rng.randrange(bounds[i], bounds[i + 1]) for _ in range(n)]
    rng.shuffle(totals)

    events = []
    for uid, total in enumerate(totals):
        actor = PrincipalId.user(f"researcher{uid:03d}")
        jobs = rng.randint(1, 6)
        cuts = sorted(rng.sample(range(1, total), jobs - 1)) if total > jobs else []
        parts = [b - a for a, b in zip([0, *cuts], [*cuts, total])]
        for quantity in parts:
            ts = start + timedelta(seconds=rng.randrange(seconds))
            events.append(UsageEvent(actor=actor, kind=CORE_HOURS, quantity=quantity, timestamp=ts))
    events.sort(key=lambda e: e.timestamp)
    return events
