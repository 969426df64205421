"""Usage metering: event log, allocations, monthly invoices and capacity reports."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .accessctl import PrincipalId
from .errors import AllocationExceeded, MalformedRequest

log = logging.getLogger(__name__)

CORE_HOURS = "core_hours"
STORAGE_BYTE_HOURS = "storage_byte_hours"
EGRESS_BYTES = "egress_bytes"
KINDS = (CORE_HOURS, STORAGE_BYTE_HOURS, EGRESS_BYTES)

# 100,000 core hours ~ $40,000 a month on a commercial cloud.
DEFAULT_PRICES = {
    CORE_HOURS: Decimal("0.40"),
    STORAGE_BYTE_HOURS: Decimal("0.03") / Decimal(10**9) / Decimal(730),
    EGRESS_BYTES: Decimal("0.09") / Decimal(10**9),
}

COMPUTE = "compute"
STORAGE = "storage"
DEFAULT_TARGETS = {COMPUTE: 0.85, STORAGE: 0.80}

ZERO = Decimal(0)
CENT = Decimal("0.01")


def to_decimal(value) -> Decimal:
    if isinstance(value, Decimal):
        return value
    if isinstance(value, bool):
        raise MalformedRequest("expected a number")
    try:
        return Decimal(str(value))
    except ArithmeticError:
        raise MalformedRequest(f"not a number: {value!r}") from None


def period_of(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m")


def check_period(period: str) -> str:
    try:
        datetime.strptime(period, "%Y-%m")
    except (TypeError, ValueError):
        raise MalformedRequest(f"period must be YYYY-MM, got {period!r}") from None
    return period


@dataclass(frozen=True)
class UsageEvent:
    actor: PrincipalId
    kind: str
    quantity: Decimal
    unit_price: Decimal | None = None
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    peer_tag: str | None = None
    amount: Decimal | None = None
    flagged: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MalformedRequest(f"unknown usage kind {self.kind!r}")
        object.__setattr__(self, "quantity", to_decimal(self.quantity))
        if self.quantity < 0:
            raise MalformedRequest("quantity must be non-negative")
        if self.unit_price is not None:
            object.__setattr__(self, "unit_price", to_decimal(self.unit_price))
            if self.unit_price < 0:
                raise MalformedRequest("unit price must be non-negative")
        if self.timestamp.tzinfo is None:
            object.__setattr__(self, "timestamp", self.timestamp.replace(tzinfo=timezone.utc))

    @property
    def period(self) -> str:
        return period_of(self.timestamp)

    def to_dict(self) -> dict:
        return {
            "actor": str(self.actor),
            "kind": self.kind,
            "quantity": str(self.quantity),
            "unit_price": None if self.unit_price is None else str(self.unit_price),
            "timestamp": self.timestamp.isoformat(),
            "peer_tag": self.peer_tag,
            "amount": None if self.amount is None else str(self.amount),
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> UsageEvent:
        ts = doc.get("timestamp")
        return cls(
            actor=PrincipalId.parse(doc.get("actor")),
            kind=doc["kind"],
            quantity=doc["quantity"],
            unit_price=doc.get("unit_price"),
            timestamp=datetime.fromisoformat(ts) if ts else datetime.now(timezone.utc),
            peer_tag=doc.get("peer_tag"),
            amount=None if doc.get("amount") is None else to_decimal(doc["amount"]),
            flagged=bool(doc.get("flagged", False)),
        )


@dataclass(frozen=True)
class Allocation:
    actor: PrincipalId
    kind: str
    cap: Decimal
    hard: bool = True

    def __post_init__(self):
        object.__setattr__(self, "cap", to_decimal(self.cap))
        if self.cap <= 0:
            raise MalformedRequest("allocation cap must be positive")
        if self.kind not in KINDS:
            raise MalformedRequest(f"unknown usage kind {self.kind!r}")


@dataclass(frozen=True)
class InvoiceLine:
    kind: str
    quantity: Decimal
    amount: Decimal


@dataclass(frozen=True)
class Invoice:
    actor: PrincipalId
    period: str
    lines: tuple[InvoiceLine, ...]
    total: Decimal

    def to_dict(self) -> dict:
        return {
            "actor": str(self.actor),
            "period": self.period,
            "lines": [
                {"kind": ln.kind, "quantity": str(ln.quantity), "amount": str(ln.amount)}
                for ln in self.lines
            ],
            "total": str(self.total),
        }

    def to_text(self) -> str:
        out = [f"Invoice for {self.actor}, {self.period}"]
        for ln in self.lines:
            out.append(f"  {ln.kind:<20} {ln.quantity:>20} {ln.amount.quantize(CENT):>14}")
        out.append(f"  {'total':<20} {'':>20} {self.total.quantize(CENT):>14}")
        return "\n".join(out)


@dataclass(frozen=True)
class CapacityReport:
    utilization: dict[str, float]
    targets: dict[str, float]
    over_target: dict[str, bool]

    def to_dict(self) -> dict:
        return {"utilization": self.utilization, "targets": self.targets,
                "over_target": self.over_target}


def capacity_report(used: Mapping[str, float], totals: Mapping[str, float],
                    targets: Mapping[str, float] | None = None) -> CapacityReport:
    """Utilization per resource; a resource is over target only strictly above it."""
    targets = {**DEFAULT_TARGETS, **(targets or {})}
    utilization, over = {}, {}
    for resource, total in totals.items():
        if total <= 0:
            raise MalformedRequest(f"total for {resource} must be positive")
        frac = used.get(resource, 0) / total
        utilization[resource] = frac
        target = targets.get(resource)
        over[resource] = target is not None and frac > target
    return CapacityReport(utilization, {k: targets[k] for k in totals if k in targets}, over)


def fold_invoice(events: Iterable[UsageEvent], actor: PrincipalId, period: str) -> Invoice:
    quantities: dict[str, Decimal] = {}
    amounts: dict[str, Decimal] = {}
    for ev in events:
        if ev.actor != actor or ev.period != period:
            continue
        quantities[ev.kind] = quantities.get(ev.kind, ZERO) + ev.quantity
        amounts[ev.kind] = amounts.get(ev.kind, ZERO) + (ev.amount or ZERO)
    lines = tuple(InvoiceLine(k, quantities[k], amounts[k]) for k in KINDS if k in quantities)
    return Invoice(actor, period, lines, sum((ln.amount for ln in lines), ZERO))


class Meter:
    """Serialized writer over an append-only JSON-lines event log.

    ``no_cost`` tells whether a peer tag names an agreement with free transfers.
    """

    def __init__(self, log_path: str | Path | None = None, *,
                 prices: Mapping[str, Decimal] | None = None,
                 no_cost: Callable[[str], bool] | None = None):
        self.log_path = Path(log_path) if log_path else None
        self.prices = {**DEFAULT_PRICES, **{k: to_decimal(v) for k, v in (prices or {}).items()}}
        self.no_cost = no_cost or (lambda name: False)
        self.allocations: dict[tuple[PrincipalId, str], Allocation] = {}
        self._events: list[UsageEvent] = []
        self._lock = threading.Lock()
        if self.log_path is not None and self.log_path.exists():
            with open(self.log_path, encoding="utf-8") as fh:
                self._events = [UsageEvent.from_dict(json.loads(line)) for line in fh if line.strip()]

    def set_allocation(self, allocation: Allocation) -> None:
        with self._lock:
            self.allocations[(allocation.actor, allocation.kind)] = allocation

    def price(self, event: UsageEvent) -> Decimal:
        if event.peer_tag and self.no_cost(event.peer_tag):
            return ZERO
        unit = event.unit_price if event.unit_price is not None else self.prices[event.kind]
        return event.quantity * unit

    def _used(self, actor: PrincipalId, kind: str, period: str) -> Decimal:
        return sum(
            (e.quantity for e in self._events
             if e.actor == actor and e.kind == kind and e.period == period),
            ZERO,
        )

    def record_usage(self, event: UsageEvent) -> UsageEvent:
        with self._lock:
            unit = event.unit_price if event.unit_price is not None else self.prices[event.kind]
            event = replace(event, unit_price=unit, amount=self.price(event), flagged=False)
            allocation = self.allocations.get((event.actor, event.kind))
            if allocation is not None:
                after = self._used(event.actor, event.kind, event.period) + event.quantity
                if after > allocation.cap:
                    if allocation.hard:
                        raise AllocationExceeded(
                            f"{event.actor} {event.kind} would reach {after} of {allocation.cap} "
                            f"in {event.period}"
                        )
                    event = replace(event, flagged=True)
                    log.warning("soft allocation exceeded: %s %s %s", event.actor, event.kind, after)
            self._events.append(event)
            if self.log_path is not None:
                self.log_path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
        return event

    def events(self) -> list[UsageEvent]:
        with self._lock:
            return list(self._events)

    def monthly_invoice(self, actor: PrincipalId, period: str) -> Invoice:
        return fold_invoice(self.events(), actor, check_period(period))

    def threshold_report(self, period: str, thresholds: Iterable[float]) -> list[tuple[Decimal, int]]:
        """Number of distinct actors whose core hours in ``period`` reach each cutoff."""
        cutoffs = [to_decimal(t) for t in thresholds]
        if any(b <= a for a, b in zip(cutoffs, cutoffs[1:])):
            raise MalformedRequest("thresholds must be strictly increasing")
        check_period(period)
        totals: dict[PrincipalId, Decimal] = {}
        for ev in self.events():
            if ev.kind == CORE_HOURS and ev.period == period:
                totals[ev.actor] = totals.get(ev.actor, ZERO) + ev.quantity
        return [(c, sum(1 for t in totals.values() if t >= c)) for c in cutoffs]

    def actors(self, period: str | None = None) -> list[PrincipalId]:
        return sorted({e.actor for e in self.events() if period is None or e.period == period})
