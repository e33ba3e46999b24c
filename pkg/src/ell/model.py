"""Core domain types shared by every pipeline stage.

Addresses are plain lowercase strings; ``normalize_address`` is applied at
parse boundaries so equality is byte equality everywhere else. A "transfer"
here is one token movement; a single on-chain transaction may carry several
transfers (they share a tx_hash).

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence


# --------------------------------------------------------------------------
# errors

class EllError(Exception):
    """Base class for every error raised by this package."""


class InvariantViolation(EllError):
    """A domain invariant does not hold (negative amount, empty address...)."""


class MalformedRow(EllError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"row {index}: {reason}")
        self.index = index
        self.reason = reason


class SchemaMismatch(EllError):
    pass


class EmptyDataset(EllError):
    pass


class UnknownCategory(EllError):
    pass


class HttpError(EllError):
    def __init__(self, status: int, body_excerpt: str):
        super().__init__(f"HTTP {status}: {body_excerpt[:200]}")
        self.status = status
        self.body_excerpt = body_excerpt[:200]


class RateLimited(EllError):
    pass


class CacheCorrupt(EllError):
    pass


class EmptyGraph(EllError):
    pass


class EmptyInput(EllError):
    pass


class SingletonGroup(EllError):
    pass


class ZeroSupply(EllError):
    pass


class ZeroMarketCap(EllError):
    pass


class ZeroLiquidity(EllError):
    pass


class MissingSnapshot(EllError):
    pass


class IncompleteReport(EllError):
    pass


class MismatchedAxes(EllError):
    pass


class InvalidSpec(EllError):
    pass


# --------------------------------------------------------------------------
# labels

LABEL_CATEGORIES = (
    "smart_contract",
    "hot_wallet",
    "project",
    "multi_send_contract",
    "exchange",
    "other",
)

# Shared infrastructure: transfers touching these are removed in preprocessing.
PUBLIC_CATEGORIES = frozenset({"smart_contract", "hot_wallet", "exchange"})

# Everything except "other": these addresses are never grouped by detectors.
INSTITUTIONAL_CATEGORIES = frozenset(LABEL_CATEGORIES) - {"other"}


def normalize_address(value: str) -> str:
    """Canonical lowercase form. Raises InvariantViolation on empty input."""
    addr = value.strip().lower()
    if not addr:
        raise InvariantViolation("empty address")
    return addr


@dataclass(frozen=True, slots=True)
class AddressLabel:
    address: str
    category: str
    source: str

    def __post_init__(self):
        if self.category not in LABEL_CATEGORIES:
            raise UnknownCategory(f"unknown label category {self.category!r}")
        object.__setattr__(self, "address", normalize_address(self.address))


def label_map(labels: Iterable[AddressLabel]) -> dict[str, str]:
    """address -> category. First label wins on duplicates (input order)."""
    out: dict[str, str] = {}
    for lab in labels:
        out.setdefault(lab.address, lab.category)
    return out


# --------------------------------------------------------------------------
# transfers

@dataclass(frozen=True, slots=True)
class Transfer:
    """One token movement. ``from``/``to`` are csv column names; Python
    attributes are from_addr/to_addr."""

    tx_hash: str
    block_number: int
    timestamp: int
    from_addr: str
    to_addr: str
    token: str
    raw_amount: int
    usd_value: float
    gas_fee: float

    def __post_init__(self):
        if self.block_number < 0:
            raise InvariantViolation("negative block_number")
        if self.raw_amount < 0:
            raise InvariantViolation("negative raw_amount")
        if self.usd_value < 0:
            raise InvariantViolation("negative usd_value")
        if self.gas_fee < 0:
            raise InvariantViolation("negative gas_fee")
        object.__setattr__(self, "from_addr", normalize_address(self.from_addr))
        object.__setattr__(self, "to_addr", normalize_address(self.to_addr))

    @property
    def hour_of_day(self) -> int:
        return (self.timestamp % 86400) // 3600


# --------------------------------------------------------------------------
# transaction graph

@dataclass(frozen=True, slots=True)
class EdgeStats:
    transfer_count: int
    total_usd: float
    first_timestamp: int
    last_timestamp: int
    transfer_indices: tuple[int, ...]  # indices into the source transfer list


class TransactionGraph:
    """Directed multigraph over addresses with aggregated edge statistics.

    Aggregates are order-insensitive: rebuilding from a permuted transfer list
    yields identical counts, totals and timestamp bounds per (from, to) pair.
    """

    __slots__ = ("transfers", "nodes", "edges", "out_adj", "in_adj")

    def __init__(self, transfers: Sequence[Transfer]):
        self.transfers: tuple[Transfer, ...] = tuple(transfers)
        counts: dict[tuple[str, str], int] = {}
        usd: dict[tuple[str, str], float] = {}
        first: dict[tuple[str, str], int] = {}
        last: dict[tuple[str, str], int] = {}
        idx: dict[tuple[str, str], list[int]] = {}
        nodes: set[str] = set()
        for i, t in enumerate(self.transfers):
            key = (t.from_addr, t.to_addr)
            nodes.add(t.from_addr)
            nodes.add(t.to_addr)
            counts[key] = counts.get(key, 0) + 1
            usd[key] = usd.get(key, 0.0) + t.usd_value
            first[key] = min(first.get(key, t.timestamp), t.timestamp)
            last[key] = max(last.get(key, t.timestamp), t.timestamp)
            idx.setdefault(key, []).append(i)
        self.nodes: frozenset[str] = frozenset(nodes)
        self.edges: dict[tuple[str, str], EdgeStats] = {
            key: EdgeStats(counts[key], usd[key], first[key], last[key], tuple(idx[key]))
            for key in sorted(counts)
        }
        out_adj: dict[str, list[str]] = {}
        in_adj: dict[str, list[str]] = {}
        for (u, v) in self.edges:
            out_adj.setdefault(u, []).append(v)
            in_adj.setdefault(v, []).append(u)
        # adjacency built from sorted edge keys, so neighbor lists are sorted
        self.out_adj: dict[str, tuple[str, ...]] = {u: tuple(vs) for u, vs in out_adj.items()}
        self.in_adj: dict[str, tuple[str, ...]] = {v: tuple(us) for v, us in in_adj.items()}

    def successors(self, node: str) -> tuple[str, ...]:
        return self.out_adj.get(node, ())

    def predecessors(self, node: str) -> tuple[str, ...]:
        return self.in_adj.get(node, ())

    def edge(self, u: str, v: str) -> Optional[EdgeStats]:
        return self.edges.get((u, v))

    def has_edge(self, u: str, v: str) -> bool:
        return (u, v) in self.edges

    def timestamp_span(self) -> tuple[int, int]:
        if not self.transfers:
            return (0, 0)
        ts = [t.timestamp for t in self.transfers]
        return (min(ts), max(ts))


def build_graph(transfers: Sequence[Transfer]) -> TransactionGraph:
    return TransactionGraph(transfers)


# --------------------------------------------------------------------------
# entity groups

class Evidence(NamedTuple):
    detector: str
    detail: str
    weight: float


@dataclass(frozen=True)
class EntityGroup:
    group_id: int
    members: frozenset[str]
    evidence: tuple[Evidence, ...] = ()
    linkage_probability: float = 1.0
    flags: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.members:
            raise InvariantViolation("group members must be non-empty")
        if not 0.0 <= self.linkage_probability <= 1.0:
            raise InvariantViolation("linkage_probability outside [0, 1]")
        for ev in self.evidence:
            if not 0.0 <= ev.weight <= 1.0:
                raise InvariantViolation("evidence weight outside [0, 1]")

    def sorted_members(self) -> list[str]:
        return sorted(self.members)


@dataclass(frozen=True)
class GroupSet:
    """Disjoint entity groups over a universe of addresses.

    Addresses in the universe but in no group are implicit singleton entities.
    Disjointness is checked on construction.
    """

    groups: tuple[EntityGroup, ...]
    universe: frozenset[str]

    def __post_init__(self):
        seen: set[str] = set()
        for g in self.groups:
            overlap = seen & g.members
            if overlap:
                raise InvariantViolation(
                    f"groups not disjoint: {sorted(overlap)[:3]}..."
                )
            seen |= g.members
            stray = g.members - self.universe
            if stray:
                raise InvariantViolation(
                    f"group member outside universe: {sorted(stray)[:3]}..."
                )

    def member_count(self) -> int:
        return sum(len(g.members) for g in self.groups)

    def singleton_count(self) -> int:
        return len(self.universe) - self.member_count()

    def entity_of(self) -> dict[str, str]:
        """address -> entity id. Grouped members map to 'entity:<id>',
        everything else is its own entity."""
        out: dict[str, str] = {}
        for g in self.groups:
            eid = f"entity:{g.group_id:06d}"
            for m in g.members:
                out[m] = eid
        return out


def empty_group_set(universe: Iterable[str] = ()) -> GroupSet:
    return GroupSet(groups=(), universe=frozenset(universe))


def group_set_fingerprint(groups: GroupSet) -> str:
    """Stable digest of the grouping itself (members + probabilities)."""
    payload = [
        {
            "members": g.sorted_members(),
            "p": round(g.linkage_probability, 12),
            "flags": sorted(g.flags),
        }
        for g in sorted(groups.groups, key=lambda g: g.group_id)
    ]
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# snapshots

@dataclass(frozen=True, slots=True)
class LiquiditySnapshot:
    """Pool composition: quantities and USD prices of both pooled tokens."""

    q_a: float
    q_b: float
    p_a: float
    p_b: float
    timestamp: int

    def __post_init__(self):
        for name in ("q_a", "q_b", "p_a", "p_b"):
            if getattr(self, name) < 0:
                raise InvariantViolation(f"negative {name}")


@dataclass(frozen=True)
class MarketSnapshot:
    volume_24h: float
    market_cap: float
    balances: Mapping[str, float]
    timestamp: int

    def __post_init__(self):
        if self.volume_24h < 0:
            raise InvariantViolation("negative volume_24h")
        if self.market_cap < 0:
            raise InvariantViolation("negative market_cap")
        for addr, bal in self.balances.items():
            if bal < 0:
                raise InvariantViolation(f"negative balance for {addr}")


# --------------------------------------------------------------------------
# indicator report

INDICATOR_NAMES = (
    "top10_position",
    "hhi",
    "vmtv",
    "volatility",
    "pool_liquidity",
    "holders",
)

POSITIVE_AXES = (
    "top10_pos",
    "hhi_pos",
    "vmtv_pos",
    "volatility_pos",
    "liquidity_pos",
    "holders_pos",
)


@dataclass(frozen=True)
class IndicatorReport:
    """Six liquidity indicators, computed per-address (raw) and per-entity
    (adjusted), plus their positive transforms used by the radar chart."""

    raw: Mapping[str, float]
    adjusted: Mapping[str, float]
    positive_raw: Mapping[str, float]
    positive_adjusted: Mapping[str, float]
    metadata: Mapping[str, object]

    def __post_init__(self):
        for block in (self.raw, self.adjusted):
            missing = set(INDICATOR_NAMES) - set(block)
            if missing:
                raise IncompleteReport(f"missing indicators: {sorted(missing)}")
        for block in (self.positive_raw, self.positive_adjusted):
            missing = set(POSITIVE_AXES) - set(block)
            if missing:
                raise IncompleteReport(f"missing positive axes: {sorted(missing)}")
            for name, value in block.items():
                if not -1e-9 <= value <= 1 + 1e-9:
                    raise InvariantViolation(f"{name}={value} outside [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "raw": dict(sorted(self.raw.items())),
            "adjusted": dict(sorted(self.adjusted.items())),
            "positive_raw": dict(sorted(self.positive_raw.items())),
            "positive_adjusted": dict(sorted(self.positive_adjusted.items())),
            "metadata": dict(sorted(self.metadata.items())),
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "IndicatorReport":
        try:
            return cls(
                raw=dict(data["raw"]),
                adjusted=dict(data["adjusted"]),
                positive_raw=dict(data["positive_raw"]),
                positive_adjusted=dict(data["positive_adjusted"]),
                metadata=dict(data.get("metadata", {})),
            )
        except KeyError as exc:
            raise IncompleteReport(f"missing report block: {exc}") from exc


def dump_json(obj, path) -> None:
    """Canonical JSON writer used for every artifact (stable byte output)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
