"""Liquidity risk indicators in raw and entity-adjusted modes.

Six indicators: top-10 holder share, HHI concentration, volume/market-cap
(VMTV), volume/liquidity (kept under the source name "volatility" although it
is a turnover ratio, not a statistical volatility), pool liquidity value, and
holder count. The adjusted mode treats each linked group as one holder and
strips intra-entity transfer volume.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .cluster import replay_balances
from .ingest import DatasetBundle
from .model import (
    GroupSet,
    IndicatorReport,
    InvariantViolation,
    LiquiditySnapshot,
    MissingSnapshot,
    Transfer,
    ZeroLiquidity,
    ZeroMarketCap,
    ZeroSupply,
    group_set_fingerprint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsConfig:
    window_seconds: int = 86400
    vmtv_cap: float = 1.0
    volatility_cap: float = 5.0
    # None means dataset-relative: the run's own value (or the max across
    # tokens in a comparison), making that axis 1.0 for the reference run
    liquidity_cap: Optional[float] = None
    holders_cap: Optional[float] = None
    exclude_flags: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise InvariantViolation("window_seconds must be positive")
        for name in ("vmtv_cap", "volatility_cap"):
            if getattr(self, name) <= 0:
                raise InvariantViolation(f"{name} must be positive")
        for name in ("liquidity_cap", "holders_cap"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise InvariantViolation(f"{name} must be positive when set")


@dataclass(frozen=True)
class HolderDistribution:
    """Balances per holder; a holder is an address or an entity id."""

    entries: tuple[tuple[str, float], ...]
    total_supply_held: float

    def __post_init__(self):
        if any(balance < 0 for _, balance in self.entries):
            raise InvariantViolation("holder balances must be non-negative")
        expected = sum(balance for _, balance in self.entries)
        if not math.isclose(expected, self.total_supply_held, rel_tol=1e-9, abs_tol=1e-9):
            raise InvariantViolation("total_supply_held does not match entries")

    @classmethod
    def from_balances(cls, balances: Mapping[str, float]) -> "HolderDistribution":
        entries = tuple(sorted(balances.items()))
        return cls(entries=entries, total_supply_held=sum(balances.values()))

    def shares(self) -> list[float]:
        if self.total_supply_held <= 0:
            raise ZeroSupply("distribution holds no supply")
        return [balance / self.total_supply_held for _, balance in self.entries]


def entity_balances(
    balances: Mapping[str, float],
    groups: GroupSet,
    exclude_flags: Iterable[str] = (),
) -> HolderDistribution:
    """Collapse grouped addresses into entity holders.

    Each group's balance is the sum of member balances under one synthetic
    holder id; ungrouped addresses stay singleton holders. Members of groups
    carrying an excluded flag are dropped entirely.
    """
    excluded = set(exclude_flags)
    merged: dict[str, float] = {}
    grouped: set[str] = set()
    for g in groups.groups:
        grouped.update(g.members)
        if excluded & g.flags:
            continue
        total = sum(balances.get(m, 0.0) for m in g.members)
        merged[f"entity:{g.group_id:06d}"] = total
    for addr in sorted(balances):
        if addr not in grouped:
            merged[addr] = balances[addr]
    return HolderDistribution.from_balances(merged)


def top10_position(dist: HolderDistribution) -> float:
    """Share of supply held by the 10 largest holders."""
    if dist.total_supply_held <= 0:
        raise ZeroSupply("top10_position needs positive held supply")
    ranked = sorted(dist.entries, key=lambda e: (-e[1], e[0]))
    return sum(balance for _, balance in ranked[:10]) / dist.total_supply_held


def hhi(dist: HolderDistribution) -> float:
    """Herfindahl-Hirschman index: sum of squared holder shares."""
    return sum(p * p for p in dist.shares())


def vmtv(volume_24h: float, market_cap: float) -> float:
    """24h volume over market cap."""
    if market_cap <= 0:
        raise ZeroMarketCap("vmtv needs positive market cap")
    return volume_24h / market_cap


def volatility(volume_24h: float, pool_liquidity: float) -> float:
    """24h volume over pool liquidity.

    The source names this ratio "volatility"; it is really a turnover rate
    against pool depth, not a statistical volatility. The name is kept for
    continuity with the indicator set.
    """
    if pool_liquidity <= 0:
        raise ZeroLiquidity("volatility needs positive pool liquidity")
    return volume_24h / pool_liquidity


def pool_value(snapshot: LiquiditySnapshot) -> float:
    """Pool liquidity L = q_a * p_a + q_b * p_b."""
    return snapshot.q_a * snapshot.p_a + snapshot.q_b * snapshot.p_b


def holders(dist: HolderDistribution) -> int:
    """Holders with strictly positive balance."""
    return sum(1 for _, balance in dist.entries if balance > 0)


def window_transfers(
    transfers: Sequence[Transfer], end: int, window_seconds: int = 86400
) -> list[Transfer]:
    """Transfers with end - window < timestamp <= end."""
    start = end - window_seconds
    return [t for t in transfers if start < t.timestamp <= end]


def adjusted_volume(transfers: Sequence[Transfer], groups: GroupSet) -> float:
    """USD volume between distinct entities (intra-entity transfers dropped).

    Callers pass the transfers already sliced to the window of interest.
    """
    entity = groups.entity_of()
    total = 0.0
    for t in transfers:
        if entity.get(t.from_addr, t.from_addr) != entity.get(t.to_addr, t.to_addr):
            total += t.usd_value
    return total


def intra_entity_volume(transfers: Sequence[Transfer], groups: GroupSet) -> float:
    entity = groups.entity_of()
    return sum(
        t.usd_value for t in transfers
        if entity.get(t.from_addr, t.from_addr) == entity.get(t.to_addr, t.to_addr)
    )


def _positive_axes(
    top10: float,
    concentration: float,
    vmtv_value: float,
    volatility_value: float,
    liquidity: float,
    holder_count: float,
    config: MetricsConfig,
    liquidity_cap: float,
    holders_cap: float,
) -> dict[str, float]:
    return {
        "top10_pos": 1.0 - top10,
        "hhi_pos": 1.0 - concentration,
        "vmtv_pos": min(vmtv_value / config.vmtv_cap, 1.0),
        "volatility_pos": min(volatility_value / config.volatility_cap, 1.0),
        "liquidity_pos": min(liquidity / liquidity_cap, 1.0) if liquidity_cap > 0 else 0.0,
        "holders_pos": min(holder_count / holders_cap, 1.0) if holders_cap > 0 else 0.0,
    }


def compute_report(
    bundle: DatasetBundle,
    groups: GroupSet,
    config: MetricsConfig = MetricsConfig(),
) -> IndicatorReport:
    """Raw and entity-adjusted indicator values plus their positive forms.

    Balances come from the market snapshot when it carries any, otherwise
    from replaying the cleaned transfers. Raw 24h volume is the market
    snapshot's; the adjusted volume subtracts intra-entity USD moved inside
    the snapshot-anchored window (floored at zero, since the external volume
    figure and the transfer log can disagree).
    """
    if bundle.market is None:
        raise MissingSnapshot("market snapshot required for indicators")
    if bundle.pool is None:
        raise MissingSnapshot("pool snapshot required for indicators")
    market = bundle.market
    pool = bundle.pool

    if market.balances:
        balances = dict(market.balances)
        replayed = replay_balances(bundle.transfers)
        drift = sum(
            1 for addr in replayed
            if not math.isclose(
                replayed[addr], balances.get(addr, 0.0), rel_tol=1e-6, abs_tol=1e-6)
        )
        if drift:
            log.info("balance snapshot overrides replay for %d addresses", drift)
    else:
        balances = replay_balances(bundle.transfers)

    raw_dist = HolderDistribution.from_balances(balances)
    adj_dist = entity_balances(balances, groups, config.exclude_flags)

    liquidity = pool_value(pool)
    windowed = window_transfers(bundle.transfers, market.timestamp, config.window_seconds)
    intra = intra_entity_volume(windowed, groups)
    raw_volume = market.volume_24h
    adj_volume = max(0.0, raw_volume - intra)

    raw = {
        "top10_position": top10_position(raw_dist),
        "hhi": hhi(raw_dist),
        "vmtv": vmtv(raw_volume, market.market_cap),
        "volatility": volatility(raw_volume, liquidity),
        "pool_liquidity": liquidity,
        "holders": float(holders(raw_dist)),
    }
    adjusted = {
        "top10_position": top10_position(adj_dist),
        "hhi": hhi(adj_dist),
        "vmtv": vmtv(adj_volume, market.market_cap),
        "volatility": volatility(adj_volume, liquidity),
        "pool_liquidity": liquidity,
        "holders": float(holders(adj_dist)),
    }

    liquidity_cap = config.liquidity_cap if config.liquidity_cap is not None else liquidity
    holders_cap = config.holders_cap if config.holders_cap is not None else raw["holders"]

    positive_raw = _positive_axes(
        raw["top10_position"], raw["hhi"], raw["vmtv"], raw["volatility"],
        liquidity, raw["holders"], config, liquidity_cap, holders_cap)
    positive_adjusted = _positive_axes(
        adjusted["top10_position"], adjusted["hhi"], adjusted["vmtv"],
        adjusted["volatility"], liquidity, adjusted["holders"], config,
        liquidity_cap, holders_cap)

    if not config.exclude_flags:
        _validate_adjustment(raw, adjusted)

    metadata = {
        "window_seconds": config.window_seconds,
        "window_end": market.timestamp,
        "intra_entity_volume": intra,
        "group_count": len(groups.groups),
        "grouped_addresses": groups.member_count(),
        "singleton_count": groups.singleton_count(),
        "universe_size": len(groups.universe),
        "exclude_flags": sorted(config.exclude_flags),
        "group_set_fingerprint": group_set_fingerprint(groups),
        "caps": {
            "vmtv_cap": config.vmtv_cap,
            "volatility_cap": config.volatility_cap,
            "liquidity_cap": liquidity_cap,
            "holders_cap": holders_cap,
        },
    }
    return IndicatorReport(
        raw=raw,
        adjusted=adjusted,
        positive_raw=positive_raw,
        positive_adjusted=positive_adjusted,
        metadata=metadata,
    )


def _validate_adjustment(raw: Mapping[str, float], adjusted: Mapping[str, float]) -> None:
    """Entity merging can only concentrate the distribution and shrink
    activity; violated inequalities mean the adjustment itself is broken."""
    tol = 1e-12
    checks = (
        ("hhi", adjusted["hhi"] >= raw["hhi"] - tol),
        ("top10_position", adjusted["top10_position"] >= raw["top10_position"] - tol),
        ("holders", adjusted["holders"] <= raw["holders"] + tol),
        ("vmtv", adjusted["vmtv"] <= raw["vmtv"] + tol),
        ("volatility", adjusted["volatility"] <= raw["volatility"] + tol),
    )
    for name, ok in checks:
        if not ok:
            raise InvariantViolation(
                f"adjusted {name} moved the wrong way: "
                f"raw={raw[name]!r} adjusted={adjusted[name]!r}")
