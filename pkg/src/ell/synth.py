"""Synthetic token datasets with known entity structure.

Generates transfer logs realizing the detectable coordination patterns
(diffusion funding, sequential chains, collection, wash pairs, circular
trading) plus retail background noise and cleaning fodder (airdrops, a
public exchange hub), together with the exact ground-truth GroupSet. Every
draw comes from one seeded RNG in a fixed order, so a given spec always
produces byte-identical files.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .cluster import group_set_to_json_dict
from .ingest import DatasetBundle, write_transfers
from .model import (
    AddressLabel,
    EntityGroup,
    GroupSet,
    InvalidSpec,
    InvariantViolation,
    LiquiditySnapshot,
    MarketSnapshot,
    Transfer,
    dump_json,
)

EPOCH = 1_700_000_000
TOKEN_ADDRESS = "0x" + "feed" * 10
BASE_UNITS = 10**9  # raw units per USD at the reference price

ENTITY_PATTERNS = ("diffusion", "sequential_chain", "collector", "wash_pair", "circular")
ACTOR_PATTERNS = ("airdrop", "public_hub")
PATTERN_NAMES = frozenset(ENTITY_PATTERNS) | frozenset(ACTOR_PATTERNS)


@dataclass(frozen=True)
class ScenarioSpec:
    n_retail: int = 100
    n_entities: int = 5
    entity_size_range: tuple[int, int] = (6, 10)
    patterns: frozenset[str] = frozenset({"diffusion"})
    volume_scale: float = 1.0
    duration_days: int = 7
    seed: int = 0
    retail_tx_range: tuple[int, int] = (2, 6)

    def __post_init__(self):
        if self.n_retail < 0 or self.n_entities < 0:
            raise InvalidSpec("counts must be >= 0")
        if self.n_retail == 1:
            raise InvalidSpec("retail noise needs 0 or >= 2 addresses")
        lo, hi = self.entity_size_range
        if not 2 <= lo <= hi:
            raise InvalidSpec("entity_size_range must satisfy 2 <= min <= max")
        unknown = set(self.patterns) - PATTERN_NAMES
        if unknown:
            raise InvalidSpec(f"unknown patterns: {sorted(unknown)}")
        if self.n_entities > 0 and not set(self.patterns) & set(ENTITY_PATTERNS):
            raise InvalidSpec("entities requested but no entity pattern selected")
        if self.volume_scale <= 0:
            raise InvalidSpec("volume_scale must be positive")
        if self.duration_days < 2:
            raise InvalidSpec("duration_days must be >= 2")
        tlo, thi = self.retail_tx_range
        if not 1 <= tlo <= thi:
            raise InvalidSpec("retail_tx_range must satisfy 1 <= min <= max")


class _Draft:
    __slots__ = ("ts", "frm", "to", "usd", "raw", "gas", "fixed_hash", "cleaned")

    def __init__(self, ts, frm, to, usd, raw, gas, fixed_hash=None, cleaned=False):
        self.ts = ts
        self.frm = frm
        self.to = to
        self.usd = usd
        self.raw = raw
        self.gas = gas
        self.fixed_hash = fixed_hash
        # True when the preprocessing stage is expected to drop this transfer
        self.cleaned = cleaned


def _usd_to_raw(usd: float) -> int:
    return int(round(usd * BASE_UNITS))


class _Generator:
    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.drafts: list[_Draft] = []
        self.labels: list[AddressLabel] = []
        self.groups: list[frozenset[str]] = []
        self._addr_counter = 0
        self._airdrop_counter = 0

    def _addr(self) -> str:
        self._addr_counter += 1
        return f"0x{self._addr_counter:040x}"

    def _ts(self, day: int, hour: int, offset: int) -> int:
        # entity transfers must stay inside their hour bin
        if offset >= 3600:
            raise InvariantViolation("intra-hour offset overflow")
        return EPOCH + day * 86400 + hour * 3600 + offset

    def _gas(self) -> float:
        return self.rng.uniform(0.0005, 0.005)

    def _emit(self, ts, frm, to, usd, raw=None, fixed_hash=None, cleaned=False):
        if raw is None:
            raw = _usd_to_raw(usd)
        self.drafts.append(_Draft(ts, frm, to, usd, raw, self._gas(),
                                  fixed_hash=fixed_hash, cleaned=cleaned))

    # -- entity patterns ----------------------------------------------------

    def _dust_ring(self, members: Sequence[str], day: int, hour: int) -> None:
        # 1 USD hops below every detector floor; they only leave a faint
        # directed ring the flow sub-score can see
        for i, m in enumerate(members):
            nxt = members[(i + 1) % len(members)]
            self._emit(self._ts(day, hour, 17 * i + 7), m, nxt, 1.0)

    def _diffusion(self, members: Sequence[str], day: int, hour: int) -> None:
        hub, recipients = members[0], members[1:]
        for i, r in enumerate(recipients):
            self._emit(self._ts(day, hour, 10 * i), hub, r, 12.0 + 0.05 * i)
        self._dust_ring(members, day + 1, hour)

    def _collector(self, members: Sequence[str], day: int, hour: int) -> None:
        collector, senders = members[0], members[1:]
        for i, s in enumerate(senders):
            self._emit(self._ts(day, hour, 10 * i), s, collector, 12.0 + 0.05 * i)
        self._dust_ring(members, day + 1, hour)

    def _sequential_chain(self, members: Sequence[str], day: int, hour: int) -> None:
        for i in range(len(members) - 1):
            self._emit(self._ts(day, hour, 180 * i), members[i], members[i + 1], 12.0)
        self._dust_ring(members, day + 1, hour)

    def _wash_pair(self, members: Sequence[str], day: int, hour: int) -> None:
        a, b = members
        for j in range(24):
            frm, to = (a, b) if j % 2 == 0 else (b, a)
            self._emit(self._ts(day, hour, 60 * j), frm, to, 8.0)

    def _circular(self, members: Sequence[str], day: int, hour: int) -> None:
        k = len(members)
        for loop in range(3):
            for i in range(k):
                step = loop * k + i
                usd = 8.0 * (0.99 ** step)
                self._emit(self._ts(day, hour, 120 * step),
                           members[i], members[(i + 1) % k], usd)

    def _entity_size(self, pattern: str) -> int:
        drawn = self.rng.randint(*self.spec.entity_size_range)
        if pattern in ("diffusion", "collector"):
            return max(drawn, 6)  # hub + min_fanout recipients
        if pattern == "wash_pair":
            return 2
        return 5  # chain and ring lengths are fixed by detector bounds

    def build_entities(self) -> None:
        spec = self.spec
        active = [p for p in ENTITY_PATTERNS if p in spec.patterns]
        emitters = {
            "diffusion": self._diffusion,
            "sequential_chain": self._sequential_chain,
            "collector": self._collector,
            "wash_pair": self._wash_pair,
            "circular": self._circular,
        }
        for e in range(spec.n_entities):
            pattern = active[e % len(active)]
            size = self._entity_size(pattern)
            members = [self._addr() for _ in range(size)]
            hour = e % 24
            if pattern == "wash_pair":
                day = spec.duration_days - 1  # keep wash volume in the 24h window
            else:
                day = e % (spec.duration_days - 1)
            emitters[pattern](members, day, hour)
            self.groups.append(frozenset(members))

    # -- background and actors ----------------------------------------------

    def build_retail(self) -> None:
        spec = self.spec
        self.retail = [self._addr() for _ in range(spec.n_retail)]
        if not self.retail:
            return
        self.labels.append(AddressLabel(self.retail[0], "other", "synthetic"))
        horizon = spec.duration_days * 86400
        for i, addr in enumerate(self.retail):
            n_tx = self.rng.randint(*spec.retail_tx_range)
            for _ in range(n_tx):
                other = self.rng.randrange(spec.n_retail - 1)
                if other >= i:
                    other += 1
                counterpart = self.retail[other]
                if self.rng.random() < 0.9:
                    usd = self.rng.uniform(0.5, 8.0)
                else:
                    usd = self.rng.uniform(10.0, 25.0)
                usd *= spec.volume_scale
                raw = int(usd * BASE_UNITS * self.rng.uniform(0.5, 2.0))
                ts = EPOCH + self.rng.randrange(horizon)
                if self.rng.random() < 0.5:
                    self._emit(ts, addr, counterpart, usd, raw=raw)
                else:
                    self._emit(ts, counterpart, addr, usd, raw=raw)

    def build_actors(self) -> None:
        spec = self.spec
        if "airdrop" in spec.patterns:
            project = self._addr()
            self.labels.append(AddressLabel(project, "project", "synthetic"))
            self._airdrop_counter += 1
            shared_hash = f"0x{10**18 + self._airdrop_counter:064x}"
            ts = self._ts(0, 12, 0)
            for _ in range(8):
                recipient = self._addr()
                self._emit(ts, project, recipient, 3.0, fixed_hash=shared_hash,
                           cleaned=True)
        if "public_hub" in spec.patterns and self.retail:
            hub = self._addr()
            self.labels.append(AddressLabel(hub, "exchange", "synthetic"))
            horizon = spec.duration_days * 86400
            for i in range(min(50, len(self.retail))):
                ts = EPOCH + self.rng.randrange(horizon)
                usd = self.rng.uniform(5.0, 50.0) * spec.volume_scale
                if i % 2 == 0:
                    self._emit(ts, self.retail[i], hub, usd, cleaned=True)
                else:
                    self._emit(ts, hub, self.retail[i], usd, cleaned=True)

    # -- assembly -------------------------------------------------------------

    def finish(self) -> tuple[DatasetBundle, GroupSet]:
        spec = self.spec
        self.drafts.sort(key=lambda d: (d.ts, d.frm, d.to, d.raw))
        transfers = []
        seq = 0
        for d in self.drafts:
            if d.fixed_hash is None:
                seq += 1
                tx_hash = f"0x{seq:064x}"
            else:
                tx_hash = d.fixed_hash
            transfers.append(Transfer(
                tx_hash=tx_hash,
                block_number=(d.ts - EPOCH) // 3 + 1,
                timestamp=d.ts,
                from_addr=d.frm,
                to_addr=d.to,
                token=TOKEN_ADDRESS,
                raw_amount=d.raw,
                usd_value=d.usd,
                gas_fee=d.gas,
            ))

        surviving = [t for t, d in zip(transfers, self.drafts) if not d.cleaned]
        universe: set[str] = set()
        for t in surviving:
            universe.add(t.from_addr)
            universe.add(t.to_addr)

        end = EPOCH + spec.duration_days * 86400
        window_volume = sum(
            t.usd_value for t in surviving if end - 86400 < t.timestamp <= end)
        volume_24h = window_volume
        market_cap = max(5.0 * volume_24h, 1000.0 * spec.volume_scale)
        liquidity = max(volume_24h, 100.0 * spec.volume_scale)

        balances: dict[str, float] = {}
        entity_members = set().union(*self.groups) if self.groups else set()
        for addr in sorted(universe):
            if addr in entity_members:
                balances[addr] = self.rng.uniform(2e10, 8e10) * spec.volume_scale
            else:
                balances[addr] = self.rng.uniform(1e9, 5e10) * spec.volume_scale

        pool = LiquiditySnapshot(
            q_a=liquidity / 2.0, q_b=liquidity / 2.0, p_a=1.0, p_b=1.0,
            timestamp=end)
        market = MarketSnapshot(
            volume_24h=volume_24h, market_cap=market_cap, balances=balances,
            timestamp=end)
        bundle = DatasetBundle(
            transfers=tuple(transfers),
            labels=tuple(self.labels),
            pool=pool,
            market=market,
        )
        truth = GroupSet(
            groups=tuple(
                EntityGroup(group_id=i, members=members)
                for i, members in enumerate(self.groups)
            ),
            universe=frozenset(universe),
        )
        return bundle, truth


def generate_scenario(spec: ScenarioSpec) -> tuple[DatasetBundle, GroupSet]:
    """Build the full dataset and its ground-truth GroupSet.

    Entity sizes are drawn from entity_size_range for diffusion/collector
    entities (floored at 6 so fanout clears the detector threshold); chains
    and rings are 5 addresses, wash pairs 2. Planted pattern amounts are
    threshold-anchored and not scaled; volume_scale scales retail amounts,
    balances, and market magnitudes.
    """
    gen = _Generator(spec)
    gen.build_entities()
    gen.build_retail()
    gen.build_actors()
    return gen.finish()


def write_scenario(bundle: DatasetBundle, truth: GroupSet, out_dir) -> dict[str, Path]:
    """Write the dataset in the formats the ingest stage consumes, plus
    ground_truth.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "transfers": out / "transfers.csv",
        "labels": out / "labels.json",
        "pool": out / "pool.json",
        "market": out / "market.json",
        "ground_truth": out / "ground_truth.json",
    }
    write_transfers(bundle.transfers, paths["transfers"])
    dump_json(
        [
            {"address": lb.address, "category": lb.category, "source": lb.source}
            for lb in sorted(bundle.labels, key=lambda lb: lb.address)
        ],
        paths["labels"],
    )
    dump_json(
        {
            "q_a": bundle.pool.q_a,
            "q_b": bundle.pool.q_b,
            "p_a": bundle.pool.p_a,
            "p_b": bundle.pool.p_b,
            "timestamp": bundle.pool.timestamp,
        },
        paths["pool"],
    )
    dump_json(
        {
            "volume_24h": bundle.market.volume_24h,
            "market_cap": bundle.market.market_cap,
            "balances": dict(sorted(bundle.market.balances.items())),
            "timestamp": bundle.market.timestamp,
        },
        paths["market"],
    )
    dump_json(group_set_to_json_dict(truth), paths["ground_truth"])
    return paths
