"""Dataset cleaning: drop transfers that would poison entity linking.

Two rules, applied in a fixed order so the report reconciles exactly:

1. public-address filtering — any transfer touching an address labeled
   smart_contract, hot_wallet or exchange is removed (these are shared
   addresses: flows through them say nothing about common ownership);
2. airdrop exclusion — bulk distributions of similar amounts from
   project-labeled senders within one transaction, and everything sent by
   multi-send contracts.

Removal targets transfers, not addresses: an airdrop recipient remains a
potential holder.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Iterable, Sequence

from .model import (
    AddressLabel,
    PUBLIC_CATEGORIES,
    Transfer,
    label_map,
)
from .ingest import DatasetBundle


@dataclass(frozen=True)
class CleanConfig:
    similarity_tolerance: float = 0.05  # relative to the in-tx median amount
    min_recipients: int = 5


@dataclass(frozen=True)
class CleaningReport:
    removed_public_tx: int
    removed_airdrop_tx: int
    airdrop_addresses: frozenset[str]
    surviving_transfers: int
    surviving_addresses: int

    def to_json_dict(self) -> dict:
        return {
            "removed_public_tx": self.removed_public_tx,
            "removed_airdrop_tx": self.removed_airdrop_tx,
            "airdrop_addresses": sorted(self.airdrop_addresses),
            "surviving_transfers": self.surviving_transfers,
            "surviving_addresses": self.surviving_addresses,
        }


def filter_public_addresses(
    transfers: Sequence[Transfer], labels: Iterable[AddressLabel]
) -> tuple[list[Transfer], int]:
    """Drop transfers whose from or to carries a public category. Order is
    preserved; an empty label list removes nothing."""
    categories = label_map(labels)
    public = {
        addr for addr, cat in categories.items() if cat in PUBLIC_CATEGORIES
    }
    if not public:
        return list(transfers), 0
    kept = [
        t for t in transfers
        if t.from_addr not in public and t.to_addr not in public
    ]
    return kept, len(transfers) - len(kept)


def detect_airdrops(
    transfers: Sequence[Transfer],
    labels: Iterable[AddressLabel],
    similarity_tolerance: float = 0.05,
    min_recipients: int = 5,
) -> tuple[set[int], set[str]]:
    """Return (indices of airdrop transfers in ``transfers``, their distinct
    recipients).

    Rule 1: a project-labeled sender whose single transaction carries >=
    min_recipients outgoing transfers with raw_amounts within
    similarity_tolerance of their median marks ALL its transfers in that
    transaction. Rule 2: anything sent by a multi_send_contract.
    """
    categories = label_map(labels)
    project = {a for a, c in categories.items() if c == "project"}
    multi_send = {a for a, c in categories.items() if c == "multi_send_contract"}

    flagged: set[int] = set()
    recipients: set[str] = set()

    by_tx_sender: dict[tuple[str, str], list[int]] = {}
    for i, t in enumerate(transfers):
        if t.from_addr in multi_send:
            flagged.add(i)
            recipients.add(t.to_addr)
        elif t.from_addr in project:
            by_tx_sender.setdefault((t.tx_hash, t.from_addr), []).append(i)

    for (_tx, _sender), indices in sorted(by_tx_sender.items()):
        amounts = [transfers[i].raw_amount for i in indices]
        med = statistics.median(amounts)
        if med == 0:
            similar = sum(1 for a in amounts if a == 0)
        else:
            similar = sum(
                1 for a in amounts if abs(a - med) <= similarity_tolerance * med
            )
        if similar >= min_recipients:
            for i in indices:
                flagged.add(i)
                recipients.add(transfers[i].to_addr)

    return flagged, recipients


def clean_dataset(
    bundle: DatasetBundle, config: CleanConfig = CleanConfig()
) -> tuple[DatasetBundle, CleaningReport]:
    """Apply public-address filtering, then airdrop removal. Each removed
    transfer is attributed to exactly one rule; counts reconcile exactly."""
    total = len(bundle.transfers)
    kept_public, removed_public = filter_public_addresses(bundle.transfers, bundle.labels)
    airdrop_idx, airdrop_addrs = detect_airdrops(
        kept_public, bundle.labels,
        similarity_tolerance=config.similarity_tolerance,
        min_recipients=config.min_recipients,
    )
    kept = [t for i, t in enumerate(kept_public) if i not in airdrop_idx]
    addresses = set()
    for t in kept:
        addresses.add(t.from_addr)
        addresses.add(t.to_addr)
    report = CleaningReport(
        removed_public_tx=removed_public,
        removed_airdrop_tx=len(airdrop_idx),
        airdrop_addresses=frozenset(airdrop_addrs),
        surviving_transfers=len(kept),
        surviving_addresses=len(addresses),
    )
    assert report.surviving_transfers == total - removed_public - len(airdrop_idx)
    return bundle.with_transfers(kept), report
