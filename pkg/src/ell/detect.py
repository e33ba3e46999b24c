"""Entity-linkage detectors over the cleaned transfer graph.

Four complementary detectors, each emitting candidate EntityGroups with
evidence:

- source of funds: one-to-many diffusion funding plus chain-like sequential
  diffusion;
- destination of funds: many-to-one collection;
- behavioral similarity: a weighted similarity graph partitioned by Louvain;
- anomalous behavior: near-identical amounts, high-frequency pairs, and
  circular trading.

Institutionally labeled addresses (anything except category "other") never
appear as group members or similarity nodes: flows through shared
infrastructure say nothing about common key ownership. "Qualifying" below
always means usd_value at or above the relevant configured floor.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .model import (
    AddressLabel,
    EmptyGraph,
    EntityGroup,
    Evidence,
    INSTITUTIONAL_CATEGORIES,
    InvariantViolation,
    TransactionGraph,
    Transfer,
    label_map,
)

log = logging.getLogger(__name__)

# A cycle qualifies when the amount arriving back at the origin is at least
# this fraction of the amount that left it.
CYCLE_RETURN_FRACTION = 0.95

# Safety bound for sequential-diffusion path enumeration.
MAX_CHAIN_HOPS = 64


@dataclass(frozen=True)
class DetectorConfig:
    min_fanout: int = 5
    min_amount_usd: float = 10.0
    anomaly_min_tx: int = 5
    anomaly_min_amount_usd: float = 5.0
    amount_identity_tolerance: float = 0.001
    chain_forward_fraction: float = 0.7
    chain_window_seconds: int = 86400
    max_cycle_length: int = 5
    similarity_edge_threshold: float = 0.5
    # co-interaction candidate pairs are not expanded at counterparties with
    # more than this many qualifying-graph neighbors (guards O(fan^2) blowup)
    similarity_max_cofan: int = 200

    def __post_init__(self):
        if self.min_fanout < 1 or self.anomaly_min_tx < 1:
            raise InvariantViolation("fanout/tx thresholds must be >= 1")
        if self.min_amount_usd <= 0 or self.anomaly_min_amount_usd <= 0:
            raise InvariantViolation("USD floors must be positive")
        if self.chain_window_seconds <= 0:
            raise InvariantViolation("chain_window_seconds must be positive")
        if self.max_cycle_length < 2:
            raise InvariantViolation("max_cycle_length must be >= 2")
        for name in ("amount_identity_tolerance", "chain_forward_fraction",
                     "similarity_edge_threshold"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise InvariantViolation(f"{name} must be in (0, 1]")


def institutional_addresses(labels: Iterable[AddressLabel]) -> frozenset[str]:
    return frozenset(
        addr for addr, cat in label_map(labels).items()
        if cat in INSTITUTIONAL_CATEGORIES
    )


# --------------------------------------------------------------------------
# source of funds

def _first_inbound_key(t: Transfer) -> tuple:
    # permutation-invariant ordering of inbound transfers
    return (t.timestamp, t.block_number, t.tx_hash, t.from_addr, t.raw_amount)


def detect_source_of_funds(
    graph: TransactionGraph,
    labels: Iterable[AddressLabel],
    config: DetectorConfig = DetectorConfig(),
) -> list[EntityGroup]:
    """Diffusion and sequential-diffusion funding patterns.

    Diffusion: an unlabeled funder whose qualifying transfers are the
    recipients' first inbound transfers, with fanout >= min_fanout, forms a
    group with those recipients. Sequential diffusion: chains where every hop
    forwards at least chain_forward_fraction of the received USD within
    chain_window_seconds.
    """
    excluded = institutional_addresses(labels)
    transfers = graph.transfers

    first_in: dict[str, tuple] = {}
    for t in transfers:
        if t.from_addr == t.to_addr:
            continue
        key = _first_inbound_key(t)
        if t.to_addr not in first_in or key < first_in[t.to_addr]:
            first_in[t.to_addr] = key

    groups: list[EntityGroup] = []
    gid = 0

    # -- diffusion
    funded: dict[str, set[str]] = {}
    for t in transfers:
        if t.usd_value < config.min_amount_usd or t.from_addr == t.to_addr:
            continue
        if t.from_addr in excluded or t.to_addr in excluded:
            continue
        if first_in.get(t.to_addr) == _first_inbound_key(t):
            funded.setdefault(t.from_addr, set()).add(t.to_addr)
    for funder in sorted(funded):
        recipients = funded[funder]
        if len(recipients) >= config.min_fanout:
            groups.append(EntityGroup(
                group_id=gid,
                members=frozenset(recipients) | {funder},
                evidence=(Evidence("source_of_funds", f"diffusion funder {funder}", 1.0),),
            ))
            gid += 1

    # -- sequential diffusion
    qual_edges: dict[tuple[str, str], list[Transfer]] = {}
    for t in transfers:
        if t.usd_value < config.min_amount_usd or t.from_addr == t.to_addr:
            continue
        if t.from_addr in excluded or t.to_addr in excluded:
            continue
        qual_edges.setdefault((t.from_addr, t.to_addr), []).append(t)

    out_by_node: dict[str, list[str]] = {}
    for (u, v) in qual_edges:
        out_by_node.setdefault(u, []).append(v)
    for u in out_by_node:
        out_by_node[u].sort()

    def forward_targets(u: str, v: str) -> list[str]:
        """Nodes w such that v forwarded >= fraction of what u sent it,
        within the window after the first receipt."""
        received = sum(t.usd_value for t in qual_edges[(u, v)])
        t0 = min(t.timestamp for t in qual_edges[(u, v)])
        targets = []
        for w in out_by_node.get(v, ()):
            if w == u or w == v:
                continue
            fwd = sum(
                t.usd_value for t in qual_edges[(v, w)]
                if t0 <= t.timestamp <= t0 + config.chain_window_seconds
            )
            if fwd >= config.chain_forward_fraction * received:
                targets.append(w)
        return targets

    hop_cache: dict[tuple[str, str], list[str]] = {}

    def targets_of(u: str, v: str) -> list[str]:
        if (u, v) not in hop_cache:
            hop_cache[(u, v)] = forward_targets(u, v)
        return hop_cache[(u, v)]

    # start edges: not themselves the continuation of a qualifying hop
    starts = []
    for (u, v) in sorted(qual_edges):
        continued = any(
            v in targets_of(x, u) for x in sorted(graph.predecessors(u))
            if (x, u) in qual_edges
        )
        if not continued:
            starts.append((u, v))

    chains: list[list[str]] = []

    def extend(path: list[str]) -> None:
        if len(path) > MAX_CHAIN_HOPS:
            return
        prev, cur = path[-2], path[-1]
        nexts = [w for w in targets_of(prev, cur) if w not in path]
        if not nexts:
            if len(path) >= 3:  # at least 2 hops
                chains.append(list(path))
            return
        for w in nexts:
            path.append(w)
            extend(path)
            path.pop()

    for (u, v) in starts:
        extend([u, v])

    seen_members: set[frozenset[str]] = {g.members for g in groups}
    for chain in chains:
        members = frozenset(chain)
        if members in seen_members:
            continue
        seen_members.add(members)
        groups.append(EntityGroup(
            group_id=gid,
            members=members,
            evidence=(Evidence(
                "source_of_funds",
                f"chain origin {chain[0]} hops {len(chain) - 1}", 1.0),),
        ))
        gid += 1

    return groups


# --------------------------------------------------------------------------
# destination of funds

def detect_destination_of_funds(
    graph: TransactionGraph,
    labels: Iterable[AddressLabel],
    config: DetectorConfig = DetectorConfig(),
) -> list[EntityGroup]:
    """Many-to-one collection: an unlabeled collector receiving qualifying
    transfers from >= min_fanout senders, each of which routed at least
    chain_forward_fraction of its total outbound USD to the collector.

    The share denominator is the sender's total outbound over all cleaned
    transfers (not just qualifying ones), so raising the USD floor can only
    shrink the share.
    """
    excluded = institutional_addresses(labels)

    total_out: dict[str, float] = {}
    qual_in: dict[str, dict[str, float]] = {}
    for t in graph.transfers:
        if t.from_addr == t.to_addr:
            continue
        total_out[t.from_addr] = total_out.get(t.from_addr, 0.0) + t.usd_value
        if t.usd_value < config.min_amount_usd:
            continue
        if t.from_addr in excluded or t.to_addr in excluded:
            continue
        senders = qual_in.setdefault(t.to_addr, {})
        senders[t.from_addr] = senders.get(t.from_addr, 0.0) + t.usd_value

    groups = []
    gid = 0
    for collector in sorted(qual_in):
        qualifying = [
            s for s, usd in sorted(qual_in[collector].items())
            if usd >= config.chain_forward_fraction * total_out[s]
        ]
        if len(qualifying) >= config.min_fanout:
            groups.append(EntityGroup(
                group_id=gid,
                members=frozenset(qualifying) | {collector},
                evidence=(Evidence(
                    "destination_of_funds", f"collector {collector}", 1.0),),
            ))
            gid += 1
    return groups


# --------------------------------------------------------------------------
# behavioral similarity

@dataclass(frozen=True)
class WeightedGraph:
    """Undirected weighted graph (symmetric adjacency)."""

    nodes: tuple[str, ...]
    adj: dict[str, dict[str, float]]

    def edge_count(self) -> int:
        return sum(len(vs) for vs in self.adj.values()) // 2

    def total_weight(self) -> float:
        return sum(sum(vs.values()) for vs in self.adj.values()) / 2.0


def _cosine(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def build_similarity_graph(
    graph: TransactionGraph,
    transfers: Sequence[Transfer],
    config: DetectorConfig = DetectorConfig(),
    labels: Iterable[AddressLabel] = (),
) -> WeightedGraph:
    """Weighted similarity over addresses active at or above the USD floor.

    w(u, v) = 0.5 * direct + 0.25 * temporal + 0.25 * contract, with
    direct = min(1, qualifying transfer count / 3), temporal = cosine of the
    24-bin hour-of-day histograms, contract = Jaccard of counterparty sets.
    An edge is kept when w >= similarity_edge_threshold or there is any
    direct transfer. Candidate pairs are direct pairs plus pairs sharing a
    counterparty; a pair with no shared counterparty cannot reach the 0.5
    threshold without a direct transfer (0.25 + 0.25 is the ceiling).
    """
    excluded = institutional_addresses(labels)

    hist: dict[str, list[float]] = {}
    counterparties: dict[str, set[str]] = {}
    pair_count: dict[tuple[str, str], int] = {}

    for t in transfers:
        if t.usd_value < config.min_amount_usd:
            continue
        u, v = t.from_addr, t.to_addr
        hour = t.hour_of_day
        for node, other in ((u, v), (v, u)):
            if node in excluded:
                continue
            if node not in hist:
                hist[node] = [0.0] * 24
                counterparties[node] = set()
            hist[node][hour] += 1.0
            if other != node:
                counterparties[node].add(other)
        if u != v and u not in excluded and v not in excluded:
            key = (u, v) if u < v else (v, u)
            pair_count[key] = pair_count.get(key, 0) + 1

    nodes = tuple(sorted(hist))
    candidates: set[tuple[str, str]] = set(pair_count)
    co_fans: dict[str, list[str]] = {}
    for node in nodes:
        for cp in counterparties[node]:
            co_fans.setdefault(cp, []).append(node)
    for cp in sorted(co_fans):
        fans = sorted(set(co_fans[cp]))
        if len(fans) > config.similarity_max_cofan:
            continue
        for i in range(len(fans)):
            for j in range(i + 1, len(fans)):
                candidates.add((fans[i], fans[j]))

    adj: dict[str, dict[str, float]] = {node: {} for node in nodes}
    for (u, v) in sorted(candidates):
        direct = min(1.0, pair_count.get((u, v), 0) / 3.0)
        temporal = _cosine(hist[u], hist[v])
        contract = _jaccard(counterparties[u], counterparties[v])
        w = 0.5 * direct + 0.25 * temporal + 0.25 * contract
        if w >= config.similarity_edge_threshold or direct > 0.0:
            adj[u][v] = w
            adj[v][u] = w
    return WeightedGraph(nodes=nodes, adj=adj)


# --------------------------------------------------------------------------
# Louvain

def modularity(
    graph: WeightedGraph, communities: Sequence[Sequence[str]], resolution: float = 1.0
) -> float:
    """Newman modularity of a partition (undirected, weighted)."""
    m2 = 2.0 * graph.total_weight()
    if m2 == 0.0:
        return 0.0
    comm_of: dict[str, int] = {}
    for ci, comm in enumerate(communities):
        for node in comm:
            comm_of[node] = ci
    degree = {u: sum(graph.adj[u].values()) for u in graph.nodes}
    q = 0.0
    for ci, comm in enumerate(communities):
        internal = 0.0
        total = 0.0
        for u in comm:
            total += degree[u]
            for v, w in graph.adj[u].items():
                if comm_of.get(v) == ci:
                    internal += w
        q += internal / m2 - resolution * (total / m2) ** 2
    return q


def _one_level(
    adj: list[dict[int, float]],
    loops: list[float],
    resolution: float,
    rng: random.Random,
) -> tuple[list[int], bool]:
    n = len(adj)
    k = [sum(adj[u].values()) + 2.0 * loops[u] for u in range(n)]
    m2 = sum(k)
    if m2 == 0.0:
        return list(range(n)), False
    node_comm = list(range(n))
    comm_tot = k[:]
    order = list(range(n))
    rng.shuffle(order)
    improved = False
    while True:
        moved = 0
        for u in order:
            cu = node_comm[u]
            nbr_w: dict[int, float] = {}
            for v, w in adj[u].items():
                if v != u:
                    c = node_comm[v]
                    nbr_w[c] = nbr_w.get(c, 0.0) + w
            comm_tot[cu] -= k[u]
            best_c = cu
            best_gain = nbr_w.get(cu, 0.0) - resolution * comm_tot[cu] * k[u] / m2
            for c in sorted(nbr_w):
                if c == cu:
                    continue
                gain = nbr_w[c] - resolution * comm_tot[c] * k[u] / m2
                if gain > best_gain + 1e-12 or (
                    abs(gain - best_gain) <= 1e-12 and c < best_c
                ):
                    best_c = c
                    best_gain = gain
            node_comm[u] = best_c
            comm_tot[best_c] += k[u]
            if best_c != cu:
                moved += 1
                improved = True
        if moved == 0:
            break
    # renumber by first appearance in index order
    remap: dict[int, int] = {}
    for u in range(n):
        c = node_comm[u]
        if c not in remap:
            remap[c] = len(remap)
    return [remap[c] for c in node_comm], improved


def louvain_communities(
    graph: WeightedGraph, resolution: float = 1.0, seed: int = 0
) -> list[list[str]]:
    """Louvain partition with seeded node visitation order.

    Deterministic for a fixed seed; the returned partition's modularity is
    never below the singleton partition's. Raises EmptyGraph on a graph with
    no nodes. A graph with no edges comes back as all singletons.
    """
    if not graph.nodes:
        raise EmptyGraph("no nodes")
    rng = random.Random(seed)
    names = list(graph.nodes)
    index = {u: i for i, u in enumerate(names)}
    adj: list[dict[int, float]] = [{} for _ in names]
    for u, nbrs in graph.adj.items():
        for v, w in nbrs.items():
            if w < 0:
                raise InvariantViolation("negative edge weight")
            adj[index[u]][index[v]] = w
    loops = [0.0] * len(names)
    members: list[list[int]] = [[i] for i in range(len(names))]

    while True:
        node_comm, improved = _one_level(adj, loops, resolution, rng)
        n_comm = max(node_comm) + 1
        if not improved or n_comm == len(adj):
            # no move, or no aggregation: a further level changes nothing
            break
        new_members: list[list[int]] = [[] for _ in range(n_comm)]
        for u, c in enumerate(node_comm):
            new_members[c].extend(members[u])
        new_loops = [0.0] * n_comm
        new_adj: list[dict[int, float]] = [{} for _ in range(n_comm)]
        for u in range(len(adj)):
            cu = node_comm[u]
            new_loops[cu] += loops[u]
            for v, w in adj[u].items():
                if v < u:
                    continue
                cv = node_comm[v]
                if cu == cv:
                    new_loops[cu] += w
                else:
                    new_adj[cu][cv] = new_adj[cu].get(cv, 0.0) + w
                    new_adj[cv][cu] = new_adj[cv].get(cu, 0.0) + w
        adj = new_adj
        loops = new_loops
        members = new_members

    communities = [sorted(names[i] for i in group) for group in members]
    communities.sort(key=lambda c: c[0])
    return communities


def detect_behavioral_similarity(
    graph: TransactionGraph,
    transfers: Sequence[Transfer],
    config: DetectorConfig = DetectorConfig(),
    seed: int = 0,
    labels: Iterable[AddressLabel] = (),
) -> list[EntityGroup]:
    """Louvain communities of the similarity graph, emitted as groups when
    they have at least two members."""
    sim = build_similarity_graph(graph, transfers, config, labels=labels)
    if not sim.nodes:
        return []
    communities = louvain_communities(sim, resolution=1.0, seed=seed)
    m2 = 2.0 * sim.total_weight()
    groups = []
    gid = 0
    for comm in communities:
        if len(comm) < 2:
            continue
        comm_set = set(comm)
        internal = 0.0
        total = 0.0
        for u in comm:
            total += sum(sim.adj[u].values())
            internal += sum(w for v, w in sim.adj[u].items() if v in comm_set)
        if m2 > 0:
            contrib = internal / m2 - (total / m2) ** 2
            norm_weight = min(1.0, max(0.0, internal / m2))
        else:
            contrib = 0.0
            norm_weight = 0.0
        groups.append(EntityGroup(
            group_id=gid,
            members=frozenset(comm),
            evidence=(Evidence(
                "behavioral", f"modularity contribution {contrib:.6f}", norm_weight),),
        ))
        gid += 1
    return groups


# --------------------------------------------------------------------------
# anomalous behavior

def detect_anomalous_behavior(
    graph: TransactionGraph,
    transfers: Sequence[Transfer],
    config: DetectorConfig = DetectorConfig(),
    labels: Iterable[AddressLabel] = (),
) -> list[EntityGroup]:
    """Three sub-rules over qualifying transfers (usd >= anomaly floor):

    identical-amounts: raw_amounts bucketed within the relative tolerance;
    within a bucket, connected components carrying >= anomaly_min_tx
    transfers form one group. high-frequency: pairs with >= anomaly_min_tx
    transfers inside any chain_window_seconds window. circular: simple cycles
    of length 2..max_cycle_length whose returning edge carries at least
    CYCLE_RETURN_FRACTION of the leaving edge's amount.
    """
    excluded = institutional_addresses(labels)
    qual = [
        t for t in transfers
        if t.usd_value >= config.anomaly_min_amount_usd
        and t.from_addr != t.to_addr
        and t.from_addr not in excluded
        and t.to_addr not in excluded
    ]

    groups: list[EntityGroup] = []
    seen: set[frozenset[str]] = set()
    gid = 0

    def emit(members: frozenset[str], detail: str) -> None:
        nonlocal gid
        if len(members) < 2 or members in seen:
            return
        seen.add(members)
        groups.append(EntityGroup(
            group_id=gid,
            members=members,
            evidence=(Evidence("anomalous", detail, 1.0),),
        ))
        gid += 1

    # -- identical amounts
    by_amount = sorted(qual, key=lambda t: t.raw_amount)
    buckets: list[list[Transfer]] = []
    for t in by_amount:
        if buckets and t.raw_amount <= buckets[-1][0].raw_amount * (
            1.0 + config.amount_identity_tolerance
        ):
            buckets[-1].append(t)
        else:
            buckets.append([t])
    for bucket in buckets:
        if len(bucket) < config.anomaly_min_tx:
            continue
        parent: dict[str, str] = {}

        def find(x: str) -> str:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for t in bucket:
            parent.setdefault(t.from_addr, t.from_addr)
            parent.setdefault(t.to_addr, t.to_addr)
            ru, rv = find(t.from_addr), find(t.to_addr)
            if ru != rv:
                parent[max(ru, rv)] = min(ru, rv)
        comp_tx: dict[str, int] = {}
        comp_members: dict[str, set[str]] = {}
        for t in bucket:
            root = find(t.from_addr)
            comp_tx[root] = comp_tx.get(root, 0) + 1
            comp_members.setdefault(root, set()).update((t.from_addr, t.to_addr))
        for root in sorted(comp_members):
            if comp_tx[root] >= config.anomaly_min_tx:
                emit(
                    frozenset(comp_members[root]),
                    f"identical_amounts ~{bucket[0].raw_amount}",
                )

    # -- high frequency pairs
    pair_ts: dict[tuple[str, str], list[int]] = {}
    for t in qual:
        key = (t.from_addr, t.to_addr) if t.from_addr < t.to_addr else (t.to_addr, t.from_addr)
        pair_ts.setdefault(key, []).append(t.timestamp)
    for key in sorted(pair_ts):
        ts = sorted(pair_ts[key])
        n = config.anomaly_min_tx
        if len(ts) < n:
            continue
        if any(ts[i + n - 1] - ts[i] <= config.chain_window_seconds
               for i in range(len(ts) - n + 1)):
            emit(frozenset(key), f"high_frequency pair {key[0]}|{key[1]}")

    # -- circular trading
    edge_amount: dict[tuple[str, str], int] = {}
    for t in qual:
        key = (t.from_addr, t.to_addr)
        edge_amount[key] = edge_amount.get(key, 0) + t.raw_amount
    succ: dict[str, list[str]] = {}
    for (u, v) in sorted(edge_amount):
        succ.setdefault(u, []).append(v)

    cycle_sets: list[tuple[list[str], int]] = []

    def dfs(start: str, path: list[str], on_path: set[str]) -> None:
        cur = path[-1]
        for nxt in succ.get(cur, ()):
            if nxt == start and len(path) >= 2:
                leaving = edge_amount[(start, path[1])]
                returning = edge_amount[(cur, start)]
                if returning >= CYCLE_RETURN_FRACTION * leaving:
                    cycle_sets.append((list(path), len(path)))
            elif (
                nxt > start
                and nxt not in on_path
                and len(path) < config.max_cycle_length
            ):
                path.append(nxt)
                on_path.add(nxt)
                dfs(start, path, on_path)
                on_path.discard(nxt)
                path.pop()

    for start in sorted(succ):
        dfs(start, [start], {start})

    for path, length in cycle_sets:
        emit(frozenset(path), f"circular length={length} origin {path[0]}")

    return groups


# --------------------------------------------------------------------------
# orchestration helpers

DETECTOR_ORDER = ("source_of_funds", "destination_of_funds", "behavioral", "anomalous")


def run_all_detectors(
    graph: TransactionGraph,
    transfers: Sequence[Transfer],
    labels: Iterable[AddressLabel],
    config: DetectorConfig = DetectorConfig(),
    seed: int = 0,
    jobs: int = 1,
) -> list[EntityGroup]:
    """Run the four detectors (optionally on a thread pool) and renumber the
    concatenated groups in a fixed detector order."""
    labels = tuple(labels)
    tasks = {
        "source_of_funds": lambda: detect_source_of_funds(graph, labels, config),
        "destination_of_funds": lambda: detect_destination_of_funds(graph, labels, config),
        "behavioral": lambda: detect_behavioral_similarity(
            graph, transfers, config, seed=seed, labels=labels),
        "anomalous": lambda: detect_anomalous_behavior(
            graph, transfers, config, labels=labels),
    }
    results: dict[str, list[EntityGroup]] = {}
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            futures = {name: pool.submit(fn) for name, fn in tasks.items()}
            results = {name: futures[name].result() for name in DETECTOR_ORDER}
    else:
        results = {name: tasks[name]() for name in DETECTOR_ORDER}
    merged: list[EntityGroup] = []
    gid = 0
    for name in DETECTOR_ORDER:
        for g in results[name]:
            merged.append(EntityGroup(
                group_id=gid, members=g.members, evidence=g.evidence,
                linkage_probability=g.linkage_probability, flags=g.flags,
            ))
            gid += 1
        log.info("detector %s: %d groups", name, len(results[name]))
    return merged


def groups_to_json_list(groups: Sequence[EntityGroup]) -> list[dict]:
    return [
        {
            "group_id": g.group_id,
            "members": g.sorted_members(),
            "evidence": [
                {"detector": e.detector, "detail": e.detail, "weight": e.weight}
                for e in g.evidence
            ],
        }
        for g in groups
    ]


def groups_from_json_list(data: Sequence[dict]) -> list[EntityGroup]:
    return [
        EntityGroup(
            group_id=int(entry["group_id"]),
            members=frozenset(entry["members"]),
            evidence=tuple(
                Evidence(e["detector"], e["detail"], float(e["weight"]))
                for e in entry.get("evidence", ())
            ),
        )
        for entry in data
    ]
