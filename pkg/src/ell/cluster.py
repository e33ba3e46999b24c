"""Refinement of detector output into a final disjoint GroupSet.

Pipeline: per-address feature extraction and standardization, union-find
merging of overlapping detector groups, in-group DBSCAN noise removal,
isolation-forest outlier removal, and a probabilistic linkage gate.
"""

from __future__ import annotations

import bisect
import logging
import math
import random
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import networkx as nx
import numpy as np

from .model import (
    AddressLabel,
    EmptyInput,
    EntityGroup,
    Evidence,
    GroupSet,
    InvariantViolation,
    LABEL_CATEGORIES,
    SingletonGroup,
    TransactionGraph,
    Transfer,
    label_map,
)

log = logging.getLogger(__name__)

MARKET_MAKER_FLAG = "suspected_market_maker"


@dataclass(frozen=True)
class ClusterConfig:
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 5
    contamination: float = 0.1
    iforest_trees: int = 100
    iforest_subsample: int = 256
    # pooled refinement only removes members whose anomaly score clears this;
    # 0.5 is the score of an average point, 0.6 marks a distinct outlier
    iforest_score_threshold: float = 0.6
    probability_threshold: float = 0.7
    weight_pattern: float = 0.25
    weight_similarity: float = 0.25
    weight_flow: float = 0.25
    weight_temporal: float = 0.25
    betweenness_sample: int = 64
    top_counterparty_set_size: int = 20
    market_maker_min_tx: int = 10000
    market_maker_span_fraction: float = 0.9

    def __post_init__(self):
        if self.dbscan_eps <= 0 or self.dbscan_min_pts < 1:
            raise InvariantViolation("bad DBSCAN parameters")
        if not 0.0 < self.contamination <= 1.0:
            raise InvariantViolation("contamination must be in (0, 1]")
        if self.iforest_trees < 1 or self.iforest_subsample < 2:
            raise InvariantViolation("bad isolation forest parameters")
        if not 0.0 <= self.probability_threshold <= 1.0:
            raise InvariantViolation("probability_threshold must be in [0, 1]")
        weights = (self.weight_pattern, self.weight_similarity,
                   self.weight_flow, self.weight_temporal)
        if any(w < 0 for w in weights) or sum(weights) > 1.0 + 1e-9:
            raise InvariantViolation("linkage weights must be >= 0 and sum <= 1")


# --------------------------------------------------------------------------
# feature extraction

_BASIC = ("tx_per_day", "usd_mean", "usd_std", "tx_count", "gas_mean")
_TOPOLOGY = ("in_degree", "out_degree", "betweenness_rank", "pagerank")
_TEMPORAL = tuple(f"hour_{h:02d}" for h in range(24)) + ("inter_transfer_median",)
_HOLDING = ("balance", "holding_days", "distinct_tokens")
_SOCIAL = ("counterparty_count", "top_counterparty_jaccard")
_LABEL = tuple(f"label_{cat}" for cat in LABEL_CATEGORIES)

FEATURE_NAMES: tuple[str, ...] = _BASIC + _TOPOLOGY + _TEMPORAL + _HOLDING + _SOCIAL + _LABEL

_HOUR_OFFSET = len(_BASIC) + len(_TOPOLOGY)


@dataclass(frozen=True)
class AddressFeatures:
    """Raw and standardized feature vectors for one address.

    `raw` and `z` are parallel to FEATURE_NAMES. `hour_hist` repeats the raw
    24-bin hour histogram for temporal scoring without un-standardizing.
    """

    address: str
    raw: tuple[float, ...]
    z: tuple[float, ...]
    hour_hist: tuple[float, ...]

    def __post_init__(self):
        if len(self.raw) != len(FEATURE_NAMES) or len(self.z) != len(FEATURE_NAMES):
            raise InvariantViolation("feature vector has wrong dimensionality")
        if len(self.hour_hist) != 24:
            raise InvariantViolation("hour histogram must have 24 bins")


def replay_balances(
    transfers: Sequence[Transfer], token: Optional[str] = None
) -> dict[str, float]:
    """Net received minus sent raw amount per address for one token.

    Defaults to the most frequent token in the data. Negative replays clamp
    to zero: the replay starts from an unknown prior balance.
    """
    if token is None:
        counts: dict[str, int] = {}
        for t in transfers:
            counts[t.token] = counts.get(t.token, 0) + 1
        if not counts:
            return {}
        token = min(counts, key=lambda k: (-counts[k], k))
    net: dict[str, float] = {}
    for t in transfers:
        if t.token != token:
            continue
        net[t.to_addr] = net.get(t.to_addr, 0.0) + t.raw_amount
        net[t.from_addr] = net.get(t.from_addr, 0.0) - t.raw_amount
    return {addr: max(0.0, value) for addr, value in net.items()}


def _median(values: list[float]) -> float:
    if not values:
        return 0.0
    values = sorted(values)
    mid = len(values) // 2
    if len(values) % 2:
        return values[mid]
    return (values[mid - 1] + values[mid]) / 2.0


def extract_features(
    graph: TransactionGraph,
    transfers: Sequence[Transfer],
    balances: Mapping[str, float],
    labels: Iterable[AddressLabel],
    seed: int = 0,
    betweenness_sample: int = 64,
    top_counterparties: int = 20,
) -> dict[str, AddressFeatures]:
    """One standardized vector per address appearing in the transfers.

    Standardization is a per-slot z-score over the whole universe; constant
    slots standardize to 0 so they cannot dominate distances.
    """
    categories = label_map(labels)

    participating: dict[str, list[Transfer]] = {}
    sent: dict[str, list[Transfer]] = {}
    counterparties: dict[str, set[str]] = {}
    for t in transfers:
        for addr, other in ((t.from_addr, t.to_addr), (t.to_addr, t.from_addr)):
            participating.setdefault(addr, []).append(t)
            if other != addr:
                counterparties.setdefault(addr, set()).add(other)
        sent.setdefault(t.from_addr, []).append(t)
    addresses = sorted(participating)
    n = len(addresses)
    if n == 0:
        return {}

    digraph = nx.DiGraph()
    digraph.add_nodes_from(addresses)
    for (u, v), stats in graph.edges.items():
        if u != v:
            digraph.add_edge(u, v, transfer_count=float(stats.transfer_count))
    k = min(n, max(1, betweenness_sample))
    betweenness = nx.betweenness_centrality(digraph, k=k, seed=random.Random(seed))
    pagerank = nx.pagerank(digraph, weight="transfer_count")
    bc_values = sorted(betweenness.values())

    def rank_fraction(value: float) -> float:
        smaller = bisect.bisect_left(bc_values, value)
        return smaller / max(1, n - 1)

    freq: dict[str, int] = {}
    for addr, cps in counterparties.items():
        for cp in cps:
            freq[cp] = freq.get(cp, 0) + 1
    top_set = set(sorted(freq, key=lambda a: (-freq[a], a))[:top_counterparties])

    raw_vectors: dict[str, list[float]] = {}
    hour_hists: dict[str, tuple[float, ...]] = {}
    for addr in addresses:
        mine = participating[addr]
        # a self-transfer appears twice in `mine`; count it once
        seen_ids: set[int] = set()
        uniq: list[Transfer] = []
        for t in mine:
            if id(t) not in seen_ids:
                seen_ids.add(id(t))
                uniq.append(t)
        tx_count = float(len(uniq))
        ts = sorted(t.timestamp for t in uniq)
        span_days = (ts[-1] - ts[0]) / 86400.0 if len(ts) > 1 else 0.0
        usd = [t.usd_value for t in uniq]
        usd_mean = sum(usd) / len(usd)
        usd_std = math.sqrt(sum((x - usd_mean) ** 2 for x in usd) / len(usd))
        gas = [t.gas_fee for t in sent.get(addr, [])]
        gas_mean = sum(gas) / len(gas) if gas else 0.0

        hist = [0.0] * 24
        for t in uniq:
            hist[t.hour_of_day] += 1.0
        gaps = [float(b - a) for a, b in zip(ts, ts[1:])]

        cps = counterparties.get(addr, set())
        union = cps | top_set
        jaccard = len(cps & top_set) / len(union) if union else 0.0

        one_hot = [0.0] * len(LABEL_CATEGORIES)
        if addr in categories:
            one_hot[LABEL_CATEGORIES.index(categories[addr])] = 1.0

        vector = [
            tx_count / max(1.0, span_days),
            usd_mean,
            usd_std,
            tx_count,
            gas_mean,
            float(len(graph.predecessors(addr))),
            float(len(graph.successors(addr))),
            rank_fraction(betweenness.get(addr, 0.0)),
            float(pagerank.get(addr, 0.0)),
            *hist,
            _median(gaps),
            float(balances.get(addr, 0.0)),
            span_days,
            float(len({t.token for t in uniq})),
            float(len(cps)),
            jaccard,
            *one_hot,
        ]
        raw_vectors[addr] = vector
        hour_hists[addr] = tuple(hist)

    dim = len(FEATURE_NAMES)
    means = [0.0] * dim
    for vector in raw_vectors.values():
        for i in range(dim):
            means[i] += vector[i]
    means = [m / n for m in means]
    variances = [0.0] * dim
    for vector in raw_vectors.values():
        for i in range(dim):
            variances[i] += (vector[i] - means[i]) ** 2
    stds = [math.sqrt(v / n) for v in variances]

    out: dict[str, AddressFeatures] = {}
    for addr in addresses:
        vector = raw_vectors[addr]
        z = tuple(
            (vector[i] - means[i]) / stds[i] if stds[i] > 0 else 0.0
            for i in range(dim)
        )
        out[addr] = AddressFeatures(
            address=addr, raw=tuple(vector), z=z, hour_hist=hour_hists[addr]
        )
    return out


# --------------------------------------------------------------------------
# DBSCAN

def dbscan(
    points: Sequence[Sequence[float]], eps: float = 0.5, min_pts: int = 5
) -> list[int]:
    """Density clustering with Euclidean distance; noise labeled -1.

    A point's eps-neighborhood includes itself. Border points join the first
    cluster that reaches them in index-order expansion.
    """
    n = len(points)
    if n == 0:
        raise EmptyInput("dbscan needs at least one point")
    eps2 = eps * eps
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(n, 1)
    sq = np.einsum("ij,ij->i", pts, pts)
    neighbors: list[list[int]] = []
    # blockwise distance matrix keeps memory flat on large inputs
    block = max(1, min(n, 8_000_000 // max(1, n)))
    for s in range(0, n, block):
        chunk = pts[s:s + block]
        d2 = sq[s:s + block, None] + sq[None, :] - 2.0 * (chunk @ pts.T)
        d2[np.arange(len(chunk)), np.arange(s, s + len(chunk))] = 0.0
        for row in d2:
            neighbors.append(np.nonzero(row <= eps2)[0].tolist())
    core = [len(neighbors[i]) >= min_pts for i in range(n)]
    labels = [-1] * n
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = [i]
        head = 0
        while head < len(queue):
            u = queue[head]
            head += 1
            for v in neighbors[u]:
                if labels[v] == -1:
                    labels[v] = cluster
                    if core[v]:
                        queue.append(v)
        cluster += 1
    return labels


# --------------------------------------------------------------------------
# isolation forest

class _ITreeNode:
    __slots__ = ("split_dim", "split_value", "left", "right", "size")

    def __init__(self, split_dim=-1, split_value=0.0, left=None, right=None, size=0):
        self.split_dim = split_dim
        self.split_value = split_value
        self.left = left
        self.right = right
        self.size = size


def average_path_length(n: int) -> float:
    """Expected unsuccessful-search path length in a BST of n points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    harmonic = math.log(n - 1) + 0.5772156649015329
    return 2.0 * harmonic - 2.0 * (n - 1) / n


def _build_itree(
    points: Sequence[Sequence[float]],
    indices: list[int],
    rng: random.Random,
    depth: int,
    height_limit: int,
) -> _ITreeNode:
    if depth >= height_limit or len(indices) <= 1:
        return _ITreeNode(size=len(indices))
    dim_count = len(points[indices[0]])
    split_dims = [
        d for d in range(dim_count)
        if min(points[i][d] for i in indices) < max(points[i][d] for i in indices)
    ]
    if not split_dims:
        return _ITreeNode(size=len(indices))
    d = split_dims[rng.randrange(len(split_dims))]
    lo = min(points[i][d] for i in indices)
    hi = max(points[i][d] for i in indices)
    value = rng.uniform(lo, hi)
    left = [i for i in indices if points[i][d] < value]
    right = [i for i in indices if points[i][d] >= value]
    if not left or not right:
        return _ITreeNode(size=len(indices))
    return _ITreeNode(
        split_dim=d,
        split_value=value,
        left=_build_itree(points, left, rng, depth + 1, height_limit),
        right=_build_itree(points, right, rng, depth + 1, height_limit),
    )


def _tree_path_length(node: _ITreeNode, point: Sequence[float]) -> float:
    depth = 0.0
    while node.split_dim >= 0:
        if point[node.split_dim] < node.split_value:
            node = node.left
        else:
            node = node.right
        depth += 1.0
    return depth + average_path_length(node.size)


@dataclass(frozen=True)
class IsolationForest:
    """Fitted forest; trees are exposed so scoring can be cross-checked."""

    trees: tuple[_ITreeNode, ...]
    subsample: int

    def score(self, point: Sequence[float]) -> float:
        mean_path = sum(_tree_path_length(t, point) for t in self.trees) / len(self.trees)
        denom = average_path_length(self.subsample)
        if denom <= 0:
            return 0.5
        return 2.0 ** (-mean_path / denom)

    def scores(self, points: Sequence[Sequence[float]]) -> list[float]:
        return [self.score(p) for p in points]


def build_isolation_forest(
    points: Sequence[Sequence[float]],
    trees: int = 100,
    seed: int = 0,
    subsample: int = 256,
) -> IsolationForest:
    n = len(points)
    if n < 2:
        raise EmptyInput("isolation forest needs at least two points")
    psi = min(subsample, n)
    height_limit = max(1, math.ceil(math.log2(psi)))
    rng = random.Random(seed)
    built = []
    for _ in range(trees):
        indices = rng.sample(range(n), psi)
        built.append(_build_itree(points, indices, rng, 0, height_limit))
    return IsolationForest(trees=tuple(built), subsample=psi)


def isolation_forest_filter(
    points: Sequence[Sequence[float]],
    contamination: float = 0.1,
    trees: int = 100,
    seed: int = 0,
    subsample: int = 256,
) -> list[int]:
    """Indices kept after removing the ceil(contamination * n) points with
    the highest anomaly scores. Ties resolve toward the lower index."""
    n = len(points)
    if n < 2:
        raise EmptyInput("isolation forest filter needs at least two points")
    if not 0.0 < contamination <= 1.0:
        raise InvariantViolation("contamination must be in (0, 1]")
    forest = build_isolation_forest(points, trees=trees, seed=seed, subsample=subsample)
    scored = forest.scores(points)
    remove_count = min(n, math.ceil(contamination * n))
    order = sorted(range(n), key=lambda i: (-scored[i], i))
    removed = set(order[:remove_count])
    return [i for i in range(n) if i not in removed]


# --------------------------------------------------------------------------
# probabilistic linkage

def _cosine(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def _pairwise_cosine_sum(vectors: Sequence[Sequence[float]], clip: bool) -> float:
    """Sum of cosine similarity over unordered vector pairs (zero vectors
    score 0 against everything). Blockwise so large groups stay in memory."""
    k = len(vectors)
    if k < 2:
        return 0.0
    arr = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1)
    unit = np.zeros_like(arr)
    nonzero = norms > 0.0
    unit[nonzero] = arr[nonzero] / norms[nonzero, None]
    total = 0.0
    cols = np.arange(k)[None, :]
    block = max(1, min(k, 8_000_000 // max(1, k)))
    for s in range(0, k, block):
        sims = unit[s:s + block] @ unit.T
        if clip:
            np.clip(sims, 0.0, 1.0, out=sims)
        rows = np.arange(s, min(s + block, k))[:, None]
        total += float(np.where(cols > rows, sims, 0.0).sum())
    return total


def linkage_probability(
    group: EntityGroup,
    features: Mapping[str, AddressFeatures],
    graph: TransactionGraph,
    config: ClusterConfig = ClusterConfig(),
    detector_groups: Optional[Sequence[EntityGroup]] = None,
) -> float:
    """Weighted sum of four sub-scores, each in [0, 1].

    S_pattern: fraction of member pairs co-occurring in some detector group
    (0 when detector_groups is not supplied). S_similarity: mean pairwise
    cosine of standardized feature vectors, clipped to [0, 1] per pair.
    S_flow: fraction of member pairs connected by a directed transfer path of
    length <= 2 staying inside the group, in either direction. S_temporal:
    mean pairwise cosine of raw hour histograms.
    """
    members = sorted(group.members)
    k = len(members)
    if k < 2:
        raise SingletonGroup(f"group {group.group_id} has {k} member(s)")
    n_pairs = k * (k - 1) // 2
    pos = {m: i for i, m in enumerate(members)}

    covered = 0
    if detector_groups:
        seen: set[tuple[int, int]] = set()
        for dg in detector_groups:
            idxs = sorted(pos[m] for m in dg.members if m in pos)
            seen.update(
                (idxs[a], idxs[b])
                for a in range(len(idxs)) for b in range(a + 1, len(idxs)))
        covered = len(seen)
    s_pattern = covered / n_pairs

    present = [features[m] for m in members if m in features]
    s_similarity = _pairwise_cosine_sum(
        [f.z for f in present], clip=True) / n_pairs

    # pair (u, v) is flow-linked when a directed path of length <= 2 with an
    # in-group intermediate exists in either direction; a mid of u or v only
    # ever certifies a pair that a direct edge already certifies, so expanding
    # through every in-group neighbor is equivalent to excluding them
    out_bits = [0] * k
    in_bits = [0] * k
    for i, u in enumerate(members):
        for v in graph.successors(u):
            j = pos.get(v)
            if j is not None:
                out_bits[i] |= 1 << j
                in_bits[j] |= 1 << i
    linked_count = 0
    for i in range(k):
        reach = out_bits[i] | in_bits[i]
        rest = out_bits[i]
        while rest:
            low = rest & -rest
            reach |= out_bits[low.bit_length() - 1]
            rest ^= low
        rest = in_bits[i]
        while rest:
            low = rest & -rest
            reach |= in_bits[low.bit_length() - 1]
            rest ^= low
        linked_count += (reach >> (i + 1)).bit_count()
    s_flow = linked_count / n_pairs

    s_temporal = _pairwise_cosine_sum(
        [f.hour_hist for f in present], clip=False) / n_pairs

    probability = (
        config.weight_pattern * s_pattern
        + config.weight_similarity * s_similarity
        + config.weight_flow * s_flow
        + config.weight_temporal * s_temporal
    )
    return min(1.0, max(0.0, probability))


# --------------------------------------------------------------------------
# merge and refine

def _union_find_merge(groups: Sequence[EntityGroup]) -> list[set[str]]:
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for g in groups:
        members = sorted(g.members)
        for m in members:
            parent.setdefault(m, m)
        anchor = find(members[0])
        for m in members[1:]:
            root = find(m)
            if root != anchor:
                # deterministic: smaller root wins
                if root < anchor:
                    parent[anchor] = root
                    anchor = root
                else:
                    parent[root] = anchor
    components: dict[str, set[str]] = {}
    for m in parent:
        components.setdefault(find(m), set()).add(m)
    return [components[root] for root in sorted(components)]


class _TouchStats(NamedTuple):
    """Per-address transfer activity, aggregated once per refinement run."""

    counts: dict[str, int]
    firsts: dict[str, int]
    lasts: dict[str, int]
    lifetime: int


def _touch_stats(graph: TransactionGraph) -> _TouchStats:
    counts: dict[str, int] = {}
    firsts: dict[str, int] = {}
    lasts: dict[str, int] = {}
    for t in graph.transfers:
        for a in {t.from_addr, t.to_addr}:
            counts[a] = counts.get(a, 0) + 1
            firsts[a] = min(firsts.get(a, t.timestamp), t.timestamp)
            lasts[a] = max(lasts.get(a, t.timestamp), t.timestamp)
    lo, hi = graph.timestamp_span()
    return _TouchStats(counts, firsts, lasts, max(1, hi - lo))


def _market_maker_flags(
    members: frozenset[str],
    graph: TransactionGraph,
    stats: _TouchStats,
    config: ClusterConfig,
) -> frozenset[str]:
    # transfers with both (distinct) endpoints inside are double counted in
    # the per-address sums; subtract them via the aggregated edge counts
    touching = sum(stats.counts.get(m, 0) for m in members)
    for u in members:
        for v in graph.successors(u):
            if v != u and v in members:
                touching -= graph.edges[(u, v)].transfer_count
    if touching < config.market_maker_min_tx:
        return frozenset()
    t0 = min(stats.firsts[m] for m in members if m in stats.firsts)
    t1 = max(stats.lasts[m] for m in members if m in stats.lasts)
    if (t1 - t0) / stats.lifetime >= config.market_maker_span_fraction:
        return frozenset({MARKET_MAKER_FLAG})
    return frozenset()


def merge_and_refine(
    detector_groups: Sequence[EntityGroup],
    features: Mapping[str, AddressFeatures],
    graph: TransactionGraph,
    config: ClusterConfig = ClusterConfig(),
    seed: int = 0,
) -> GroupSet:
    """Merge overlapping detector groups, strip outliers, gate on linkage
    probability, and assemble the final disjoint GroupSet.

    DBSCAN runs within each merged super-group on standardized features:
    noise members are dropped when the density clusters cover at least half
    of the super-group; a super-group whose density structure is absent or
    marginal is kept whole rather than discarded.
    Isolation-forest removal is pooled across all super-group members and
    only strips members that both rank in the top ceil(contamination * n)
    scores and exceed the configured score threshold, so tight genuine
    entities are not forced to shed members.
    """
    universe = frozenset(features)
    if not detector_groups:
        return GroupSet(groups=(), universe=universe)

    super_groups = _union_find_merge(detector_groups)
    log.info("merged %d detector groups into %d super-groups",
             len(detector_groups), len(super_groups))

    surviving: list[list[str]] = []
    for members in super_groups:
        ordered = sorted(members)
        pts = [features[m].z for m in ordered if m in features]
        named = [m for m in ordered if m in features]
        if len(named) != len(ordered):
            missing = set(ordered) - set(named)
            raise InvariantViolation(
                f"group members missing from feature universe: {sorted(missing)[:3]}")
        labels = dbscan(pts, eps=config.dbscan_eps, min_pts=config.dbscan_min_pts)
        clustered = [m for m, lb in zip(ordered, labels) if lb != -1]
        # trust the density verdict only when it speaks for the group: a
        # small knot of near-identical members must not discard the majority
        if 2 * len(clustered) >= len(ordered) and clustered:
            kept = clustered
        else:
            kept = ordered
        surviving.append(kept)

    pool: list[str] = [m for kept in surviving for m in kept]
    removed_addrs: set[str] = set()
    if len(pool) >= 2:
        pool_points = [features[m].z for m in pool]
        forest = build_isolation_forest(
            pool_points, trees=config.iforest_trees, seed=seed,
            subsample=config.iforest_subsample)
        scored = forest.scores(pool_points)
        cap = math.ceil(config.contamination * len(pool))
        candidates = sorted(
            (i for i in range(len(pool)) if scored[i] > config.iforest_score_threshold),
            key=lambda i: (-scored[i], i))
        removed_addrs = {pool[i] for i in candidates[:cap]}
        if removed_addrs:
            log.info("isolation forest removed %d of %d pooled members",
                     len(removed_addrs), len(pool))

    stats = _touch_stats(graph)
    final: list[EntityGroup] = []
    for kept in surviving:
        members = [m for m in kept if m not in removed_addrs]
        if len(members) < 2:
            continue
        candidate = EntityGroup(group_id=0, members=frozenset(members))
        probability = linkage_probability(
            candidate, features, graph, config, detector_groups=detector_groups)
        if probability >= config.probability_threshold:
            final.append(EntityGroup(
                group_id=0,
                members=frozenset(members),
                evidence=_collect_evidence(frozenset(members), detector_groups),
                linkage_probability=probability,
                flags=_market_maker_flags(frozenset(members), graph, stats, config),
            ))

    final.sort(key=lambda g: min(g.members))
    renumbered = tuple(
        EntityGroup(
            group_id=i, members=g.members, evidence=g.evidence,
            linkage_probability=g.linkage_probability, flags=g.flags)
        for i, g in enumerate(final)
    )
    return GroupSet(groups=renumbered, universe=universe)


def _collect_evidence(
    members: frozenset[str], detector_groups: Sequence[EntityGroup]
) -> tuple[Evidence, ...]:
    """One evidence entry per detector that contributed members, weighted by
    the contributing detector groups' overlap with the final members."""
    by_detector: dict[str, float] = {}
    for dg in detector_groups:
        overlap = len(dg.members & members)
        if overlap < 2:
            continue
        fraction = overlap / len(members)
        for ev in dg.evidence:
            prev = by_detector.get(ev.detector, 0.0)
            by_detector[ev.detector] = max(prev, fraction)
    return tuple(
        Evidence(detector, f"contributed {share:.3f} of members", min(1.0, share))
        for detector, share in sorted(by_detector.items())
    )


# --------------------------------------------------------------------------
# serialization

def group_set_to_json_dict(group_set: GroupSet) -> dict:
    return {
        "groups": [
            {
                "group_id": g.group_id,
                "members": g.sorted_members(),
                "linkage_probability": g.linkage_probability,
                "flags": sorted(g.flags),
                "evidence": [
                    {"detector": e.detector, "detail": e.detail, "weight": e.weight}
                    for e in g.evidence
                ],
            }
            for g in group_set.groups
        ],
        "universe_size": len(group_set.universe),
    }


def group_set_from_json_dict(data: Mapping, universe: Iterable[str]) -> GroupSet:
    """Rebuild a GroupSet from its JSON form plus the externally known
    universe (the JSON stores only the universe size)."""
    universe = frozenset(universe)
    if len(universe) != int(data["universe_size"]):
        raise InvariantViolation(
            f"universe size mismatch: JSON says {data['universe_size']}, "
            f"reconstructed {len(universe)}")
    groups = tuple(
        EntityGroup(
            group_id=int(entry["group_id"]),
            members=frozenset(entry["members"]),
            evidence=tuple(
                Evidence(e["detector"], e["detail"], float(e["weight"]))
                for e in entry.get("evidence", ())
            ),
            linkage_probability=float(entry.get("linkage_probability", 1.0)),
            flags=frozenset(entry.get("flags", ())),
        )
        for entry in data["groups"]
    )
    return GroupSet(groups=groups, universe=universe)
