"""Feature extraction, clustering primitives and group refinement."""

import math
import random

import pytest

from conftest import EPOCH, mk_label, mk_transfer
from ell.cluster import (
    AddressFeatures,
    ClusterConfig,
    FEATURE_NAMES,
    MARKET_MAKER_FLAG,
    average_path_length,
    build_isolation_forest,
    dbscan,
    extract_features,
    group_set_from_json_dict,
    group_set_to_json_dict,
    isolation_forest_filter,
    linkage_probability,
    merge_and_refine,
    replay_balances,
)
from ell.model import (
    EmptyInput,
    EntityGroup,
    Evidence,
    GroupSet,
    InvariantViolation,
    SingletonGroup,
    TransactionGraph,
)

DIM = len(FEATURE_NAMES)


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"dbscan_eps": 0.0},
    {"dbscan_min_pts": 0},
    {"contamination": 0.0},
    {"contamination": 1.5},
    {"iforest_subsample": 1},
    {"probability_threshold": 1.1},
    {"weight_pattern": 0.5, "weight_similarity": 0.5, "weight_flow": 0.5},
])
def test_cluster_config_validation(kwargs):
    with pytest.raises(InvariantViolation):
        ClusterConfig(**kwargs)


# -- balances ----------------------------------------------------------------

def test_replay_balances_net_clamped():
    ts = [
        mk_transfer("0xa", "0xb", raw=100, usd=10.0),
        mk_transfer("0xb", "0xc", raw=30, usd=10.0),
    ]
    bal = replay_balances(ts)
    assert bal == {"0xa": 0.0, "0xb": 70.0, "0xc": 30.0}


def test_replay_balances_most_frequent_token():
    ts = [
        mk_transfer("0xa", "0xb", raw=5, token="0xt1"),
        mk_transfer("0xa", "0xb", raw=7, token="0xt2"),
        mk_transfer("0xb", "0xc", raw=2, token="0xt2"),
    ]
    assert replay_balances(ts) == {"0xa": 0.0, "0xb": 5.0, "0xc": 2.0}
    assert replay_balances(ts, token="0xt1") == {"0xa": 0.0, "0xb": 5.0}
    assert replay_balances([]) == {}


# -- feature extraction ------------------------------------------------------

def _features_for(transfers, balances=None, labels=(), **kw):
    graph = TransactionGraph(transfers)
    return extract_features(graph, transfers, balances or {}, labels, **kw)


def idx(name):
    return FEATURE_NAMES.index(name)


def test_feature_basic_stats():
    ts = [
        mk_transfer("0xa", "0xb", usd=10.0, ts=EPOCH, gas=0.005),
        mk_transfer("0xa", "0xc", usd=20.0, ts=EPOCH + 12 * 3600, gas=0.003),
        mk_transfer("0xd", "0xa", usd=99.0, ts=EPOCH + 13 * 3600, gas=0.009),
    ]
    feats = _features_for(ts)
    raw = feats["0xa"].raw
    assert raw[idx("tx_count")] == 3.0
    # span 13h = 0.5417 days, clamped denominator max(1, span)
    assert raw[idx("tx_per_day")] == pytest.approx(3.0)
    assert raw[idx("usd_mean")] == pytest.approx(43.0)
    expected_std = math.sqrt(((10 - 43) ** 2 + (20 - 43) ** 2 + (99 - 43) ** 2) / 3)
    assert raw[idx("usd_std")] == pytest.approx(expected_std)
    # gas over sent transfers only
    assert raw[idx("gas_mean")] == pytest.approx(0.004)
    assert raw[idx("in_degree")] == 1.0
    assert raw[idx("out_degree")] == 2.0
    assert raw[idx("counterparty_count")] == 3.0


def test_feature_hour_histogram_and_gaps():
    ts = [
        mk_transfer("0xa", "0xb", ts=EPOCH),
        mk_transfer("0xa", "0xb", ts=EPOCH + 60),
        mk_transfer("0xa", "0xb", ts=EPOCH + 180),
    ]
    feats = _features_for(ts)
    hist = feats["0xa"].hour_hist
    hour = (EPOCH % 86400) // 3600
    assert hist[hour] == 3.0 and sum(hist) == 3.0
    # gaps 60 and 120, median 90
    assert feats["0xa"].raw[idx("inter_transfer_median")] == 90.0


def test_feature_holding_and_labels():
    ts = [
        mk_transfer("0xa", "0xb", ts=EPOCH, token="0xt1"),
        mk_transfer("0xb", "0xa", ts=EPOCH + 86400 * 2, token="0xt2"),
    ]
    feats = _features_for(ts, balances={"0xa": 5000.0},
                          labels=[mk_label("0xa", "other")])
    raw = feats["0xa"].raw
    assert raw[idx("balance")] == 5000.0
    assert raw[idx("holding_days")] == pytest.approx(2.0)
    assert raw[idx("distinct_tokens")] == 2.0
    assert raw[idx("label_other")] == 1.0
    assert raw[idx("label_exchange")] == 0.0
    assert feats["0xb"].raw[idx("label_other")] == 0.0


def test_feature_self_transfer_counted_once():
    ts = [mk_transfer("0xa", "0xa", ts=EPOCH)]
    feats = _features_for(ts)
    assert feats["0xa"].raw[idx("tx_count")] == 1.0
    assert sum(feats["0xa"].hour_hist) == 1.0


def test_feature_pagerank_symmetric_cycle():
    # equal-weight 3-cycle: stationary distribution is exactly uniform
    ts = [
        mk_transfer("0xa", "0xb", ts=EPOCH),
        mk_transfer("0xb", "0xc", ts=EPOCH + 60),
        mk_transfer("0xc", "0xa", ts=EPOCH + 120),
    ]
    feats = _features_for(ts)
    for addr in ("0xa", "0xb", "0xc"):
        assert feats[addr].raw[idx("pagerank")] == pytest.approx(1 / 3, abs=1e-6)


def test_feature_betweenness_rank():
    ts = [
        mk_transfer("0xl0", "0xhub", ts=EPOCH),
        mk_transfer("0xl1", "0xhub", ts=EPOCH + 60),
        mk_transfer("0xhub", "0xl2", ts=EPOCH + 120),
        mk_transfer("0xhub", "0xl3", ts=EPOCH + 180),
    ]
    feats = _features_for(ts)
    assert feats["0xhub"].raw[idx("betweenness_rank")] == 1.0
    for leaf in ("0xl0", "0xl1", "0xl2", "0xl3"):
        assert feats[leaf].raw[idx("betweenness_rank")] == 0.0


def test_feature_top_counterparty_jaccard():
    ts = [
        mk_transfer("0xa", "0xb", ts=EPOCH),
        mk_transfer("0xa", "0xc", ts=EPOCH + 60),
    ]
    feats = _features_for(ts)
    # global counterparty frequencies: a twice, b and c once; top set {a,b,c}
    assert feats["0xa"].raw[idx("top_counterparty_jaccard")] == pytest.approx(2 / 3)
    assert feats["0xb"].raw[idx("top_counterparty_jaccard")] == pytest.approx(1 / 3)


def test_feature_zscores_standardized():
    rng = random.Random(4)
    ts = []
    for i in range(12):
        for _ in range(i + 1):  # distinct tx counts per address pair
            ts.append(mk_transfer(f"0xu{i}", f"0xv{i}",
                                  usd=rng.uniform(5, 500),
                                  ts=EPOCH + rng.randrange(0, 86400 * 3)))
    feats = _features_for(ts)
    n = len(feats)
    col = idx("tx_count")
    zs = [f.z[col] for f in feats.values()]
    assert sum(zs) == pytest.approx(0.0, abs=1e-9)
    assert sum(z * z for z in zs) == pytest.approx(n, rel=1e-9)
    # constant slot standardizes to zero, not NaN
    const_col = idx("label_project")
    assert all(f.z[const_col] == 0.0 for f in feats.values())


def test_feature_vector_shape_enforced():
    with pytest.raises(InvariantViolation):
        AddressFeatures("0xa", (0.0,) * (DIM - 1), (0.0,) * DIM, (0.0,) * 24)
    with pytest.raises(InvariantViolation):
        AddressFeatures("0xa", (0.0,) * DIM, (0.0,) * DIM, (0.0,) * 23)


def test_extract_features_empty():
    assert _features_for([]) == {}


# -- DBSCAN ------------------------------------------------------------------

def test_dbscan_cluster_and_noise():
    points = [[0.0], [0.1], [0.2], [0.3], [0.4], [0.6], [0.9]]
    labels = dbscan(points, eps=0.25, min_pts=3)
    # 0.6 is a border point of the cluster; 0.9 is unreachable noise
    assert labels == [0, 0, 0, 0, 0, 0, -1]


def test_dbscan_neighborhood_includes_self():
    points = [[0.0], [0.0], [10.0], [10.0]]
    labels = dbscan(points, eps=0.5, min_pts=2)
    assert labels == [0, 0, 1, 1]


def test_dbscan_all_noise():
    points = [[0.0], [5.0], [10.0]]
    assert dbscan(points, eps=1.0, min_pts=2) == [-1, -1, -1]


def test_dbscan_empty_raises():
    with pytest.raises(EmptyInput):
        dbscan([], eps=0.5, min_pts=3)


def _dbscan_oracle(points, eps, min_pts):
    """Density-reachability from first principles: core components, then
    border points joining the earliest-created eligible cluster."""
    n = len(points)
    eps2 = eps * eps
    nbrs = [
        [j for j in range(n)
         if sum((a - b) ** 2 for a, b in zip(points[i], points[j])) <= eps2]
        for i in range(n)
    ]
    core = [len(nbrs[i]) >= min_pts for i in range(n)]
    comp: dict[int, int] = {}
    order = 0
    for i in range(n):
        if not core[i] or i in comp:
            continue
        stack = [i]
        comp[i] = order
        while stack:
            u = stack.pop()
            for v in nbrs[u]:
                if core[v] and v not in comp:
                    comp[v] = order
                    stack.append(v)
        order += 1
    labels = []
    for i in range(n):
        if core[i]:
            labels.append(comp[i])
        else:
            eligible = [comp[j] for j in nbrs[i] if core[j]]
            labels.append(min(eligible) if eligible else -1)
    return labels


def _canon(labels):
    noise = frozenset(i for i, lb in enumerate(labels) if lb == -1)
    clusters: dict[int, set] = {}
    for i, lb in enumerate(labels):
        if lb != -1:
            clusters.setdefault(lb, set()).add(i)
    return noise, frozenset(frozenset(c) for c in clusters.values())


def test_dbscan_matches_density_oracle():
    for trial in range(40):
        rng = random.Random(trial)
        n = rng.randint(5, 50)
        d = rng.randint(2, 8)
        points = [[rng.uniform(0, 1) for _ in range(d)] for _ in range(n)]
        eps = rng.uniform(0.15, 0.6)
        min_pts = rng.randint(2, 6)
        got = dbscan(points, eps=eps, min_pts=min_pts)
        want = _dbscan_oracle(points, eps, min_pts)
        assert _canon(got) == _canon(want), f"trial {trial}"


# -- isolation forest --------------------------------------------------------

def test_average_path_length_known_values():
    assert average_path_length(0) == 0.0
    assert average_path_length(1) == 0.0
    assert average_path_length(2) == 1.0
    euler = 0.5772156649015329
    for n in (3, 10, 256):
        expected = 2.0 * (math.log(n - 1) + euler) - 2.0 * (n - 1) / n
        assert average_path_length(n) == pytest.approx(expected)
    assert average_path_length(100) > average_path_length(10)


def _walk(node, point):
    # independent recursive descent over the exposed tree structure
    if node.split_dim < 0:
        return average_path_length(node.size)
    if point[node.split_dim] < node.split_value:
        return 1.0 + _walk(node.left, point)
    return 1.0 + _walk(node.right, point)


def test_iforest_score_matches_tree_walk():
    rng = random.Random(2)
    points = [[rng.gauss(0, 1), rng.gauss(0, 1)] for _ in range(60)]
    forest = build_isolation_forest(points, trees=25, seed=9, subsample=32)
    for p in points[:10] + [[8.0, -8.0]]:
        mean_path = sum(_walk(t, p) for t in forest.trees) / len(forest.trees)
        expected = 2.0 ** (-mean_path / average_path_length(forest.subsample))
        assert forest.score(p) == pytest.approx(expected, rel=1e-12)


def test_iforest_deterministic():
    rng = random.Random(3)
    points = [[rng.uniform(0, 1) for _ in range(3)] for _ in range(40)]
    a = build_isolation_forest(points, trees=30, seed=7).scores(points)
    b = build_isolation_forest(points, trees=30, seed=7).scores(points)
    assert a == b


def test_iforest_far_point_scores_highest():
    rng = random.Random(11)
    points = [[rng.gauss(0, 0.5), rng.gauss(0, 0.5)] for _ in range(50)]
    points.append([50.0, 50.0])
    forest = build_isolation_forest(points, trees=100, seed=0)
    scores = forest.scores(points)
    assert max(range(len(points)), key=lambda i: scores[i]) == 50
    assert scores[50] > 0.6


def test_iforest_filter_removes_exact_count():
    rng = random.Random(5)
    points = [[rng.gauss(0, 0.5), rng.gauss(0, 0.5)] for _ in range(50)]
    points.append([50.0, 50.0])
    kept = isolation_forest_filter(points, contamination=0.1, seed=0)
    # ceil(0.1 * 51) = 6 removed
    assert len(kept) == 45
    assert 50 not in kept
    assert kept == sorted(kept)


def test_iforest_filter_tie_breaks_to_lower_index():
    # identical points give identical scores; removal must take the lowest
    # indices, never a random subset
    points = [[1.0, 1.0]] * 10
    kept = isolation_forest_filter(points, contamination=0.3, seed=4)
    assert kept == [3, 4, 5, 6, 7, 8, 9]


def test_iforest_filter_input_validation():
    with pytest.raises(EmptyInput):
        isolation_forest_filter([[1.0]])
    with pytest.raises(InvariantViolation):
        isolation_forest_filter([[1.0], [2.0]], contamination=0.0)


# -- linkage probability -----------------------------------------------------

def _fake(addr, z_head, hist_head=(1.0,)):
    z = tuple(z_head) + (0.0,) * (DIM - len(z_head))
    hist = tuple(hist_head) + (0.0,) * (24 - len(hist_head))
    return AddressFeatures(address=addr, raw=z, z=z, hour_hist=hist)


def test_linkage_probability_hand_computed():
    # sub-scores engineered to 1, 0.8, 1 and 0.6; equal 0.25 weights -> 0.85
    features = {
        "0xu": _fake("0xu", (1.0,), (1.0, 0.0)),
        "0xv": _fake("0xv", (0.8, 0.6), (0.6, 0.8)),
    }
    graph = TransactionGraph([mk_transfer("0xu", "0xv", usd=50.0)])
    group = EntityGroup(0, frozenset({"0xu", "0xv"}))
    p = linkage_probability(group, features, graph,
                            detector_groups=[group])
    assert p == pytest.approx(0.85)
    # without detector groups the pattern term drops to zero
    p2 = linkage_probability(group, features, graph)
    assert p2 == pytest.approx(0.60)


def test_linkage_flow_uses_in_group_intermediates():
    features = {a: _fake(a, (1.0,)) for a in ("0xu", "0xm", "0xv")}
    ts = [
        mk_transfer("0xu", "0xm", usd=50.0),
        mk_transfer("0xm", "0xv", usd=50.0),
    ]
    graph = TransactionGraph(ts)
    trio = EntityGroup(0, frozenset({"0xu", "0xm", "0xv"}))
    p3 = linkage_probability(trio, features, graph)
    # all three pairs flow-linked (u-v through m), identical features
    assert p3 == pytest.approx(0.25 * (1.0 + 1.0 + 1.0))
    # u-v alone: the intermediate m is outside the group, no flow credit
    pair = EntityGroup(1, frozenset({"0xu", "0xv"}))
    p2 = linkage_probability(pair, features, graph)
    assert p2 == pytest.approx(0.25 * (1.0 + 0.0 + 1.0))


def test_linkage_negative_cosine_clipped():
    features = {
        "0xu": _fake("0xu", (1.0,), (1.0,)),
        "0xv": _fake("0xv", (-1.0,), (1.0,)),
    }
    graph = TransactionGraph([mk_transfer("0xu", "0xv", usd=50.0)])
    group = EntityGroup(0, frozenset({"0xu", "0xv"}))
    p = linkage_probability(group, features, graph)
    # similarity clips to 0; flow 1; temporal 1
    assert p == pytest.approx(0.5)


def test_linkage_singleton_raises():
    features = {"0xu": _fake("0xu", (1.0,))}
    with pytest.raises(SingletonGroup):
        linkage_probability(EntityGroup(0, frozenset({"0xu"})), features,
                            TransactionGraph([]))


def test_linkage_bounded():
    rng = random.Random(8)
    for _ in range(20):
        members = [f"0x{i}" for i in range(rng.randint(2, 6))]
        features = {
            m: _fake(m, tuple(rng.uniform(-1, 1) for _ in range(4)),
                     tuple(rng.uniform(0, 3) for _ in range(5)))
            for m in members
        }
        ts = [
            mk_transfer(u, v, usd=50.0)
            for u in members for v in members
            if u != v and rng.random() < 0.4
        ]
        group = EntityGroup(0, frozenset(members))
        p = linkage_probability(group, features, TransactionGraph(ts),
                                detector_groups=[group])
        assert 0.0 <= p <= 1.0


# -- merge and refine --------------------------------------------------------

def _ring_transfers(members, usd=20.0):
    return [
        mk_transfer(members[i], members[(i + 1) % len(members)],
                    usd=usd, ts=EPOCH + 60 * i)
        for i in range(len(members))
    ]


def _identical_features(addrs, axis=0):
    head = [0.0, 0.0, 0.0]
    head[axis] = 1.0
    return {a: _fake(a, tuple(head)) for a in addrs}


def test_merge_overlapping_groups():
    detector_groups = [
        EntityGroup(0, frozenset({"0xa", "0xb"}),
                    evidence=(Evidence("source_of_funds", "x", 1.0),)),
        EntityGroup(1, frozenset({"0xb", "0xc"}),
                    evidence=(Evidence("anomalous", "y", 1.0),)),
        EntityGroup(2, frozenset({"0xd", "0xe"}),
                    evidence=(Evidence("behavioral", "z", 1.0),)),
    ]
    features = _identical_features(["0xa", "0xb", "0xc", "0xd", "0xe"])
    graph = TransactionGraph(
        _ring_transfers(["0xa", "0xb", "0xc"]) + _ring_transfers(["0xd", "0xe"]))
    gs = merge_and_refine(detector_groups, features, graph)
    assert [g.sorted_members() for g in gs.groups] == [
        ["0xa", "0xb", "0xc"], ["0xd", "0xe"],
    ]
    assert [g.group_id for g in gs.groups] == [0, 1]
    assert gs.universe == frozenset(features)
    detectors = {e.detector for e in gs.groups[0].evidence}
    assert detectors == {"source_of_funds", "anomalous"}


def test_merge_dbscan_drops_far_member():
    members = [f"0xm{i}" for i in range(5)]
    outlier = "0xfar"
    detector_groups = [EntityGroup(0, frozenset(members + [outlier]))]
    features = _identical_features(members)
    features[outlier] = _fake(outlier, (0.0, 10.0))
    graph = TransactionGraph(_ring_transfers(members))
    gs = merge_and_refine(detector_groups, features, graph)
    assert len(gs.groups) == 1
    assert gs.groups[0].members == frozenset(members)


def test_merge_small_groups_kept_without_density():
    # 2 members can never be DBSCAN cores at min_pts 5; keep-whole rule
    detector_groups = [EntityGroup(0, frozenset({"0xa", "0xb"}))]
    features = _identical_features(["0xa", "0xb"])
    graph = TransactionGraph(_ring_transfers(["0xa", "0xb"]))
    gs = merge_and_refine(detector_groups, features, graph)
    assert len(gs.groups) == 1


def test_merge_pooled_iforest_removes_outlier():
    cluster = [f"0xm{i}" for i in range(6)]
    detector_groups = [
        EntityGroup(0, frozenset(cluster)),
        EntityGroup(1, frozenset({"0xx", "0xy"})),
    ]
    features = _identical_features(cluster + ["0xx"])
    features["0xy"] = _fake("0xy", (0.0, 0.0, 50.0))
    graph = TransactionGraph(
        _ring_transfers(cluster) + _ring_transfers(["0xx", "0xy"]))
    gs = merge_and_refine(detector_groups, features, graph)
    # the outlier is stripped, leaving {x} below minimum size
    assert [g.sorted_members() for g in gs.groups] == [sorted(cluster)]


def test_merge_probability_gate_drops_weak_groups():
    features = {
        "0xu": _fake("0xu", (1.0, 0.0), (1.0, 0.0)),
        "0xv": _fake("0xv", (0.0, 1.0), (0.0, 1.0)),
    }
    detector_groups = [EntityGroup(0, frozenset({"0xu", "0xv"}))]
    # no transfers between them: flow 0, similarity 0, temporal 0
    gs = merge_and_refine(detector_groups, features, TransactionGraph([]))
    assert gs.groups == ()
    assert gs.universe == frozenset({"0xu", "0xv"})


def test_merge_market_maker_flag():
    pair = ["0xp", "0xq"]
    ts = []
    for i in range(12):
        ts.append(mk_transfer(pair[i % 2], pair[(i + 1) % 2],
                              usd=20.0, ts=EPOCH + i * 100))
    # unrelated activity extends the dataset lifetime a little
    ts.append(mk_transfer("0xz1", "0xz2", usd=5.0, ts=EPOCH + 1200))
    graph = TransactionGraph(ts)
    features = _identical_features(pair)
    config = ClusterConfig(market_maker_min_tx=10, market_maker_span_fraction=0.9)
    gs = merge_and_refine(
        [EntityGroup(0, frozenset(pair))], features, graph, config)
    assert len(gs.groups) == 1
    assert MARKET_MAKER_FLAG in gs.groups[0].flags
    sparse = ClusterConfig(market_maker_min_tx=100, market_maker_span_fraction=0.9)
    gs2 = merge_and_refine(
        [EntityGroup(0, frozenset(pair))], features, graph, sparse)
    assert gs2.groups[0].flags == frozenset()


def test_merge_missing_features_raise():
    detector_groups = [EntityGroup(0, frozenset({"0xa", "0xghost"}))]
    features = _identical_features(["0xa"])
    with pytest.raises(InvariantViolation):
        merge_and_refine(detector_groups, features, TransactionGraph([]))


def test_merge_no_detector_groups():
    features = _identical_features(["0xa", "0xb"])
    gs = merge_and_refine([], features, TransactionGraph([]))
    assert gs.groups == ()
    assert gs.universe == frozenset({"0xa", "0xb"})


def test_merge_deterministic():
    rng = random.Random(13)
    addrs = [f"0xn{i:02d}" for i in range(20)]
    detector_groups = []
    for gid in range(6):
        members = rng.sample(addrs, rng.randint(2, 5))
        detector_groups.append(EntityGroup(gid, frozenset(members)))
    features = _identical_features(addrs)
    ts = [
        mk_transfer(u, v, usd=20.0, ts=EPOCH + i * 30)
        for i, (u, v) in enumerate(
            (rng.choice(addrs), rng.choice(addrs)) for _ in range(60))
        if u != v
    ]
    graph = TransactionGraph(ts)
    a = merge_and_refine(detector_groups, features, graph, seed=5)
    b = merge_and_refine(detector_groups, features, graph, seed=5)
    assert a == b


def test_group_set_json_round_trip():
    features = _identical_features(["0xa", "0xb", "0xc"])
    graph = TransactionGraph(_ring_transfers(["0xa", "0xb"]))
    gs = merge_and_refine(
        [EntityGroup(0, frozenset({"0xa", "0xb"}),
                     evidence=(Evidence("anomalous", "e", 0.5),))],
        features, graph)
    data = group_set_to_json_dict(gs)
    again = group_set_from_json_dict(data, gs.universe)
    assert again == gs


def test_group_set_json_universe_mismatch():
    gs = GroupSet(groups=(), universe=frozenset({"0xa", "0xb"}))
    data = group_set_to_json_dict(gs)
    with pytest.raises(InvariantViolation):
        group_set_from_json_dict(data, {"0xa"})
