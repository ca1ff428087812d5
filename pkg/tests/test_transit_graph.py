import heapq
import math
import random
from collections import Counter

import pytest

from smsaccess.errors import FormatError
from smsaccess.transit_graph import (
    MAX_WALK_S,
    WALK_SPEED_MPS,
    EdgeKind,
    NodeKind,
    build_graph,
    format_gtfs_time,
    parse_gtfs,
    parse_gtfs_time,
    read_walk_matrix,
)

from feeds import write_feed
from oracles import transfer_edges_bruteforce


def test_defaults():
    assert WALK_SPEED_MPS == pytest.approx(1.389, abs=1e-3)
    assert MAX_WALK_S == 900
    assert MAX_WALK_S * WALK_SPEED_MPS == pytest.approx(1250.0)


def test_time_parsing():
    assert parse_gtfs_time("25:10:00") == 90600
    assert parse_gtfs_time(" 7:05:09") == 25509
    assert format_gtfs_time(90600) == "25:10:00"
    with pytest.raises(ValueError):
        parse_gtfs_time("12:60:00")


def test_minimal_feed(tmp_path):
    feed = write_feed(tmp_path, {"A": (0, 0), "B": (500, 0), "C": (900, 0)},
                      {"T": [("C", 36600, 36600), ("A", 36000, 36000), ("B", 36300, 36320)]})
    # stop_sequence follows list order above, so re-order to test sorting by sequence
    lines = (feed / "stop_times.txt").read_text().splitlines()
    (feed / "stop_times.txt").write_text("\n".join([lines[0], lines[3], lines[1], lines[2]]) + "\n")
    sched = parse_gtfs(feed)
    assert [(s.stop_id, s.arrival, s.departure) for s in sched.trips["T"]] == [
        ("C", 36600, 36600), ("A", 36000, 36000), ("B", 36300, 36320)
    ]
    assert [s.sequence for s in sched.trips["T"]] == [1, 2, 3]


def test_interpolates_blank_times(tmp_path):
    feed = write_feed(tmp_path, {"A": (0, 0), "B": (1, 0), "C": (2, 0)},
                      {"T": [("A", 100, 100), ("B", "", ""), ("C", 300, 300)]})
    assert [s.arrival for s in parse_gtfs(feed).trips["T"]] == [100, 200, 300]


def test_missing_file(tmp_path):
    feed = write_feed(tmp_path, {"A": (0, 0)}, {"T": [("A", 0, 0)]})
    (feed / "routes.txt").unlink()
    with pytest.raises(FormatError, match="routes.txt"):
        parse_gtfs(feed)


def test_missing_calendar(tmp_path):
    feed = write_feed(tmp_path, {"A": (0, 0)}, {"T": [("A", 0, 0)]}, calendar=False)
    with pytest.raises(FormatError, match="calendar"):
        parse_gtfs(feed)


def test_dangling_stop_reference(tmp_path):
    feed = write_feed(tmp_path, {"A": (0, 0)}, {"T": [("A", 0, 0), ("ZZ", 60, 60)]})
    with pytest.raises(FormatError, match="ZZ"):
        parse_gtfs(feed)


def test_dangling_route_reference(tmp_path):
    feed = write_feed(tmp_path, {"A": (0, 0)}, {"T": [("A", 0, 0)]}, route_of={"T": "R9"})
    (feed / "routes.txt").write_text("route_id,agency_id,route_short_name,route_type\nR1,A,R1,3\n")
    with pytest.raises(FormatError, match="R9"):
        parse_gtfs(feed)


def test_service_day_filter(tmp_path):
    feed = write_feed(tmp_path, {"A": (0, 0), "B": (10, 0)},
                      {"T1": [("A", 0, 0), ("B", 60, 60)], "T2": [("A", 0, 0), ("B", 60, 60)]},
                      services={"T2": "WD"})
    assert set(parse_gtfs(feed, "20240608").trips) == {"T1"}  # a Saturday
    assert set(parse_gtfs(feed, "20240610").trips) == {"T1", "T2"}
    assert set(parse_gtfs(feed).trips) == {"T1", "T2"}


def test_frequencies_expansion(tmp_path):
    feed = write_feed(tmp_path, {"A": (0, 0), "B": (10, 0)}, {"F": [("A", 28800, 28800), ("B", 29100, 29100)]},
                      frequencies=[("F", 28800, 30600, 600)])
    trips = parse_gtfs(feed).trips
    assert sorted(trips) == ["F#0", "F#1", "F#2"]
    assert [trips[t][0].departure for t in sorted(trips)] == [28800, 29400, 30000]
    assert all(trips[t][1].arrival - trips[t][0].departure == 300 for t in trips)


def test_walk_matrix_columns(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("from_stop_id,to_stop_id,walk_s\nA,B,120\n")
    assert read_walk_matrix(p) == {("A", "B"): 120.0}
    p.write_text("from,to,walk_s\n")
    with pytest.raises(FormatError, match="from_stop_id"):
        read_walk_matrix(p)


# --- graph structure --------------------------------------------------------


def _graph(tmp_path, stops, trips, **kw):
    return build_graph(parse_gtfs(write_feed(tmp_path, stops, trips)), **kw)


def _transfers(g):
    return {(g.nodes[e.tail], g.nodes[e.head]) for e in g.edges if e.kind is EdgeKind.TRANSFER}


def test_same_stop_transfer(tmp_path):
    g = _graph(tmp_path, {"X": (0, 0), "Y": (5000, 0), "Z": (9000, 0)},
               {"A": [("Y", 35000, 35000), ("X", 36000, 36000)], "B": [("X", 36300, 36300), ("Z", 37000, 37000)]})
    pairs = {(a.trip_id, a.stop_id, a.time, d.trip_id, d.stop_id, d.time) for a, d in _transfers(g)}
    assert ("A", "X", 36000, "B", "X", 36300) in pairs


def test_no_transfer_beyond_walk_reach(tmp_path):
    g = _graph(tmp_path, {"X": (0, 0), "W": (2000, 0), "Y": (9000, 0), "Z": (-9000, 0)},
               {"A": [("Y", 35000, 35000), ("X", 36000, 36000)], "B": [("W", 39000, 39000), ("Z", 40000, 40000)]})
    assert not _transfers(g)


def test_walk_matrix_overrides(tmp_path):
    stops = {"X": (0, 0), "W": (2000, 0), "Y": (9000, 0), "Z": (-9000, 0)}
    trips = {"A": [("Y", 35000, 35000), ("X", 36000, 36000)], "B": [("W", 39000, 39000), ("Z", 40000, 40000)]}
    sched = parse_gtfs(write_feed(tmp_path, stops, trips))
    g = build_graph(sched, walk_matrix={("X", "W"): 600.0})
    assert len(_transfers(g)) == 1


def test_transfer_buffer(tmp_path):
    stops = {"X": (0, 0), "Y": (5000, 0), "Z": (9000, 0)}
    trips = {"A": [("Y", 35000, 35000), ("X", 36000, 36000)], "B": [("X", 36060, 36060), ("Z", 37000, 37000)]}
    sched = parse_gtfs(write_feed(tmp_path, stops, trips))
    assert len(_transfers(build_graph(sched))) == 1
    assert not _transfers(build_graph(sched, transfer_buffer=120))


def _random_schedule(rng, n_stops=5, n_trips=5, span=4000):
    stops = {f"S{i}": (rng.uniform(0, 3000), rng.uniform(0, 3000)) for i in range(n_stops)}
    trips = {}
    for k in range(n_trips):
        seq = rng.sample(sorted(stops), rng.randint(2, n_stops))
        t = rng.randrange(0, span, 30)
        rows = []
        for s in seq:
            dwell = rng.choice([0, 0, 30])
            rows.append((s, t, t + dwell))
            t += dwell + rng.choice([0, 60, 120, 300])
        trips[f"T{k}"] = rows
    return stops, trips


@pytest.mark.parametrize("seed", range(8))
def test_transfer_edges_match_bruteforce(tmp_path, seed):
    rng = random.Random(seed)
    stops, trips = _random_schedule(rng)
    g = build_graph(parse_gtfs(write_feed(tmp_path, stops, trips)))
    walk = lambda a, b: math.dist(stops[a], stops[b]) / WALK_SPEED_MPS
    expected = transfer_edges_bruteforce(trips, walk, MAX_WALK_S)
    got = set()
    for a, d in _transfers(g):
        idx_a = next(i for i, n in enumerate(n for n in g.nodes if n.trip_id == a.trip_id and n.kind is NodeKind.ARRIVAL)
                     if n.node_id == a.node_id)
        idx_d = next(i for i, n in enumerate(n for n in g.nodes if n.trip_id == d.trip_id and n.kind is NodeKind.DEPARTURE)
                     if n.node_id == d.node_id)
        got.add(((a.trip_id, idx_a, "arr"), (d.trip_id, idx_d, "dep")))
    assert got == expected


@pytest.mark.parametrize("seed", range(5))
def test_edges_non_decreasing_and_transfer_feasible(tmp_path, seed):
    rng = random.Random(100 + seed)
    stops, trips = _random_schedule(rng)
    g = build_graph(parse_gtfs(write_feed(tmp_path, stops, trips)))
    for e in g.edges:
        tail, head = g.nodes[e.tail], g.nodes[e.head]
        assert head.time >= tail.time
        if e.kind is EdgeKind.TRANSFER:
            assert tail.kind is NodeKind.ARRIVAL and head.kind is NodeKind.DEPARTURE
            assert head.time >= tail.time + math.dist(stops[tail.stop_id], stops[head.stop_id]) / WALK_SPEED_MPS
        elif e.kind is EdgeKind.DWELL:
            assert (tail.kind, head.kind) == (NodeKind.ARRIVAL, NodeKind.DEPARTURE)
            assert tail.trip_id == head.trip_id and tail.stop_id == head.stop_id
        else:
            assert (tail.kind, head.kind) == (NodeKind.DEPARTURE, NodeKind.ARRIVAL) and tail.trip_id == head.trip_id


def test_build_is_deterministic(tmp_path):
    stops, trips = _random_schedule(random.Random(9))
    sched = parse_gtfs(write_feed(tmp_path, stops, trips))
    a, b = build_graph(sched), build_graph(sched)
    key = lambda g: Counter((g.nodes[e.tail], g.nodes[e.head], e.kind) for e in g.edges)
    assert a.nodes == b.nodes and key(a) == key(b)


def test_time_travel_rejected(tmp_path):
    sched = parse_gtfs(write_feed(tmp_path, {"A": (0, 0), "B": (1, 0)}, {"T": [("A", 600, 600), ("B", 300, 300)]}))
    with pytest.raises(FormatError, match="T"):
        build_graph(sched)


# --- pruning soundness ------------------------------------------------------


def _earliest_by_edges(g, stops, origin_xy, t0, extra_edges=()):
    """Dijkstra over node times using the materialised edges only."""
    adj = {}
    for e in list(g.edges) + list(extra_edges):
        adj.setdefault(e[0], []).append(e[1])
    heap = []
    for n in g.nodes:
        if n.kind is NodeKind.DEPARTURE:
            w = math.dist(origin_xy, stops[n.stop_id]) / WALK_SPEED_MPS
            if w <= MAX_WALK_S and n.time >= t0 + w:
                heap.append((n.time, n.node_id))
    heapq.heapify(heap)
    seen, best = set(), {}
    while heap:
        t, nid = heapq.heappop(heap)
        if nid in seen:
            continue
        seen.add(nid)
        node = g.nodes[nid]
        if node.kind is NodeKind.ARRIVAL:
            best[node.stop_id] = min(best.get(node.stop_id, math.inf), node.time)
        for h in adj.get(nid, ()):
            heapq.heappush(heap, (g.nodes[h].time, h))
    return best


@pytest.mark.parametrize("seed", range(10))
def test_pruned_transfers_lose_nothing(tmp_path, seed):
    rng = random.Random(500 + seed)
    stops, trips = _random_schedule(rng, n_stops=4, n_trips=6)
    g = build_graph(parse_gtfs(write_feed(tmp_path, stops, trips)))
    full = []
    for a in g.nodes:
        if a.kind is not NodeKind.ARRIVAL:
            continue
        for d in g.nodes:
            if d.kind is NodeKind.DEPARTURE and d.trip_id != a.trip_id:
                w = math.dist(stops[a.stop_id], stops[d.stop_id]) / WALK_SPEED_MPS
                if w <= MAX_WALK_S and d.time >= a.time + w:
                    full.append((a.node_id, d.node_id))
    for _ in range(5):
        origin = (rng.uniform(0, 3000), rng.uniform(0, 3000))
        t0 = rng.randrange(0, 4000, 30)
        assert _earliest_by_edges(g, stops, origin, t0) == _earliest_by_edges(g, stops, origin, t0, full)
