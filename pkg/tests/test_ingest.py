import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smsaccess.errors import FormatError, InvalidParameterError
from smsaccess.ingest import (
    DEFAULT_SLOT_S,
    Direction,
    Hub,
    TripObservation,
    feeder_area,
    group_by_timeslot,
    load_hubs,
    load_observations,
    parse_clock,
)
from smsaccess.tessellation import Point, tessellate

HEADER = ["request_time", "origin_lon", "origin_lat", "dest_lon", "dest_lat", "hub_id", "wait_s", "travel_s"]
HUBS = [Hub("H1", Point(1000.0, 1000.0), "S1"), Hub("H2", Point(5000.0, 1000.0), "S2")]


def write_obs(path, rows, header=HEADER):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def obs(t, x, y, hub="H1", direction=Direction.ACCESS, w=100.0, yv=200.0):
    loc = Point(x, y)
    h = next(h for h in HUBS if h.id == hub).location
    o, d = (loc, h) if direction is Direction.ACCESS else (h, loc)
    return TripObservation(t, o, d, hub, w, yv, direction)


def test_parse_clock():
    assert parse_clock("07:00:00") == 25200
    assert parse_clock("07:59:59.9") == 28799
    assert parse_clock("25:10:00") == 90600
    with pytest.raises(ValueError):
        parse_clock("7:61:00")


def test_classification(tmp_path):
    rows = [
        ["08:00:00", 3000, 3000, 1010, 1020, "H1", 120, 300],   # dest within 50 m -> access
        ["08:10:00", 5000, 1000, 4000, 2500, "H2", 60, 200],    # origin exactly at hub -> egress
        ["08:20:00", 3000, 3000, 3500, 3500, "H1", 60, 200],    # neither end -> reject
        ["08:30:00", 3000, 3000, 1000, 1000, "", 60, 200],      # no hub id, snapped to H1
        ["08:40:00", 3000, 3000, 1000, 1000, "H1", -1, 200],    # negative wait
        ["08:50:00", 3000, 3000, 1000, 1000, "HX", 10, 200],    # unknown hub
    ]
    res = load_observations(write_obs(tmp_path / "o.csv", rows), HUBS, 50.0)
    assert [o.direction for o in res.observations] == [Direction.ACCESS, Direction.EGRESS, Direction.ACCESS]
    assert [o.hub_id for o in res.observations] == ["H1", "H2", "H1"]
    assert res.observations[1].location == Point(4000.0, 2500.0)
    assert res.rejects == [(3, "unclassifiable"), (5, "negative wait"), (6, "unknown hub")]
    assert res.n_access + res.n_egress + res.n_rejected == res.n_rows == 6


def test_direction_column_overrides(tmp_path):
    rows = [["08:00:00", 1000, 1000, 3000, 3000, "H1", 10, 20, "access"]]
    res = load_observations(write_obs(tmp_path / "o.csv", rows, HEADER + ["direction"]), HUBS)
    assert res.observations[0].direction is Direction.ACCESS
    assert res.observations[0].location == Point(1000.0, 1000.0)


def test_missing_column_names_it(tmp_path):
    path = write_obs(tmp_path / "o.csv", [], [c for c in HEADER if c != "wait_s"])
    with pytest.raises(FormatError, match="wait_s"):
        load_observations(path, HUBS)


def test_outside_study_area_and_wait_cap(tmp_path):
    grid = tessellate((0, 0, 6000, 4000), 1000)
    rows = [
        ["08:00:00", 9000, 9000, 1000, 1000, "H1", 10, 20],
        ["08:00:00", 2000, 2000, 1000, 1000, "H1", 900, 20],
        ["08:00:00", 2000, 2000, 1000, 1000, "H1", 500, 20],
    ]
    res = load_observations(write_obs(tmp_path / "o.csv", rows), HUBS, grid=grid, max_wait=600)
    assert res.rejects == [(1, "outside study area"), (2, "wait above cap")]
    assert len(res.observations) == 1


def test_hubs_validate_stop_links(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("hub_id,lon,lat,gtfs_stop_id\nH1,1,2,S1\n")
    assert load_hubs(p, None, ["S1"])[0].location == Point(1.0, 2.0)
    with pytest.raises(FormatError, match="S1"):
        load_hubs(p, None, ["S9"])


def test_feeder_area_empty():
    grid = tessellate((0, 0, 6000, 4000), 1000)
    fa = feeder_area(HUBS[0], [], grid)
    assert fa.radius == 0 and fa.cell_ids == frozenset()


def test_feeder_area_single_observation():
    grid = tessellate((-3000, -3000, 9000, 9000), 1000)
    hub = Hub("H", grid.centroid(0), "S")
    # pick a cell whose centroid is about 2.5 km away
    d = np.hypot(*(grid.centroids - grid.centroids[0]).T)
    target = int(np.argmin(np.abs(d - 2500)))
    fa = feeder_area(hub, [TripObservation(0, grid.centroid(target), hub.location, "H", 1, 1, Direction.ACCESS)], grid)
    assert fa.radius == pytest.approx(d[target])
    assert fa.cell_ids == frozenset(np.flatnonzero(d <= d[target] + 1e-9).tolist())


def test_feeder_area_matches_distance_scan():
    grid = tessellate((0, 0, 9000, 9000), 1000)
    hub = Hub("H", Point(4500.0, 4500.0), "S")
    d = np.hypot(grid.centroids[:, 0] - 4500, grid.centroids[:, 1] - 4500)
    picks = [int(np.argmin(np.abs(d - r))) for r in (800, 1700, 3100)]
    observations = [
        TripObservation(0, grid.centroid(c), hub.location, "H", 1, 1, Direction.ACCESS) for c in picks[:2]
    ] + [TripObservation(0, hub.location, grid.centroid(picks[2]), "H", 1, 1, Direction.EGRESS)]
    fa = feeder_area(hub, observations, grid)
    radius = max(d[c] for c in picks)
    assert fa.radius == pytest.approx(radius)
    brute = {i for i in range(len(grid)) if np.hypot(*(grid.centroids[i] - [4500, 4500])) <= radius + 1e-9}
    assert fa.cell_ids == brute


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 9000), st.floats(0, 9000)), min_size=1, max_size=12))
def test_feeder_area_monotone(points):
    grid = tessellate((0, 0, 9000, 9000), 1000)
    hub = Hub("H", Point(4500.0, 4500.0), "S")
    prev = feeder_area(hub, [], grid)
    acc = []
    for x, y in points:
        acc.append(TripObservation(0, Point(x, y), hub.location, "H", 1, 1, Direction.ACCESS))
        cur = feeder_area(hub, acc, grid)
        assert cur.radius >= prev.radius and cur.cell_ids >= prev.cell_ids
        prev = cur


def test_timeslot_boundaries():
    assert DEFAULT_SLOT_S == 3600
    b = group_by_timeslot([obs(25200, 0, 0), obs(28799, 0, 0), obs(28800, 0, 0)])
    starts = {k.slot_start: len(v) for k, v in b.items()}
    assert starts == {25200: 2, 28800: 1}


def test_timeslot_invalid_length():
    with pytest.raises(InvalidParameterError):
        group_by_timeslot([], 7000)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 86399), st.sampled_from(["H1", "H2"]), st.booleans()), max_size=50),
       st.sampled_from([900, 1800, 3600, 7200]))
def test_timeslot_partition(items, slot):
    observations = [obs(t, 0, 0, h, Direction.ACCESS if a else Direction.EGRESS) for t, h, a in items]
    buckets = group_by_timeslot(observations, slot)
    assert sum(len(v) for v in buckets.values()) == len(observations)
    for k, v in buckets.items():
        assert k.slot_start % slot == 0
        assert all(k.slot_start <= o.request_time < k.slot_start + slot for o in v)
        assert all(o.hub_id == k.hub_id and o.direction is k.direction for o in v)
