"""GTFS parsing and the time-expanded transit graph.

Nodes are stoptimes (one Arrival and one Departure node per stop_times row);
edges are rides between consecutive stoptimes of a trip, dwells from an
arrival to the departure at the same stoptime, and walking transfers from an
arrival to the earliest feasible departure of every other trip nearby.
"""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import enum
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError
from .tessellation import LocalProjection, Point

WALK_SPEED_MPS = 5.0 / 3.6
MAX_WALK_S = 900.0
MAX_NODE_TIME = 172800


# --- GTFS tables ------------------------------------------------------------


def parse_gtfs_time(text: str) -> int:
    """``H:MM:SS`` to seconds; hours may exceed 23."""
    parts = text.strip().split(":")
    if len(parts) != 3:
        raise ValueError(f"bad GTFS time '{text}'")
    h, m, s = (int(p) for p in parts)
    if h < 0 or not 0 <= m < 60 or not 0 <= s < 60:
        raise ValueError(f"bad GTFS time '{text}'")
    return h * 3600 + m * 60 + s


def format_gtfs_time(seconds: int) -> str:
    seconds = int(seconds)
    return f"{seconds // 3600:02d}:{seconds % 3600 // 60:02d}:{seconds % 60:02d}"


def read_table(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    try:
        with path.open(newline="", encoding="utf-8-sig") as fh:
            reader = csv.DictReader(fh)
            rows = [{k.strip(): (v or "").strip() for k, v in r.items() if k is not None} for r in reader]
            header = [h.strip() for h in (reader.fieldnames or [])]
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return header, rows


def write_table(path: Path, header: list[str], rows: list[dict[str, str]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in header})


@dataclass(frozen=True)
class Stop:
    stop_id: str
    location: Point


class StopTime(NamedTuple):
    stop_id: str
    arrival: int
    departure: int
    sequence: int


@dataclass
class Schedule:
    stops: dict[str, Stop]
    trips: dict[str, list[StopTime]]
    trip_routes: dict[str, str] = field(default_factory=dict)


def _active_services(calendar, calendar_dates, service_date: str) -> set[str]:
    day = dt.datetime.strptime(service_date, "%Y%m%d").date()
    weekday = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"][day.weekday()]
    active = set()
    for r in calendar:
        if r["start_date"] <= service_date <= r["end_date"] and r.get(weekday) == "1":
            active.add(r["service_id"])
    for r in calendar_dates:
        if r["date"] != service_date:
            continue
        if r["exception_type"] == "1":
            active.add(r["service_id"])
        elif r["exception_type"] == "2":
            active.discard(r["service_id"])
    return active


def _fill_missing_times(rows: list[tuple[int, str, str, str]], trip_id: str) -> list[StopTime]:
    """Resolve blank arrival/departure times by linear interpolation over the sequence."""
    times: list[tuple[int | None, int | None]] = []
    for seq, stop, arr, dep in rows:
        a = parse_gtfs_time(arr) if arr else None
        d = parse_gtfs_time(dep) if dep else None
        times.append((a if a is not None else d, d if d is not None else a))
    known = [i for i, (a, _) in enumerate(times) if a is not None]
    if not known or known[0] != 0 or known[-1] != len(times) - 1:
        raise FormatError(f"trip '{trip_id}' lacks times at its first or last stop")
    out = []
    for i, (seq, stop, _, _) in enumerate(rows):
        a, d = times[i]
        if a is None:
            lo = max(k for k in known if k < i)
            hi = min(k for k in known if k > i)
            t0, t1 = times[lo][1], times[hi][0]
            a = d = int(round(t0 + (t1 - t0) * (i - lo) / (hi - lo)))
        out.append(StopTime(stop, a, d, seq))
    return out


def parse_gtfs(
    gtfs_dir,
    service_date: str | None = None,
    projection: LocalProjection | None = None,
) -> Schedule:
    """Read a static GTFS feed into stops and time-ordered trips.

    With ``service_date`` (``YYYYMMDD``) only trips whose service runs that
    day are kept. Stop coordinates are projected with ``projection``; when it
    is None, ``stop_lon``/``stop_lat`` are taken as planar x/y meters.
    ``frequencies.txt`` entries are expanded into explicit trips.
    """
    root = Path(gtfs_dir)
    if not root.is_dir():
        raise FormatError(f"GTFS directory not found: {root}")
    for name in ("stops.txt", "routes.txt", "trips.txt", "stop_times.txt"):
        if not (root / name).exists():
            raise FormatError(f"GTFS feed {root} is missing {name}")
    has_cal, has_dates = (root / "calendar.txt").exists(), (root / "calendar_dates.txt").exists()
    if not (has_cal or has_dates):
        raise FormatError(f"GTFS feed {root} is missing calendar.txt/calendar_dates.txt")

    _, stop_rows = read_table(root / "stops.txt")
    _, route_rows = read_table(root / "routes.txt")
    _, trip_rows = read_table(root / "trips.txt")
    _, st_rows = read_table(root / "stop_times.txt")
    calendar = read_table(root / "calendar.txt")[1] if has_cal else []
    calendar_dates = read_table(root / "calendar_dates.txt")[1] if has_dates else []

    stops: dict[str, Stop] = {}
    coords = []
    for r in stop_rows:
        sid = r["stop_id"]
        if sid in stops:
            raise FormatError(f"duplicate stop_id '{sid}'")
        try:
            coords.append((float(r["stop_lon"]), float(r["stop_lat"])))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"stop '{sid}' has no valid coordinates") from exc
        stops[sid] = None  # placeholder, filled below
    xy = np.array(coords, dtype=float).reshape(-1, 2)
    if projection is not None and len(xy):
        x, y = projection.forward(xy[:, 0], xy[:, 1])
        xy = np.column_stack([x, y])
    for sid, (x, y) in zip(list(stops), xy):
        stops[sid] = Stop(sid, Point(float(x), float(y)))

    route_ids = {r["route_id"] for r in route_rows}
    service_ids = {r["service_id"] for r in calendar} | {r["service_id"] for r in calendar_dates}
    trip_routes: dict[str, str] = {}
    trip_service: dict[str, str] = {}
    for r in trip_rows:
        tid = r["trip_id"]
        if r["route_id"] not in route_ids:
            raise FormatError(f"trip '{tid}' references unknown route_id '{r['route_id']}'")
        if r["service_id"] not in service_ids:
            raise FormatError(f"trip '{tid}' references unknown service_id '{r['service_id']}'")
        trip_routes[tid] = r["route_id"]
        trip_service[tid] = r["service_id"]

    raw: dict[str, list[tuple[int, str, str, str]]] = defaultdict(list)
    for r in st_rows:
        tid, sid = r["trip_id"], r["stop_id"]
        if tid not in trip_routes:
            raise FormatError(f"stop_times references unknown trip_id '{tid}'")
        if sid not in stops:
            raise FormatError(f"stop_times references unknown stop_id '{sid}'")
        raw[tid].append((int(r["stop_sequence"]), sid, r.get("arrival_time", ""), r.get("departure_time", "")))

    active = None if service_date is None else _active_services(calendar, calendar_dates, service_date)
    trips: dict[str, list[StopTime]] = {}
    for tid in sorted(raw):
        if active is not None and trip_service[tid] not in active:
            continue
        rows = sorted(raw[tid])
        try:
            trips[tid] = _fill_missing_times(rows, tid)
        except ValueError as exc:
            raise FormatError(f"trip '{tid}': {exc}") from exc

    if (root / "frequencies.txt").exists():
        _, freq_rows = read_table(root / "frequencies.txt")
        counter: dict[str, int] = defaultdict(int)
        templates: dict[str, list[StopTime]] = {}
        for r in freq_rows:
            tid = r["trip_id"]
            if tid not in trip_routes:
                raise FormatError(f"frequencies references unknown trip_id '{tid}'")
            if tid not in trips and tid not in templates:
                continue
            template = templates.setdefault(tid, trips.pop(tid))
            start, end = parse_gtfs_time(r["start_time"]), parse_gtfs_time(r["end_time"])
            headway = int(r["headway_secs"])
            if headway <= 0:
                raise FormatError(f"frequencies for '{tid}' has non-positive headway")
            offset0 = template[0].departure
            t = start
            while t < end:
                shift = t - offset0
                new_id = f"{tid}#{counter[tid]}"
                counter[tid] += 1
                trips[new_id] = [st._replace(arrival=st.arrival + shift, departure=st.departure + shift) for st in template]
                trip_routes[new_id] = trip_routes[tid]
                t += headway
        trips = dict(sorted(trips.items()))
    return Schedule(stops, trips, trip_routes)


def read_walk_matrix(path) -> dict[tuple[str, str], float]:
    header, rows = read_table(Path(path))
    for col in ("from_stop_id", "to_stop_id", "walk_s"):
        if col not in header:
            raise FormatError(f"{Path(path).name}: missing column '{col}'")
    return {(r["from_stop_id"], r["to_stop_id"]): float(r["walk_s"]) for r in rows}


# --- time-expanded graph ----------------------------------------------------


class NodeKind(str, enum.Enum):
    ARRIVAL = "arrival"
    DEPARTURE = "departure"


class EdgeKind(str, enum.Enum):
    RIDE = "ride"
    DWELL = "dwell"
    TRANSFER = "transfer"


class StoptimeNode(NamedTuple):
    node_id: int
    stop_id: str
    time: int
    trip_id: str
    kind: NodeKind


class Edge(NamedTuple):
    tail: int
    head: int
    kind: EdgeKind


@dataclass(eq=False)
class TimeExpandedGraph:
    stops: dict[str, Stop]
    stop_ids: list[str]
    stop_xy: np.ndarray
    nodes: list[StoptimeNode]
    edges: list[Edge]
    adjacency: dict[int, list[Edge]]
    footpaths: list[list[tuple[int, float]]]
    departures_by_stop: dict[int, tuple[list[int], list[int]]]
    walk_speed: float
    max_walk: float
    transfer_buffer: float
    # connections (ride edges) sorted for scanning
    conn_dep_time: np.ndarray
    conn_arr_time: np.ndarray
    conn_dep_stop: np.ndarray
    conn_arr_stop: np.ndarray
    conn_trip: np.ndarray
    conn_tail: np.ndarray
    conn_head: np.ndarray
    n_trips: int
    transfers_materialized: bool = True

    def node_time(self, node_id: int) -> int:
        return self.nodes[node_id].time

    def edge_set(self) -> set[Edge]:
        return set(self.edges)


def _footpaths(stop_ids, stop_xy, walk_speed, max_walk, walk_matrix):
    reach = max_walk * walk_speed
    n = len(stop_ids)
    paths: list[dict[int, float]] = [dict() for _ in range(n)]
    if n:
        tree = cKDTree(stop_xy)
        for i, neigh in enumerate(tree.query_ball_point(stop_xy, r=reach * (1 + 1e-12))):
            for j in neigh:
                w = 0.0 if i == j else float(np.hypot(*(stop_xy[i] - stop_xy[j]))) / walk_speed
                if w <= max_walk:
                    paths[i][j] = w
    if walk_matrix:
        index = {s: i for i, s in enumerate(stop_ids)}
        for (a, b), w in walk_matrix.items():
            if a not in index or b not in index or a == b:
                continue
            i, j = index[a], index[b]
            if w <= max_walk:
                paths[i][j] = float(w)
            else:
                paths[i].pop(j, None)
    return [sorted(p.items()) for p in paths]


def build_graph(
    schedule: Schedule,
    walk_speed: float = WALK_SPEED_MPS,
    max_walk: float = MAX_WALK_S,
    walk_matrix: dict[tuple[str, str], float] | None = None,
    transfer_buffer: float = 0.0,
    materialize_transfers: bool = True,
) -> TimeExpandedGraph:
    """Build the time-expanded graph of ``schedule``.

    Each Arrival node gets a Transfer edge to the earliest Departure node of
    every other trip it can reach on foot within ``max_walk`` (same stop
    included, at zero walk). Routing queries only need the stop footpaths, so
    ``materialize_transfers=False`` skips the (potentially large) edge list.
    """
    stop_ids = sorted(schedule.stops)
    stop_index = {s: i for i, s in enumerate(stop_ids)}
    stop_xy = np.array([schedule.stops[s].location for s in stop_ids], dtype=float).reshape(-1, 2)
    footpaths = _footpaths(stop_ids, stop_xy, walk_speed, max_walk, walk_matrix)

    nodes: list[StoptimeNode] = []
    edges: list[Edge] = []
    trip_ids = sorted(schedule.trips)
    conns = []
    for t_idx, tid in enumerate(trip_ids):
        prev_dep = None
        for st in schedule.trips[tid]:
            if not (0 <= st.arrival <= st.departure < MAX_NODE_TIME):
                raise FormatError(f"trip '{tid}' has invalid times at sequence {st.sequence}")
            # the departure node always follows its arrival node (id + 1)
            a = StoptimeNode(len(nodes), st.stop_id, st.arrival, tid, NodeKind.ARRIVAL)
            d = StoptimeNode(len(nodes) + 1, st.stop_id, st.departure, tid, NodeKind.DEPARTURE)
            nodes.extend((a, d))
            if prev_dep is not None:
                if a.time < prev_dep.time:
                    raise FormatError(f"trip '{tid}' goes back in time at sequence {st.sequence}")
                edges.append(Edge(prev_dep.node_id, a.node_id, EdgeKind.RIDE))
                conns.append(
                    (prev_dep.time, a.time, t_idx, st.sequence, stop_index[prev_dep.stop_id],
                     stop_index[a.stop_id], prev_dep.node_id, a.node_id)
                )
            edges.append(Edge(a.node_id, d.node_id, EdgeKind.DWELL))
            prev_dep = d

    departures_by_stop: dict[int, tuple[list[int], list[int]]] = {}
    by_stop: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for n in nodes:
        if n.kind is NodeKind.DEPARTURE:
            by_stop[stop_index[n.stop_id]].append((n.time, n.node_id))
    for s, lst in by_stop.items():
        lst.sort()
        departures_by_stop[s] = ([t for t, _ in lst], [i for _, i in lst])

    if materialize_transfers:
        for a in nodes:
            if a.kind is not NodeKind.ARRIVAL:
                continue
            best: dict[str, tuple[int, int]] = {}
            for s2, w in footpaths[stop_index[a.stop_id]]:
                if s2 not in departures_by_stop:
                    continue
                times, ids = departures_by_stop[s2]
                k = bisect.bisect_left(times, a.time + w + transfer_buffer)
                for t, nid in zip(times[k:], ids[k:]):
                    trip = nodes[nid].trip_id
                    if trip == a.trip_id:
                        continue
                    if trip not in best or (t, nid) < best[trip]:
                        best[trip] = (t, nid)
            for trip in sorted(best):
                edges.append(Edge(a.node_id, best[trip][1], EdgeKind.TRANSFER))

    adjacency: dict[int, list[Edge]] = defaultdict(list)
    for e in edges:
        adjacency[e.tail].append(e)

    conns.sort()
    arr = np.array(conns, dtype=np.int64).reshape(-1, 8)
    return TimeExpandedGraph(
        stops=dict(schedule.stops),
        stop_ids=stop_ids,
        stop_xy=stop_xy,
        nodes=nodes,
        edges=edges,
        adjacency=dict(adjacency),
        footpaths=footpaths,
        departures_by_stop=departures_by_stop,
        walk_speed=walk_speed,
        max_walk=max_walk,
        transfer_buffer=transfer_buffer,
        conn_dep_time=arr[:, 0],
        conn_arr_time=arr[:, 1],
        conn_trip=arr[:, 2],
        conn_dep_stop=arr[:, 4],
        conn_arr_stop=arr[:, 5],
        conn_tail=arr[:, 6],
        conn_head=arr[:, 7],
        n_trips=len(trip_ids),
        transfers_materialized=materialize_transfers,
    )
