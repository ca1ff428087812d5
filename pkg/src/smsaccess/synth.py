"""Virtual feeder trips built from kriged wait and travel times.

Departures between a centroid and its hub are spaced by twice the expected
wait (the usual headway = 2 x mean wait approximation), starting from an
anchor time and iterating forward to the end of the service day and
backward to midnight. All times are whole seconds, the GTFS resolution.
"""

from __future__ import annotations

import csv
import datetime as dt
import shutil
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .errors import FormatError
from .geostat import FieldEstimate
from .ingest import DAY_S, Direction, Hub
from .tessellation import Grid
from .transit_graph import format_gtfs_time, read_table, write_table

LAST_DEPARTURE_S = 86340  # 23:59
DEFAULT_ANCHOR_S = 12 * 3600
DEFAULT_HEADWAY_FLOOR_S = 60
SERVICE_ID = "SMS_VIRTUAL"
AGENCY_ID = "SMS_VIRTUAL"


class SlotField:
    """Piecewise-constant value per timeslot for one (cell, hub, direction).

    Slots without an estimate borrow the value of the nearest slot that has
    one (the earlier slot on a tie).
    """

    def __init__(self, values: dict[int, float], slot_length: int):
        self.slot_length = int(slot_length)
        self.values = dict(sorted(values.items()))
        self._starts = list(self.values)

    def __bool__(self) -> bool:
        return bool(self.values)

    def slot_of(self, t: float) -> int:
        return int(t // self.slot_length) * self.slot_length

    def __call__(self, t: float) -> float:
        slot = self.slot_of(t)
        if slot in self.values:
            return self.values[slot]
        nearest = min(self._starts, key=lambda s: (abs(s - slot), s))
        return self.values[nearest]


@dataclass(frozen=True)
class VirtualTrip:
    trip_id: str
    direction: Direction
    cell_id: int
    hub_id: str
    depart_t: int
    arrive_t: int
    w_hat: float
    y_hat: float

    @property
    def origin(self):
        return self.cell_id if self.direction is Direction.ACCESS else self.hub_id

    @property
    def destination(self):
        return self.hub_id if self.direction is Direction.ACCESS else self.cell_id


def headway(w_hat: float, floor: int = DEFAULT_HEADWAY_FLOOR_S) -> int:
    return max(int(round(2.0 * w_hat)), int(floor))


def generate_departures(
    wait_at: Callable[[float], float] | SlotField,
    anchor_t0: int = DEFAULT_ANCHOR_S,
    floor: int = DEFAULT_HEADWAY_FLOOR_S,
) -> list[int]:
    """Departure times for one centroid/hub/direction over the service day.

    Forward from the anchor, each departure follows the previous one by the
    headway evaluated at the previous departure, up to 23:59. Backward, each
    departure precedes the next one by the headway evaluated at that next
    departure, down to 00:00.
    """
    if isinstance(wait_at, SlotField) and not wait_at:
        return []
    anchor_t0 = int(anchor_t0)
    forward = [anchor_t0]
    while True:
        t = forward[-1] + headway(wait_at(forward[-1]), floor)
        if t > LAST_DEPARTURE_S:
            break
        forward.append(t)
    backward = []
    t = anchor_t0
    while True:
        t = t - headway(wait_at(t), floor)
        if t < 0:
            break
        backward.append(t)
    return backward[::-1] + forward


def build_virtual_trips(
    departures: Iterable[int],
    cell_id: int,
    hub: Hub | str,
    direction: Direction,
    travel_at: Callable[[float], float],
    wait_at: Callable[[float], float] | None = None,
) -> tuple[list[VirtualTrip], int]:
    """One trip per departure; returns the trips and the count dropped past midnight."""
    hub_id = hub.id if isinstance(hub, Hub) else hub
    direction = Direction(direction)
    trips, dropped = [], 0
    for k, t in enumerate(departures):
        y = float(travel_at(t))
        arrive = int(t) + max(int(round(y)), 1)
        if arrive > DAY_S:
            dropped += 1
            continue
        trips.append(
            VirtualTrip(
                trip_id=f"VT_{hub_id}_{direction.code}_{cell_id}_{k:04d}",
                direction=direction,
                cell_id=cell_id,
                hub_id=hub_id,
                depart_t=int(t),
                arrive_t=arrive,
                w_hat=float(wait_at(t)) if wait_at is not None else float("nan"),
                y_hat=y,
            )
        )
    return trips, dropped


@dataclass(frozen=True)
class FieldKey:
    cell_id: int
    hub_id: str
    direction: Direction


def fields_from_estimates(estimates: Iterable[FieldEstimate]) -> dict[FieldKey, tuple[SlotField, SlotField]]:
    """Group field estimates into (wait, travel) slot fields per centroid/hub/direction."""
    waits: dict[FieldKey, dict[int, float]] = defaultdict(dict)
    travels: dict[FieldKey, dict[int, float]] = defaultdict(dict)
    lengths: dict[FieldKey, int] = {}
    for e in estimates:
        k = FieldKey(e.cell_id, e.key.hub_id, Direction(e.key.direction))
        waits[k][e.key.slot_start] = e.w_hat
        travels[k][e.key.slot_start] = e.y_hat
        lengths[k] = e.key.slot_length
    return {
        k: (SlotField(waits[k], lengths[k]), SlotField(travels[k], lengths[k]))
        for k in sorted(waits, key=lambda k: (k.hub_id, k.direction.value, k.cell_id))
    }


def synthesize(
    estimates: Iterable[FieldEstimate],
    anchor_t0: int = DEFAULT_ANCHOR_S,
    floor: int = DEFAULT_HEADWAY_FLOOR_S,
) -> tuple[list[VirtualTrip], int]:
    trips, dropped = [], 0
    for key, (wait, travel) in fields_from_estimates(estimates).items():
        deps = generate_departures(wait, anchor_t0, floor)
        t, d = build_virtual_trips(deps, key.cell_id, key.hub_id, key.direction, travel, wait)
        trips.extend(t)
        dropped += d
    return trips, dropped


# --- GTFS emission ----------------------------------------------------------

CALENDAR_HEADER = [
    "service_id", "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
    "start_date", "end_date",
]


def _calendar_row(service_date: str | None) -> dict[str, str]:
    row = {"service_id": SERVICE_ID}
    days = CALENDAR_HEADER[1:8]
    if service_date is None:
        row.update({d: "1" for d in days})
        row.update(start_date="20000101", end_date="20991231")
    else:
        weekday = dt.datetime.strptime(service_date, "%Y%m%d").date().weekday()
        row.update({d: "1" if i == weekday else "0" for i, d in enumerate(days)})
        row.update(start_date=service_date, end_date=service_date)
    return row


def _merge_header(header: list[str], required: list[str]) -> list[str]:
    return header + [c for c in required if c not in header]


def _write_core(out, stop_header, stop_rows, route_header, route_rows, trip_header, trip_rows, st_header, st_rows):
    write_table(out / "stops.txt", _merge_header(stop_header, ["stop_id", "stop_name", "stop_lat", "stop_lon"]), stop_rows)
    write_table(out / "routes.txt", _merge_header(route_header, ["route_id", "route_short_name", "route_long_name", "route_type"]), route_rows)
    write_table(out / "trips.txt", _merge_header(trip_header, ["route_id", "service_id", "trip_id"]), trip_rows)
    write_table(
        out / "stop_times.txt",
        _merge_header(st_header, ["trip_id", "arrival_time", "departure_time", "stop_id", "stop_sequence"]),
        st_rows,
    )


def emit_gtfs(
    trips: list[VirtualTrip],
    grid: Grid,
    hubs: list[Hub],
    base_gtfs_dir,
    out_dir,
    service_date: str | None = None,
) -> Path:
    """Write the base feed plus virtual stops, routes, trips and stop times.

    Each centroid used by a trip becomes stop ``VC_<cell_id>``; each
    (hub, direction) becomes one bus route. All virtual trips run on a
    dedicated service active on ``service_date`` (every day when None).
    """
    base, out = Path(base_gtfs_dir), Path(out_dir)
    if not base.is_dir():
        raise FormatError(f"base GTFS directory not found: {base}")
    for name in ("stops.txt", "routes.txt", "trips.txt", "stop_times.txt"):
        if not (base / name).exists():
            raise FormatError(f"base GTFS feed is missing {name}")
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    for f in sorted(base.iterdir()):
        if f.is_file():
            shutil.copyfile(f, out / f.name)

    hubs_by_id = {h.id: h for h in hubs}
    stop_header, stop_rows = read_table(out / "stops.txt")
    route_header, route_rows = read_table(out / "routes.txt")
    trip_header, trip_rows = read_table(out / "trips.txt")
    st_header, st_rows = read_table(out / "stop_times.txt")

    existing_stops = {r["stop_id"] for r in stop_rows}
    existing_routes = {r["route_id"] for r in route_rows}
    existing_trips = {r["trip_id"] for r in trip_rows}

    cells = sorted({t.cell_id for t in trips})
    for c in cells:
        sid = f"VC_{c}"
        if sid in existing_stops:
            raise FormatError(f"stop_id collision: '{sid}' already exists in the base feed")
        x, y = grid.centroids[c]
        if grid.projection is not None:
            x, y = (float(v) for v in grid.projection.inverse(x, y))
        stop_rows.append({"stop_id": sid, "stop_name": f"Virtual centroid {c}", "stop_lat": repr(float(y)), "stop_lon": repr(float(x))})
    for h in sorted({t.hub_id for t in trips}):
        if h not in hubs_by_id:
            raise FormatError(f"virtual trip references unknown hub '{h}'")
        if hubs_by_id[h].gtfs_stop_id not in existing_stops:
            raise FormatError(f"hub '{h}' links gtfs_stop_id '{hubs_by_id[h].gtfs_stop_id}' absent from the base feed")

    agency_header, agency_rows = ([], [])
    if (out / "agency.txt").exists():
        agency_header, agency_rows = read_table(out / "agency.txt")
    need_agency = "agency_id" in route_header or len(agency_rows) > 1
    if trips and need_agency:
        agency_header = _merge_header(agency_header, ["agency_id", "agency_name", "agency_url", "agency_timezone"])
        tz = agency_rows[0].get("agency_timezone", "UTC") if agency_rows else "UTC"
        agency_rows.append({"agency_id": AGENCY_ID, "agency_name": "Virtual shared mobility", "agency_url": "http://localhost", "agency_timezone": tz})
        write_table(out / "agency.txt", agency_header, agency_rows)

    route_keys = sorted({(t.hub_id, t.direction) for t in trips}, key=lambda k: (k[0], k[1].value))
    for hub_id, direction in route_keys:
        rid = f"VR_{hub_id}_{direction.code}"
        if rid in existing_routes:
            raise FormatError(f"route_id collision: '{rid}' already exists in the base feed")
        row = {"route_id": rid, "route_short_name": rid, "route_long_name": f"SMS {direction.value} {hub_id}", "route_type": "3"}
        if need_agency:
            row["agency_id"] = AGENCY_ID
        route_rows.append(row)

    for t in trips:
        if t.trip_id in existing_trips:
            raise FormatError(f"trip_id collision: '{t.trip_id}' already exists in the base feed")
        hub_stop = hubs_by_id[t.hub_id].gtfs_stop_id
        cell_stop = f"VC_{t.cell_id}"
        first, second = (cell_stop, hub_stop) if t.direction is Direction.ACCESS else (hub_stop, cell_stop)
        trip_rows.append({"route_id": f"VR_{t.hub_id}_{t.direction.code}", "service_id": SERVICE_ID, "trip_id": t.trip_id})
        dep, arr = format_gtfs_time(t.depart_t), format_gtfs_time(t.arrive_t)
        st_rows.append({"trip_id": t.trip_id, "arrival_time": dep, "departure_time": dep, "stop_id": first, "stop_sequence": "1"})
        st_rows.append({"trip_id": t.trip_id, "arrival_time": arr, "departure_time": arr, "stop_id": second, "stop_sequence": "2"})

    if trips:
        _write_core(out, stop_header, stop_rows, route_header, route_rows, trip_header, trip_rows, st_header, st_rows)

    cal_header, cal_rows = (list(CALENDAR_HEADER), [])
    if (out / "calendar.txt").exists():
        cal_header, cal_rows = read_table(out / "calendar.txt")
        cal_header = _merge_header(cal_header, CALENDAR_HEADER)
    if any(r["service_id"] == SERVICE_ID for r in cal_rows):
        raise FormatError(f"service_id collision: '{SERVICE_ID}' already exists in the base feed")
    cal_rows.append(_calendar_row(service_date))
    write_table(out / "calendar.txt", cal_header, cal_rows)
    return out


AUDIT_COLUMNS = ["trip_id", "direction", "cell_id", "hub_id", "depart", "arrive", "w_hat", "y_hat"]


def write_trip_audit(trips: list[VirtualTrip], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_COLUMNS)
        for t in trips:
            w.writerow([t.trip_id, t.direction.value, t.cell_id, t.hub_id, format_gtfs_time(t.depart_t),
                        format_gtfs_time(t.arrive_t), f"{t.w_hat:.6f}", f"{t.y_hat:.6f}"])
