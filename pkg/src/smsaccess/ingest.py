"""Loading SMS trip observations, feeder areas and timeslot grouping."""

from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import FormatError, InvalidParameterError
from .tessellation import Grid, LocalProjection, Point, cells_within, locate_many

DAY_S = 86400
DEFAULT_SLOT_S = 3600
DEFAULT_SNAP_RADIUS_M = 50.0

OBSERVATION_COLUMNS = (
    "request_time",
    "origin_lon",
    "origin_lat",
    "dest_lon",
    "dest_lat",
    "hub_id",
    "wait_s",
    "travel_s",
)
HUB_COLUMNS = ("hub_id", "lon", "lat", "gtfs_stop_id")


class Direction(str, enum.Enum):
    ACCESS = "access"
    EGRESS = "egress"

    @property
    def code(self) -> str:
        return "A" if self is Direction.ACCESS else "E"


@dataclass(frozen=True)
class Hub:
    id: str
    location: Point
    gtfs_stop_id: str


@dataclass(frozen=True)
class TripObservation:
    request_time: int
    origin: Point
    destination: Point
    hub_id: str
    wait: float
    travel: float
    direction: Direction
    row: int = -1

    @property
    def location(self) -> Point:
        """The non-hub endpoint: where the user is (access) or goes (egress)."""
        return self.origin if self.direction is Direction.ACCESS else self.destination


@dataclass
class LoadedObservations:
    observations: list[TripObservation]
    rejects: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_access(self) -> int:
        return sum(o.direction is Direction.ACCESS for o in self.observations)

    @property
    def n_egress(self) -> int:
        return sum(o.direction is Direction.EGRESS for o in self.observations)

    @property
    def n_rejected(self) -> int:
        return len(self.rejects)

    @property
    def n_rows(self) -> int:
        return len(self.observations) + len(self.rejects)


@dataclass(frozen=True)
class FeederArea:
    hub_id: str
    radius: float
    cell_ids: frozenset[int]


class TimeslotKey(NamedTuple):
    hub_id: str
    direction: Direction
    slot_start: int
    slot_length: int


def parse_clock(text: str) -> int:
    """``HH:MM:SS`` (fractional seconds truncated) or plain seconds to int seconds."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"bad time '{text}'")
        h, m = int(parts[0]), int(parts[1])
        s = float(parts[2])
        if not (0 <= m < 60 and 0 <= s < 60 and h >= 0):
            raise ValueError(f"bad time '{text}'")
        return h * 3600 + m * 60 + math.floor(s)
    return math.floor(float(text))


def _project(coords: np.ndarray, projection: LocalProjection | None) -> np.ndarray:
    if projection is None or len(coords) == 0:
        return coords
    x, y = projection.forward(coords[:, 0], coords[:, 1])
    return np.column_stack([x, y])


def load_hubs(path, projection: LocalProjection | None = None, stop_ids: Iterable[str] | None = None) -> list[Hub]:
    """Read the hubs CSV. ``stop_ids`` (GTFS stops) validates the stop links."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            for col in HUB_COLUMNS:
                if col not in (reader.fieldnames or []):
                    raise FormatError(f"{path.name}: missing column '{col}'")
            rows = list(reader)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    coords = _project(np.array([(float(r["lon"]), float(r["lat"])) for r in rows]).reshape(-1, 2), projection)
    known = set(stop_ids) if stop_ids is not None else None
    hubs, seen = [], set()
    for r, (x, y) in zip(rows, coords):
        if r["hub_id"] in seen:
            raise FormatError(f"{path.name}: duplicate hub_id '{r['hub_id']}'")
        seen.add(r["hub_id"])
        if known is not None and r["gtfs_stop_id"] not in known:
            raise FormatError(f"{path.name}: hub '{r['hub_id']}' links unknown gtfs_stop_id '{r['gtfs_stop_id']}'")
        hubs.append(Hub(r["hub_id"], Point(float(x), float(y)), r["gtfs_stop_id"]))
    return hubs


def _classify(origin, dest, hub_id, hubs_by_id, snap_radius):
    """Return (direction, hub_id) or (None, reason)."""

    def near(p, hub):
        return math.hypot(p[0] - hub.location.x, p[1] - hub.location.y) <= snap_radius

    if hub_id:
        hub = hubs_by_id.get(hub_id)
        if hub is None:
            return None, "unknown hub"
        candidates = [hub]
    else:
        candidates = list(hubs_by_id.values())

    def nearest(p):
        best = None
        for hub in candidates:
            if near(p, hub):
                d = math.hypot(p[0] - hub.location.x, p[1] - hub.location.y)
                if best is None or d < best[0]:
                    best = (d, hub.id)
        return None if best is None else best[1]

    to_hub, from_hub = nearest(dest), nearest(origin)
    if to_hub is not None and from_hub is not None:
        return None, "ambiguous"
    if to_hub is not None:
        return Direction.ACCESS, to_hub
    if from_hub is not None:
        return Direction.EGRESS, from_hub
    return None, "unclassifiable"


def load_observations(
    path,
    hubs: list[Hub],
    snap_radius: float = DEFAULT_SNAP_RADIUS_M,
    *,
    projection: LocalProjection | None = None,
    grid: Grid | None = None,
    max_wait: float | None = None,
) -> LoadedObservations:
    """Parse the observations CSV and classify each trip as access or egress.

    A trip is access when its destination snaps to the hub and egress when its
    origin does. An optional ``direction`` column overrides that. Rows that
    fail are kept out of the result and listed in ``rejects`` with a reason.
    When ``grid`` is given, trips whose non-hub endpoint falls outside the
    grid bbox are rejected.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            for col in OBSERVATION_COLUMNS:
                if col not in header:
                    raise FormatError(f"{path.name}: missing column '{col}'")
            rows = list(reader)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    has_direction = "direction" in header
    hubs_by_id = {h.id: h for h in hubs}
    result = LoadedObservations([])

    parsed = []
    for n, r in enumerate(rows, start=1):
        try:
            t = parse_clock(r["request_time"])
            o = (float(r["origin_lon"]), float(r["origin_lat"]))
            d = (float(r["dest_lon"]), float(r["dest_lat"]))
            w, y = float(r["wait_s"]), float(r["travel_s"])
        except (ValueError, TypeError):
            result.rejects.append((n, "unparsable"))
            continue
        if not all(math.isfinite(v) for v in (*o, *d, w, y)):
            result.rejects.append((n, "unparsable"))
            continue
        parsed.append((n, r, t, o, d, w, y))

    ends = _project(np.array([p[3] for p in parsed] + [p[4] for p in parsed], dtype=float).reshape(-1, 2), projection)
    origins, dests = ends[: len(parsed)], ends[len(parsed):]

    for (n, r, t, _, _, w, y), origin, dest in zip(parsed, origins, dests):
        if not 0 <= t < DAY_S:
            result.rejects.append((n, "request time outside service day"))
            continue
        if w < 0:
            result.rejects.append((n, "negative wait"))
            continue
        if y < 0:
            result.rejects.append((n, "negative travel"))
            continue
        if max_wait is not None and w > max_wait:
            result.rejects.append((n, "wait above cap"))
            continue
        hub_id = (r.get("hub_id") or "").strip()
        forced = (r.get("direction") or "").strip().lower() if has_direction else ""
        if forced:
            try:
                direction = Direction(forced)
            except ValueError:
                result.rejects.append((n, "bad direction"))
                continue
            hub_end = dest if direction is Direction.ACCESS else origin
            if not hub_id:
                _, hub_id = _classify(hub_end, hub_end, "", hubs_by_id, snap_radius)
                if hub_id not in hubs_by_id:
                    result.rejects.append((n, "unclassifiable"))
                    continue
            elif hub_id not in hubs_by_id:
                result.rejects.append((n, "unknown hub"))
                continue
        else:
            direction, hub_id = _classify(origin, dest, hub_id, hubs_by_id, snap_radius)
            if direction is None:
                result.rejects.append((n, hub_id))
                continue
        obs = TripObservation(
            request_time=t,
            origin=Point(float(origin[0]), float(origin[1])),
            destination=Point(float(dest[0]), float(dest[1])),
            hub_id=hub_id,
            wait=w,
            travel=y,
            direction=direction,
            row=n,
        )
        if grid is not None:
            minx, miny, maxx, maxy = grid.bbox
            px, py = obs.location
            if not (minx <= px <= maxx and miny <= py <= maxy):
                result.rejects.append((n, "outside study area"))
                continue
        result.observations.append(obs)
    result.rejects.sort()
    return result


def feeder_area(hub: Hub, obs: list[TripObservation], grid: Grid) -> FeederArea:
    """Disc around the hub reaching the furthest observed trip cell.

    The radius is measured from the hub to the centroid of the cell holding
    each observation's non-hub endpoint.
    """
    if not obs:
        return FeederArea(hub.id, 0.0, frozenset())
    cells = locate_many(grid, [o.location for o in obs])
    cells = cells[cells >= 0]
    if len(cells) == 0:
        return FeederArea(hub.id, 0.0, frozenset())
    ctr = grid.centroids[cells]
    radius = float(np.hypot(ctr[:, 0] - hub.location.x, ctr[:, 1] - hub.location.y).max())
    members = cells_within(grid, hub.location, radius)
    return FeederArea(hub.id, radius, frozenset(int(c) for c in members))


def group_by_timeslot(
    obs: list[TripObservation], slot_length: int = DEFAULT_SLOT_S
) -> dict[TimeslotKey, list[TripObservation]]:
    """Bucket observations by (hub, direction, half-open timeslot)."""
    if slot_length <= 0 or DAY_S % slot_length:
        raise InvalidParameterError(f"slot_length must divide 86400, got {slot_length}")
    buckets: dict[TimeslotKey, list[TripObservation]] = defaultdict(list)
    for o in obs:
        start = (o.request_time // slot_length) * slot_length
        buckets[TimeslotKey(o.hub_id, o.direction, int(start), int(slot_length))].append(o)
    return dict(sorted(buckets.items(), key=lambda kv: (kv[0].hub_id, kv[0].direction.value, kv[0].slot_start)))


# --- artifact I/O -----------------------------------------------------------

NORMALIZED_COLUMNS = ["row", "request_s", "hub_id", "direction", "origin_x", "origin_y", "dest_x", "dest_y", "wait_s", "travel_s"]


def write_observations(obs: list[TripObservation], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NORMALIZED_COLUMNS)
        for o in obs:
            w.writerow(
                [o.row, o.request_time, o.hub_id, o.direction.value, repr(o.origin.x), repr(o.origin.y),
                 repr(o.destination.x), repr(o.destination.y), repr(o.wait), repr(o.travel)]
            )


def read_observations(path) -> list[TripObservation]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing upstream artifact {path}")
    out = []
    with path.open(newline="") as fh:
        for r in csv.DictReader(fh):
            out.append(
                TripObservation(
                    request_time=int(r["request_s"]),
                    origin=Point(float(r["origin_x"]), float(r["origin_y"])),
                    destination=Point(float(r["dest_x"]), float(r["dest_y"])),
                    hub_id=r["hub_id"],
                    wait=float(r["wait_s"]),
                    travel=float(r["travel_s"]),
                    direction=Direction(r["direction"]),
                    row=int(r["row"]),
                )
            )
    return out


def write_rejects(rejects: list[tuple[int, str]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "reason"])
        w.writerows(rejects)


def write_feeder_areas(areas: list[FeederArea], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hub_id", "radius", "cell_id"])
        for a in areas:
            if not a.cell_ids:
                w.writerow([a.hub_id, repr(a.radius), ""])
            for c in sorted(a.cell_ids):
                w.writerow([a.hub_id, repr(a.radius), c])


def read_feeder_areas(path) -> dict[str, FeederArea]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing upstream artifact {path}")
    radius: dict[str, float] = {}
    cells: dict[str, set[int]] = defaultdict(set)
    with path.open(newline="") as fh:
        for r in csv.DictReader(fh):
            radius[r["hub_id"]] = float(r["radius"])
            if r["cell_id"]:
                cells[r["hub_id"]].add(int(r["cell_id"]))
    return {h: FeederArea(h, radius[h], frozenset(cells[h])) for h in radius}
