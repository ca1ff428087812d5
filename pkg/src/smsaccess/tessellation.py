"""Hexagonal tessellation of the study area.

Hexagons are flat-top. The lattice is anchored so that one centroid sits on
the lower-left corner of the bounding box; columns are spaced ``1.5 * side``
apart and odd columns are shifted up by half a row (``sqrt(3)/2 * side``).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, InvalidParameterError, OutOfBoundsError

EARTH_RADIUS_M = 6371008.8
DEFAULT_SIDE_M = 1000.0
SQRT3 = math.sqrt(3.0)


class Point(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class LocalProjection:
    """Equirectangular projection about a reference lon/lat, in meters."""

    lon0: float
    lat0: float

    @property
    def _kx(self) -> float:
        return EARTH_RADIUS_M * math.cos(math.radians(self.lat0)) * math.pi / 180.0

    @property
    def _ky(self) -> float:
        return EARTH_RADIUS_M * math.pi / 180.0

    def forward(self, lon, lat):
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        return (lon - self.lon0) * self._kx, (lat - self.lat0) * self._ky

    def inverse(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return x / self._kx + self.lon0, y / self._ky + self.lat0

    @classmethod
    def for_bbox(cls, min_lon, min_lat, max_lon, max_lat) -> "LocalProjection":
        return cls((min_lon + max_lon) / 2.0, (min_lat + max_lat) / 2.0)


@dataclass(frozen=True)
class Cell:
    id: int
    centroid: Point
    side: float
    opportunities: int


@dataclass(frozen=True, eq=False)
class Grid:
    """A set of hexagonal cells covering ``bbox`` (minx, miny, maxx, maxy).

    ``centroids`` is an (n, 2) float array and ``lattice`` the matching
    (column, row) integer indices; row ``i`` of both is cell ``i``.
    """

    side: float
    bbox: tuple[float, float, float, float]
    centroids: np.ndarray
    lattice: np.ndarray
    opportunities: np.ndarray
    projection: LocalProjection | None = None
    unassigned: int = 0
    _tree: cKDTree = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_tree", cKDTree(self.centroids))

    def __len__(self) -> int:
        return len(self.centroids)

    @property
    def cells(self) -> list[Cell]:
        return [
            Cell(i, Point(float(x), float(y)), self.side, int(o))
            for i, ((x, y), o) in enumerate(zip(self.centroids, self.opportunities))
        ]

    def centroid(self, cell_id: int) -> Point:
        x, y = self.centroids[cell_id]
        return Point(float(x), float(y))

    def hexagon(self, cell_id: int) -> np.ndarray:
        return hexagon_vertices(self.centroids[cell_id], self.side)

    def same_as(self, other: "Grid") -> bool:
        return (
            self.side == other.side
            and self.bbox == other.bbox
            and np.array_equal(self.centroids, other.centroids)
            and np.array_equal(self.lattice, other.lattice)
            and np.array_equal(self.opportunities, other.opportunities)
        )


def hexagon_vertices(center, side: float) -> np.ndarray:
    cx, cy = center
    angles = np.radians(np.arange(0, 360, 60))
    return np.column_stack([cx + side * np.cos(angles), cy + side * np.sin(angles)])


def lattice_centroid(col: int, row: int, origin: tuple[float, float], side: float) -> tuple[float, float]:
    x0, y0 = origin
    return x0 + 1.5 * side * col, y0 + SQRT3 * side * (row + 0.5 * (col % 2))


# Separating axes for an axis-aligned box against a flat-top hexagon.
_AXES = np.array(
    [
        [1.0, 0.0],
        [0.0, 1.0],
        [math.cos(math.radians(30)), math.sin(math.radians(30))],
        [math.cos(math.radians(150)), math.sin(math.radians(150))],
    ]
)


def _hexagon_touches_box(center, side, box) -> bool:
    minx, miny, maxx, maxy = box
    corners = np.array([[minx, miny], [maxx, miny], [maxx, maxy], [minx, maxy]])
    hexagon = hexagon_vertices(center, side)
    for axis in _AXES:
        a = corners @ axis
        b = hexagon @ axis
        if a.max() < b.min() or b.max() < a.min():
            return False
    return True


def tessellate(
    bbox: Sequence[float],
    side: float = DEFAULT_SIDE_M,
    projection: LocalProjection | None = None,
) -> Grid:
    """Cover ``bbox`` with flat-top hexagons of the given side length.

    Every lattice cell whose (closed) hexagon intersects the (closed) box is
    kept. Cell ids follow (column, row) order.
    """
    if not side > 0 or not math.isfinite(side):
        raise InvalidParameterError(f"hexagon side must be > 0, got {side}")
    minx, miny, maxx, maxy = (float(v) for v in bbox)
    if not all(math.isfinite(v) for v in (minx, miny, maxx, maxy)):
        raise InvalidParameterError("bbox coordinates must be finite")
    if maxx < minx or maxy < miny:
        raise InvalidParameterError(f"inverted bbox {bbox}")

    origin = (minx, miny)
    box = (minx, miny, maxx, maxy)
    col_lo = math.floor(-side / (1.5 * side)) - 1
    col_hi = math.ceil((maxx - minx + side) / (1.5 * side)) + 1
    row_lo = math.floor(-SQRT3 * side / (SQRT3 * side)) - 1
    row_hi = math.ceil((maxy - miny + SQRT3 * side) / (SQRT3 * side)) + 1

    kept = []
    for col in range(col_lo, col_hi + 1):
        for row in range(row_lo, row_hi + 1):
            center = lattice_centroid(col, row, origin, side)
            if _hexagon_touches_box(center, side, box):
                kept.append((col, row, center))

    lattice = np.array([(c, r) for c, r, _ in kept], dtype=np.int64).reshape(-1, 2)
    centroids = np.array([ctr for _, _, ctr in kept], dtype=float).reshape(-1, 2)
    return Grid(
        side=float(side),
        bbox=box,
        centroids=centroids,
        lattice=lattice,
        opportunities=np.zeros(len(kept), dtype=np.int64),
        projection=projection,
    )


def _in_expanded_bbox(grid: Grid, xy: np.ndarray) -> np.ndarray:
    margin = 2.0 * grid.side
    minx, miny, maxx, maxy = grid.bbox
    return (
        (xy[:, 0] >= minx - margin)
        & (xy[:, 0] <= maxx + margin)
        & (xy[:, 1] >= miny - margin)
        & (xy[:, 1] <= maxy + margin)
    )


def locate_many(grid: Grid, xy) -> np.ndarray:
    """Vectorised :func:`locate`; out-of-bounds points map to -1."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    out = np.full(len(xy), -1, dtype=np.int64)
    if len(xy) == 0 or len(grid) == 0:
        return out
    inside = _in_expanded_bbox(grid, xy) & np.isfinite(xy).all(axis=1)
    if not inside.any():
        return out
    k = min(7, len(grid))
    dist, idx = grid._tree.query(xy[inside], k=k)
    dist = dist.reshape(-1, k)
    idx = idx.reshape(-1, k)
    tol = 1e-9 * grid.side
    # lowest id among the (near-)equidistant nearest centroids
    tied = dist <= dist[:, :1] + tol
    masked = np.where(tied, idx, np.iinfo(np.int64).max)
    out[inside] = masked.min(axis=1)
    return out


def locate(grid: Grid, p) -> int:
    """Id of the cell whose centroid is nearest to ``p`` (lowest id on ties)."""
    cell = int(locate_many(grid, [p])[0])
    if cell < 0:
        raise OutOfBoundsError(f"point {tuple(p)} lies outside the grid bounds")
    return cell


def assign_opportunities(grid: Grid, people) -> Grid:
    """Count people per cell. Points outside the grid are tallied in ``unassigned``."""
    xy = np.asarray(people, dtype=float).reshape(-1, 2)
    ids = locate_many(grid, xy)
    located = ids[ids >= 0]
    counts = np.bincount(located, minlength=len(grid)).astype(np.int64)
    return replace(grid, opportunities=counts, unassigned=int((ids < 0).sum()))


def cells_within(grid: Grid, center, radius: float) -> np.ndarray:
    """Sorted ids of cells whose centroid is within ``radius`` of ``center``."""
    d = np.hypot(grid.centroids[:, 0] - center[0], grid.centroids[:, 1] - center[1])
    return np.flatnonzero(d <= radius * (1 + 1e-12) + 1e-9)


# --- file I/O ---------------------------------------------------------------


def read_points_csv(path, metric: bool = False) -> tuple[list[str], np.ndarray]:
    """Read an ``id,lon,lat`` (or ``id,x,y`` when ``metric``) CSV."""
    cols = ("x", "y") if metric else ("lon", "lat")
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            for col in ("id", *cols):
                if col not in header:
                    raise FormatError(f"{path.name}: missing column '{col}'")
            ids, coords = [], []
            for row in reader:
                ids.append(row["id"])
                coords.append((float(row[cols[0]]), float(row[cols[1]])))
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return ids, np.array(coords, dtype=float).reshape(-1, 2)


def grid_to_geojson(grid: Grid, properties: dict[str, Sequence] | None = None) -> dict:
    """Hexagon polygons as a FeatureCollection.

    Coordinates are lon/lat when the grid carries a projection, planar
    meters otherwise. ``properties`` adds per-cell columns.
    """
    features = []
    for cell_id in range(len(grid)):
        ring = grid.hexagon(cell_id)
        if grid.projection is not None:
            lon, lat = grid.projection.inverse(ring[:, 0], ring[:, 1])
            ring = np.column_stack([lon, lat])
        coords = [[round(float(x), 9), round(float(y), 9)] for x, y in ring]
        coords.append(coords[0])
        props = {"cell_id": cell_id, "opportunities": int(grid.opportunities[cell_id])}
        for name, values in (properties or {}).items():
            props[name] = values[cell_id]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [coords]},
                "properties": props,
            }
        )
    return {"type": "FeatureCollection", "features": features}


def save_grid(grid: Grid, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "side": grid.side,
        "bbox": list(grid.bbox),
        "projection": None
        if grid.projection is None
        else {"lon0": grid.projection.lon0, "lat0": grid.projection.lat0},
        "n_cells": len(grid),
        "unassigned_people": grid.unassigned,
    }
    (out_dir / "grid.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with (out_dir / "cells.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell_id", "col", "row", "x", "y", "opportunities"])
        for i, ((c, r), (x, y), o) in enumerate(zip(grid.lattice, grid.centroids, grid.opportunities)):
            writer.writerow([i, int(c), int(r), repr(float(x)), repr(float(y)), int(o)])
    (out_dir / "grid.geojson").write_text(json.dumps(grid_to_geojson(grid)) + "\n")


def load_grid(out_dir) -> Grid:
    out_dir = Path(out_dir)
    meta_path, cells_path = out_dir / "grid.json", out_dir / "cells.csv"
    for p in (meta_path, cells_path):
        if not p.exists():
            raise FormatError(f"missing upstream artifact {p}")
    meta = json.loads(meta_path.read_text())
    lattice, centroids, opps = [], [], []
    with cells_path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            lattice.append((int(row["col"]), int(row["row"])))
            centroids.append((float(row["x"]), float(row["y"])))
            opps.append(int(row["opportunities"]))
    proj = meta.get("projection")
    return Grid(
        side=float(meta["side"]),
        bbox=tuple(float(v) for v in meta["bbox"]),
        centroids=np.array(centroids, dtype=float).reshape(-1, 2),
        lattice=np.array(lattice, dtype=np.int64).reshape(-1, 2),
        opportunities=np.array(opps, dtype=np.int64),
        projection=None if proj is None else LocalProjection(proj["lon0"], proj["lat0"]),
        unassigned=int(meta.get("unassigned_people", 0)),
    )


def bbox_of(points: Iterable[Sequence[float]]) -> tuple[float, float, float, float]:
    arr = np.asarray(list(points), dtype=float).reshape(-1, 2)
    if len(arr) == 0:
        raise InvalidParameterError("cannot derive a bounding box from zero points")
    return (float(arr[:, 0].min()), float(arr[:, 1].min()), float(arr[:, 0].max()), float(arr[:, 1].max()))
