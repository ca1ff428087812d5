"""Earliest-arrival queries and location-based accessibility scores."""

from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError
from .tessellation import Grid, locate
from .transit_graph import TimeExpandedGraph

DEFAULT_TAU_S = 3600
DEFAULT_SAMPLE_STEP_S = 600
DAY_S = 86400

PERIODS = {
    "morning_peak": (7 * 3600, 10 * 3600),
    "off_peak": (10 * 3600, 16 * 3600),
    "evening_peak": (16 * 3600, 19 * 3600),
}


@dataclass
class ArrivalProfile:
    origin: int
    depart_t: float
    arrivals: np.ndarray  # per cell id, inf when unreachable


class AccessibilityScore(NamedTuple):
    origin: int
    depart_t: float
    tau: float
    score: int
    reachable_cells: int


class WalkLinks:
    """Stop-to-centroid walking legs for one (graph, grid) pair."""

    def __init__(self, graph: TimeExpandedGraph, grid: Grid, walk_speed: float, max_walk: float):
        self.walk_speed = walk_speed
        self.max_walk = max_walk
        self.reach = max_walk * walk_speed
        self.cell_tree = cKDTree(grid.centroids) if len(grid) else None
        self.stop_tree = cKDTree(graph.stop_xy) if len(graph.stop_xy) else None
        self.stop_cells: list[tuple[np.ndarray, np.ndarray]] = []
        for xy in graph.stop_xy:
            cells, walk = self.cells_near(xy)
            self.stop_cells.append((cells, walk))

    def _near(self, tree, points, xy):
        if tree is None:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        idx = np.array(sorted(tree.query_ball_point(xy, r=self.reach * (1 + 1e-12))), dtype=np.int64)
        if len(idx) == 0:
            return idx, np.zeros(0)
        walk = np.hypot(points[idx, 0] - xy[0], points[idx, 1] - xy[1]) / self.walk_speed
        ok = walk <= self.max_walk
        return idx[ok], walk[ok]

    def cells_near(self, xy):
        return self._near(self.cell_tree, self.cell_tree.data if self.cell_tree is not None else None, xy)

    def stops_near(self, xy):
        return self._near(self.stop_tree, self.stop_tree.data if self.stop_tree is not None else None, xy)


def _scan(graph: TimeExpandedGraph, stop_reach: np.ndarray, depart_t: float, horizon_end: float) -> np.ndarray:
    """Earliest vehicle arrival per stop, scanning ride edges in time order.

    A ride edge is taken when its tail departure node was reached along the
    same trip (ride then dwell) or when its departure stop has been reached on
    foot in time (transfer edges). Ride edges sharing a departure time are iterated
    to a fixpoint so zero-duration chains are handled.
    """
    cache = getattr(graph, "_scan_cache", None)
    if cache is None:
        cache = (
            graph.conn_dep_time.tolist(),
            graph.conn_arr_time.tolist(),
            graph.conn_dep_stop.tolist(),
            graph.conn_arr_stop.tolist(),
            graph.conn_tail.tolist(),
            graph.conn_head.tolist(),
        )
        graph._scan_cache = cache
    dep_t, arr_t, dep_s, arr_s, tail, head = cache
    reach = stop_reach.tolist()
    stop_arr = [math.inf] * len(reach)
    # departure nodes reached in-vehicle; an arrival node's dwell partner is id + 1
    on_board = bytearray(len(graph.nodes) + 1)
    buffer = graph.transfer_buffer
    footpaths = graph.footpaths

    i = int(np.searchsorted(graph.conn_dep_time, depart_t, side="left"))
    end = int(np.searchsorted(graph.conn_dep_time, horizon_end, side="right"))
    while i < end:
        t = dep_t[i]
        j = i + 1
        while j < end and dep_t[j] == t:
            j += 1
        pending = list(range(i, j))
        changed = True
        while changed and pending:
            changed = False
            rest = []
            for k in pending:
                if on_board[tail[k]] or reach[dep_s[k]] <= t:
                    on_board[head[k] + 1] = 1
                    ta, s = arr_t[k], arr_s[k]
                    if ta < stop_arr[s]:
                        stop_arr[s] = ta
                        for s2, w in footpaths[s]:
                            r = ta + w + buffer
                            if r < reach[s2]:
                                reach[s2] = r
                    changed = True
                else:
                    rest.append(k)
            pending = rest
        i = j
    return np.array(stop_arr, dtype=float)


def earliest_arrival(
    graph: TimeExpandedGraph,
    origin,
    depart_t: float,
    grid: Grid,
    walk_speed: float | None = None,
    max_walk: float | None = None,
    *,
    horizon: float | None = None,
    links: WalkLinks | None = None,
    origin_cell: int | None = None,
) -> ArrivalProfile:
    """Earliest arrival at every centroid when leaving ``origin`` at ``depart_t``.

    A traveller may walk straight to a centroid, or walk to a stop, ride and
    transfer through the graph, then walk from the alighting stop. Every walk
    leg is capped at ``max_walk``. With ``horizon`` set, arrivals later than
    ``depart_t + horizon`` may be reported as unreachable.
    """
    walk_speed = graph.walk_speed if walk_speed is None else walk_speed
    max_walk = graph.max_walk if max_walk is None else max_walk
    if links is None or links.walk_speed != walk_speed or links.max_walk != max_walk:
        links = WalkLinks(graph, grid, walk_speed, max_walk)
    ox, oy = float(origin[0]), float(origin[1])
    if origin_cell is None:
        origin_cell = locate(grid, (ox, oy))

    stop_reach = np.full(len(graph.stop_ids), math.inf)
    near_stops, walk = links.stops_near((ox, oy))
    stop_reach[near_stops] = depart_t + walk
    horizon_end = math.inf if horizon is None else depart_t + horizon
    stop_arr = _scan(graph, stop_reach, depart_t, horizon_end)

    arrivals = np.full(len(grid), math.inf)
    cells, walk = links.cells_near((ox, oy))
    arrivals[cells] = depart_t + walk
    for s in np.flatnonzero(np.isfinite(stop_arr)):
        cells, walk = links.stop_cells[s]
        if len(cells):
            np.minimum.at(arrivals, cells, stop_arr[s] + walk)
    arrivals[origin_cell] = depart_t
    return ArrivalProfile(origin_cell, depart_t, arrivals)


def accessibility_score(profile: ArrivalProfile, grid: Grid, tau: float = DEFAULT_TAU_S) -> AccessibilityScore:
    """Opportunities in all cells reachable within ``tau``."""
    reachable = profile.arrivals <= profile.depart_t + tau
    score = int(grid.opportunities[reachable].sum())
    return AccessibilityScore(profile.origin, profile.depart_t, tau, score, int(reachable.sum()))


def sample_times(period: tuple[int, int], sample_step: int) -> list[int]:
    start, end = period
    if not (0 <= start < end <= DAY_S):
        raise InvalidParameterError(f"invalid period {period}")
    if sample_step <= 0 or (end - start) % sample_step:
        raise InvalidParameterError(f"sample_step {sample_step} must divide the period length {end - start}")
    return list(range(start, end, sample_step))


class PeriodScore(NamedTuple):
    score: float
    reachable_cells: float


_WORKER: dict = {}


def _init_worker(graph, grid, tau, times):
    _WORKER.update(graph=graph, grid=grid, tau=tau, times=times)
    _WORKER["links"] = WalkLinks(graph, grid, graph.walk_speed, graph.max_walk)


def _score_origins(origins: list[int]) -> list[tuple[int, float, float]]:
    g, grid, tau, times, links = (_WORKER[k] for k in ("graph", "grid", "tau", "times", "links"))
    out = []
    for o in origins:
        scores, reach = [], []
        for t in times:
            prof = earliest_arrival(g, grid.centroids[o], t, grid, horizon=tau, links=links, origin_cell=o)
            s = accessibility_score(prof, grid, tau)
            scores.append(s.score)
            reach.append(s.reachable_cells)
        out.append((o, float(np.mean(scores)), float(np.mean(reach))))
    return out


def period_scores(
    graph: TimeExpandedGraph,
    grid: Grid,
    origins: Iterable[int] | None = None,
    period: tuple[int, int] = PERIODS["morning_peak"],
    sample_step: int = DEFAULT_SAMPLE_STEP_S,
    tau: float = DEFAULT_TAU_S,
    workers: int = 1,
) -> dict[int, PeriodScore]:
    """Mean score and mean reachable-cell count per origin over a period."""
    times = sample_times(period, sample_step)
    origins = sorted(range(len(grid)) if origins is None else set(origins))
    if workers <= 1 or len(origins) < 2:
        _init_worker(graph, grid, tau, times)
        rows = _score_origins(origins)
    else:
        chunks = [origins[k::workers] for k in range(workers)]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker, initargs=(graph, grid, tau, times)) as ex:
            rows = [r for part in ex.map(_score_origins, chunks) for r in part]
    return {o: PeriodScore(s, r) for o, s, r in sorted(rows)}


def score_period(
    graph: TimeExpandedGraph,
    grid: Grid,
    origins: Iterable[int] | None = None,
    period: tuple[int, int] = PERIODS["morning_peak"],
    sample_step: int = DEFAULT_SAMPLE_STEP_S,
    tau: float = DEFAULT_TAU_S,
    workers: int = 1,
) -> dict[int, float]:
    """Mean accessibility score per origin centroid over a half-open period."""
    return {o: ps.score for o, ps in period_scores(graph, grid, origins, period, sample_step, tau, workers).items()}


def improvement(base: Mapping[int, float], augmented: Mapping[int, float]) -> dict[int, float]:
    if set(base) != set(augmented):
        raise InvalidParameterError("score maps cover different cells")
    return {c: augmented[c] - base[c] for c in sorted(base)}
