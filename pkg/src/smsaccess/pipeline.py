"""Stage-by-stage pipeline. Every stage reads its inputs from files written by
the previous stages, so each can be re-run in isolation."""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing
import shutil
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import accessibility as acc
from .config import PATH_KEYS, RunConfig
from .errors import FormatError, SmsAccessError, StageError
from .geostat import BucketResult, FieldEstimate, KrigingConfig, Method, krige_bucket
from .ingest import (
    Direction,
    Hub,
    TimeslotKey,
    feeder_area,
    group_by_timeslot,
    load_hubs,
    load_observations,
    read_feeder_areas,
    read_observations,
    write_feeder_areas,
    write_observations,
    write_rejects,
)
from .synth import emit_gtfs, synthesize, write_trip_audit
from .tessellation import (
    LocalProjection,
    Point,
    assign_opportunities,
    bbox_of,
    grid_to_geojson,
    load_grid,
    read_points_csv,
    save_grid,
    tessellate,
)
from .transit_graph import build_graph, parse_gtfs, read_table, read_walk_matrix

log = logging.getLogger(__name__)

STAGES = ("tessellate", "ingest", "estimate", "synthesize", "score", "diff")
FEEDS = ("base", "augmented")


def _require(cfg: RunConfig, *names: str) -> None:
    for n in names:
        if getattr(cfg, n) is None:
            raise FormatError(f"config is missing '{n}'")


def _dirs(cfg: RunConfig) -> dict[str, Path]:
    root = Path(cfg.out_dir)
    return {s: root / s for s in ("grid", "ingest", "estimate", "synth", "scores", "diff")} | {"root": root}


def _fmt(v: float) -> str:
    return f"{v:.6f}"


# --- stages -----------------------------------------------------------------


def stage_tessellate(cfg: RunConfig, workers: int = 1) -> dict:
    _require(cfg, "people_csv")
    _, people = read_points_csv(cfg.people_csv, metric=cfg.metric_coordinates)
    bbox = cfg.bbox if cfg.bbox is not None else bbox_of(people)
    if cfg.metric_coordinates:
        projection = None
        box = bbox
    else:
        projection = LocalProjection.for_bbox(*bbox)
        x, y = projection.forward([bbox[0], bbox[2]], [bbox[1], bbox[3]])
        box = (float(x[0]), float(y[0]), float(x[1]), float(y[1]))
        if len(people):
            px, py = projection.forward(people[:, 0], people[:, 1])
            people = np.column_stack([px, py])
    grid = assign_opportunities(tessellate(box, cfg.hex_side, projection), people)
    save_grid(grid, _dirs(cfg)["grid"])
    return {
        "cells": len(grid),
        "people_total": int(len(people)),
        "people_located": int(grid.opportunities.sum()),
        "people_unassigned": grid.unassigned,
    }


def _read_hubs_normalized(path: Path) -> list[Hub]:
    if not path.exists():
        raise FormatError(f"missing upstream artifact {path}")
    with path.open(newline="") as fh:
        return [Hub(r["hub_id"], Point(float(r["x"]), float(r["y"])), r["gtfs_stop_id"]) for r in csv.DictReader(fh)]


def stage_ingest(cfg: RunConfig, workers: int = 1) -> dict:
    _require(cfg, "observations_csv", "hubs_csv", "gtfs_dir")
    d = _dirs(cfg)
    grid = load_grid(d["grid"])
    stops_path = Path(cfg.gtfs_dir) / "stops.txt"
    if not stops_path.exists():
        raise FormatError(f"GTFS feed is missing {stops_path}")
    stop_ids = [r["stop_id"] for r in read_table(stops_path)[1]]
    hubs = load_hubs(cfg.hubs_csv, grid.projection, stop_ids)
    loaded = load_observations(
        cfg.observations_csv, hubs, cfg.snap_radius, projection=grid.projection, grid=grid, max_wait=cfg.max_wait
    )
    areas = [feeder_area(h, [o for o in loaded.observations if o.hub_id == h.id], grid) for h in hubs]

    d["ingest"].mkdir(parents=True, exist_ok=True)
    write_observations(loaded.observations, d["ingest"] / "observations.csv")
    write_rejects(loaded.rejects, d["ingest"] / "rejects.csv")
    write_feeder_areas(areas, d["ingest"] / "feeder_areas.csv")
    with (d["ingest"] / "hubs.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hub_id", "x", "y", "gtfs_stop_id"])
        for h in hubs:
            w.writerow([h.id, repr(h.location.x), repr(h.location.y), h.gtfs_stop_id])

    reasons = Counter(r for _, r in loaded.rejects)
    per_hub = Counter(o.hub_id for o in loaded.observations)
    report = {
        "rows": loaded.n_rows,
        "access": loaded.n_access,
        "egress": loaded.n_egress,
        "rejected": loaded.n_rejected,
        "reject_reasons": dict(sorted(reasons.items())),
        "hubs": len(hubs),
        "observations_per_hub": dict(sorted(per_hub.items())),
        "feeder_cells_per_hub": {a.hub_id: len(a.cell_ids) for a in areas},
    }
    assert report["access"] + report["egress"] + report["rejected"] == report["rows"]
    return report


_KRIGE_CTX: dict = {}


def _krige_task(args) -> BucketResult:
    key, obs, hub_id = args
    c = _KRIGE_CTX
    return krige_bucket(key, obs, c["areas"][hub_id], c["grid"], c["kcfg"], c["hubs"][hub_id].location)


def _init_krige(grid, areas, hubs, kcfg):
    _KRIGE_CTX.update(grid=grid, areas=areas, hubs=hubs, kcfg=kcfg)


ESTIMATE_COLUMNS = ["hub_id", "direction", "t_k", "slot_length", "cell_id", "w_hat", "y_hat", "n_obs", "w_method", "y_method"]
DIAGNOSTIC_COLUMNS = ["hub", "direction", "t_k", "n_obs", "method", "nugget", "sill", "range", "clamped_count",
                      "variable", "near_mean", "far_mean"]


def stage_estimate(cfg: RunConfig, workers: int = 1) -> dict:
    d = _dirs(cfg)
    grid = load_grid(d["grid"])
    obs = [o for o in read_observations(d["ingest"] / "observations.csv") if o.direction in cfg.directions]
    areas = read_feeder_areas(d["ingest"] / "feeder_areas.csv")
    hubs = {h.id: h for h in _read_hubs_normalized(d["ingest"] / "hubs.csv")}
    kcfg = KrigingConfig(cfg.variogram_family, cfg.min_obs_for_kriging, cfg.n_lags)
    buckets = group_by_timeslot(obs, cfg.slot_length)
    tasks = [(k, v, k.hub_id) for k, v in buckets.items()]
    _init_krige(grid, areas, hubs, kcfg)
    if workers > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_krige, initargs=(grid, areas, hubs, kcfg)) as ex:
            results = list(ex.map(_krige_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_krige_task(t) for t in tasks]

    out = d["estimate"]
    if out.exists():
        shutil.rmtree(out)
    (out / "variograms").mkdir(parents=True)
    methods = Counter()
    clamped = 0
    with (out / "estimates.csv").open("w", newline="") as fe, (out / "diagnostics.csv").open("w", newline="") as fd:
        we, wd = csv.writer(fe, lineterminator="\n"), csv.writer(fd, lineterminator="\n")
        we.writerow(ESTIMATE_COLUMNS)
        wd.writerow(DIAGNOSTIC_COLUMNS)
        for res in results:
            k = res.key
            for e in res.estimates:
                we.writerow([k.hub_id, k.direction.value, k.slot_start, k.slot_length, e.cell_id, _fmt(e.w_hat),
                             _fmt(e.y_hat), e.n_obs, e.w_method.value, e.y_method.value])
            for diag in res.diagnostics:
                m = diag.model
                methods[(diag.variable, diag.method.value)] += 1
                clamped += diag.clamped
                wd.writerow([
                    k.hub_id, k.direction.value, k.slot_start, diag.n_obs, diag.method.value,
                    "" if m is None else _fmt(m.nugget), "" if m is None else _fmt(m.sill),
                    "" if m is None else _fmt(m.range), diag.clamped, diag.variable,
                    _fmt(diag.near_mean), _fmt(diag.far_mean),
                ])
                if diag.variogram is not None:
                    name = f"{k.hub_id}_{k.direction.code}_{k.slot_start}_{diag.variable}.csv"
                    with (out / "variograms" / name).open("w", newline="") as fv:
                        wv = csv.writer(fv, lineterminator="\n")
                        wv.writerow(["lag_center", "semivariance", "pairs"])
                        for c, g, n in diag.variogram.lag_bins:
                            wv.writerow([_fmt(c), _fmt(g), n])
    return {
        "buckets": len(results),
        "observations_used": len(obs),
        "estimates": sum(len(r.estimates) for r in results),
        "kriged": {v: methods[(v, Method.KRIGING.value)] for v in ("wait", "travel")},
        "fallback_mean": {v: methods[(v, Method.FALLBACK_MEAN.value)] for v in ("wait", "travel")},
        "clamped_estimates": clamped,
    }


def read_estimates(path: Path) -> list[FieldEstimate]:
    if not path.exists():
        raise FormatError(f"missing upstream artifact {path}")
    out = []
    with path.open(newline="") as fh:
        for r in csv.DictReader(fh):
            key = TimeslotKey(r["hub_id"], Direction(r["direction"]), int(r["t_k"]), int(r["slot_length"]))
            out.append(FieldEstimate(key, int(r["cell_id"]), float(r["w_hat"]), float(r["y_hat"]), int(r["n_obs"]),
                                     Method(r["w_method"]), Method(r["y_method"])))
    return out


def stage_synthesize(cfg: RunConfig, workers: int = 1) -> dict:
    _require(cfg, "gtfs_dir")
    d = _dirs(cfg)
    grid = load_grid(d["grid"])
    hubs = _read_hubs_normalized(d["ingest"] / "hubs.csv")
    estimates = read_estimates(d["estimate"] / "estimates.csv")
    trips, dropped = synthesize(estimates, cfg.anchor_time, cfg.min_headway_floor)
    d["synth"].mkdir(parents=True, exist_ok=True)
    emit_gtfs(trips, grid, hubs, cfg.gtfs_dir, d["synth"] / "gtfs", cfg.service_date)
    write_trip_audit(trips, d["synth"] / "virtual_trips.csv")
    return {
        "virtual_trips_emitted": len(trips),
        "virtual_trips_dropped": dropped,
        "virtual_stops": len({t.cell_id for t in trips}),
        "empty_synthesis": not trips,
    }


def _feed_dir(cfg: RunConfig, feed: str) -> Path:
    if feed == "base":
        return Path(cfg.gtfs_dir)
    path = _dirs(cfg)["synth"] / "gtfs"
    if not path.exists():
        raise FormatError(f"missing upstream artifact {path}")
    return path


def _write_scores(path_csv: Path, rows: list[tuple[int, str, float, float]]) -> None:
    with path_csv.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "period", "score", "reachable_cells"])
        for cell, period, score, reach in rows:
            w.writerow([cell, period, _fmt(score), _fmt(reach)])


def _read_scores(path: Path) -> dict[str, dict[int, float]]:
    if not path.exists():
        raise FormatError(f"missing upstream artifact {path}")
    out: dict[str, dict[int, float]] = {}
    with path.open(newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["period"], {})[int(r["cell_id"])] = float(r["score"])
    return out


def _write_geojson(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj) + "\n")


def stage_score(cfg: RunConfig, workers: int = 1, feed: str = "all") -> dict:
    _require(cfg, "gtfs_dir")
    d = _dirs(cfg)
    grid = load_grid(d["grid"])
    walk_matrix = read_walk_matrix(cfg.walk_matrix_csv) if cfg.walk_matrix_csv else None
    d["scores"].mkdir(parents=True, exist_ok=True)
    report = {}
    for name in FEEDS if feed == "all" else (feed,):
        schedule = parse_gtfs(_feed_dir(cfg, name), cfg.service_date, grid.projection)
        graph = build_graph(schedule, cfg.walk_speed, cfg.max_walk, walk_matrix, cfg.transfer_buffer,
                            materialize_transfers=False)
        rows = []
        for period, span in cfg.periods.items():
            res = acc.period_scores(graph, grid, None, span, cfg.sample_step, cfg.tau, workers)
            rows.extend((c, period, ps.score, ps.reachable_cells) for c, ps in res.items())
            _write_geojson(
                d["scores"] / f"scores_{name}_{period}.geojson",
                grid_to_geojson(grid, {"score": [res[c].score for c in range(len(grid))]}),
            )
        _write_scores(d["scores"] / f"scores_{name}.csv", rows)
        report[name] = {"cells_scored": len(grid), "periods": len(cfg.periods), "trips": graph.n_trips,
                        "connections": int(len(graph.conn_dep_time))}
    return report


def stage_diff(cfg: RunConfig, workers: int = 1) -> dict:
    d = _dirs(cfg)
    grid = load_grid(d["grid"])
    base = _read_scores(d["scores"] / "scores_base.csv")
    aug = _read_scores(d["scores"] / "scores_augmented.csv")
    if set(base) != set(aug):
        raise FormatError("base and augmented scores cover different periods")
    d["diff"].mkdir(parents=True, exist_ok=True)
    report = {}
    with (d["diff"] / "improvement.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "period", "delta"])
        for period in sorted(base):
            delta = acc.improvement(base[period], aug[period])
            for c, v in delta.items():
                w.writerow([c, period, _fmt(v)])
            _write_geojson(
                d["diff"] / f"improvement_{period}.geojson",
                grid_to_geojson(grid, {
                    "delta": [delta.get(c, 0.0) for c in range(len(grid))],
                    "score": [aug[period].get(c, 0.0) for c in range(len(grid))],
                }),
            )
            vals = np.array(list(delta.values()) or [0.0])
            report[period] = {"cells_improved": int((vals > 0).sum()), "max_delta": float(vals.max()),
                              "mean_delta": round(float(vals.mean()), 6)}
    return report


STAGE_FUNCS: dict[str, Callable[..., dict]] = {
    "tessellate": stage_tessellate,
    "ingest": stage_ingest,
    "estimate": stage_estimate,
    "synthesize": stage_synthesize,
    "score": stage_score,
    "diff": stage_diff,
}


def _update_report(root: Path, stage: str, section: dict, cfg: RunConfig) -> None:
    path = root / "run_report.json"
    report = json.loads(path.read_text()) if path.exists() else {}
    stages = report.setdefault("stages", {})
    if stage == "score":
        # feeds may be scored one at a time; keep the other feed's section
        section = {**stages.get("score", {}), **section}
    stages[stage] = section
    # input locations stay out of the report so it is identical wherever the run lives
    report["config"] = {k: v for k, v in cfg.to_dict().items() if k not in PATH_KEYS}
    ing = report["stages"].get("ingest")
    if ing:
        report["observations"] = {k: ing[k] for k in ("rows", "access", "egress", "rejected")}
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def run_stage(cfg: RunConfig, stage: str, workers: int = 1, **kwargs) -> dict:
    if stage not in STAGE_FUNCS:
        raise StageError(stage, f"unknown stage; choose from {', '.join(STAGES)}")
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        section = STAGE_FUNCS[stage](cfg, workers, **kwargs)
    except SmsAccessError as exc:
        downstream = list(STAGES[STAGES.index(stage):])
        (root / "STALE.json").write_text(json.dumps({"failed_stage": stage, "cause": str(exc), "stale_stages": downstream}, indent=2) + "\n")
        raise StageError(stage, str(exc)) from exc
    except (OSError, ValueError, KeyError) as exc:
        downstream = list(STAGES[STAGES.index(stage):])
        (root / "STALE.json").write_text(json.dumps({"failed_stage": stage, "cause": repr(exc), "stale_stages": downstream}, indent=2) + "\n")
        raise StageError(stage, repr(exc)) from exc
    _update_report(root, stage, section, cfg)
    timings_path = root / "run_timings.json"
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    timings[stage] = round(time.perf_counter() - started, 3)
    timings_path.write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    log.info("stage %s done in %.2fs", stage, timings[stage])
    return section


def run_pipeline(cfg: RunConfig, workers: int = 1) -> dict:
    """Run all stages in order and return the run report."""
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for stale in ("STALE.json", "run_report.json", "run_timings.json"):
        (root / stale).unlink(missing_ok=True)
    for stage in STAGES:
        run_stage(cfg, stage, workers)
    return json.loads((root / "run_report.json").read_text())
