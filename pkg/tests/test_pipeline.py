import csv
import filecmp
import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from smsaccess.cli import main
from smsaccess.config import load_config
from smsaccess.errors import InvalidParameterError, StageError
from smsaccess.pipeline import STAGES, run_pipeline, run_stage
from smsaccess.tessellation import load_grid
from smsaccess.transit_graph import WALK_SPEED_MPS, parse_gtfs, parse_gtfs_time

from oracles import dense_ok_estimate, departure_recursion, enumerate_arrivals, hex_lattice_cover, spherical

FIXTURES = Path(__file__).parent / "fixtures"
TOY = FIXTURES / "toy"
GOLDEN = FIXTURES / "toy_golden"


def _files(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file() and p.name != "run_timings.json")


def _same_tree(a: Path, b: Path) -> list[str]:
    fa, fb = _files(a), _files(b)
    if fa != fb:
        return sorted(set(fa) ^ set(fb))
    return [f for f in fa if not filecmp.cmp(a / f, b / f, shallow=False)]


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "out"
    assert main(["run", "--config", str(TOY / "config.toml"), "--out", str(out)]) == 0
    return out


def test_matches_golden(toy_run):
    assert _same_tree(toy_run, GOLDEN) == []


def test_rerun_is_byte_identical(toy_run, tmp_path):
    out = tmp_path / "again"
    assert main(["run", "--config", str(TOY / "config.toml"), "--out", str(out), "--workers", "2"]) == 0
    assert _same_tree(toy_run, out) == []


def test_single_stage_rerun_identical(toy_run, tmp_path):
    out = tmp_path / "out"
    shutil.copytree(toy_run, out)
    for stage in STAGES:
        argv = [stage, "--config", str(TOY / "config.toml"), "--out", str(out)]
        assert main(argv) == 0
        assert _same_tree(toy_run, out) == [], stage


def test_stage_isolation(toy_run, tmp_path):
    out = tmp_path / "out"
    shutil.copytree(toy_run, out)
    for d in ("synth", "scores", "diff"):
        shutil.rmtree(out / d)
    cfg = load_config(TOY / "config.toml", {"out_dir": str(out)})
    run_stage(cfg, "synthesize")
    run_stage(cfg, "score", feed="base")
    run_stage(cfg, "score", feed="augmented")
    run_stage(cfg, "diff")
    assert _same_tree(toy_run, out) == []


def test_report_contents(toy_run):
    rep = json.loads((toy_run / "run_report.json").read_text())
    obs = rep["observations"]
    assert obs["rows"] == 40 and obs["access"] + obs["egress"] + obs["rejected"] == 40
    assert set(rep["stages"]) == set(STAGES)
    assert rep["stages"]["synthesize"]["virtual_trips_emitted"] > 0
    assert "gtfs_dir" not in rep["config"] and rep["config"]["tau"] == 3600
    timings = json.loads((toy_run / "run_timings.json").read_text())
    assert set(timings) == set(STAGES)


def test_zero_observations_gives_zero_delta(tmp_path):
    toy = tmp_path / "toy"
    shutil.copytree(TOY, toy)
    lines = (toy / "observations.csv").read_text().splitlines()
    (toy / "observations.csv").write_text(lines[0] + "\n")
    rep = run_pipeline(load_config(toy / "config.toml", {"out_dir": str(tmp_path / "out")}))
    assert rep["stages"]["synthesize"]["empty_synthesis"] is True
    with (tmp_path / "out" / "diff" / "improvement.csv").open() as fh:
        assert all(float(r["delta"]) == 0.0 for r in csv.DictReader(fh))
    base = (tmp_path / "out" / "scores" / "scores_base.csv").read_text()
    assert (tmp_path / "out" / "scores" / "scores_augmented.csv").read_text() == base


def test_missing_upstream_artifact(tmp_path, capsys):
    code = main(["estimate", "--config", str(TOY / "config.toml"), "--out", str(tmp_path / "fresh")])
    err = capsys.readouterr().err
    assert code == 2 and "[estimate]" in err and "grid" in err
    stale = json.loads((tmp_path / "fresh" / "STALE.json").read_text())
    assert stale["failed_stage"] == "estimate" and stale["stale_stages"][0] == "estimate"


def test_bad_config_value(tmp_path, capsys):
    code = main(["run", "--config", str(TOY / "config.toml"), "--out", str(tmp_path), "--set", "tau=-1"])
    assert code == 2 and "tau" in capsys.readouterr().err
    with pytest.raises(InvalidParameterError):
        load_config(TOY / "config.toml", {"slot_length": "7000"})
    with pytest.raises(InvalidParameterError):
        load_config(TOY / "config.toml", {"no_such_key": "1"})


def test_unknown_stage(tmp_path):
    cfg = load_config(TOY / "config.toml", {"out_dir": str(tmp_path)})
    with pytest.raises(StageError, match="unknown stage"):
        run_stage(cfg, "nope")


# --- stage-by-stage cross-checks of the golden run against the oracles ------


def test_golden_grid_matches_lattice_oracle():
    grid = load_grid(GOLDEN / "grid")
    assert len(grid) == len(hex_lattice_cover((0, 0, 6000, 4000), 1000))
    assert grid.opportunities.sum() == 600


def _read(path):
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def test_golden_estimates_match_dense_kriging():
    grid = load_grid(GOLDEN / "grid")
    obs = [r for r in _read(GOLDEN / "ingest" / "observations.csv") if r["hub_id"] == "H1" and r["direction"] == "access"]
    diag = next(r for r in _read(GOLDEN / "estimate" / "diagnostics.csv")
                if (r["hub"], r["direction"], r["variable"]) == ("H1", "access", "wait"))
    nug, sill, rng = float(diag["nugget"]), float(diag["sill"]), float(diag["range"])
    pts = [(float(r["origin_x"]), float(r["origin_y"])) for r in obs]
    vals = [float(r["wait_s"]) for r in obs]
    ests = [r for r in _read(GOLDEN / "estimate" / "estimates.csv") if (r["hub_id"], r["direction"]) == ("H1", "access")]
    assert ests
    for e in ests:
        target = tuple(grid.centroids[int(e["cell_id"])])
        ref, _ = dense_ok_estimate(target, pts, vals, spherical(nug, sill - nug, rng))
        # the golden model parameters are rounded to 1e-6
        assert float(e["w_hat"]) == pytest.approx(max(ref, 0.0), rel=1e-6, abs=1e-4)


def test_golden_virtual_trips_follow_recursion():
    ests = _read(GOLDEN / "estimate" / "estimates.csv")
    trips = _read(GOLDEN / "synth" / "virtual_trips.csv")
    e = next(r for r in ests if r["hub_id"] == "H2" and r["direction"] == "egress")
    w, y = float(e["w_hat"]), float(e["y_hat"])
    mine = [t for t in trips if t["hub_id"] == "H2" and t["direction"] == "egress" and t["cell_id"] == e["cell_id"]]
    deps = [parse_gtfs_time(t["depart"]) for t in mine]
    expected = [t for t in departure_recursion(lambda _: w, 43200, 60) if t + max(round(y), 1) <= 86400]
    assert deps == expected
    assert all(parse_gtfs_time(t["arrive"]) - parse_gtfs_time(t["depart"]) == max(round(y), 1) for t in mine)


def test_golden_augmented_feed_has_no_dangling_keys():
    sched = parse_gtfs(GOLDEN / "synth" / "gtfs", "20240605")
    audit = _read(GOLDEN / "synth" / "virtual_trips.csv")
    assert {t["trip_id"] for t in audit} <= set(sched.trips)


def test_golden_base_scores_match_enumeration():
    grid = load_grid(GOLDEN / "grid")
    sched = parse_gtfs(TOY / "gtfs", "20240605")
    stops = {s: tuple(v.location) for s, v in sched.stops.items()}
    walk = lambda a, b: math.dist(stops[a], stops[b]) / WALK_SPEED_MPS
    t0, tau = 25200, 3600
    # only trips running inside [t0, t0 + tau] can matter; keeps the enumeration small
    trips = {t: [(s.stop_id, s.arrival, s.departure) for s in sts]
             for t, sts in sched.trips.items() if sts[0].departure >= t0 and sts[0].departure <= t0 + tau}
    rows = [r for r in _read(GOLDEN / "scores" / "scores_base.csv") if r["period"] == "morning_peak"]
    cents = [tuple(c) for c in grid.centroids]
    from smsaccess.accessibility import accessibility_score, earliest_arrival
    from smsaccess.transit_graph import build_graph
    g = build_graph(sched)
    for o in (0, 7, len(grid) - 1):
        exp = enumerate_arrivals(trips, stops, walk, cents[o], t0, cents, WALK_SPEED_MPS, 900)
        score = sum(int(grid.opportunities[c]) for c, t in enumerate(exp) if t <= t0 + tau)
        assert accessibility_score(earliest_arrival(g, cents[o], t0, grid), grid).score == score
    assert len(rows) == len(grid)
    assert all(float(r["score"]) >= 0 for r in rows)
