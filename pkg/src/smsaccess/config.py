"""Run configuration: a TOML file whose defaults reproduce the reference setup."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .accessibility import DEFAULT_SAMPLE_STEP_S, DEFAULT_TAU_S, PERIODS
from .errors import InvalidParameterError
from .geostat import DEFAULT_MIN_OBS, DEFAULT_N_LAGS, VariogramFamily
from .ingest import DAY_S, DEFAULT_SLOT_S, DEFAULT_SNAP_RADIUS_M, Direction
from .synth import DEFAULT_ANCHOR_S, DEFAULT_HEADWAY_FLOOR_S
from .tessellation import DEFAULT_SIDE_M
from .transit_graph import MAX_WALK_S, WALK_SPEED_MPS

PATH_KEYS = ("gtfs_dir", "observations_csv", "hubs_csv", "people_csv", "out_dir", "walk_matrix_csv")


@dataclass
class RunConfig:
    gtfs_dir: Path | None = None
    observations_csv: Path | None = None
    hubs_csv: Path | None = None
    people_csv: Path | None = None
    out_dir: Path = Path("out")
    walk_matrix_csv: Path | None = None

    hex_side: float = DEFAULT_SIDE_M
    tau: float = DEFAULT_TAU_S
    slot_length: int = DEFAULT_SLOT_S
    walk_speed: float = WALK_SPEED_MPS
    max_walk: float = MAX_WALK_S
    min_headway_floor: int = DEFAULT_HEADWAY_FLOOR_S
    min_obs_for_kriging: int = DEFAULT_MIN_OBS
    n_lags: int = DEFAULT_N_LAGS
    variogram_family: VariogramFamily = VariogramFamily.SPHERICAL
    snap_radius: float = DEFAULT_SNAP_RADIUS_M
    sample_step: int = DEFAULT_SAMPLE_STEP_S
    anchor_time: int = DEFAULT_ANCHOR_S
    transfer_buffer: float = 0.0
    service_date: str | None = None
    metric_coordinates: bool = False
    bbox: tuple[float, float, float, float] | None = None
    max_wait: float | None = None
    directions: tuple[Direction, ...] = (Direction.ACCESS, Direction.EGRESS)
    periods: dict[str, tuple[int, int]] = field(default_factory=lambda: dict(PERIODS))

    def validate(self) -> "RunConfig":
        positive = ("hex_side", "tau", "slot_length", "walk_speed", "max_walk", "min_headway_floor",
                    "min_obs_for_kriging", "n_lags", "snap_radius", "sample_step")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.transfer_buffer < 0:
            raise InvalidParameterError("transfer_buffer must be >= 0")
        if DAY_S % self.slot_length:
            raise InvalidParameterError("slot_length must divide 86400")
        if not 0 <= self.anchor_time <= 86340:
            raise InvalidParameterError("anchor_time must lie within the service day")
        if self.max_wait is not None and self.max_wait <= 0:
            raise InvalidParameterError("max_wait must be positive when set")
        if self.service_date is not None and (len(self.service_date) != 8 or not self.service_date.isdigit()):
            raise InvalidParameterError(f"service_date must be YYYYMMDD, got {self.service_date!r}")
        spans = sorted(self.periods.values())
        for name, (start, end) in self.periods.items():
            if not 0 <= start < end <= DAY_S:
                raise InvalidParameterError(f"period '{name}' must lie within [0, 86400[")
            if (end - start) % self.sample_step:
                raise InvalidParameterError(f"sample_step must divide the length of period '{name}'")
        for (_, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise InvalidParameterError("periods overlap")
        return self

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Path):
                v = str(v)
            elif isinstance(v, VariogramFamily):
                v = v.value
            elif f.name == "directions":
                v = [d.value for d in v]
            elif f.name == "periods":
                v = {k: list(p) for k, p in v.items()}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


def _coerce(name: str, value: Any) -> Any:
    if name in PATH_KEYS:
        return None if value in (None, "") else Path(value)
    if name == "variogram_family":
        return VariogramFamily(str(value).lower())
    if name == "directions":
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return tuple(Direction(str(v).lower()) for v in value)
    if name == "periods":
        return {k: (int(v[0]), int(v[1])) for k, v in value.items()}
    if name == "bbox":
        return None if value is None else tuple(float(v) for v in value)
    if name in ("slot_length", "min_headway_floor", "min_obs_for_kriging", "n_lags", "sample_step", "anchor_time"):
        return int(value)
    if name in ("hex_side", "tau", "walk_speed", "max_walk", "snap_radius", "transfer_buffer"):
        return float(value)
    if name == "max_wait":
        return None if value in (None, "", "none") else float(value)
    if name == "metric_coordinates":
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
    if name == "service_date":
        return None if value in (None, "") else str(value)
    return value


def config_from_mapping(data: dict[str, Any], base_dir: Path | None = None) -> RunConfig:
    """Build a config from a (possibly sectioned) mapping; relative paths resolve against ``base_dir``."""
    flat: dict[str, Any] = {}
    for key, value in data.items():
        if key in ("paths", "parameters") and isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(flat) - known
    if unknown:
        raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in flat.items()}
    if base_dir is not None:
        for k in PATH_KEYS:
            p = kwargs.get(k)
            if p is not None and not p.is_absolute():
                kwargs[k] = base_dir / p
    return RunConfig(**kwargs)


def load_config(path, overrides: dict[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    with path.open("rb") as fh:
        data = tomllib.load(fh)
    cfg = config_from_mapping(data, base_dir=path.parent)
    if overrides:
        for k, v in overrides.items():
            if k not in {f.name for f in dataclasses.fields(RunConfig)}:
                raise InvalidParameterError(f"unknown config key '{k}'")
            setattr(cfg, k, _coerce(k, v))
    return cfg.validate()
