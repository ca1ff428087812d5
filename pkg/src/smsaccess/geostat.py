"""Experimental semivariograms, variogram model fitting and ordinary kriging.

Wait and travel times observed within one (hub, direction, timeslot) bucket
are treated as a spatially stationary random field; the expected value at
each feeder-area centroid is estimated by ordinary kriging.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import least_squares
from scipy.spatial.distance import cdist, pdist

from .errors import InsufficientDataError, InvalidParameterError, SingularSystemError
from .ingest import FeederArea, TimeslotKey, TripObservation
from .tessellation import Grid

DEFAULT_N_LAGS = 10
DEFAULT_MIN_OBS = 5
RANGE_FLOOR_FRACTION = 1e-3
MAX_CONDITION = 1e13


class VariogramFamily(str, enum.Enum):
    SPHERICAL = "spherical"
    EXPONENTIAL = "exponential"
    LINEAR = "linear"


class Method(str, enum.Enum):
    KRIGING = "kriging"
    FALLBACK_MEAN = "fallback_mean"
    FALLBACK_NEAREST = "fallback_nearest"


@dataclass(frozen=True)
class ExperimentalVariogram:
    lag_centers: np.ndarray
    semivariance: np.ndarray
    pair_counts: np.ndarray

    @property
    def lag_bins(self) -> list[tuple[float, float, int]]:
        return [
            (float(c), float(g), int(n))
            for c, g, n in zip(self.lag_centers, self.semivariance, self.pair_counts)
        ]

    def __len__(self) -> int:
        return len(self.lag_centers)


def _shape(family: VariogramFamily, h: np.ndarray) -> np.ndarray:
    """Unit-sill structure as a function of lag / range."""
    if family is VariogramFamily.SPHERICAL:
        return np.where(h < 1.0, 1.5 * h - 0.5 * h**3, 1.0)
    if family is VariogramFamily.EXPONENTIAL:
        # practical range: 95% of the sill is reached at h == 1
        return 1.0 - np.exp(-3.0 * h)
    if family is VariogramFamily.LINEAR:
        return np.minimum(h, 1.0)
    raise InvalidParameterError(f"unknown variogram family {family!r}")


@dataclass(frozen=True)
class VariogramModel:
    family: VariogramFamily
    nugget: float
    partial_sill: float
    range: float

    def __post_init__(self):
        object.__setattr__(self, "family", VariogramFamily(self.family))
        if self.nugget < 0 or self.partial_sill < 0 or not self.range > 0:
            raise InvalidParameterError(f"invalid variogram parameters {self}")

    @property
    def sill(self) -> float:
        return self.nugget + self.partial_sill

    def curve(self, d) -> np.ndarray:
        """Model value for d > 0, continued to d = 0 (nugget included)."""
        d = np.asarray(d, dtype=float)
        return self.nugget + self.partial_sill * _shape(self.family, d / self.range)

    def __call__(self, d) -> np.ndarray:
        """Semivariance with gamma(0) = 0, as used in the kriging system."""
        d = np.asarray(d, dtype=float)
        return np.where(d > 0, self.curve(d), 0.0)


def experimental_semivariance(points, values, n_lags: int = DEFAULT_N_LAGS, max_lag: float | None = None) -> ExperimentalVariogram:
    """Bin half squared differences of all unordered pairs by separation.

    Bins are equal-width on ``[0, max_lag]``; pairs further apart than
    ``max_lag`` are ignored and empty bins dropped. ``max_lag`` defaults to
    half the largest pair distance.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    vals = np.asarray(values, dtype=float).ravel()
    if len(pts) != len(vals):
        raise InvalidParameterError("points and values differ in length")
    if len(vals) < 2:
        raise InsufficientDataError("semivariance needs at least 2 observations")
    if n_lags < 1:
        raise InvalidParameterError("n_lags must be >= 1")
    d = pdist(pts)
    g = 0.5 * pdist(vals[:, None], "sqeuclidean")
    if max_lag is None:
        max_lag = float(d.max()) / 2.0
    if max_lag <= 0:
        # every retained pair is coincident: a single lag at 0
        keep = d <= 0
        if not keep.any():
            raise InsufficientDataError("no pairs within max_lag")
        return ExperimentalVariogram(np.array([0.0]), np.array([g[keep].mean()]), np.array([int(keep.sum())]))

    width = max_lag / n_lags
    keep = d <= max_lag
    idx = np.minimum((d[keep] / width).astype(np.int64), n_lags - 1)
    counts = np.bincount(idx, minlength=n_lags)
    sums = np.bincount(idx, weights=g[keep], minlength=n_lags)
    filled = counts > 0
    centers = (np.arange(n_lags) + 0.5) * width
    return ExperimentalVariogram(
        centers[filled], sums[filled] / counts[filled], counts[filled].astype(np.int64)
    )


def _range_floor(ev: ExperimentalVariogram) -> float:
    top = float(ev.lag_centers.max())
    return RANGE_FLOOR_FRACTION * top if top > 0 else 1.0


def fit_variogram(ev: ExperimentalVariogram, family: VariogramFamily | str = VariogramFamily.SPHERICAL) -> VariogramModel:
    """Weighted least-squares fit of nugget, partial sill and range.

    Residuals are weighted by pair counts. The semivariances are normalised
    by their maximum before fitting, which makes the fit equivariant to a
    rescaling of the observed values. A fit that is flat over all lags is
    reported as a pure nugget with the range at its lower bound.
    """
    family = VariogramFamily(family)
    if len(ev) < 2:
        raise InsufficientDataError(f"variogram fit needs >= 2 lag bins, got {len(ev)}")
    lags = np.asarray(ev.lag_centers, dtype=float)
    gamma = np.asarray(ev.semivariance, dtype=float)
    sw = np.sqrt(np.asarray(ev.pair_counts, dtype=float))
    r_min = _range_floor(ev)
    scale = float(gamma.max())
    if scale <= 0:
        return VariogramModel(family, 0.0, 0.0, r_min)
    g = gamma / scale
    top = float(lags.max())
    r_max = 10.0 * top

    def residuals(p):
        nug, psill, rng = p
        return sw * (nug + psill * _shape(family, lags / rng) - g)

    best = None
    for frac in (0.25, 0.5, 1.0, 2.0):
        for nug0 in (0.0, 0.5 * float(g.min())):
            x0 = np.array([nug0, max(float(g.max()) - nug0, 1e-3), min(max(frac * top, r_min * 2), r_max / 2)])
            sol = least_squares(
                residuals,
                x0,
                bounds=([0.0, 0.0, r_min], [np.inf, np.inf, r_max]),
                method="trf",
                xtol=1e-15,
                ftol=1e-15,
                gtol=1e-15,
                max_nfev=5000,
            )
            # earlier starts win near-ties so rounding noise cannot flip the choice
            if best is None or sol.cost < best.cost * (1 - 1e-7) - 1e-14:
                best = sol
    nug, psill, rng = (float(v) for v in best.x)
    fitted = nug + psill * _shape(family, lags / rng)
    if psill <= 1e-12 or np.ptp(fitted) <= 1e-10 * max(float(np.abs(fitted).max()), 1e-300):
        return VariogramModel(family, float(fitted.mean()) * scale, 0.0, r_min)
    return VariogramModel(family, nug * scale, psill * scale, rng)


# --- kriging ----------------------------------------------------------------


def merge_duplicates(points, values):
    """Average values sharing identical coordinates.

    Returns the unique points, their mean values, and for each input the
    index of its unique point.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    vals = np.asarray(values, dtype=float).ravel()
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse, minlength=len(uniq))
    means = np.bincount(inverse, weights=vals, minlength=len(uniq)) / counts
    return uniq, means, inverse


class KrigingSystem:
    """Factored ordinary-kriging system for a fixed set of observations.

    Duplicate locations are merged first; the weight of a merged location is
    split evenly among its duplicates so weights still refer to the inputs.
    """

    def __init__(self, points, model: VariogramModel):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(pts) == 0:
            raise InsufficientDataError("kriging needs at least one observation")
        if model.sill <= 0:
            # zero variogram: limit of a vanishing pure nugget (equal weights)
            model = VariogramModel(model.family, 1.0, 0.0, model.range)
        else:
            # weights do not depend on the variogram's scale; unit sill keeps
            # the conditioning check independent of the data's units
            s = model.sill
            model = VariogramModel(model.family, model.nugget / s, model.partial_sill / s, model.range)
        self.model = model
        self.unique, _, self.inverse = merge_duplicates(pts, np.zeros(len(pts)))
        self.multiplicity = np.bincount(self.inverse, minlength=len(self.unique))
        n = len(self.unique)
        a = np.zeros((n + 1, n + 1))
        a[:n, :n] = model(cdist(self.unique, self.unique))
        a[:n, n] = 1.0
        a[n, :n] = 1.0
        if not np.isfinite(a).all():
            raise SingularSystemError("non-finite kriging matrix")
        cond = np.linalg.cond(a, 1)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularSystemError(f"kriging matrix is singular (cond={cond:.3g})")
        self._lu = scipy.linalg.lu_factor(a)
        self.n_inputs = len(pts)

    def weights(self, targets) -> np.ndarray:
        """(m, n_inputs) array; row k holds the weights for target k."""
        tg = np.asarray(targets, dtype=float).reshape(-1, 2)
        n = len(self.unique)
        rhs = np.ones((n + 1, len(tg)))
        rhs[:n] = self.model(cdist(self.unique, tg))
        sol = scipy.linalg.lu_solve(self._lu, rhs)
        lam = sol[:n].T
        return lam[:, self.inverse] / self.multiplicity[self.inverse]


def krige(target, points, values, model: VariogramModel) -> tuple[float, np.ndarray]:
    """Ordinary-kriging estimate at ``target`` and the weights used.

    The estimate is the weighted sum of ``values``; weights sum to one.
    A negative estimate is clamped to zero.
    """
    vals = np.asarray(values, dtype=float).ravel()
    lam = KrigingSystem(points, model).weights([target])[0]
    return max(float(lam @ vals), 0.0), lam


# --- per-bucket field estimation -----------------------------------------


@dataclass(frozen=True)
class KrigingConfig:
    family: VariogramFamily = VariogramFamily.SPHERICAL
    min_obs: int = DEFAULT_MIN_OBS
    n_lags: int = DEFAULT_N_LAGS


@dataclass(frozen=True)
class FieldEstimate:
    key: TimeslotKey
    cell_id: int
    w_hat: float
    y_hat: float
    n_obs: int
    w_method: Method
    y_method: Method

    @property
    def method(self) -> Method:
        if self.w_method is Method.KRIGING and self.y_method is Method.KRIGING:
            return Method.KRIGING
        return Method.FALLBACK_MEAN


@dataclass
class VariableDiagnostic:
    variable: str
    n_obs: int
    method: Method
    model: VariogramModel | None = None
    clamped: int = 0
    near_mean: float = math.nan
    far_mean: float = math.nan
    variogram: ExperimentalVariogram | None = None


@dataclass
class BucketResult:
    key: TimeslotKey
    estimates: list[FieldEstimate]
    diagnostics: list[VariableDiagnostic] = field(default_factory=list)


def _stationarity(dist_to_hub: np.ndarray, vals: np.ndarray) -> tuple[float, float]:
    """Mean value of the nearer half of observations vs the farther half."""
    if len(vals) < 2:
        return math.nan, math.nan
    order = np.argsort(dist_to_hub, kind="stable")
    half = len(vals) // 2
    return float(vals[order[:half]].mean()), float(vals[order[half:]].mean())


def _estimate_variable(name, pts, vals, targets, max_lag, config, dist_to_hub):
    diag = VariableDiagnostic(name, len(vals), Method.FALLBACK_MEAN)
    diag.near_mean, diag.far_mean = _stationarity(dist_to_hub, vals)
    fallback = np.full(len(targets), float(vals.mean()))
    if len(vals) < config.min_obs:
        return fallback, diag
    try:
        ev = experimental_semivariance(pts, vals, config.n_lags, max_lag)
        diag.variogram = ev
        model = fit_variogram(ev, config.family)
        lam = KrigingSystem(pts, model).weights(targets)
    except (InsufficientDataError, SingularSystemError):
        return fallback, diag
    raw = lam @ vals
    diag.method = Method.KRIGING
    diag.model = model
    diag.clamped = int((raw < 0).sum())
    return np.maximum(raw, 0.0), diag


def krige_bucket(
    key: TimeslotKey,
    observations: list[TripObservation],
    feeder: FeederArea,
    grid: Grid,
    config: KrigingConfig = KrigingConfig(),
    hub_location=None,
) -> BucketResult:
    """Estimate wait and travel time at every centroid of the feeder area."""
    cell_ids = sorted(feeder.cell_ids)
    if not observations or not cell_ids:
        return BucketResult(key, [])
    pts = np.array([o.location for o in observations], dtype=float)
    waits = np.array([o.wait for o in observations], dtype=float)
    travels = np.array([o.travel for o in observations], dtype=float)
    targets = grid.centroids[cell_ids]
    max_lag = feeder.radius if feeder.radius > 0 else None
    if hub_location is None:
        dist = np.zeros(len(pts))
    else:
        dist = np.hypot(pts[:, 0] - hub_location[0], pts[:, 1] - hub_location[1])

    w_hat, w_diag = _estimate_variable("wait", pts, waits, targets, max_lag, config, dist)
    y_hat, y_diag = _estimate_variable("travel", pts, travels, targets, max_lag, config, dist)
    estimates = [
        FieldEstimate(key, c, float(w), float(y), len(observations), w_diag.method, y_diag.method)
        for c, w, y in zip(cell_ids, w_hat, y_hat)
    ]
    return BucketResult(key, estimates, [w_diag, y_diag])


def krige_field(key, observations, feeder, grid, config: KrigingConfig = KrigingConfig()) -> list[FieldEstimate]:
    return krige_bucket(key, observations, feeder, grid, config).estimates
