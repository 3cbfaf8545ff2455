"""Average-causal-effect estimators for spatio-temporal panel data.

The main estimator fits one regression per spatial location, pooling over
time (valid because the latent confounders are assumed constant in time),
and averages the per-location fits over space.  For binary treatments the
per-location regression degenerates to regime means and locations that never
observe both regimes are excluded.  Two baseline estimators with stronger
causal assumptions are provided for comparison: pooled regime means (no
confounding) and quantile-stratified regime means (a single observed
confounder).

All estimators are pure functions of a cube plus configuration and are safe
to evaluate concurrently.  Spatial aggregation always runs in sorted
location-id order, so results are independent of location ordering and of
any parallelism in the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datacube import DataCube
from .errors import ConfigError, EstimationError

#: Smallest singular value of the column-scaled design below which a
#: per-location fit is treated as rank deficient.
RANK_TOL = 1e-8

STATUS_OK = "ok"
STATUS_EXCLUDED = "excluded"
STATUS_RANK_DEFICIENT = "rank_deficient"

_POLY_NAME = {0: "1", 1: "x"}


@dataclass(frozen=True)
class BasisSpec:
    """A known basis of continuous functions on treatment (or treatment plus
    covariate) space, with a mandatory leading intercept.

    Each function maps an (N, input_dim) array of points to an (N,) array of
    values; the first function must be identically one.  Use
    :meth:`polynomial` for the built-in 1-d polynomial family.
    """

    functions: tuple[Callable[[np.ndarray], np.ndarray], ...]
    names: tuple[str, ...]
    input_dim: int | None = None

    def __post_init__(self):
        if len(self.functions) < 1:
            raise ConfigError("a basis needs at least one function")
        if len(self.functions) != len(self.names):
            raise ConfigError("basis functions and names must have equal length")

    @classmethod
    def polynomial(cls, degree: int) -> "BasisSpec":
        """Monomial basis 1, x, x^2, ..., x^degree on a 1-d treatment."""
        if degree < 0:
            raise ConfigError("polynomial degree must be >= 0")
        funcs = tuple(_monomial(j) for j in range(degree + 1))
        names = tuple(_POLY_NAME.get(j, f"x^{j}") for j in range(degree + 1))
        return cls(funcs, names, input_dim=1)

    @classmethod
    def polynomial_with_covariates(cls, degree: int, n_covariates: int) -> "BasisSpec":
        """Monomials in a 1-d treatment plus linear terms in each covariate.

        Points are laid out as (treatment, covariate_1, ..., covariate_q).
        """
        if n_covariates < 1:
            raise ConfigError("at least one covariate is required")
        base = cls.polynomial(degree)
        funcs = list(base.functions) + [_column(1 + j) for j in range(n_covariates)]
        names = list(base.names) + [f"w{j + 1}" for j in range(n_covariates)]
        return cls(tuple(funcs), tuple(names), input_dim=1 + n_covariates)

    @property
    def p(self) -> int:
        return len(self.functions)

    def design(self, points: np.ndarray) -> np.ndarray:
        """Evaluate the basis at an (N, input_dim) array of points."""
        points = np.asarray(points, dtype=float)
        if points.ndim != 2:
            raise ConfigError("basis input must be a 2-d array of points")
        if self.input_dim is not None and points.shape[1] != self.input_dim:
            raise ConfigError(
                f"basis expects {self.input_dim}-d points, got {points.shape[1]}-d")
        cols = [np.asarray(f(points), dtype=float) for f in self.functions]
        design = np.column_stack(cols)
        if points.shape[0] and not np.all(design[:, 0] == 1.0):
            raise ConfigError("the first basis function must be identically 1")
        return design


def _monomial(power: int):
    return lambda pts: pts[:, 0] ** power if power else np.ones(len(pts))


def _column(index: int):
    return lambda pts: pts[:, index]


@dataclass(frozen=True)
class LocationFit:
    """Outcome of one per-location fit.

    ``counts`` holds the usable observations: a single total for basis fits,
    or (count at level 0, count at level 1) for binary fits.  Fits whose
    status is not ``ok`` never enter the spatial average and carry the
    exclusion reason.
    """

    location_id: str
    status: str
    counts: tuple[int, ...]
    coefficients: tuple[float, ...] | None = None
    level_means: tuple[tuple[float, float], ...] | None = None
    min_singular_value: float | None = None
    reason: str | None = None

    def to_payload(self) -> dict:
        return {
            "location_id": self.location_id,
            "status": self.status,
            "counts": list(self.counts),
            "coefficients": None if self.coefficients is None else list(self.coefficients),
            "level_means": None if self.level_means is None
            else [[lv, mean] for lv, mean in self.level_means],
            "min_singular_value": self.min_singular_value,
            "reason": self.reason,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "LocationFit":
        return cls(
            location_id=payload["location_id"],
            status=payload["status"],
            counts=tuple(int(c) for c in payload["counts"]),
            coefficients=None if payload["coefficients"] is None
            else tuple(float(c) for c in payload["coefficients"]),
            level_means=None if payload["level_means"] is None
            else tuple((float(lv), float(mean)) for lv, mean in payload["level_means"]),
            min_singular_value=payload["min_singular_value"],
            reason=payload["reason"],
        )


@dataclass(frozen=True, eq=False)
class EffectEstimate:
    """An estimated average causal effect.

    ``kind`` is ``basis`` (coefficient vector on a treatment basis),
    ``basis_xw`` (coefficients on a joint treatment/covariate basis, averaged
    over the pooled covariate sample at evaluation time) or ``binary``
    (a value table over the treatment levels 0 and 1).  ``evaluate(x)``
    equals the mean of the per-location predictions over the included
    locations.
    """

    document_kind = "effect_estimate"

    method: str
    kind: str
    n_used: int
    n_total: int
    fits: tuple[LocationFit, ...] = ()
    coefficients: tuple[float, ...] | None = None
    basis_names: tuple[str, ...] = ()
    value_table: tuple[tuple[float, float], ...] | None = None
    params: dict = field(default_factory=dict)
    w_pool: np.ndarray | None = None
    basis: BasisSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.w_pool is not None:
            arr = np.asarray(self.w_pool, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, "w_pool", arr)

    def evaluate(self, x) -> float:
        """The estimated average interventional response at treatment ``x``."""
        if self.kind == "binary":
            for level, value in self.value_table:
                if level == float(x):
                    return value
            raise EstimationError(
                f"treatment level {x!r} is not in the estimated value table")
        if self.basis is None:
            raise EstimationError(
                "basis functions are not available on this estimate "
                "(custom bases cannot be rebuilt from a result document)")
        beta = np.array(self.coefficients)
        if self.kind == "basis_xw":
            points = np.column_stack([np.full(len(self.w_pool), float(x)), self.w_pool])
            return float(np.mean(self.basis.design(points) @ beta))
        point = np.atleast_2d(np.asarray(x, dtype=float))
        return float((self.basis.design(point) @ beta)[0])

    @property
    def effect_difference(self) -> float:
        """Plug-in contrast evaluate(1) - evaluate(0)."""
        return self.evaluate(1.0) - self.evaluate(0.0)

    def to_payload(self) -> dict:
        return {
            "method": self.method,
            "kind": self.kind,
            "n_used": self.n_used,
            "n_total": self.n_total,
            "coefficients": None if self.coefficients is None else list(self.coefficients),
            "basis_names": list(self.basis_names),
            "value_table": None if self.value_table is None
            else [[lv, val] for lv, val in self.value_table],
            "params": {k: self.params[k] for k in sorted(self.params)},
            "w_pool": None if self.w_pool is None else [list(row) for row in self.w_pool],
            "fits": [f.to_payload() for f in self.fits],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "EffectEstimate":
        basis_names = tuple(payload["basis_names"])
        return cls(
            method=payload["method"],
            kind=payload["kind"],
            n_used=int(payload["n_used"]),
            n_total=int(payload["n_total"]),
            fits=tuple(LocationFit.from_payload(f) for f in payload["fits"]),
            coefficients=None if payload["coefficients"] is None
            else tuple(float(c) for c in payload["coefficients"]),
            basis_names=basis_names,
            value_table=None if payload["value_table"] is None
            else tuple((float(lv), float(val)) for lv, val in payload["value_table"]),
            params=dict(payload["params"]),
            w_pool=None if payload["w_pool"] is None else np.array(payload["w_pool"]),
            basis=_rebuild_basis(basis_names),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, EffectEstimate):
            return NotImplemented
        if self.w_pool is None or other.w_pool is None:
            pools_equal = self.w_pool is None and other.w_pool is None
        else:
            pools_equal = np.array_equal(self.w_pool, other.w_pool, equal_nan=True)
        return (self.method == other.method and self.kind == other.kind
                and self.n_used == other.n_used and self.n_total == other.n_total
                and self.fits == other.fits and self.coefficients == other.coefficients
                and self.basis_names == other.basis_names
                and self.value_table == other.value_table
                and self.params == other.params and pools_equal)

    __hash__ = None


def _rebuild_basis(names: tuple[str, ...]) -> BasisSpec | None:
    """Reconstruct a built-in basis from its names, if they match one."""
    for degree in range(len(names)):
        if names == BasisSpec.polynomial(degree).names:
            return BasisSpec.polynomial(degree)
    for degree in range(len(names)):
        q = len(names) - degree - 1
        if q >= 1 and names == BasisSpec.polynomial_with_covariates(degree, q).names:
            return BasisSpec.polynomial_with_covariates(degree, q)
    return None


# ---------------------------------------------------------------------------
# Per-location regression
# ---------------------------------------------------------------------------

def fit_location_ols(x_series, y_series, basis: BasisSpec,
                     location_id: str = "") -> LocationFit:
    """Least-squares fit of one location's response on its basis-expanded
    treatment series.

    Missing pairs are dropped pairwise.  The system is solved through an
    orthogonal decomposition (never by inverting the normal equations), and
    the smallest singular value of the column-scaled design is reported as a
    conditioning diagnostic: below :data:`RANK_TOL` the fit is marked rank
    deficient, and with fewer usable pairs than basis functions it is marked
    excluded.
    """
    x = np.asarray(x_series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y_series, dtype=float)
    valid = np.isfinite(y) & np.isfinite(x).all(axis=1)
    n_valid = int(valid.sum())
    if n_valid < basis.p:
        return LocationFit(location_id, STATUS_EXCLUDED, (n_valid,),
                           reason="insufficient data")
    design = basis.design(x[valid])
    norms = np.linalg.norm(design, axis=0)
    if np.any(norms == 0.0):
        return LocationFit(location_id, STATUS_RANK_DEFICIENT, (n_valid,),
                           min_singular_value=0.0, reason="zero design column")
    smallest = float(np.linalg.svd(design / norms, compute_uv=False)[-1])
    if smallest < RANK_TOL:
        return LocationFit(location_id, STATUS_RANK_DEFICIENT, (n_valid,),
                           min_singular_value=smallest,
                           reason="design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(design, y[valid], rcond=None)
    if not np.all(np.isfinite(coef)):
        return LocationFit(location_id, STATUS_RANK_DEFICIENT, (n_valid,),
                           min_singular_value=smallest,
                           reason="non-finite coefficients")
    return LocationFit(location_id, STATUS_OK, (n_valid,),
                       coefficients=tuple(float(c) for c in coef),
                       min_singular_value=smallest)


def _aggregate_coefficients(cube: DataCube, fits_by_index: list[LocationFit]):
    """Mean coefficient vector over ok fits, accumulated in sorted-id order."""
    ok_rows = [np.array(fits_by_index[i].coefficients)
               for i in cube.sorted_order if fits_by_index[i].status == STATUS_OK]
    if not ok_rows:
        raise EstimationError("no usable locations: every per-location fit was excluded")
    beta = np.vstack(ok_rows).mean(axis=0)
    fits_sorted = tuple(fits_by_index[i] for i in cube.sorted_order)
    return beta, fits_sorted, len(ok_rows)


def estimate_ace(cube: DataCube, basis: BasisSpec) -> EffectEstimate:
    """Average-causal-effect estimate from per-location basis regressions.

    Fits the basis regression at every location and averages the coefficient
    vectors over locations with an ok fit; evaluating the estimate at ``x``
    therefore equals the mean of the per-location predictions at ``x``.
    """
    if basis.input_dim is not None and basis.input_dim != cube.n_treatments:
        raise ConfigError(
            f"basis expects {basis.input_dim} treatment column(s), cube has "
            f"{cube.n_treatments}")
    fits = [fit_location_ols(cube.treatments[i], cube.response[i], basis,
                             location_id=cube.locations[i].id)
            for i in range(cube.n)]
    beta, fits_sorted, n_used = _aggregate_coefficients(cube, fits)
    return EffectEstimate(
        method="lscm-basis", kind="basis", n_used=n_used, n_total=cube.n,
        fits=fits_sorted, coefficients=tuple(float(b) for b in beta),
        basis_names=basis.names, basis=basis,
        params={"degree_or_p": basis.p},
    )


# ---------------------------------------------------------------------------
# Binary treatment with exclusion of single-regime locations
# ---------------------------------------------------------------------------

def _lagged_pairs(cube: DataCube, lag: int):
    """Treatment at time t-lag paired with response at time t."""
    if lag < 0:
        raise ConfigError("lag must be non-negative")
    if lag >= cube.m:
        raise ConfigError(f"lag {lag} must be smaller than the number of time steps {cube.m}")
    if lag == 0:
        return cube.treatments[:, :, 0], cube.response
    return cube.treatments[:, :cube.m - lag, 0], cube.response[:, lag:]


def _check_binary(x: np.ndarray) -> None:
    observed = x[np.isfinite(x)]
    bad = observed[(observed != 0.0) & (observed != 1.0)]
    if bad.size:
        raise EstimationError(
            f"binary estimator requires treatment values in {{0, 1}}; "
            f"found {bad.flat[0]!r}")


def estimate_ace_binary(cube: DataCube, lag: int = 0) -> EffectEstimate:
    """Average-causal-effect estimate for a binary treatment.

    Within each location the response mean is computed per treatment regime;
    locations that never observe both regimes are excluded and the regime
    means of the remaining locations are averaged over space.  With
    ``lag=k`` the response at time t is paired with the treatment at time
    t-k and the first k time steps are dropped.
    """
    if cube.n_treatments != 1:
        raise EstimationError("binary estimator requires a one-dimensional treatment")
    _check_binary(cube.treatments[:, :, 0])
    x, y = _lagged_pairs(cube, lag)
    valid = np.isfinite(x) & np.isfinite(y)
    at1 = valid & (x == 1.0)
    at0 = valid & (x == 0.0)
    n1 = at1.sum(axis=1)
    n0 = at0.sum(axis=1)
    sum1 = np.where(at1, y, 0.0).sum(axis=1)
    sum0 = np.where(at0, y, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean1 = sum1 / n1
        mean0 = sum0 / n0
    included = (n1 > 0) & (n0 > 0)

    ids = cube.location_ids
    n0_l, n1_l = n0.tolist(), n1.tolist()
    m0_l, m1_l = mean0.tolist(), mean1.tolist()
    inc_l = included.tolist()
    fits_by_index = []
    for i in range(cube.n):
        if inc_l[i]:
            fits_by_index.append(LocationFit(
                ids[i], STATUS_OK, (n0_l[i], n1_l[i]),
                level_means=((0.0, m0_l[i]), (1.0, m1_l[i]))))
        else:
            if n0_l[i] == 0 and n1_l[i] == 0:
                reason = "no usable observations"
            else:
                reason = f"never observes treatment {0 if n0_l[i] == 0 else 1}"
            fits_by_index.append(LocationFit(
                ids[i], STATUS_EXCLUDED, (n0_l[i], n1_l[i]), reason=reason))

    order = cube.sorted_order
    keep = order[included[order]]
    if keep.size == 0:
        raise EstimationError("no location observes both treatment regimes")
    f0 = float(mean0[keep].mean())
    f1 = float(mean1[keep].mean())
    return EffectEstimate(
        method="lscm-binary", kind="binary", n_used=int(keep.size), n_total=cube.n,
        fits=tuple(fits_by_index[i] for i in order),
        value_table=((0.0, f0), (1.0, f1)),
        params={"lag": lag},
    )


# ---------------------------------------------------------------------------
# Observed-confounder extension
# ---------------------------------------------------------------------------

def estimate_ace_observed_confounder(cube: DataCube, basis: BasisSpec) -> EffectEstimate:
    """Average-causal-effect estimate adjusting for observed covariates.

    Each location's response is regressed on a basis in (treatment,
    covariates); evaluating at ``x`` averages the fitted surface over the
    pooled empirical covariate sample of the whole cube, then over the
    locations with an ok fit.
    """
    if cube.n_covariates == 0:
        raise EstimationError("observed-confounder estimator requires covariates")
    expected_dim = cube.n_treatments + cube.n_covariates
    if basis.input_dim is not None and basis.input_dim != expected_dim:
        raise ConfigError(
            f"basis expects {basis.input_dim}-d points, cube provides {expected_dim}-d "
            "(treatment columns followed by covariate columns)")
    joint = np.concatenate([cube.treatments, cube.covariates], axis=2)
    fits = [fit_location_ols(joint[i], cube.response[i], basis,
                             location_id=cube.locations[i].id)
            for i in range(cube.n)]
    beta, fits_sorted, n_used = _aggregate_coefficients(cube, fits)
    w_flat = cube.covariates.reshape(-1, cube.n_covariates)
    w_pool = w_flat[np.isfinite(w_flat).all(axis=1)]
    if len(w_pool) == 0:
        raise EstimationError("no fully observed covariate rows to pool over")
    return EffectEstimate(
        method="observed-confounder", kind="basis_xw", n_used=n_used, n_total=cube.n,
        fits=fits_sorted, coefficients=tuple(float(b) for b in beta),
        basis_names=basis.names, basis=basis, w_pool=w_pool,
        params={"pooled_w_rows": int(len(w_pool))},
    )


# ---------------------------------------------------------------------------
# Baseline models
# ---------------------------------------------------------------------------

def estimate_model1(cube: DataCube) -> EffectEstimate:
    """Baseline assuming no confounding: pooled regime means over all cells."""
    if cube.n_treatments != 1:
        raise EstimationError("model1 requires a one-dimensional treatment")
    x = cube.treatments[:, :, 0]
    _check_binary(x)
    valid = np.isfinite(x) & np.isfinite(cube.response)
    means = {}
    counts = {}
    for level in (0.0, 1.0):
        mask = valid & (x == level)
        counts[level] = int(mask.sum())
        if counts[level] == 0:
            raise EstimationError(f"no observations with treatment {level:g}")
        means[level] = float(cube.response[mask].mean())
    return EffectEstimate(
        method="model1", kind="binary", n_used=cube.n, n_total=cube.n,
        value_table=((0.0, means[0.0]), (1.0, means[1.0])),
        params={"count_0": counts[0.0], "count_1": counts[1.0]},
    )


def quantile_bin_index(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Assign each value to one of ``n_bins`` equidistant-quantile bins.

    Bin edges are the 0, 1/n_bins, ..., 1 quantiles of the finite values;
    heavily tied data may leave some bins empty.  Non-finite values get
    index -1.
    """
    if n_bins < 1:
        raise ConfigError("number of quantile bins must be positive")
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if not finite.any():
        raise EstimationError("no finite values to bin")
    edges = np.quantile(values[finite], np.linspace(0.0, 1.0, n_bins + 1))
    idx = np.searchsorted(edges[1:-1], values, side="right")
    out = np.where(finite, idx, -1)
    return out.astype(np.intp)


def estimate_model2(cube: DataCube, n_bins: int = 100, w_column: int = 0) -> EffectEstimate:
    """Baseline adjusting for one observed confounder by quantile stratification.

    All observations are partitioned into ``n_bins`` equidistant-quantile
    bins of the pooled confounder; regime means are computed within each bin
    and then averaged, unweighted, over the bins that contain both regimes.
    Bins lacking a regime are dropped and counted.
    """
    if cube.n_treatments != 1:
        raise EstimationError("model2 requires a one-dimensional treatment")
    if cube.n_covariates == 0:
        raise EstimationError("model2 requires a designated confounder column")
    if not 0 <= w_column < cube.n_covariates:
        raise ConfigError(f"w_column {w_column} out of range for {cube.n_covariates} covariates")
    x = cube.treatments[:, :, 0]
    _check_binary(x)
    w = cube.covariates[:, :, w_column]
    valid = np.isfinite(x) & np.isfinite(cube.response) & np.isfinite(w)
    if not valid.any():
        raise EstimationError("no fully observed (treatment, response, confounder) cells")

    flat_valid = valid.ravel()
    bin_of = quantile_bin_index(np.where(valid, w, np.nan).ravel(), n_bins)
    x_flat = x.ravel()
    y_flat = cube.response.ravel()
    per_level = {0.0: [], 1.0: []}
    dropped = 0
    empty = 0
    for b in range(n_bins):
        in_bin = flat_valid & (bin_of == b)
        if not in_bin.any():
            empty += 1
            continue
        mask1 = in_bin & (x_flat == 1.0)
        mask0 = in_bin & (x_flat == 0.0)
        if mask1.any() and mask0.any():
            per_level[0.0].append(float(y_flat[mask0].mean()))
            per_level[1.0].append(float(y_flat[mask1].mean()))
        else:
            dropped += 1
    if not per_level[0.0]:
        raise EstimationError("no quantile bin contains both treatment regimes")
    f0 = float(np.mean(per_level[0.0]))
    f1 = float(np.mean(per_level[1.0]))
    return EffectEstimate(
        method="model2", kind="binary", n_used=cube.n, n_total=cube.n,
        value_table=((0.0, f0), (1.0, f1)),
        params={"n_bins": n_bins, "w_column": w_column,
                "bins_used": len(per_level[0.0]), "bins_dropped": dropped,
                "bins_empty": empty},
    )
