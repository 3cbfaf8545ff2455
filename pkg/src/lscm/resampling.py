"""Permutation tests with finite-sample level for spatio-temporal panels.

The null hypothesis is "the response mechanism does not depend on the
treatment".  Because the latent confounders are constant in time, permuting
the response along the time axis (one shared permutation applied to every
location) leaves the joint law unchanged under the null, so the observed
test statistic can be compared against its distribution over resampled
cubes.  Block variants preserve short-range temporal or spatial dependence,
and two further schemes match the permutation null of the baseline models:
fully random permutation (no confounding) and permutation within quantile
bins of an observed confounder.

The p-value is ``(1 + #{resampled >= observed}) / (1 + B)``; ties count
toward the exceedance set, which can only make the test more conservative.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import estimators
from .datacube import DataCube, grid_layout
from .errors import ConfigError, LayoutError
from .estimators import BasisSpec

SCHEME_KINDS = ("time_full", "time_block", "spatial_block",
                "stratified_by_quantile", "fully_random")

#: Cap on m! for exact enumeration (7! by default).
ENUMERATION_CAP = 5040

#: Default resample count for Monte Carlo tests.
DEFAULT_RESAMPLES = 999


@dataclass(frozen=True)
class PermutationScheme:
    """Descriptor of one null-preserving resampling law.

    Every scheme permutes only the response array of a cube, leaving
    treatments and covariates untouched:

    - ``time_full``: one uniform permutation of the time indices, applied to
      every location's response series.
    - ``time_block``: contiguous time blocks of ``block_length`` steps (the
      last block may be shorter) are shuffled as units, keeping within-block
      order intact.
    - ``spatial_block``: per time step, the grid is tiled with
      ``block_cells`` x ``block_cells`` squares anchored at the minimum
      coordinate; complete tiles swap contents as units and cells outside
      any complete tile are permuted fully at random.
    - ``stratified_by_quantile``: responses move only between cells whose
      confounder falls in the same pooled quantile bin; cells with a missing
      confounder stay fixed.
    - ``fully_random``: all response cells are permuted globally.
    """

    kind: str
    block_length: int | None = None
    block_cells: int | None = None
    n_bins: int | None = None
    w_column: int = 0

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ConfigError(f"unknown permutation scheme {self.kind!r}")
        if self.kind == "time_block" and (self.block_length is None or self.block_length < 1):
            raise ConfigError("time_block requires a positive block_length")
        if self.kind == "spatial_block" and (self.block_cells is None or self.block_cells < 1):
            raise ConfigError("spatial_block requires a positive block_cells")
        if self.kind == "stratified_by_quantile" and (self.n_bins is None or self.n_bins < 1):
            raise ConfigError("stratified_by_quantile requires a positive n_bins")

    @classmethod
    def time_full(cls) -> "PermutationScheme":
        return cls("time_full")

    @classmethod
    def time_block(cls, block_length: int = 3) -> "PermutationScheme":
        return cls("time_block", block_length=block_length)

    @classmethod
    def spatial_block(cls, block_cells: int) -> "PermutationScheme":
        return cls("spatial_block", block_cells=block_cells)

    @classmethod
    def stratified_by_quantile(cls, n_bins: int = 100, w_column: int = 0) -> "PermutationScheme":
        return cls("stratified_by_quantile", n_bins=n_bins, w_column=w_column)

    @classmethod
    def fully_random(cls) -> "PermutationScheme":
        return cls("fully_random")

    def describe(self) -> str:
        if self.kind == "time_block":
            return f"time_block(block_length={self.block_length})"
        if self.kind == "spatial_block":
            return f"spatial_block(block_cells={self.block_cells})"
        if self.kind == "stratified_by_quantile":
            return f"stratified_by_quantile(n_bins={self.n_bins}, w_column={self.w_column})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "PermutationScheme":
        """Parse a CLI-style descriptor such as ``time_block:3``."""
        name, _, arg = text.partition(":")
        if name == "time_full":
            return cls.time_full()
        if name == "fully_random":
            return cls.fully_random()
        if name == "time_block":
            return cls.time_block(int(arg) if arg else 3)
        if name == "spatial_block":
            if not arg:
                raise ConfigError("spatial_block needs a block size, e.g. spatial_block:10")
            return cls.spatial_block(int(arg))
        if name == "stratified_by_quantile":
            return cls.stratified_by_quantile(int(arg) if arg else 100)
        raise ConfigError(f"unknown permutation scheme {text!r}")

    def validate_for(self, cube: DataCube) -> None:
        """Check the scheme parameters against a concrete cube."""
        if self.kind == "time_block" and self.block_length > cube.m:
            raise ConfigError(
                f"block_length {self.block_length} exceeds the {cube.m} time steps")
        if self.kind == "spatial_block":
            try:
                layout = grid_layout(cube)
            except LayoutError as exc:
                raise ConfigError(f"spatial_block requires a regular grid: {exc}") from exc
            if self.block_cells > min(len(layout.axis1), len(layout.axis2)):
                raise ConfigError(
                    f"block_cells {self.block_cells} exceeds the grid extent "
                    f"{len(layout.axis1)}x{len(layout.axis2)}")
        if self.kind == "stratified_by_quantile":
            if cube.n_covariates == 0:
                raise ConfigError("stratified_by_quantile requires a confounder column")
            if not 0 <= self.w_column < cube.n_covariates:
                raise ConfigError(
                    f"w_column {self.w_column} out of range for {cube.n_covariates} covariates")

    def to_payload(self) -> dict:
        return {"kind": self.kind, "block_length": self.block_length,
                "block_cells": self.block_cells, "n_bins": self.n_bins,
                "w_column": self.w_column}

    @classmethod
    def from_payload(cls, payload: dict) -> "PermutationScheme":
        return cls(kind=payload["kind"], block_length=payload["block_length"],
                   block_cells=payload["block_cells"], n_bins=payload["n_bins"],
                   w_column=payload["w_column"])


def _permute_time(cube: DataCube, sigma: np.ndarray) -> DataCube:
    """Apply one shared time permutation to the response of every location."""
    return cube._with_response(cube.response[:, sigma])


def apply_permutation(cube: DataCube, scheme: PermutationScheme,
                      rng: np.random.Generator) -> DataCube:
    """Resample a cube once under the scheme, permuting only the response."""
    if scheme.kind == "time_full":
        return _permute_time(cube, rng.permutation(cube.m))

    if scheme.kind == "time_block":
        scheme.validate_for(cube)
        length = scheme.block_length
        n_blocks = math.ceil(cube.m / length)
        order = rng.permutation(n_blocks)
        sigma = np.concatenate(
            [np.arange(b * length, min((b + 1) * length, cube.m)) for b in order])
        return _permute_time(cube, sigma)

    if scheme.kind == "spatial_block":
        scheme.validate_for(cube)
        layout = grid_layout(cube)
        k = scheme.block_cells
        a, b = layout.index.shape
        tiles = [layout.index[i * k:(i + 1) * k, j * k:(j + 1) * k].ravel()
                 for i in range(a // k) for j in range(b // k)]
        tile_idx = np.array(tiles, dtype=np.intp)        # (n_tiles, k*k)
        in_tile = np.zeros(cube.n, dtype=bool)
        in_tile[tile_idx.ravel()] = True
        loose = np.flatnonzero(~in_tile)
        new_resp = np.array(cube.response)
        for t in range(cube.m):
            order = rng.permutation(len(tiles))
            new_resp[tile_idx.ravel(), t] = cube.response[tile_idx[order].ravel(), t]
            if loose.size:
                shuffled = loose[rng.permutation(loose.size)]
                new_resp[loose, t] = cube.response[shuffled, t]
        return cube._with_response(new_resp)

    if scheme.kind == "stratified_by_quantile":
        scheme.validate_for(cube)
        w = cube.covariates[:, :, scheme.w_column].ravel()
        bins = estimators.quantile_bin_index(w, scheme.n_bins)
        flat = cube.response.ravel().copy()
        for b in range(scheme.n_bins):
            members = np.flatnonzero(bins == b)
            if members.size > 1:
                flat[members] = flat[members[rng.permutation(members.size)]]
        return cube._with_response(flat.reshape(cube.response.shape))

    # fully_random
    perm = rng.permutation(cube.n * cube.m)
    flat = cube.response.ravel()[perm]
    return cube._with_response(flat.reshape(cube.response.shape))


# ---------------------------------------------------------------------------
# Test statistics
# ---------------------------------------------------------------------------

class Statistic(NamedTuple):
    """A named scalar statistic evaluated on a cube."""

    name: str
    fn: Callable[[DataCube], float]

    def __call__(self, cube: DataCube) -> float:
        return float(self.fn(cube))


def effect_statistic(estimator: str, *, degree: int = 1, lag: int = 0,
                     n_bins: int = 100, w_column: int = 0) -> Statistic:
    """Plug-in statistic: estimated effect contrast between treatment 1 and 0.

    ``estimator`` is one of ``lscm-basis``, ``lscm-binary``, ``model1``,
    ``model2`` or ``observed-confounder``.
    """
    if estimator == "lscm-basis":
        basis = BasisSpec.polynomial(degree)
        return Statistic(
            f"lscm-basis:difference(degree={degree})",
            lambda cube: estimators.estimate_ace(cube, basis).effect_difference)
    if estimator == "lscm-binary":
        return Statistic(
            f"lscm-binary:difference(lag={lag})",
            lambda cube: estimators.estimate_ace_binary(cube, lag=lag).effect_difference)
    if estimator == "model1":
        return Statistic(
            "model1:difference",
            lambda cube: estimators.estimate_model1(cube).effect_difference)
    if estimator == "model2":
        return Statistic(
            f"model2:difference(n_bins={n_bins}, w_column={w_column})",
            lambda cube: estimators.estimate_model2(
                cube, n_bins=n_bins, w_column=w_column).effect_difference)
    if estimator == "observed-confounder":
        def stat(cube: DataCube) -> float:
            basis = BasisSpec.polynomial_with_covariates(degree, cube.n_covariates)
            return estimators.estimate_ace_observed_confounder(cube, basis).effect_difference
        return Statistic(f"observed-confounder:difference(degree={degree})", stat)
    raise ConfigError(f"unknown estimator {estimator!r}")


# ---------------------------------------------------------------------------
# Test results
# ---------------------------------------------------------------------------

def permutation_pvalues(observed: float, resampled) -> tuple[float, float, int]:
    """One- and two-sided permutation p-values plus the exact-tie count.

    One-sided: ``(1 + #{resampled >= observed}) / (1 + B)``.  Two-sided:
    ``min(1, 2 min(p(observed), p(-observed)))`` with the sign flipped on
    both sides.
    """
    arr = np.asarray(resampled, dtype=float)
    b = arr.size
    n_ge = int((arr >= observed).sum())
    n_le = int((arr <= observed).sum())
    p_pos = (1 + n_ge) / (1 + b)
    p_neg = (1 + n_le) / (1 + b)
    p_two = min(1.0, 2.0 * min(p_pos, p_neg))
    ties = int((arr == observed).sum())
    return p_pos, p_two, ties


@dataclass(frozen=True)
class TestResult:
    """Outcome of one permutation test.

    The p-value fields are re-derived from the resampled statistics at
    construction time, so a result object can never carry an inconsistent
    p-value.
    """

    document_kind = "test_result"
    __test__ = False  # keep pytest from collecting this as a test class

    statistic_name: str
    statistic_observed: float
    statistics_resampled: tuple[float, ...]
    b_resamples: int
    p_one_sided: float
    p_two_sided: float
    ties_count: int
    scheme: PermutationScheme
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "statistics_resampled",
                           tuple(float(v) for v in self.statistics_resampled))
        if self.b_resamples != len(self.statistics_resampled):
            raise ConfigError("b_resamples does not match the resampled statistics")
        p1, p2, ties = permutation_pvalues(self.statistic_observed,
                                           self.statistics_resampled)
        if (p1, p2, ties) != (self.p_one_sided, self.p_two_sided, self.ties_count):
            raise ConfigError("stored p-values disagree with the resampled statistics")

    @property
    def p_one_sided_fraction(self) -> tuple[int, int]:
        """The one-sided p-value as an exact fraction (numerator, denominator)."""
        arr = np.asarray(self.statistics_resampled)
        return 1 + int((arr >= self.statistic_observed).sum()), 1 + self.b_resamples

    def to_payload(self) -> dict:
        return {
            "statistic_name": self.statistic_name,
            "statistic_observed": self.statistic_observed,
            "b_resamples": self.b_resamples,
            "p_one_sided": self.p_one_sided,
            "p_two_sided": self.p_two_sided,
            "ties_count": self.ties_count,
            "scheme": self.scheme.to_payload(),
            "seed": self.seed,
            "statistics_resampled": list(self.statistics_resampled),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "TestResult":
        return cls(
            statistic_name=payload["statistic_name"],
            statistic_observed=float(payload["statistic_observed"]),
            statistics_resampled=tuple(payload["statistics_resampled"]),
            b_resamples=int(payload["b_resamples"]),
            p_one_sided=float(payload["p_one_sided"]),
            p_two_sided=float(payload["p_two_sided"]),
            ties_count=int(payload["ties_count"]),
            scheme=PermutationScheme.from_payload(payload["scheme"]),
            seed=int(payload["seed"]),
        )


def run_test(cube: DataCube, statistic, scheme: PermutationScheme,
             b_resamples: int = DEFAULT_RESAMPLES, seed: int = 0,
             threads: int = 1) -> TestResult:
    """Permutation test of "no treatment effect" with ``b_resamples`` draws.

    Resample seeds are all derived from the master seed before any parallel
    evaluation starts, so the result is bit-identical for every thread
    count.  Permutation draws are uniform with replacement and may include
    the identity; exact ties with the observed statistic count toward the
    exceedance set.

    Parameters
    ----------
    statistic : Statistic or callable
        Scalar function of a cube, e.g. from :func:`effect_statistic`.
    """
    if b_resamples < 1:
        raise ConfigError("the number of resamples must be positive")
    scheme.validate_for(cube)
    stat = statistic if isinstance(statistic, Statistic) else Statistic(
        getattr(statistic, "__name__", "statistic"), statistic)
    observed = stat(cube)
    seeds = np.random.SeedSequence(seed).spawn(b_resamples)

    def one(b: int) -> float:
        rng = np.random.default_rng(seeds[b])
        try:
            return stat(apply_permutation(cube, scheme, rng))
        except Exception as exc:
            raise type(exc)(f"statistic failed on resample {b}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            resampled = tuple(pool.map(one, range(b_resamples)))
    else:
        resampled = tuple(one(b) for b in range(b_resamples))
    p1, p2, ties = permutation_pvalues(observed, resampled)
    return TestResult(
        statistic_name=stat.name, statistic_observed=observed,
        statistics_resampled=resampled, b_resamples=b_resamples,
        p_one_sided=p1, p_two_sided=p2, ties_count=ties,
        scheme=scheme, seed=seed,
    )


@dataclass(frozen=True)
class ExactTestResult:
    """Permutation test evaluated over every time permutation."""

    statistic_name: str
    statistic_observed: float
    n_permutations: int
    count_ge: int
    count_le: int

    @property
    def p_one_sided(self) -> float:
        return self.count_ge / self.n_permutations

    @property
    def p_two_sided(self) -> float:
        return min(1.0, 2.0 * min(self.count_ge, self.count_le) / self.n_permutations)


def enumerate_exact(cube: DataCube, statistic, cap: int = ENUMERATION_CAP) -> ExactTestResult:
    """Exact permutation test enumerating all m! shared time permutations.

    The identity permutation is part of the enumeration, so the one-sided
    p-value ``#{sigma : statistic(sigma) >= observed} / m!`` is at least
    ``1/m!``.  Refuses to run when m! exceeds ``cap``.
    """
    m_fact = math.factorial(cube.m)
    if m_fact > cap:
        raise ConfigError(
            f"exact enumeration needs m! = {m_fact} statistic evaluations, above the "
            f"cap of {cap}; use run_test with Monte Carlo resampling instead")
    stat = statistic if isinstance(statistic, Statistic) else Statistic(
        getattr(statistic, "__name__", "statistic"), statistic)
    observed = stat(cube)
    count_ge = 0
    count_le = 0
    for sigma in itertools.permutations(range(cube.m)):
        value = stat(_permute_time(cube, np.array(sigma, dtype=np.intp)))
        count_ge += value >= observed
        count_le += value <= observed
    return ExactTestResult(
        statistic_name=stat.name, statistic_observed=observed,
        n_permutations=m_fact, count_ge=int(count_ge), count_le=int(count_le),
    )
