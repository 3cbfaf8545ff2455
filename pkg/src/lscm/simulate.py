"""Seedable simulation of stationary Gaussian random fields and synthetic
spatio-temporal datasets with time-invariant latent confounding.

The generative model draws two latent Gaussian fields once per dataset and
reuses them at every time step, while the treatment and response receive
fresh spatially correlated noise per step.  Under the built-in structural
forms the average interventional response is known in closed form, which
makes the simulator usable as a ground-truth oracle for the estimators and
tests in this package.

Reproducibility contract: a master seed deterministically derives one
substream per random field (the two latent fields, then the treatment and
response noise fields of each time step), so extending a simulation in time
never perturbs the draws of earlier steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datacube import DataCube, Location
from .errors import ConfigError, NumericalError

#: Structural forms available to :func:`simulate_lscm`.
#:
#: - ``confounded_linear``: continuous treatment; the response is linear in
#:   the treatment with a latent-dependent slope and intercept.  The average
#:   interventional response is ``x -> 1 + 2 x``.
#: - ``confounded_linear_binary``: same response mechanism, but the treatment
#:   is thresholded to {0, 1}.
#: - ``confounded_null`` / ``confounded_null_binary``: the response mechanism
#:   is constant in the treatment (average interventional response 1), while
#:   the treatment still depends on the latent fields.  These are the null
#:   forms used to check test levels.
FORMS = (
    "confounded_linear",
    "confounded_linear_binary",
    "confounded_null",
    "confounded_null_binary",
)

#: Threshold applied to the continuous treatment in the binary forms.
BINARY_THRESHOLD = 1.0

_JITTER_START = 1e-10
_JITTER_MAX = 1e-6


@dataclass(frozen=True)
class CovarianceModel:
    """Stationary covariance function for Gaussian field simulation.

    The ``exponential`` kind evaluates ``u -> exp(-||u||_2 / (2 * scale))``,
    so ``scale=1`` gives unit variance with correlation ``exp(-1)`` at
    distance 2.
    """

    kind: str = "exponential"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind != "exponential":
            raise ConfigError(f"unknown covariance kind {self.kind!r}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ConfigError("covariance scale must be a positive finite number")

    def __call__(self, dist):
        """Covariance at the given separation distance(s)."""
        return np.exp(-0.5 * np.asarray(dist, dtype=float) / self.scale)

    def matrix(self, locations) -> np.ndarray:
        """Covariance matrix over a list of locations."""
        pts = np.array([loc.coords for loc in locations], dtype=float)
        diff = pts[:, None, :] - pts[None, :, :]
        return self(np.sqrt((diff ** 2).sum(axis=2)))


@dataclass(frozen=True)
class GridSampling:
    """Regular rectangular sampling layout.

    Locations are enumerated row-major (first axis outer, second inner) with
    equal spacing along both axes, matching the sampling scheme under which
    the spatial average of a stationary field with vanishing long-range
    covariance obeys a law of large numbers.
    """

    nx: int
    ny: int
    spacing: float = 1.0
    origin: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigError("grid dimensions must be positive")
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ConfigError("grid spacing must be a positive finite number")

    @classmethod
    def square(cls, side: int, spacing: float = 1.0,
               origin: tuple[float, float] = (1.0, 1.0)) -> "GridSampling":
        return cls(side, side, spacing, origin)

    @property
    def n(self) -> int:
        return self.nx * self.ny

    def locations(self) -> tuple[Location, ...]:
        wi, wj = len(str(self.nx)), len(str(self.ny))
        out = []
        for i in range(1, self.nx + 1):
            for j in range(1, self.ny + 1):
                out.append(Location(
                    f"g{i:0{wi}d}_{j:0{wj}d}",
                    self.origin[0] + (i - 1) * self.spacing,
                    self.origin[1] + (j - 1) * self.spacing,
                ))
        return tuple(out)


class GpSampler:
    """Gaussian field sampler with one factorization reused across draws.

    The covariance matrix gets an additive diagonal jitter starting at 1e-10
    and escalating tenfold up to 1e-6 until the Cholesky factorization
    succeeds; a failure past that point raises :class:`NumericalError`
    naming the smallest pivot.
    """

    def __init__(self, cov: CovarianceModel, locations):
        locations = tuple(locations)
        if len(set(loc.coords for loc in locations)) != len(locations):
            raise ConfigError("locations for field sampling must be distinct")
        self.locations = locations
        self.covariance = cov.matrix(locations)
        self._chol, self.jitter = _factor_with_jitter(self.covariance)

    @property
    def n(self) -> int:
        return len(self.locations)

    def draw(self, rng: np.random.Generator, k: int = 1) -> np.ndarray:
        """Draw ``k`` independent mean-zero field realizations, shape (k, n)."""
        z = rng.standard_normal((k, self.n))
        return z @ self._chol.T


def _factor_with_jitter(sigma: np.ndarray) -> tuple[np.ndarray, float]:
    n = sigma.shape[0]
    jitter = _JITTER_START
    while True:
        try:
            return np.linalg.cholesky(sigma + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            if jitter >= _JITTER_MAX:
                pivot = float(np.linalg.eigvalsh(sigma + jitter * np.eye(n))[0])
                raise NumericalError(
                    f"covariance factorization failed; smallest pivot after "
                    f"jitter {jitter:g} is {pivot:.6e}") from None
            jitter *= 10.0


def sample_gp(cov: CovarianceModel, locations, k: int, seed) -> np.ndarray:
    """Draw ``k`` independent mean-zero Gaussian vectors over the locations.

    Deterministic given the seed.  Returns an array of shape (k, n).
    """
    rng = np.random.default_rng(seed)
    return GpSampler(cov, locations).draw(rng, k)


@dataclass(frozen=True)
class LscmSpec:
    """Specification of one synthetic dataset.

    ``form`` selects the structural recipe from :data:`FORMS`; ``seed`` is
    the master seed from which all field substreams derive.
    """

    grid: GridSampling
    m: int
    form: str = "confounded_linear"
    seed: int = 0

    def __post_init__(self):
        if self.form not in FORMS:
            raise ConfigError(f"unknown structural form {self.form!r}; choose from {FORMS}")
        if self.m < 1:
            raise ConfigError("m must be a positive number of time steps")

    @property
    def is_binary(self) -> bool:
        return self.form.endswith("_binary")

    @property
    def is_null(self) -> bool:
        return "null" in self.form


@dataclass(frozen=True)
class LatentFields:
    """Per-location values of the time-invariant latent confounder pair.

    ``first`` is a unit-variance, mean-zero field; ``second`` has mean 1,
    unit variance and correlation 1/2 with ``first``.  Both are constant in
    time by construction.  The record is diagnostic output only and must
    never enter an estimator.
    """

    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        for name in ("first", "second"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def interaction(self) -> np.ndarray:
        """Product of the two fields; drives the treatment-response confounding."""
        return self.first * self.second


def _field_rngs(seed: int, m: int):
    """One child stream per field: latent pair, then (treatment noise,
    response noise) per time step.  Stream k is the same for every m."""
    children = np.random.SeedSequence(seed).spawn(2 + 2 * m)
    return [np.random.default_rng(c) for c in children]


def _spatial_trend(locations) -> np.ndarray:
    pts = np.array([loc.coords for loc in locations])
    return np.exp(-(pts ** 2).sum(axis=1) / 1000.0)


def _coupling(t: int) -> float:
    """Time-varying coefficient tying the treatment to the latent interaction."""
    return 0.2 + 0.1 * math.sin(2.0 * math.pi * t / 100.0)


def _response(form: str, x, first, second, eps):
    """Structural response mechanism, shared by simulation and intervention."""
    if form.startswith("confounded_null"):
        return first ** 2 + np.abs(second) * eps
    return (1.5 + first * second) * x + first ** 2 + np.abs(second) * eps


def analytic_average_effect(form: str, x) -> float:
    """Closed-form average interventional response for a structural form."""
    if form not in FORMS:
        raise ConfigError(f"unknown structural form {form!r}")
    if "null" in form:
        return 1.0
    return 1.0 + 2.0 * float(x)


def simulate_lscm(spec: LscmSpec) -> tuple[DataCube, LatentFields]:
    """Simulate one observational dataset from the given specification.

    Returns the data cube together with the hidden latent-field record.  The
    simulation is bit-reproducible: identical specs give identical cubes.
    """
    locations = spec.grid.locations()
    sampler = GpSampler(CovarianceModel(), locations)
    rngs = _field_rngs(spec.seed, spec.m)
    first = sampler.draw(rngs[0])[0]
    raw_second = sampler.draw(rngs[1])[0]
    second = 1.0 + 0.5 * first + (math.sqrt(3.0) / 2.0) * raw_second
    interaction = first * second

    trend = _spatial_trend(locations)
    n = len(locations)
    x = np.empty((n, spec.m))
    y = np.empty((n, spec.m))
    for k, t in enumerate(range(1, spec.m + 1)):
        xi = sampler.draw(rngs[2 + 2 * k])[0]
        eps = sampler.draw(rngs[3 + 2 * k])[0]
        x_cont = trend + _coupling(t) * interaction + 0.5 * xi
        x[:, k] = (x_cont > BINARY_THRESHOLD).astype(float) if spec.is_binary else x_cont
        y[:, k] = _response(spec.form, x[:, k], first, second, eps)

    cube = DataCube.from_arrays(locations, y, x)
    return cube, LatentFields(first=first, second=second)


def simulate_intervention(spec: LscmSpec, x, draws: int, seed) -> np.ndarray:
    """Monte Carlo sample of the response under an intervention fixing the
    treatment to ``x``.

    Each draw samples a fresh latent pair and response noise at a single
    site and evaluates the structural response mechanism at the forced
    treatment value; the sample mean estimates the average interventional
    response at ``x``.
    """
    if draws < 1:
        raise ConfigError("draws must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    z = rng.standard_normal((3, draws))
    first = z[0]
    second = 1.0 + 0.5 * z[0] + (math.sqrt(3.0) / 2.0) * z[1]
    return _response(spec.form, float(x), first, second, z[2])
