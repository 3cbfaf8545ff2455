import numpy as np
import pytest

from lscm import (BasisSpec, ConfigError, EstimationError, GridSampling,
                  LscmSpec, estimate_ace, estimate_ace_binary,
                  estimate_ace_observed_confounder, estimate_model1,
                  estimate_model2, fit_location_ols, simulate_lscm)
from lscm.estimators import RANK_TOL

from conftest import line_locations, random_cube, series_cube


# -- per-location OLS ---------------------------------------------------------

def test_noiseless_linear_fit_is_exact():
    x = np.linspace(-2.0, 3.0, 10)
    fit = fit_location_ols(x, 2.0 + 3.0 * x, BasisSpec.polynomial(1))
    assert fit.status == "ok"
    assert abs(fit.coefficients[0] - 2.0) <= 1e-10
    assert abs(fit.coefficients[1] - 3.0) <= 1e-10
    assert fit.counts == (10,)


def test_constant_treatment_is_rank_deficient():
    fit = fit_location_ols(np.full(8, 1.7), np.arange(8.0), BasisSpec.polynomial(1))
    assert fit.status == "rank_deficient"
    assert fit.coefficients is None
    assert fit.min_singular_value < RANK_TOL


def test_fit_matches_normal_equations_oracle(rng):
    basis = BasisSpec.polynomial(2)
    x = rng.standard_normal(8)
    y = rng.standard_normal(8)
    fit = fit_location_ols(x, y, basis)
    design = np.column_stack([np.ones(8), x, x ** 2])
    oracle = np.linalg.inv(design.T @ design) @ design.T @ y
    assert np.max(np.abs(np.array(fit.coefficients) - oracle)) <= 1e-8


def test_insufficient_data_is_excluded():
    fit = fit_location_ols(np.array([1.0, np.nan]), np.array([2.0, 1.0]),
                           BasisSpec.polynomial(1))
    assert fit.status == "excluded" and fit.reason == "insufficient data"


def test_missing_pairs_dropped_pairwise():
    x = np.array([0.0, 1.0, 2.0, np.nan, 4.0])
    y = np.array([1.0, 3.0, np.nan, 7.0, 9.0])
    fit = fit_location_ols(x, y, BasisSpec.polynomial(1))
    assert fit.counts == (3,)
    assert abs(fit.coefficients[1] - 2.0) <= 1e-10


# -- spatial aggregation ------------------------------------------------------

def test_constant_response_gives_constant_effect(rng):
    cube = series_cube(rng.standard_normal((3, 12)), np.full((3, 12), 5.0))
    est = estimate_ace(cube, BasisSpec.polynomial(1))
    assert est.coefficients == pytest.approx((5.0, 0.0), abs=1e-9)


def test_two_location_mean_of_fits():
    x = np.array([[0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 2.0, 3.0]])
    y = np.vstack([1.0 + 2.0 * x[0], 3.0 + 4.0 * x[1]])
    est = estimate_ace(series_cube(x, y), BasisSpec.polynomial(1))
    assert est.coefficients == pytest.approx((2.0, 3.0), abs=1e-9)
    assert est.n_used == 2


def test_aggregation_is_location_order_invariant(rng):
    cube = random_cube(rng, nx=3, ny=3, m=9)
    est = estimate_ace(cube, BasisSpec.polynomial(1))
    perm = rng.permutation(cube.n)
    from lscm import DataCube
    shuffled = DataCube.from_arrays(
        tuple(cube.locations[i] for i in perm), cube.response[perm],
        cube.treatments[perm], cube.covariates[perm])
    est2 = estimate_ace(shuffled, BasisSpec.polynomial(1))
    assert est.coefficients == est2.coefficients  # bitwise: sorted-id order


def test_evaluation_is_linear_in_coefficients(rng):
    cube = random_cube(rng, nx=3, ny=2, m=10)
    basis = BasisSpec.polynomial(2)
    est = estimate_ace(cube, basis)
    for x in (-1.0, 0.0, 0.5, 2.0):
        per_location = np.mean([
            np.array(f.coefficients) @ [1.0, x, x * x]
            for f in est.fits if f.status == "ok"])
        assert abs(est.evaluate(x) - per_location) <= 1e-12


def test_all_locations_excluded_raises(rng):
    cube = series_cube(np.ones((2, 5)), rng.standard_normal((2, 5)))
    with pytest.raises(EstimationError, match="no usable locations"):
        estimate_ace(cube, BasisSpec.polynomial(1))


def test_rank_deficient_location_is_skipped_not_fatal(rng):
    x = np.vstack([np.linspace(0, 1, 8), np.full(8, 2.0)])
    y = np.vstack([1.0 + 2.0 * x[0], rng.standard_normal(8)])
    est = estimate_ace(series_cube(x, y), BasisSpec.polynomial(1))
    assert est.n_used == 1
    statuses = {f.location_id: f.status for f in est.fits}
    assert statuses["p001"] == "rank_deficient"
    assert est.coefficients == pytest.approx((1.0, 2.0), abs=1e-9)


# -- binary estimator ---------------------------------------------------------

def test_binary_constant_response():
    cube = series_cube([[0, 1, 0, 1]], [[2.0, 2.0, 2.0, 2.0]])
    est = estimate_ace_binary(cube)
    assert est.evaluate(0.0) == 2.0 and est.evaluate(1.0) == 2.0
    assert est.effect_difference == 0.0


def test_binary_exact_regime_means():
    cube = series_cube([[0, 1, 0, 1]], [[1.0, 3.0, 1.0, 3.0]])
    est = estimate_ace_binary(cube)
    assert est.evaluate(0.0) == 1.0 and est.evaluate(1.0) == 3.0
    assert est.effect_difference == 2.0


def test_binary_exclusion_of_single_regime_locations():
    x = [[0, 1, 0], [1, 1, 1], [0, 1, 1]]
    y = [[1.0, 2.0, 1.0], [5.0, 5.0, 5.0], [1.0, 3.0, 3.0]]
    est = estimate_ace_binary(series_cube(x, y))
    assert est.n_used == 2
    by_id = {f.location_id: f for f in est.fits}
    assert by_id["p001"].status == "excluded"
    assert "never observes treatment 0" in by_id["p001"].reason


def test_binary_lagged_pairing():
    # response at t pairs with treatment at t-1; first step dropped
    cube = series_cube([[1, 0, 0]], [[9.0, 5.0, 3.0]])
    est = estimate_ace_binary(cube, lag=1)
    assert est.evaluate(1.0) == 5.0  # (x_1=1, y_2=5)
    assert est.evaluate(0.0) == 3.0  # (x_2=0, y_3=3)


def test_binary_rejects_non_binary_values():
    cube = series_cube([[0.0, 0.5]], [[1.0, 2.0]])
    with pytest.raises(EstimationError, match="0, 1"):
        estimate_ace_binary(cube)


def test_binary_rejects_bad_lag():
    cube = series_cube([[0, 1]], [[1.0, 2.0]])
    with pytest.raises(ConfigError):
        estimate_ace_binary(cube, lag=2)
    with pytest.raises(ConfigError):
        estimate_ace_binary(cube, lag=-1)


def test_binary_no_location_with_both_regimes():
    cube = series_cube([[1, 1], [0, 0]], [[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(EstimationError, match="both treatment regimes"):
        estimate_ace_binary(cube)


def test_binary_exclusion_monotone_in_time(rng):
    # adding one time step can move a location excluded -> ok, never back
    from lscm import DataCube
    for trial in range(25):
        cube_long = random_cube(rng, nx=3, ny=3, m=5, binary=True, missing=0.2)
        short = DataCube.from_arrays(cube_long.locations,
                                     cube_long.response[:, :4],
                                     cube_long.treatments[:, :4])
        def statuses(c):
            try:
                return {f.location_id: f.status for f in estimate_ace_binary(c).fits}
            except EstimationError:
                return {loc.id: "excluded" for loc in c.locations}
        before, after = statuses(short), statuses(cube_long)
        for loc_id, status in before.items():
            if status == "ok":
                assert after[loc_id] == "ok"


# -- observed confounders -----------------------------------------------------

def test_observed_confounder_exact_additive_model():
    m = 12
    x = np.linspace(-1.0, 2.0, m)
    w = np.sin(np.arange(m)) + 0.1  # not affine in x, so the design is full rank
    y = 2.0 + 3.0 * x + w
    cube = series_cube([x], [y], [w])
    basis = BasisSpec.polynomial_with_covariates(1, 1)
    est = estimate_ace_observed_confounder(cube, basis)
    for point in (0.0, 1.0, -2.0):
        assert est.evaluate(point) == pytest.approx(2.0 + 3.0 * point + w.mean(), abs=1e-9)


def test_observed_confounder_matches_plain_estimator_when_irrelevant(rng):
    # W enters the data but not the response: both estimators see the same
    # additive structure and must agree up to Monte Carlo noise
    n, m = 16, 400
    locs = line_locations(n)
    intercepts = rng.standard_normal(n)
    x = rng.standard_normal((n, m))
    w = rng.standard_normal((n, m))
    y = intercepts[:, None] + 1.5 * x + 0.3 * rng.standard_normal((n, m))
    from lscm import DataCube
    cube = DataCube.from_arrays(locs, y, x, w)
    plain = estimate_ace(cube, BasisSpec.polynomial(1))
    adjusted = estimate_ace_observed_confounder(
        cube, BasisSpec.polynomial_with_covariates(1, 1))
    for point in (0.0, 1.0):
        assert abs(plain.evaluate(point) - adjusted.evaluate(point)) < 0.05


def test_observed_confounder_requires_covariates(rng):
    cube = random_cube(rng)
    with pytest.raises(EstimationError, match="covariates"):
        estimate_ace_observed_confounder(cube, BasisSpec.polynomial_with_covariates(1, 1))


# -- baseline models ----------------------------------------------------------

def test_model1_pooled_constant():
    cube = series_cube([[0, 1], [1, 0]], [[5.0, 5.0], [5.0, 5.0]])
    est = estimate_model1(cube)
    assert est.evaluate(0.0) == 5.0 and est.evaluate(1.0) == 5.0


def test_model1_pooled_means():
    cube = series_cube([[0, 1], [0, 1]], [[2.0, 3.0], [2.0, 3.0]])
    est = estimate_model1(cube)
    assert est.effect_difference == 1.0


def test_model1_missing_regime__errors():
    cube = series_cube([[1, 1], [1, 1]], [[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(EstimationError, match="treatment 0"):
        estimate_model1(cube)


def test_model2_single_bin_equals_model1(rng):
    cube = random_cube(rng, nx=4, ny=4, m=8, binary=True, n_covariates=1)
    m1 = estimate_model1(cube)
    m2 = estimate_model2(cube, n_bins=1)
    assert m2.value_table == m1.value_table  # bitwise-identical pooling


def test_model2_matches_model1_when_confounder_is_independent(rng):
    n, m = 50, 2000
    x = rng.integers(0, 2, size=(n, m)).astype(float)
    y = 1.0 + 0.5 * x + rng.standard_normal((n, m))
    w = rng.standard_normal((n, m))
    cube = series_cube(x, y, w)
    m1 = estimate_model1(cube)
    m2 = estimate_model2(cube, n_bins=100)
    assert abs(m1.effect_difference - m2.effect_difference) < 0.02


def test_model2_removes_pure_confounder_dependence(rng):
    # response equals the confounder; treatment randomized within W levels:
    # the stratified contrast must vanish up to bin width
    n_obs = 100_000
    w = rng.uniform(0.0, 1.0, n_obs)
    x = (rng.random(n_obs) < 0.5).astype(float)
    y = w.copy()
    cube = series_cube(x[None, :], y[None, :], w[None, :])
    est = estimate_model2(cube, n_bins=100)
    assert abs(est.effect_difference) < 0.005
    # while the unadjusted contrast is also ~0 here, a confounded design is not:
    x_conf = (rng.random(n_obs) < np.clip(w, 0.05, 0.95)).astype(float)
    cube_conf = series_cube(x_conf[None, :], w[None, :], w[None, :])
    naive = estimate_model1(cube_conf).effect_difference
    adjusted = estimate_model2(cube_conf, n_bins=100).effect_difference
    assert naive > 0.2
    assert abs(adjusted) < 0.01


def test_model2_reports_dropped_bins():
    w = np.arange(20.0)
    x = (w >= 10).astype(float)  # regime fully determined by the confounder
    cube = series_cube(x[None, :], np.ones((1, 20)), w[None, :])
    with pytest.raises(EstimationError, match="both treatment regimes"):
        estimate_model2(cube, n_bins=2)
    est = estimate_model2(cube, n_bins=1)
    assert est.params["bins_used"] == 1


def test_model2_requires_confounder_column(rng):
    cube = random_cube(rng, binary=True)
    with pytest.raises(EstimationError, match="confounder"):
        estimate_model2(cube)
    cube_w = random_cube(rng, binary=True, n_covariates=1)
    with pytest.raises(ConfigError, match="w_column"):
        estimate_model2(cube_w, w_column=3)


# -- basis validation ---------------------------------------------------------

def test_basis_requires_intercept_first():
    bad = BasisSpec((lambda pts: pts[:, 0],), ("x",), input_dim=1)
    with pytest.raises(ConfigError, match="identically 1"):
        bad.design(np.array([[1.0], [2.0]]))


def test_basis_input_dim_checked(rng):
    cube = random_cube(rng)
    with pytest.raises(ConfigError, match="treatment column"):
        estimate_ace(cube, BasisSpec.polynomial_with_covariates(1, 1))


def test_polynomial_names():
    assert BasisSpec.polynomial(2).names == ("1", "x", "x^2")
    assert BasisSpec.polynomial_with_covariates(1, 2).names == ("1", "x", "w1", "w2")


# -- recovery on simulated data (small scale) ---------------------------------

def test_recovers_effect_on_simulated_panel():
    # a single small grid leaves visible spatial noise in the latent average,
    # so check the mean coefficient vector over several replicates
    betas = []
    for seed in range(8):
        cube, _ = simulate_lscm(LscmSpec(grid=GridSampling.square(8), m=400, seed=seed))
        betas.append(estimate_ace(cube, BasisSpec.polynomial(1)).coefficients)
    mean = np.mean(betas, axis=0)
    assert abs(mean[0] - 1.0) < 0.5
    assert abs(mean[1] - 2.0) < 0.5
