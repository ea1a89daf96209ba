import numpy as np
import pytest
from scipy.special import expit

from stratacausal import regress as rg
from stratacausal.regress import WeightedDesign


def test_linear_exact_line():
    fit = rg.fit_linear(WeightedDesign(rg.with_intercept([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]))
    np.testing.assert_allclose(fit.coefficients, [0.0, 1.0], atol=1e-12)
    assert fit.residual_sd == pytest.approx(0.0, abs=1e-12)


def test_linear_matches_pseudoinverse():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    y = X @ [1.0, -2.0, 0.5] + rng.normal(size=50)
    fit = rg.fit_linear(WeightedDesign(X, y))
    oracle = np.linalg.pinv(X) @ y
    np.testing.assert_allclose(fit.coefficients, oracle, rtol=1e-8)
    resid = y - X @ oracle
    assert fit.residual_sd == pytest.approx(np.sqrt(resid @ resid / 47), rel=1e-10)


def test_duplicate_column_dropped():
    rng = np.random.default_rng(1)
    X = rg.with_intercept(rng.normal(size=(30, 2)))
    y = rng.normal(size=30)
    base = rg.fit_linear(WeightedDesign(X, y))
    dup = rg.fit_linear(WeightedDesign(np.column_stack([X, X[:, 1]]), y))
    assert dup.kept.sum() == 3
    np.testing.assert_allclose(dup.predict(np.column_stack([X, X[:, 1]])), base.predict(X), atol=1e-10)
    assert dup.residual_sd == pytest.approx(base.residual_sd)


def test_too_few_rows():
    with pytest.raises(rg.FitError):
        rg.fit_linear(WeightedDesign(np.eye(2), [1.0, 2.0]))


def test_equal_weights_equal_unweighted():
    rng = np.random.default_rng(2)
    X = rg.with_intercept(rng.normal(size=(40, 2)))
    y = rng.normal(size=40)
    a = rg.fit_linear(WeightedDesign(X, y))
    b = rg.fit_linear(WeightedDesign(X, y, np.full(40, 3.7)))
    np.testing.assert_allclose(a.coefficients, b.coefficients, rtol=1e-10)
    assert a.residual_sd == pytest.approx(b.residual_sd, rel=1e-10)


def test_na_cells_rejected():
    with pytest.raises(rg.FitError):
        WeightedDesign(np.array([[1.0], [np.nan]]), [1.0, 2.0])


def test_draw_zero_sd_equals_mean():
    fit = rg.FitArtifact("linear", np.array([1.0, 2.0]), np.ones(2, bool), residual_sd=0.0)
    rows = rg.with_intercept([0.5, 7.0])
    np.testing.assert_array_equal(
        rg.draw_prediction(fit, rows, np.random.default_rng(0)), fit.predict(rows))


def test_draw_spread_and_reproducibility():
    rng = np.random.default_rng(3)
    X = rg.with_intercept(rng.normal(size=200))
    fit = rg.fit_linear(WeightedDesign(X, X @ [1.0, 2.0] + 1.5 * rng.normal(size=200)))
    row = np.repeat(X[:1], 10_000, axis=0)
    draws = rg.draw_prediction(fit, row, np.random.default_rng(9))
    assert abs(draws.std() / fit.residual_sd - 1) < 0.05
    np.testing.assert_array_equal(draws, rg.draw_prediction(fit, row, np.random.default_rng(9)))


def test_draw_needs_continuous_fit():
    fit = rg.fit_logistic(WeightedDesign(np.ones((4, 1)), [0.0, 1.0, 1.0, 0.0]))
    with pytest.raises(rg.FitError):
        rg.draw_prediction(fit, np.ones((1, 1)), np.random.default_rng(0))


def test_logistic_intercept_only():
    y = np.array([0, 1, 1, 1, 0, 1, 1, 0], dtype=float)
    fit = rg.fit_logistic(WeightedDesign(np.ones((8, 1)), y))
    assert fit.coefficients[0] == pytest.approx(np.log(5 / 3), abs=1e-10)
    assert fit.convergence == "converged"


def _grid_mle(X, y):
    """Coarse-to-fine grid search over a coefficient box."""
    def loglik(b0, b1):
        eta = b0[..., None] * X[:, 0] + b1[..., None] * X[:, 1]
        return np.sum(y * eta - np.logaddexp(0, eta), axis=-1)

    center, half = np.zeros(2), 8.0
    while half > 1e-6:
        g = np.linspace(-half, half, 41)
        B0, B1 = np.meshgrid(center[0] + g, center[1] + g, indexing="ij")
        ll = loglik(B0, B1)
        i, j = np.unravel_index(np.argmax(ll), ll.shape)
        center = np.array([B0[i, j], B1[i, j]])
        half /= 4
    return center


@pytest.mark.parametrize("seed", range(5))
def test_logistic_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    X = rg.with_intercept(rng.normal(size=40))
    y = (rng.random(40) < expit(X @ [0.3, 1.0])).astype(float)
    fit = rg.fit_logistic(WeightedDesign(X, y))
    np.testing.assert_allclose(fit.coefficients, _grid_mle(X, y), atol=1e-4)


def test_score_agrees_with_finite_differences():
    rng = np.random.default_rng(4)
    X = rg.with_intercept(rng.normal(size=(80, 2)))
    y = (rng.random(80) < expit(X @ [-0.2, 0.8, -0.5])).astype(float)
    d = WeightedDesign(X, y)
    fit = rg.fit_logistic(d)
    assert np.max(np.abs(rg.logistic_score(d, fit.coefficients))) < 1e-6
    beta = fit.coefficients + 0.3
    ll = lambda b: np.sum(y * (X @ b) - np.logaddexp(0, X @ b))
    h = 1e-6
    fd = np.array([(ll(beta + h * e) - ll(beta - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(rg.logistic_score(d, beta), fd, rtol=1e-4)


def test_separation_flagged():
    x = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
    y = (x > 0).astype(float)
    fit = rg.fit_logistic(WeightedDesign(rg.with_intercept(x), y))
    assert fit.convergence == "separated"
    p = fit.predict(rg.with_intercept(np.linspace(-10, 10, 21)))
    assert np.all((p > 0) & (p < 1))


def test_logistic_rejects_nonbinary():
    with pytest.raises(rg.FitError):
        rg.fit_logistic(WeightedDesign(np.ones((3, 1)), [0.0, 0.5, 1.0]))


def test_basis_hand_table():
    p = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    basis = rg.pspline_basis(p, 2)
    k1, k2 = 0.2 + 0.1 / 3, 0.3 + 0.2 / 3
    expected = np.array([
        [0, 0], [0, 0], [0.3 - k1, 0], [0.4 - k1, 0.4 - k2], [0.5 - k1, 0.5 - k2],
    ])
    np.testing.assert_allclose(basis, expected, atol=1e-12)


def test_basis_knot_boundary_and_below():
    knots = np.array([0.3, 0.6])
    np.testing.assert_array_equal(rg.truncated_linear([0.3], knots), [[0.0, 0.0]])
    np.testing.assert_array_equal(rg.truncated_linear([0.1], knots), [[0.0, 0.0]])


def test_basis_rejects_constant_and_bad_input():
    with pytest.raises(rg.FitError):
        rg.pspline_basis(np.full(5, 0.4), 2)
    with pytest.raises(rg.FitError):
        rg.pspline_basis([0.1, np.inf], 1)
    with pytest.raises(rg.FitError):
        rg.pspline_basis([0.1, 0.2], 0)


def test_knot_count_rule():
    assert rg.knot_count(10) == 1
    assert rg.knot_count(100) == 5
    assert rg.knot_count(10_000) == 15


def _sine_data(rng, n):
    p = rng.random(n)
    x = rng.normal(size=n)
    return p, x, np.sin(4 * p) + x + 0.3 * rng.normal(size=n)


def test_pspline_infinite_penalty_is_linear():
    rng = np.random.default_rng(5)
    p, x, y = _sine_data(rng, 300)
    par = WeightedDesign(rg.with_intercept(x), y)
    fit = rg.fit_pspline(p, par, penalty=1e12)
    lin = rg.fit_linear(WeightedDesign(np.column_stack([rg.with_intercept(x), p]), y))
    np.testing.assert_allclose(
        fit.predict(rg.with_intercept(x), p), lin.predict(np.column_stack([rg.with_intercept(x), p])),
        atol=1e-4)


def test_pspline_beats_linear_out_of_sample():
    rng = np.random.default_rng(6)
    p, x, y = _sine_data(rng, 500)
    fit = rg.fit_pspline(p, WeightedDesign(rg.with_intercept(x), y))
    lin = rg.fit_linear(WeightedDesign(np.column_stack([rg.with_intercept(x), p]), y))
    ph, xh, yh = _sine_data(rng, 2000)
    truth = np.sin(4 * ph) + xh
    rmse_s = np.sqrt(np.mean((fit.predict(rg.with_intercept(xh), ph) - truth) ** 2))
    rmse_l = np.sqrt(np.mean((lin.predict(np.column_stack([rg.with_intercept(xh), ph])) - truth) ** 2))
    assert rmse_s < rmse_l


def test_pspline_recovers_noiseless_linear_truth():
    rng = np.random.default_rng(7)
    p = rng.random(200)
    x = rng.normal(size=200)
    y = 1.0 + 2.0 * x - 3.0 * p
    fit = rg.fit_pspline(p, WeightedDesign(rg.with_intercept(x), y))
    np.testing.assert_allclose(fit.coefficients[:3], [1.0, 2.0, -3.0], atol=1e-6)
    np.testing.assert_allclose(fit.coefficients[3:], 0.0, atol=1e-6)
    assert fit.penalty >= rg.PENALTY_GRID[len(rg.PENALTY_GRID) // 2]


def test_pspline_permutation_invariant():
    rng = np.random.default_rng(8)
    p, x, y = _sine_data(rng, 200)
    perm = rng.permutation(200)
    a = rg.fit_pspline(p, WeightedDesign(rg.with_intercept(x), y))
    b = rg.fit_pspline(p[perm], WeightedDesign(rg.with_intercept(x[perm]), y[perm]))
    np.testing.assert_allclose(a.predict(rg.with_intercept(x), p), b.predict(rg.with_intercept(x), p),
                               atol=1e-8)


def test_pspline_continuous_in_propensity():
    rng = np.random.default_rng(9)
    p, x, y = _sine_data(rng, 400)
    fit = rg.fit_pspline(p, WeightedDesign(rg.with_intercept(x), y))
    grid = np.linspace(0, 1, 20001)
    f = fit.predict(rg.with_intercept(np.zeros_like(grid)), grid)
    assert np.max(np.abs(np.diff(f))) < 1e-3


def test_pspline_prediction_needs_propensity():
    rng = np.random.default_rng(10)
    p, x, y = _sine_data(rng, 100)
    fit = rg.fit_pspline(p, WeightedDesign(rg.with_intercept(x), y))
    with pytest.raises(rg.FitError):
        fit.predict(rg.with_intercept(x))
