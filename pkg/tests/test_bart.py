import numpy as np
import pytest
from scipy.special import ndtr

from stratacausal import bart
from stratacausal.bart import BartConfig, DESK_CONFIG

SMALL = BartConfig(m=20, n_burn=50, n_keep=50)


def _step(rng, n):
    x = rng.uniform(-1, 1, size=(n, 1))
    return x, (x[:, 0] > 0).astype(float) + 0.1 * rng.normal(size=n)


def test_config_invariants():
    for bad in (dict(m=0), dict(n_keep=0), dict(split_alpha=1.0), dict(split_beta=-1.0)):
        with pytest.raises(bart.BartError):
            BartConfig(**bad)


def test_constant_response():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 2))
    post = bart.bart_fit(X, np.full(100, 3.25), SMALL, rng)
    pred = bart.bart_predict(post, rng.normal(size=(20, 2)))
    np.testing.assert_allclose(pred.mean(axis=0), 3.25, atol=1e-6)
    assert np.all(post.sigma < 1e-6)


def test_step_function_halves_rmse():
    rng = np.random.default_rng(1)
    X, y = _step(rng, 500)
    post = bart.bart_fit(X, y, DESK_CONFIG, rng)
    fit = bart.bart_predict(post, X).mean(axis=0)
    rmse = np.sqrt(np.mean((fit - y) ** 2))
    assert rmse < 0.5 * y.std()
    Xh, yh = _step(rng, 500)
    holdout = np.sqrt(np.mean((bart.bart_predict(post, Xh).mean(axis=0) - yh) ** 2))
    assert holdout < 0.5 * yh.std()


def test_seed_determinism():
    X, y = _step(np.random.default_rng(2), 200)
    a = bart.bart_fit(X, y, SMALL, np.random.default_rng(5))
    b = bart.bart_fit(X, y, SMALL, np.random.default_rng(5))
    np.testing.assert_array_equal(a.sigma, b.sigma)
    np.testing.assert_array_equal(bart.bart_predict(a, X), bart.bart_predict(b, X))


def test_too_few_rows():
    with pytest.raises(bart.BartError):
        bart.bart_fit(np.zeros((1, 1)), [1.0], SMALL, np.random.default_rng(0))


def test_no_usable_split_variable():
    with pytest.raises(bart.BartError):
        bart.bart_fit(np.ones((20, 1)), np.arange(20.0), SMALL, np.random.default_rng(0))


def test_probit_null_design_calibration():
    # discrete design: every covariate cell holds hundreds of rows
    rng = np.random.default_rng(3)
    n = 2000
    X = rng.integers(0, 2, size=(n, 2)).astype(float)
    y = (rng.random(n) < 0.7).astype(float)
    post = bart.bart_fit_probit(X, y, DESK_CONFIG, rng)
    cells = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    prob = bart.bart_predict(post, cells).mean(axis=0)
    assert np.all((prob >= 0.65) & (prob <= 0.75)), prob


def test_probit_null_continuous_calibration_in_the_large():
    rng = np.random.default_rng(4)
    n = 2000
    X = rng.normal(size=(n, 2))
    y = (rng.random(n) < 0.7).astype(float)
    post = bart.bart_fit_probit(X, y, DESK_CONFIG, rng)
    prob = bart.bart_predict(post, rng.normal(size=(500, 2))).mean(axis=0)
    assert abs(prob.mean() - 0.7) < 0.05


def test_probit_threshold_recovery():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, size=(1000, 1))
    y = (x[:, 0] > 0.2).astype(float)
    post = bart.bart_fit_probit(x, y, DESK_CONFIG, rng)
    xh = rng.uniform(-1, 1, size=(1000, 1))
    prob = bart.bart_predict(post, xh).mean(axis=0)
    assert np.mean((prob > 0.5) == (xh[:, 0] > 0.2)) > 0.9
    assert np.all((prob > 0) & (prob < 1))


def test_probit_single_class():
    with pytest.raises(bart.BartError):
        bart.bart_fit_probit(np.arange(10.0)[:, None], np.ones(10), SMALL, np.random.default_rng(0))


def test_mia_all_na_rows():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(300, 3))
    X[rng.random((300, 3)) < 0.2] = np.nan
    y = np.nan_to_num(X[:, 0]) + rng.normal(size=300)
    post = bart.bart_fit(X, y, SMALL, rng)
    pred = bart.bart_predict(post, np.full((4, 3), np.nan))
    assert pred.shape == (SMALL.n_keep, 4)
    assert np.all(np.isfinite(pred))
    # identical rows route identically
    assert np.all(pred == pred[:, :1])


def test_mia_disabled_rejects_na():
    cfg = BartConfig(m=5, n_burn=5, n_keep=5, mia_enabled=False)
    X = np.arange(20.0)[:, None]
    post = bart.bart_fit(X, X[:, 0], cfg, np.random.default_rng(0))
    with pytest.raises(bart.BartError):
        bart.bart_predict(post, np.array([[np.nan]]))


def test_schema_mismatch():
    X, y = _step(np.random.default_rng(7), 50)
    post = bart.bart_fit(X, y, SMALL, np.random.default_rng(0))
    with pytest.raises(bart.BartError):
        bart.bart_predict(post, np.zeros((2, 2)))


def test_sum_of_trees_structure():
    X, y = _step(np.random.default_rng(8), 200)
    post = bart.bart_fit(X, y, SMALL, np.random.default_rng(1))
    assert all(len(forest) == SMALL.m for forest in post.trees)
    assert np.all(post.sigma > 0) and np.all(np.isfinite(post.sigma))


def test_predict_is_offset_plus_scaled_tree_sum():
    X, y = _step(np.random.default_rng(9), 200)
    post = bart.bart_fit(X, y, SMALL, np.random.default_rng(2))
    rows = np.linspace(-1, 1, 7)[:, None]
    per_tree = np.array([[bart._route(s, rows) for s in forest] for forest in post.trees])
    np.testing.assert_allclose(
        bart.bart_predict(post, rows), post.offset + post.scale * per_tree.sum(axis=1), rtol=1e-12)


def test_probit_probabilities_monotone_in_latent():
    rng = np.random.default_rng(10)
    x = rng.uniform(-1, 1, size=(300, 1))
    y = (rng.random(300) < ndtr(2 * x[:, 0])).astype(float)
    post = bart.bart_fit_probit(x, y, SMALL, rng)
    f = post.latent(x)
    p = bart.bart_predict(post, x)
    order = np.argsort(f[0])
    assert np.all(np.diff(p[0][order]) >= 0)


def test_draw_reproducible_and_shaped():
    X, y = _step(np.random.default_rng(11), 100)
    post = bart.bart_fit(X, y, SMALL, np.random.default_rng(3))
    a = bart.bart_draw(post, X, np.random.default_rng(4))
    np.testing.assert_array_equal(a, bart.bart_draw(post, X, np.random.default_rng(4)))
    assert a.shape == (100,)
