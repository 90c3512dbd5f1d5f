import math

import numpy as np
import pytest
from oracles import dense_bayes_oracle
from shapely.geometry import box

from geodose.grid import build_grid
from geodose.inference import (
    DesignError,
    FieldSpec,
    FitFormatError,
    FitSettings,
    HyperPoint,
    LatentModel,
    ModelSpec,
    PredictionSurface,
    backtransform,
    fit,
    load_fit,
    log_marginal_likelihood,
    mixture_moments,
    predict,
    predict_points,
    sample_conditional,
    sample_posterior,
    save_fit,
)
from geodose.mesh import build_mesh
from geodose.priors import default_field_prior, extended_field_priors
from geodose.simulate import simulate_matern, uniform_points
from geodose.spde import MaternParams

SIDE = 6_000.0


@pytest.fixture(scope="module")
def meshes():
    coarse = build_mesh(box(0, 0, SIDE, SIDE), 1200, 1600, 25, extension=1500)
    fine = build_mesh(box(0, 0, SIDE, SIDE), 900, 1200, 25, extension=0)
    return coarse, fine


def _data(n=50, p=3, seed=0):
    r = np.random.default_rng(seed)
    coords = r.uniform(0, SIDE, size=(n, 2))
    X = np.column_stack([np.ones(n), r.normal(size=(n, p - 1))]) if p else np.zeros((n, 0))
    y = 3.9 + 0.3 * np.sin(coords[:, 0] / 1500) + 0.1 * r.normal(size=n)
    if p > 1:
        y = y + X[:, 1:] @ np.linspace(0.2, -0.1, p - 1)
    return coords, X, y


def _spec(variant, meshes, X):
    coarse, fine = meshes
    if variant == "linear":
        return ModelSpec(X, ())
    if variant == "spatial":
        return ModelSpec(X[:, :1], (FieldSpec(coarse, default_field_prior()),))
    if variant == "mixed":
        return ModelSpec(X, (FieldSpec(coarse, default_field_prior()),))
    pri = extended_field_priors()
    return ModelSpec(X, (FieldSpec(coarse, pri[0]), FieldSpec(fine, pri[1])))


THETAS = {
    "linear": [math.log(25.0)],
    "spatial": [math.log(25.0), math.log(3000.0), math.log(0.4)],
    "mixed": [math.log(25.0), math.log(3000.0), math.log(0.4)],
    "extended": [math.log(25.0), math.log(4000.0), math.log(0.3), math.log(900.0), math.log(0.2)],
}


@pytest.mark.parametrize("variant", ["linear", "spatial", "mixed", "extended"])
def test_conditional_matches_dense_bayes(variant, meshes):
    coords, X, y = _data()
    spec = _spec(variant, meshes, X)
    model = LatentModel(spec, coords, y)
    assert model.n_latent <= 200
    assert spec.variant == variant
    theta = THETAS[variant]
    cond = model.condition(theta)
    mu, Sigma, lml = dense_bayes_oracle(spec, theta, coords, y)
    np.testing.assert_allclose(cond.mean, mu, rtol=1e-8, atol=1e-10 * np.abs(mu).max())
    S = cond.chol.solve(np.eye(model.n_latent))
    np.testing.assert_allclose(S, Sigma, rtol=1e-8, atol=1e-8 * np.abs(Sigma).max())
    assert cond.log_ml == pytest.approx(lml, rel=1e-8)


def test_intercept_only_closed_form():
    coords = np.zeros((3, 2))
    spec = ModelSpec(np.ones((3, 1)), ())
    val = log_marginal_likelihood(spec, [0.0], np.zeros(3), coords)
    cov = np.eye(3) + 1000.0 * np.ones((3, 3))
    ref = -0.5 * (3 * math.log(2 * math.pi) + np.linalg.slogdet(cov)[1])
    assert val == pytest.approx(ref, rel=1e-12)


def test_log_ml_permutation_invariant(meshes):
    coords, X, y = _data(seed=4)
    spec = _spec("mixed", meshes, X)
    perm = np.random.default_rng(1).permutation(len(y))
    a = log_marginal_likelihood(spec, THETAS["mixed"], y, coords)
    b = log_marginal_likelihood(spec.with_rows(perm), THETAS["mixed"], y[perm], coords[perm])
    assert abs(a - b) <= 1e-12 * abs(a)


def test_hyperpoint_input(meshes):
    coords, X, y = _data()
    spec = _spec("mixed", meshes, X)
    hp = HyperPoint.from_natural(25.0, [MaternParams(3000.0, 0.4)])
    assert log_marginal_likelihood(spec, hp, y, coords) == pytest.approx(
        log_marginal_likelihood(spec, THETAS["mixed"], y, coords), rel=1e-14
    )


def test_design_validation():
    X = np.ones((10, 2))
    X[:, 1] = 0.0
    with pytest.raises(DesignError, match="all-zero"):
        ModelSpec(X, ())
    X = np.column_stack([np.ones(10), np.ones(10)])
    with pytest.raises(DesignError, match="rank"):
        ModelSpec(X, ())
    with pytest.raises(DesignError):
        ModelSpec(np.ones((2, 3)) * np.arange(1, 4), ())
    with pytest.raises(DesignError):
        ModelSpec(np.array([[1.0], [np.nan], [1.0]]), ())


def test_observations_outside_mesh_rejected(meshes):
    coords, X, y = _data()
    coords[0] = [1e6, 1e6]
    with pytest.raises(Exception, match="outside"):
        LatentModel(_spec("mixed", meshes, X), coords, y)


def test_param_names_and_counts(meshes):
    _, X, _ = _data()
    assert _spec("linear", meshes, X).n_hyper == 1
    assert _spec("extended", meshes, X).param_names == [
        "log_precision", "log_range_1", "log_sigma_1", "log_range_2", "log_sigma_2",
    ]


@pytest.fixture(scope="module")
def mixed_fit(meshes):
    coords, X, y = _data(n=80, seed=2)
    spec = _spec("mixed", meshes, X)
    return fit(spec, y, coords, FitSettings(grid_steps=1)), coords, X, y


def test_grid_weights(mixed_fit):
    res = mixed_fit[0]
    assert res.n_configs == 27
    assert res.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(res.weights >= 0)
    assert res.mode_index == int(np.argmax(res.weights))
    np.testing.assert_allclose(res.thetas[res.mode_index], res.mode)


def test_mode_strategy_single_point(meshes):
    coords, X, y = _data(n=80, seed=2)
    res = fit(_spec("mixed", meshes, X), y, coords, FitSettings(strategy="mode"))
    assert res.n_configs == 1 and res.hessian is None
    assert res.weights.tolist() == [1.0]


def test_summary_tables(mixed_fit):
    res = mixed_fit[0]
    names = [r["parameter"] for r in res.hyper_summary()]
    assert names == ["precision", "range_km", "sigma"]
    coefs = res.coefficient_summary()
    assert [c["coefficient"] for c in coefs] == ["x0", "x1", "x2"]
    assert all(c["sd"] > 0 for c in coefs)


def test_noiseless_recovers_coefficients():
    r = np.random.default_rng(0)
    n = 60
    X = np.column_stack([np.ones(n), r.normal(size=n), r.uniform(size=n)])
    beta0 = np.array([3.9, -0.4, 0.25])
    y = X @ beta0 + 1e-6 * r.normal(size=n)
    res = fit(ModelSpec(X, ()), y, r.uniform(size=(n, 2)), FitSettings(strategy="mode"))
    np.testing.assert_allclose(res.beta_mean(), beta0, atol=1e-3)


def test_zero_field_surface_is_intercept():
    r = np.random.default_rng(1)
    n = 40
    y = 4.0 + 0.2 * r.normal(size=n)
    res = fit(ModelSpec(np.ones((n, 1)), ()), y, r.uniform(size=(n, 2)), FitSettings(grid_steps=1))
    g, pts, inside = build_grid(box(0, 0, 1000, 1000), 100)
    surf = predict(res, g, np.ones((len(pts), 1)))
    np.testing.assert_allclose(surf.mean, res.beta_mean()[0], rtol=1e-12)
    assert surf.mask.all()


def test_interpolation_limit(meshes):
    r = np.random.default_rng(3)
    coords = r.uniform(0, SIDE, size=(80, 2))
    X = np.ones((80, 1))
    y = 3.9 + 0.3 * np.sin(coords[:, 0] / 1500) + 0.003 * r.normal(size=80)
    spec = ModelSpec(X, (FieldSpec(meshes[0], default_field_prior()),))
    res = fit(spec, y, coords, FitSettings(strategy="mode", initial={"precision": 1e4, "range_1": 5000.0}))
    assert res.n_configs == 1
    assert res.modal_params()[0] > 100
    m, s, inside, _ = predict_points(res, coords[:5], X[:5], include_noise=True)
    assert inside.all()
    assert np.all(np.abs(m - y[:5]) <= 2 * s)


def test_sd_smaller_at_data_than_far_away(mixed_fit):
    res, coords, X, _ = mixed_fit
    far = np.array([[-300.0, 3000.0]])
    near = coords[:1]
    _, s_near, _, _ = predict_points(res, near, X[:1])
    _, s_far, _, _ = predict_points(res, far, X[:1])
    assert s_near[0] < s_far[0]


def test_variance_exact_vs_sample(mixed_fit):
    res, coords, X, _ = mixed_fit
    pts = coords[:6]
    _, s_exact, _, _ = predict_points(res, pts, X[:6])
    _, s_mc, _, info = predict_points(res, pts, X[:6], variance="sample", n_variance_samples=4000, seed=5)
    np.testing.assert_allclose(s_mc, s_exact, rtol=0.06)
    assert info["max_mc_variance_error"] > 0
    m_none, s_none, _, _ = predict_points(res, pts, X[:6], variance="none")
    assert np.isnan(s_none).all() and np.isfinite(m_none).all()


def test_mixture_moments_oracle():
    w = np.array([0.2, 0.5, 0.3])
    means = np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
    var = np.array([[1.0, 0.5], [2.0, 0.5], [0.5, 0.5]])
    m, v = mixture_moments(w, means, var)
    np.testing.assert_allclose(m, [1.1, 1.0])
    np.testing.assert_allclose(v, [0.2 * 1 + 0.5 * 2 + 0.3 * 0.5 + (0.2 * 0 + 0.5 * 1 + 0.3 * 4) - 1.21, 0.5])


def test_backtransform_modes():
    mean = np.array([3.93, 3.0, 4.0])
    sd = np.array([0.0, 0.2, 0.5])
    surf = PredictionSurface(None, np.zeros((3, 2)), mean, sd, np.ones(3, bool))
    med = backtransform(surf, "median").dose
    avg = backtransform(surf, "mean").dose
    assert med[0] == pytest.approx(50.9, abs=0.05)
    assert med[0] == avg[0]
    assert np.all(avg >= med)
    with pytest.raises(ValueError):
        backtransform(surf, "mode")


def test_sample_shapes(mixed_fit):
    res = mixed_fit[0]
    draws = sample_posterior(res, 100, seed=1)
    assert draws.shape == (100, res.model.n_latent)


def test_conditional_sampling_moments(meshes):
    coords, X, y = _data(n=50, seed=6)
    model = LatentModel(_spec("mixed", meshes, X), coords, y)
    assert model.n_latent <= 100
    theta = THETAS["mixed"]
    cond = model.condition(theta)
    draws = sample_conditional(model, theta, 10_000, seed=3)
    Sigma = cond.chol.solve(np.eye(model.n_latent))
    se = np.sqrt(np.diag(Sigma) / len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - cond.mean) <= 3.5 * se)
    i, j = 3, 4
    c = np.cov(draws[:, [i, j]].T)
    np.testing.assert_allclose(c, Sigma[np.ix_([i, j], [i, j])], rtol=0.1)


def test_save_load_round_trip(mixed_fit, tmp_path):
    res, coords, X, _ = mixed_fit
    p = tmp_path / "fit.npz"
    save_fit(res, p)
    back = load_fit(p)
    np.testing.assert_array_equal(back.thetas, res.thetas)
    np.testing.assert_array_equal(back.weights, res.weights)
    assert back.spec.variant == "mixed"
    a = predict_points(res, coords[:10], X[:10])
    b = predict_points(back, coords[:10], X[:10])
    np.testing.assert_allclose(a[0], b[0], rtol=1e-13)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12)


def test_load_rejects_other_versions(mixed_fit, tmp_path):
    import json

    p = tmp_path / "fit.npz"
    save_fit(mixed_fit[0], p)
    with np.load(p) as z:
        d = {k: z[k] for k in z.files}
    h = json.loads(str(d["header"]))
    h["version"] = 99
    d["header"] = np.array(json.dumps(h))
    np.savez(tmp_path / "bad.npz", **d)
    with pytest.raises(FitFormatError, match="version"):
        load_fit(tmp_path / "bad.npz")
    np.savez(tmp_path / "other.npz", x=np.zeros(2))
    with pytest.raises(FitFormatError):
        load_fit(tmp_path / "other.npz")


@pytest.fixture(scope="module")
def synthetic_field():
    r = np.random.default_rng(11)
    side = 40_000.0
    n = 700
    coords = uniform_points(n, (0, 0, side, side), seed=11)
    grid_pts = uniform_points(300, (5_000, 5_000, side - 5_000, side - 5_000), seed=12)
    allp = np.vstack([coords, grid_pts])
    u = simulate_matern(allp, MaternParams(10_000.0, 0.4), seed=13)
    x1 = r.normal(size=n)
    y = 3.9 + 0.2 * x1 + u[:n] + r.normal(scale=1 / math.sqrt(20), size=n)
    mesh = build_mesh(box(0, 0, side, side), 2000, 3000, 31, extension=15_000)
    X = np.column_stack([np.ones(n), x1])
    return coords, X, y, grid_pts, u[n:], mesh


def test_surface_tracks_true_field(synthetic_field):
    coords, X, y, gpts, u_true, mesh = synthetic_field
    spec = ModelSpec(X, (FieldSpec(mesh, default_field_prior()),))
    res = fit(spec, y, coords, FitSettings(strategy="mode"))
    Xg = np.column_stack([np.ones(len(gpts)), np.zeros(len(gpts))])
    m, _, _, _ = predict_points(res, gpts, Xg)
    r2 = np.corrcoef(m, u_true)[0, 1] ** 2
    assert r2 >= 0.6


def test_linear_worse_than_mixed_out_of_sample(synthetic_field):
    coords, X, y, _, _, mesh = synthetic_field
    tr, va = np.arange(500), np.arange(500, len(y))
    lin = fit(ModelSpec(X[tr], ()), y[tr], coords[tr], FitSettings(strategy="mode"))
    mix = fit(ModelSpec(X[tr], (FieldSpec(mesh, default_field_prior()),)), y[tr], coords[tr], FitSettings(strategy="mode"))
    rm = lambda f: np.sqrt(np.mean((predict_points(f, coords[va], X[va])[0] - y[va]) ** 2))
    assert rm(lin) > rm(mix)
