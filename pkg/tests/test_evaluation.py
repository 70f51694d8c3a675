import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ipsgp.dynamics import (
    Order,
    ParticleSystemSpec,
    StubbornOpinion,
    Trajectory,
    UniformInitial,
    generate_observations,
)
from ipsgp.errors import InvalidInputError, NumericalError
from ipsgp.evaluation import (
    CSV_HEADER,
    EmpiricalMeasure,
    KernelEstimate,
    empirical_rho,
    error_metrics,
    estimate_kernel_curve,
    flocking_score,
    predict_and_score,
    simulate_ensemble,
    trajectory_error,
)
from ipsgp.gp_core import build_cache, posterior_phi
from ipsgp.kernels import KernelHyperparams, gram
from ipsgp.observations import ObservationSet
from ipsgp.training import TrainedModel

from oracles import triangle_cdf


def zero_kernel(r):
    return np.zeros(np.shape(r))


def two_uniform_agents():
    return ParticleSystemSpec(d=1, N=2, order=Order.FIRST, kernel=zero_kernel, mu0=UniformInitial(-0.5, 0.5))


def triangle_ks(n_traj=2000, seed=0):
    rho = empirical_rho(two_uniform_agents(), n_traj, L=1, T=1.0, seed=seed)
    r = np.linspace(0, 1, 2001)
    return float(np.max(np.abs(rho.cdf(r) - triangle_cdf(r))))


def test_triangle_density_ks():
    assert triangle_ks() <= 0.05


def test_measure_normalization_and_support():
    rho = empirical_rho(two_uniform_agents(), 500, L=1, T=1.0, seed=4)
    assert abs(rho.rho.sum() - 1.0) <= 1e-12
    assert rho.rho.size == 200 and rho.edges[0] == 0.0
    assert rho.rho_tilde.sum() <= rho.R**2 + 1e-12


def test_static_system_measure_independent_of_L():
    spec = ParticleSystemSpec(d=2, N=3, order=Order.FIRST, kernel=zero_kernel, mu0=UniformInitial(0.0, 1.0))
    a = empirical_rho(spec, 200, L=1, T=2.0)
    b = empirical_rho(spec, 200, L=4, T=2.0)
    assert np.array_equal(a.edges, b.edges)
    assert np.allclose(a.rho, b.rho, rtol=0, atol=1e-12)
    assert np.allclose(a.rho_tilde, b.rho_tilde, rtol=0, atol=1e-12)


def test_measure_invariant_under_agent_permutation():
    spec = ParticleSystemSpec(d=2, N=4, order=Order.FIRST, kernel=zero_kernel, mu0=UniformInitial(0.0, 1.0))
    X, _, _ = simulate_ensemble(spec, 100, np.array([0.0]))
    perm = [2, 0, 3, 1]

    def dists(X):
        N = X.shape[-2]
        iu, ku = np.triu_indices(N, 1)
        return np.linalg.norm(X[..., ku, :] - X[..., iu, :], axis=-1)

    a = EmpiricalMeasure.from_distances(dists(X))
    b = EmpiricalMeasure.from_distances(dists(X[:, :, perm]))
    assert np.array_equal(a.edges, b.edges)
    assert np.allclose(a.rho, b.rho, rtol=0, atol=1e-12)


def _estimate(grid, mean):
    return KernelEstimate(np.asarray(grid), np.asarray(mean), np.zeros(len(grid)))


def _measure():
    r = np.random.default_rng(0).uniform(0, 1.0, 5000)
    return EmpiricalMeasure.from_distances(r, bins=50)


def _phi(r):
    return 1.0 + np.sin(3 * np.asarray(r))


def test_error_metrics_identity():
    rho = _measure()
    g = np.linspace(0, 1.5, 301)
    assert error_metrics(_estimate(g, _phi(g)), _phi, rho) == {"rel_Linf": 0.0, "rel_L2_rho_tilde": 0.0}


def test_error_metrics_shift_identity():
    rho = _measure()
    g = np.linspace(0, 1.5, 301)
    c = 0.125
    out = error_metrics(_estimate(g, _phi(g) + c), _phi, rho)
    inside = g <= rho.R
    assert out["rel_Linf"] == pytest.approx(c / np.max(np.abs(_phi(g[inside]))), rel=1e-14)


def test_error_metrics_zero_truth():
    g = np.linspace(0, 1.5, 31)
    with pytest.raises(NumericalError):
        error_metrics(_estimate(g, g), zero_kernel, _measure())


def test_error_metrics_requires_coverage():
    with pytest.raises(InvalidInputError):
        error_metrics(_estimate(np.linspace(0, 0.5, 5), np.ones(5)), _phi, _measure())


def _path(X, times=None):
    X = np.asarray(X, dtype=float)
    return Trajectory(np.arange(X.shape[0], dtype=float) if times is None else times, X)


def test_trajectory_error_examples():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 3, 2))
    assert trajectory_error(_path(X), _path(X)) == 0.0
    delta = rng.normal(size=(3, 2))
    assert trajectory_error(_path(X), _path(X + delta)) == pytest.approx(np.linalg.norm(delta), rel=1e-12)


def test_trajectory_error_interval_and_grid_checks():
    X = np.zeros((5, 2, 1))
    Y = X.copy()
    Y[4] = 1.0
    assert trajectory_error(_path(X), _path(Y), (0.0, 3.0)) == 0.0
    assert trajectory_error(_path(X), _path(Y), (3.0, 4.0)) == pytest.approx(np.sqrt(2))
    with pytest.raises(InvalidInputError):
        trajectory_error(_path(X), _path(Y, np.arange(5.0) * 2))


paths = arrays(float, (4, 2, 2), elements=st.floats(-10, 10))


@settings(max_examples=50, deadline=None)
@given(paths, paths, paths)
def test_trajectory_error_is_pseudometric(A, B, C):
    a, b, c = _path(A), _path(B), _path(C)
    assert trajectory_error(a, a) == 0.0
    assert trajectory_error(a, b) == trajectory_error(b, a)
    assert trajectory_error(a, c) <= trajectory_error(a, b) + trajectory_error(b, c) + 1e-9


def test_trajectory_error_includes_velocities():
    X = np.zeros((3, 2, 1))
    V = np.zeros((3, 2, 1))
    W = V.copy()
    W[1, 0, 0] = 3.0
    a = Trajectory(np.arange(3.0), X, V)
    b = Trajectory(np.arange(3.0), X, W)
    assert trajectory_error(a, b) == 3.0
    assert trajectory_error(a, b, positions_only=True) == 0.0


def test_flocking_identical_velocities():
    fs = flocking_score(np.tile([0.3, -0.4], (5, 1)))
    assert fs.score == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(fs.direction, [0.6, -0.8])


def test_flocking_opposed_pair():
    fs = flocking_score(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert np.allclose(fs.direction, [1.0, 0.0], atol=1e-15)
    assert fs.score == pytest.approx(0.0, abs=1e-15)
    assert not fs.degenerate


def test_flocking_tie_is_flagged():
    fs = flocking_score(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]))
    assert fs.degenerate
    assert np.array_equal(fs.direction, [1.0, 0.0])


def test_flocking_zero_velocity_names_agent():
    with pytest.raises(InvalidInputError, match="agent 2"):
        flocking_score(np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(
    arrays(float, (5, 2), elements=st.floats(-3, 3)).filter(lambda V: np.all(np.linalg.norm(V, axis=1) > 1e-3)),
    arrays(float, (5,), elements=st.floats(0.01, 100)),
)
def test_flocking_invariant_to_rescaling(V, scale):
    a = flocking_score(V)
    b = flocking_score(V * scale[:, None])
    if not a.degenerate and not b.degenerate:
        assert np.allclose(a.direction, b.direction, rtol=0, atol=1e-12)
        assert a.score == pytest.approx(b.score, abs=1e-12)
    assert -1.0 - 1e-12 <= a.score <= 1.0 + 1e-12


def test_kernel_estimate_csv_and_invariants():
    est = KernelEstimate(np.array([0.0, 0.5, 1.0]), np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.25, 1.0]))
    lines = est.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == "r,mean,sd,lo,hi"
    assert lines[2] == "0.5,2.0,0.5,1.0,3.0"
    with pytest.raises(InvalidInputError):
        KernelEstimate(np.array([0.0, 0.0]), np.zeros(2), np.zeros(2))
    f = est.interpolant()
    assert f(np.array([-1.0, 5.0])).tolist() == [1.0, 3.0]


def _zero_prior_model(obs, skeleton, alpha):
    return TrainedModel(skeleton, tuple(alpha), KernelHyperparams(1.5, 0.0, 1.0), 0.1, 0.0, [], "budget", 0, obs.data_hash)


def test_zero_prior_model_curve():
    X = np.random.default_rng(0).uniform(size=(2, 1, 3, 1))
    obs = ObservationSet(times=[0.0], X=X, targets=X)
    spec = ParticleSystemSpec(d=1, N=3, order=Order.FIRST, kernel=zero_kernel)
    est = estimate_kernel_curve(_zero_prior_model(obs, spec.skeleton, ()), obs, np.linspace(0, 2, 11))
    assert not est.mean.any() and not est.variance.any()


def test_prediction_exact_with_known_force_and_null_kernel():
    spec = ParticleSystemSpec(
        d=1, N=5, order=Order.FIRST, kernel=zero_kernel, force=StubbornOpinion((0, 1)),
        alpha=(0.5, -0.5, 2.0), mu0=UniformInitial(-1.0, 1.0),
    )
    obs = generate_observations(spec, 2, 3, 2.0, 0.01, seed=0)
    model = _zero_prior_model(obs, spec.skeleton, spec.alpha)
    rho = empirical_rho(spec, 50, 3, 2.0)
    report = predict_and_score(model, obs, spec, rho, 2.0, 3.0)
    assert report["traj_err_train"] <= 1e-6 and report["traj_err_future"] <= 1e-6
    assert report["rel_Linf"] is None


def test_band_coverage_on_noiseless_span_functions():
    rng = np.random.default_rng(3)
    h = KernelHyperparams(1.5, 1.0, 0.5)
    coverages = []
    for _ in range(10):
        centers = rng.uniform(0, 1.2, 3)
        coef = rng.normal(size=3)

        def phi(x):
            return gram(h, centers, x).T @ coef

        r = rng.uniform(0.05, 1.2, 12)
        X = np.zeros((r.size, 1, 2, 1))
        X[:, 0, 1, 0] = r
        f = 0.5 * phi(r) * r
        obs = ObservationSet(times=[0.0], X=X, targets=np.stack([f, -f], axis=1).reshape(r.size, 1, 2, 1))
        cache = build_cache(obs, (), h, 0.0)
        grid = np.linspace(r.min(), r.max(), 200)
        mean, var = posterior_phi(cache, obs, h, grid)
        sd = np.sqrt(np.maximum(var, 0))
        truth = phi(grid)
        coverages.append(np.mean(np.abs(truth - mean) <= 2 * sd + 1e-9))
    assert min(coverages) >= 0.9
