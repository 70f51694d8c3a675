import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipsgp import gp_core
from ipsgp.dynamics import generate_observations
from ipsgp.errors import ContractError, OptimizationError
from ipsgp.gp_core import InteractionGP
from ipsgp.kernels import KernelHyperparams
from ipsgp.observations import ObservationSet
from ipsgp.presets import get_preset
from ipsgp.training import FitConfig, PackedObjective, TrainedModel, fit, lbfgs


@pytest.fixture(scope="module")
def od_small():
    preset = get_preset("od")
    obs = generate_observations(preset.spec, 3, 3, 15.0, 0.05, seed=1)
    return preset, obs


def _duplicated_obs():
    X = np.random.default_rng(0).uniform(size=(1, 1, 4, 1))
    X = np.concatenate([X, X, X])
    return ObservationSet(times=[0.0], X=X, targets=np.random.default_rng(1).normal(size=X.shape))


def test_objective_memoizes(od_small):
    preset, obs = od_small
    obj = PackedObjective(InteractionGP(obs, preset.spec.skeleton))
    x = np.array([0.5, 0.5, 0.5, 0.5, 0.0, -1.0, -1.0])
    a = obj(x)
    b = obj(x.copy())
    assert obj.n_evals == 1
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_objective_passes_through_exactly(od_small):
    preset, obs = od_small
    gp = InteractionGP(obs, preset.spec.skeleton)
    obj = PackedObjective(gp)
    x = np.array([0.9, 0.1, -0.8, 8.0, 0.3, -0.7, -2.5])
    value, grad = obj(x)
    ref_value, ref_grad = gp.nll_and_grad(x[:4], KernelHyperparams.from_log(x[4], x[5]), float(np.exp(x[6])))
    assert value == ref_value
    assert np.array_equal(grad, ref_grad)


def test_cholesky_failure_maps_to_infinity(monkeypatch):
    # restrict the ladder to zero jitter so an exactly singular covariance cannot be rescued
    monkeypatch.setattr(gp_core, "JITTER_LADDER", (0.0,))
    obj = PackedObjective(InteractionGP(_duplicated_obs()))
    value, grad = obj(np.array([0.0, 0.0, -400.0]))
    assert value == np.inf
    assert np.array_equal(grad, np.zeros(3))


def test_overflowing_parameters_map_to_infinity():
    obj = PackedObjective(InteractionGP(_duplicated_obs()))
    value, grad = obj(np.array([1e4, 0.0, 0.0]))
    assert value == np.inf and not grad.any()


def test_optimizer_recovers_from_infinite_trial_points():
    calls = []

    class Wall:
        # a quadratic that is infinite beyond x = 2; the minimum sits at 1.5
        n_evals = 0
        best = (None, np.inf, None)

        def is_cached(self, x):
            return False

        def __call__(self, x):
            self.n_evals += 1
            calls.append(x[0])
            if x[0] > 2.0:
                return np.inf, np.zeros_like(x)
            f, g = (x[0] - 1.5) ** 2, np.array([2 * (x[0] - 1.5)])
            if f < self.best[1]:
                self.best = (x.copy(), f, g)
            return f, g

    obj = Wall()
    _, status = lbfgs(obj, np.array([-10.0]), max_evals=100, gtol=1e-8)
    assert status == "converged"
    assert obj.best[0][0] == pytest.approx(1.5, abs=1e-6)


def test_budget_zero_returns_initial(od_small):
    preset, obs = od_small
    config = FitConfig(alpha0=(0.5, 0.5, 0.5, 0.5), s0=1.0, omega0=0.3, sigma0=0.5, max_evals=0)
    model = fit(obs, preset.spec.skeleton, config)
    assert model.budget_exhausted
    assert model.alpha == (0.5, 0.5, 0.5, 0.5)
    assert model.kernel.s == 1.0 and model.kernel.omega == pytest.approx(0.3, rel=1e-15)
    assert model.sigma == pytest.approx(0.5, rel=1e-15)
    assert model.n_evals == 0


def test_budget_is_hard(od_small):
    preset, obs = od_small
    model = fit(obs, preset.spec.skeleton, FitConfig(sigma0=0.5, max_evals=7))
    assert model.n_evals <= 7
    assert model.status == "budget"


@pytest.fixture(scope="module")
def od_fit(od_small):
    preset, obs = od_small
    return fit(obs, preset.spec.skeleton, preset.fit)


def test_fit_result_properties(od_fit):
    model = od_fit
    assert model.kernel.s > 0 and model.kernel.omega > 0 and model.sigma > 0
    finite = [row["nll"] for row in model.trace if np.isfinite(row["nll"])]
    assert model.nll <= min(finite)
    assert model.status in {"converged", "budget", "stalled"}
    if model.converged:
        assert model.trace[-1]["grad_inf"] <= 1e-6 or model.nll <= min(finite)


def test_best_so_far_is_monotone(od_fit):
    values = [row["nll"] for row in od_fit.trace]
    best = np.minimum.accumulate(values)
    assert np.all(np.diff(best) <= 0)
    # accepted iterates of a descent method decrease
    assert np.all(np.diff(values) <= 1e-9 * np.abs(values[:-1]))


def test_fit_is_deterministic(od_small, od_fit):
    preset, obs = od_small
    again = fit(obs, preset.spec.skeleton, preset.fit)
    assert again.to_json() == od_fit.to_json()
    assert again.alpha == od_fit.alpha and again.kernel == od_fit.kernel and again.sigma == od_fit.sigma


def test_more_restarts_never_worse(od_small, od_fit):
    preset, obs = od_small
    import dataclasses

    multi = fit(obs, preset.spec.skeleton, dataclasses.replace(preset.fit, restarts=2, max_evals=150))
    single = fit(obs, preset.spec.skeleton, dataclasses.replace(preset.fit, max_evals=150))
    assert multi.nll <= single.nll


def test_json_reload_rebuilds_cache(od_small, od_fit):
    _, obs = od_small
    reloaded = TrainedModel.from_json(od_fit.to_json(), obs)
    grid = np.linspace(0, 2, 9)
    m1, v1 = od_fit.posterior(obs, grid)
    m2, v2 = reloaded.posterior(obs, grid)
    assert np.array_equal(m1, m2) and np.array_equal(v1, v2)


def test_model_refuses_other_data(od_small, od_fit):
    preset, _ = od_small
    other = generate_observations(preset.spec, 3, 3, 15.0, 0.05, seed=2)
    with pytest.raises(ContractError):
        od_fit.posterior(other, [0.5])


def test_all_restarts_failing_raises(monkeypatch):
    monkeypatch.setattr(gp_core, "JITTER_LADDER", (0.0,))
    obs = _duplicated_obs()
    from ipsgp.dynamics import Order, SystemSkeleton

    with pytest.raises(OptimizationError) as info:
        fit(obs, SystemSkeleton(1, 4, Order.FIRST), FitConfig(sigma0=np.exp(-400.0), omega0=1.0, restarts=2))
    assert info.value.diagnostics


@pytest.mark.parametrize("bad", [dict(max_evals=-1), dict(gtol=0.0), dict(memory=0), dict(restarts=0)])
def test_fit_config_validation(bad):
    with pytest.raises(ValueError):
        FitConfig(**bad)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_unpack_roundtrip(x):
    obj = PackedObjective(InteractionGP(_duplicated_obs()), nu=2.5)
    _, h, sigma = obj.unpack(np.array(x))
    assert h.log_s == pytest.approx(x[0], abs=1e-12)
    assert h.log_omega == pytest.approx(x[1], abs=1e-12)
    assert np.log(sigma) == pytest.approx(x[2], abs=1e-12)
    assert h.nu == 2.5
