"""Marginal-likelihood training of force parameters, kernel hyperparameters and noise."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .dynamics import SystemSkeleton, trajectory_rng
from .errors import ContractError, NumericalError, OptimizationError
from .gp_core import CovarianceCache, InteractionGP
from .kernels import KernelHyperparams
from .observations import ObservationSet

log = logging.getLogger(__name__)

RESTART_STREAM = 1


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings and initial values.

    ``omega0=None`` means a quarter of the largest observed pair distance;
    ``alpha0=None`` means 0.5 for every force parameter.
    """

    alpha0: Optional[tuple] = None
    s0: float = 1.0
    omega0: Optional[float] = None
    sigma0: float = 0.1
    nu: float = 1.5
    max_evals: int = 600
    gtol: float = 1e-6
    memory: int = 10
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_evals < 0 or self.gtol <= 0 or self.memory < 1 or self.restarts < 1:
            raise ValueError("need max_evals >= 0, gtol > 0, memory >= 1, restarts >= 1")


class PackedObjective:
    """Adapter from a packed vector ``(alpha, log s, log omega, log sigma)`` to the GP.

    Remembers every evaluation and the best one seen. Failed or
    non-finite evaluations come back as ``(inf, 0)`` so a line search can
    back off instead of aborting.
    """

    def __init__(self, gp: InteractionGP, nu: float = 1.5):
        self.gp = gp
        self.nu = nu
        self.n_alpha = gp.n_alpha
        self.n_evals = 0
        self._seen = {}
        self.best = (None, np.inf, None)

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        alpha = x[: self.n_alpha]
        h = KernelHyperparams.from_log(x[self.n_alpha], x[self.n_alpha + 1], self.nu)
        sigma = float(np.exp(x[self.n_alpha + 2]))
        return alpha, h, sigma

    def is_cached(self, x) -> bool:
        return np.asarray(x, dtype=float).tobytes() in self._seen

    def __call__(self, x):
        x = np.array(x, dtype=float)
        key = x.tobytes()
        if key in self._seen:
            value, grad = self._seen[key]
            return value, grad.copy()
        self.n_evals += 1
        try:
            with np.errstate(over="ignore"):
                alpha, h, sigma = self.unpack(x)
            value, grad = self.gp.nll_and_grad(alpha, h, sigma)
        except (NumericalError, ValueError, FloatingPointError, OverflowError):
            value, grad = np.inf, np.zeros_like(x)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            value, grad = np.inf, np.zeros_like(x)
        self._seen[key] = (value, grad.copy())
        if value < self.best[1]:
            self.best = (x.copy(), value, grad.copy())
        return value, grad


# ---------------------------------------------------------------------------
# L-BFGS driver


class _BudgetExhausted(Exception):
    pass


def lbfgs(fun: PackedObjective, x0, max_evals=600, gtol=1e-6, memory=10):
    """Minimize ``fun`` from ``x0`` with L-BFGS-B (no bounds) under a hard evaluation budget.

    Returns ``(trace, status)`` where ``status`` is ``"converged"`` (best
    gradient inf-norm <= ``gtol``), ``"budget"`` or ``"stalled"`` (the line
    search could make no further progress). ``trace`` lists accepted
    iterates; the best point is in ``fun.best``.
    """
    x0 = np.array(x0, dtype=float)
    trace = []
    if max_evals <= 0:
        return trace, "budget"

    def guarded(x):
        if fun.n_evals >= max_evals and not fun.is_cached(x):
            raise _BudgetExhausted
        return fun(x)

    def record(x):
        f, g = fun(x) if fun.is_cached(x) else (np.nan, np.full_like(x, np.nan))
        trace.append({"iteration": len(trace), "nll": float(f), "grad_inf": float(np.max(np.abs(g))), "n_evals": fun.n_evals})

    f0, _ = guarded(x0)
    record(x0)
    if not np.isfinite(f0):
        return trace, "nonfinite_start"
    try:
        minimize(
            guarded,
            x0,
            jac=True,
            method="L-BFGS-B",
            callback=record,
            options={"maxcor": memory, "gtol": gtol, "ftol": 0.0, "maxfun": max_evals, "maxiter": 10 * max_evals, "maxls": 40},
        )
    except _BudgetExhausted:
        pass
    _, _, g_best = fun.best
    if g_best is not None and np.max(np.abs(g_best)) <= gtol:
        return trace, "converged"
    if fun.n_evals >= max_evals:
        return trace, "budget"
    return trace, "stalled"


# ---------------------------------------------------------------------------
# fitted model


@dataclass(eq=False)
class TrainedModel:
    """Fitted parameters plus the factorized training covariance."""

    skeleton: SystemSkeleton
    alpha: tuple
    kernel: KernelHyperparams
    sigma: float
    nll: float
    trace: list
    status: str
    n_evals: int
    data_hash: str
    cache: Optional[CovarianceCache] = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def budget_exhausted(self) -> bool:
        return self.status == "budget"

    def gp(self, obs: ObservationSet) -> InteractionGP:
        self.check_data(obs)
        return InteractionGP(obs, self.skeleton)

    def check_data(self, obs: ObservationSet):
        if obs.data_hash != self.data_hash:
            raise ContractError("observation set does not match the data the model was trained on")

    def posterior(self, obs: ObservationSet, r_star):
        gp = self.gp(obs)
        cache = self.cache if self.cache is not None else gp.build_cache(self.alpha, self.kernel, self.sigma)
        gp.check_cache(cache, self.kernel)
        return gp.posterior(cache, self.kernel, r_star)

    def to_dict(self) -> dict:
        final = self.trace[-1] if self.trace else {}
        return {
            "skeleton": self.skeleton.to_dict(),
            "alpha": list(self.alpha),
            "alpha_names": list(self.skeleton.force.param_names),
            "kernel": self.kernel.to_dict(),
            "sigma": self.sigma,
            "nll": self.nll,
            "trace": {
                "iterations": len(self.trace) - 1 if self.trace else 0,
                "n_evals": self.n_evals,
                "status": self.status,
                "final_grad_inf": final.get("grad_inf"),
            },
            "data_hash": self.data_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, obs: Optional[ObservationSet] = None) -> "TrainedModel":
        """Reload a model; with ``obs`` the covariance cache is rebuilt after a hash check."""
        doc = json.loads(text)
        model = cls(
            skeleton=SystemSkeleton.from_dict(doc["skeleton"]),
            alpha=tuple(doc["alpha"]),
            kernel=KernelHyperparams.from_dict(doc["kernel"]),
            sigma=float(doc["sigma"]),
            nll=doc["nll"],
            trace=[],
            status=doc["trace"]["status"],
            n_evals=doc["trace"]["n_evals"],
            data_hash=doc["data_hash"],
        )
        if obs is not None:
            model.cache = model.gp(obs).build_cache(model.alpha, model.kernel, model.sigma)
        return model


def max_pair_distance(obs: ObservationSet) -> float:
    X = obs.X.reshape(-1, obs.N, obs.d)
    diff = X[:, :, None, :] - X[:, None, :, :]
    return float(np.linalg.norm(diff, axis=-1).max())


def initial_vector(gp: InteractionGP, config: FitConfig) -> np.ndarray:
    alpha0 = (0.5,) * gp.n_alpha if config.alpha0 is None else config.alpha0
    alpha0 = gp.force.check_alpha(alpha0)
    omega0 = config.omega0 if config.omega0 is not None else max(max_pair_distance(gp.obs), 1e-3) / 4.0
    return np.concatenate([alpha0, np.log([config.s0, omega0, config.sigma0])])


def fit(obs: ObservationSet, skeleton: SystemSkeleton, config: FitConfig = FitConfig()) -> TrainedModel:
    """Minimize the negative log marginal likelihood over ``(alpha, s, omega, sigma)``.

    Restarts after the first perturb the initial vector with seeded noise;
    the lowest objective value seen in any restart wins.

    Raises
    ------
    OptimizationError
        When no restart reaches a finite objective value.
    """
    gp = InteractionGP(obs, skeleton)
    x0 = initial_vector(gp, config)
    objective = PackedObjective(gp, config.nu)

    if config.max_evals == 0:
        alpha, h, sigma = objective.unpack(x0)
        cache = gp.build_cache(alpha, h, sigma)
        value = gp.nll(alpha, h, sigma)
        return TrainedModel(skeleton, tuple(map(float, alpha)), h, sigma, value, [], "budget", 0, obs.data_hash, cache)

    best = None
    diagnostics = {}
    for k in range(config.restarts):
        start = x0.copy()
        if k > 0:
            rng = trajectory_rng(config.seed, k, stream=RESTART_STREAM)
            start = start + rng.normal(scale=0.25, size=start.size)
        objective = PackedObjective(gp, config.nu)
        trace, status = lbfgs(objective, start, config.max_evals, config.gtol, config.memory)
        x_best, f_best, _ = objective.best
        diagnostics[k] = {"status": status, "n_evals": objective.n_evals, "best": f_best}
        log.debug("restart %d: %s after %d evaluations, nll %.6g", k, status, objective.n_evals, f_best)
        if x_best is None:
            continue
        if best is None or f_best < best[1]:
            best = (x_best, f_best, trace, status, objective.n_evals)
    if best is None:
        raise OptimizationError("no restart produced a finite negative log likelihood", diagnostics=diagnostics)

    x, value, trace, status, n_evals = best
    alpha, h, sigma = objective.unpack(x)
    cache = gp.build_cache(alpha, h, sigma)
    return TrainedModel(
        skeleton=skeleton,
        alpha=tuple(float(a) for a in alpha),
        kernel=h,
        sigma=sigma,
        nll=float(value),
        trace=trace,
        status=status,
        n_evals=n_evals,
        data_hash=obs.data_hash,
        cache=cache,
    )
