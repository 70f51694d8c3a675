"""Executable checks of the estimator's theory.

* closed-form kernel ridge regression over the span of kernel sections,
* equality of the GP posterior mean and the KRR estimator under a rescaled prior,
* Monte Carlo estimates of the coercivity ratio,
* an error-versus-M study for the KRR estimator.

The KRR route here is deliberately independent of :mod:`ipsgp.gp_core`: it
works with all ``N^2`` ordered pairs per snapshot (self-pairs included) and a
dense block-diagonal weight matrix rather than the unique-pair features.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

from . import kernels
from .dynamics import (
    Order,
    ParticleSystemSpec,
    SystemSkeleton,
    UniformInitial,
    ZeroForce,
    generate_observations,
    trajectory_rng,
)
from .errors import InvalidInputError, NumericalError
from .evaluation import EmpiricalMeasure, empirical_rho, simulate_ensemble
from .gp_core import InteractionGP
from .kernels import KernelHyperparams
from .observations import ObservationSet

log = logging.getLogger(__name__)

PROBE_STREAM = 2


# ---------------------------------------------------------------------------
# kernel ridge regression


def ordered_pair_weights(obs: ObservationSet, velocity=False):
    """Distances and the block-diagonal weight matrix over all ordered pairs.

    Returns
    -------
    r : (S, N*N) array
        ``r[s, i*N + k] = |x_k - x_i|`` at snapshot ``s``.
    rX : (S*N*d, S*N*N) array
        Column ``(s, i, k)`` carries ``u_ik`` in the rows of agent ``i`` of
        snapshot ``s`` and zeros elsewhere.
    """
    S, N, d = obs.snapshots, obs.N, obs.d
    X = obs.X.reshape(S, N, d)
    diff = X[:, None, :, :] - X[:, :, None, :]  # [s, i, k] = x_k - x_i
    r = np.linalg.norm(diff, axis=-1).reshape(S, N * N)
    if velocity:
        Vv = obs.V.reshape(S, N, d)
        u = Vv[:, None, :, :] - Vv[:, :, None, :]
    else:
        u = diff
    rX = np.zeros((S, N, d, S, N, N))
    for s in range(S):
        for i in range(N):
            rX[s, i, :, s, i, :] = u[s, i].T
    return r, rX.reshape(S * N * d, S * N * N)


@dataclass(frozen=True, eq=False)
class KrrSolution:
    """Coefficients on the kernel sections at every ordered-pair distance."""

    coef: np.ndarray
    centers: np.ndarray
    lam: float
    h: KernelHyperparams

    def __call__(self, r):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return kernels.gram(self.h, self.centers, r).T @ self.coef


def _targets(obs, skeleton, alpha):
    if skeleton is None or alpha is None:
        return obs.targets.ravel()
    return obs.targets.ravel() - skeleton.force(obs.X, obs.V, alpha).ravel()


def krr_fit(obs: ObservationSet, h: KernelHyperparams, lam: float, skeleton: Optional[SystemSkeleton] = None, alpha=None) -> KrrSolution:
    """Minimizer of the regularized least-squares risk over the kernel sections.

    The risk is ``(1/(M L N)) sum |f_phi(X) - V|^2 + lam |phi|_H^2`` with
    ``V = Z - F_alpha``. Its minimizer is
    ``c = (1/N) rX^T (K_ff + lam N M L I)^{-1} V`` with
    ``K_ff = (1/N^2) rX G rX^T``.
    """
    if not lam > 0:
        raise InvalidInputError("lambda must be positive")
    velocity = skeleton is not None and skeleton.interaction.value == "velocity"
    r, rX = ordered_pair_weights(obs, velocity)
    centers = r.ravel()
    G = kernels.gram(h, centers)
    N = obs.N
    n_scale = N * obs.M * obs.L
    K = rX @ G @ rX.T / N**2
    A = K + lam * n_scale * np.eye(K.shape[0])
    try:
        cho = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"KRR system is not positive definite: {exc}") from None
    coef = rX.T @ linalg.cho_solve(cho, _targets(obs, skeleton, alpha), check_finite=False) / N
    return KrrSolution(coef, centers, float(lam), h)


def krr_risk(sol: KrrSolution, obs: ObservationSet, skeleton=None, alpha=None) -> float:
    """Regularized empirical risk of a coefficient vector (for optimality checks)."""
    velocity = skeleton is not None and skeleton.interaction.value == "velocity"
    _, rX = ordered_pair_weights(obs, velocity)
    G = kernels.gram(sol.h, sol.centers)
    f = rX @ (G @ sol.coef) / obs.N
    resid = f - _targets(obs, skeleton, alpha)
    return float(resid @ resid / (obs.M * obs.L * obs.N) + sol.lam * sol.coef @ G @ sol.coef)


def check_gp_krr_equivalence(
    obs: ObservationSet,
    h: KernelHyperparams,
    lam: float,
    sigma: float,
    grid,
    skeleton: Optional[SystemSkeleton] = None,
    alpha=None,
    mis_scaled: bool = False,
) -> dict:
    """Largest gap between the KRR estimator and the GP posterior mean on ``grid``.

    The GP prior is ``sigma^2 K / (M N L lam)``; ``mis_scaled=True`` drops the
    ``1/(M N L)`` factor, which should break the equality.
    """
    grid = np.asarray(grid, dtype=float)
    sol = krr_fit(obs, h, lam, skeleton, alpha)
    phi_krr = sol(grid)
    factor = sigma**2 / lam if mis_scaled else sigma**2 / (obs.M * obs.N * obs.L * lam)
    h_gp = h.scaled(factor)
    gp = InteractionGP(obs, skeleton)
    if alpha is None:
        alpha = np.zeros(gp.n_alpha)
    cache = gp.build_cache(alpha, h_gp, sigma)
    mean, _ = gp.posterior(cache, h_gp, grid)
    gap = float(np.max(np.abs(mean - phi_krr)))
    scale = max(1.0, float(np.max(np.abs(phi_krr))))
    return {"discrepancy": gap, "scale": scale, "relative": gap / scale, "jitter": cache.jitter}


# ---------------------------------------------------------------------------
# coercivity


@dataclass(frozen=True)
class Probe:
    name: str
    phi: Callable


@dataclass(frozen=True, eq=False)
class CoercivityReport:
    """Ratios ``|f_phi|^2 / |phi|^2_{rho_tilde}`` per probe with Monte Carlo standard errors."""

    names: tuple
    ratios: np.ndarray
    std_errors: np.ndarray
    n_mc: int
    N: int
    skipped: tuple = ()

    @property
    def min_ratio(self) -> float:
        return float(np.min(self.ratios))

    @property
    def upper_bound(self) -> float:
        return (self.N - 1) / self.N

    def to_dict(self) -> dict:
        return {
            "probes": list(self.names),
            "ratios": [float(x) for x in self.ratios],
            "std_errors": [float(x) for x in self.std_errors],
            "min_ratio": self.min_ratio,
            "upper_bound": self.upper_bound,
            "n_mc": self.n_mc,
            "N": self.N,
            "skipped": list(self.skipped),
        }


def random_span_probes(h: KernelHyperparams, R: float, n: int, seed: int = 0, n_centers: int = 5):
    """Random functions ``sum_j c_j K(r_j, .)`` with centres uniform on ``[0, R]``."""
    probes = []
    for k in range(n):
        rng = trajectory_rng(seed, k, PROBE_STREAM)
        centers = rng.uniform(0.0, R, n_centers)
        coef = rng.standard_normal(n_centers)

        def phi(r, centers=centers, coef=coef):
            r = np.asarray(r, dtype=float)
            return (kernels.gram(h, centers, r.ravel()).T @ coef).reshape(r.shape)

        probes.append(Probe(f"span_{k}", phi))
    return probes


def _force_sq_and_weighted(phi, X):
    """Per-trajectory averages of ``(1/N) sum_i |f_i|^2`` and of ``phi(r)^2 r^2`` over pairs."""
    # X: (B, L, N, d)
    N = X.shape[-2]
    diff = X[..., None, :, :] - X[..., :, None, :]
    r = np.linalg.norm(diff, axis=-1)
    off = ~np.eye(N, dtype=bool)
    vals = np.zeros_like(r)
    vals[..., off] = np.asarray(phi(r[..., off]), dtype=float)
    f = np.einsum("...ik,...ikd->...id", vals, diff) / N
    a = np.mean(np.sum(f * f, axis=(-1, -2)) / N, axis=1)
    iu, ku = np.triu_indices(N, 1)
    w = (vals[..., iu, ku] * r[..., iu, ku]) ** 2
    b = np.mean(w, axis=(-1, -2))
    return a, b


def estimate_coercivity(
    spec: ParticleSystemSpec,
    probes: Sequence[Probe] = (),
    n_mc: int = 5000,
    L: int = 1,
    T: float = 1.0,
    seed: int = 0,
    h: Optional[KernelHyperparams] = None,
    n_random: int = 5,
    R: Optional[float] = None,
) -> CoercivityReport:
    """Monte Carlo coercivity ratios for a first-order system.

    ``|f_phi|^2`` averages ``(1/N) sum_i |f_i|^2`` over snapshots and
    trajectories; ``|phi|^2_{rho_tilde}`` averages ``phi(r)^2 r^2`` over the
    same pairs. Standard errors come from the delta method over independent
    trajectories. With ``h`` given, ``n_random`` random span probes are added
    together with the constant probe and the system's own kernel.
    """
    t_grid = np.array([0.0]) if L == 1 else np.linspace(0.0, float(T), int(L))
    X, _, failed = simulate_ensemble(spec, n_mc, t_grid, seed)
    if failed:
        log.warning("coercivity: %d trajectories failed", failed)
    probes = list(probes)
    if h is not None:
        if R is None:
            N = X.shape[-2]
            iu, ku = np.triu_indices(N, 1)
            R = float(np.linalg.norm(X[..., ku, :] - X[..., iu, :], axis=-1).max())
        probes += random_span_probes(h, R, n_random, seed)
        probes += [Probe("constant", lambda r: np.ones_like(np.asarray(r, dtype=float))), Probe("true_kernel", spec.kernel)]
    names, ratios, ses, skipped = [], [], [], []
    n = X.shape[0]
    for probe in probes:
        a, b = _force_sq_and_weighted(probe.phi, X)
        mb = b.mean()
        if not mb > 0:
            warnings.warn(f"probe {probe.name} has zero norm on the sampled distances; skipped", stacklevel=2)
            skipped.append(probe.name)
            continue
        ratio = a.mean() / mb
        resid = a - ratio * b
        se = np.sqrt(resid.var(ddof=1) / n) / mb if n > 1 else np.inf
        names.append(probe.name)
        ratios.append(ratio)
        ses.append(se)
    return CoercivityReport(tuple(names), np.array(ratios), np.array(ses), n, spec.N, tuple(skipped))


# ---------------------------------------------------------------------------
# convergence in M


def default_lambda_rule(gamma: float = 0.5, c: float = 1.0):
    """``lam(M) = c M^(-1/(2 gamma + 1))``."""
    return lambda M: c * M ** (-1.0 / (2.0 * gamma + 1.0))


def rkhs_test_system(h: KernelHyperparams = KernelHyperparams(1.5, 1.0, 0.5), N: int = 5):
    """First-order system in R^1 whose kernel is a finite combination of Matérn sections."""
    centers = np.array([0.2, 0.6, 1.0])
    coef = np.array([1.0, -0.5, 0.3])

    def phi(r):
        r = np.asarray(r, dtype=float)
        return (kernels.gram(h, centers, r.ravel()).T @ coef).reshape(r.shape)

    return ParticleSystemSpec(d=1, N=N, order=Order.FIRST, kernel=phi, force=ZeroForce(), mu0=UniformInitial(0.0, 1.0))


@dataclass(frozen=True, eq=False)
class ConvergenceTable:
    rows: list
    M_list: tuple
    median_l2: tuple
    median_sup: tuple
    slope: Optional[float]

    def strictly_decreasing(self) -> bool:
        m = self.median_l2
        return all(b < a for a, b in zip(m, m[1:]))

    def to_dict(self):
        return {
            "rows": self.rows,
            "M": list(self.M_list),
            "median_l2_rho_tilde": list(self.median_l2),
            "median_sup": list(self.median_sup),
            "loglog_slope": self.slope,
        }


def krr_errors(sol: KrrSolution, true_phi, rho: EmpiricalMeasure, n_grid=400):
    c = rho.centers
    diff = sol(c) - true_phi(c)
    l2 = float(np.sqrt(np.sum(rho.rho_tilde * diff**2)))
    g = np.linspace(0.0, rho.R, n_grid)
    sup = float(np.max(np.abs(sol(g) - true_phi(g))))
    return l2, sup


def convergence_study(
    spec: ParticleSystemSpec,
    h: KernelHyperparams,
    M_list=(4, 16, 64),
    lambda_rule=None,
    seeds=range(5),
    L: int = 3,
    T: float = 1.0,
    sigma: float = 0.1,
    rho: Optional[EmpiricalMeasure] = None,
    n_rho: int = 2000,
) -> ConvergenceTable:
    """KRR error against the true kernel for each ``M`` and seed, with medians and log-log slope."""
    M_list = tuple(int(m) for m in M_list)
    if any(b <= a for a, b in zip(M_list, M_list[1:])):
        raise InvalidInputError("M_list must be increasing")
    if not M_list:
        return ConvergenceTable([], (), (), (), None)
    lambda_rule = lambda_rule or default_lambda_rule()
    if rho is None:
        rho = empirical_rho(spec, n_rho, L, T)
    rows = []
    med_l2, med_sup = [], []
    for M in M_list:
        lam = float(lambda_rule(M))
        l2s, sups = [], []
        for seed in seeds:
            obs = generate_observations(spec, M, L, T, sigma, seed)
            sol = krr_fit(obs, h, lam)
            l2, sup = krr_errors(sol, spec.kernel, rho)
            rows.append({"M": M, "seed": int(seed), "lambda": lam, "l2_rho_tilde": l2, "sup": sup})
            l2s.append(l2)
            sups.append(sup)
        med_l2.append(float(np.median(l2s)))
        med_sup.append(float(np.median(sups)))
    slope = None
    if len(M_list) > 1:
        slope = float(np.polyfit(np.log(M_list), np.log(med_l2), 1)[0])
    return ConvergenceTable(rows, M_list, tuple(med_l2), tuple(med_sup), slope)
