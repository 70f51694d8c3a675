"""Kernel curves, pairwise-distance measures, error metrics and trajectory prediction."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from .dynamics import (
    Order,
    ParticleSystemSpec,
    integrate_batch,
    sample_initial,
    trajectory_rng,
)
from .errors import IntegrationError, InvalidInputError, NumericalError
from .observations import ObservationSet

log = logging.getLogger(__name__)

ENSEMBLE_STREAM = 3
CSV_HEADER = ("r", "mean", "sd", "lo", "hi")


@dataclass(frozen=True, eq=False)
class KernelEstimate:
    """Posterior mean and variance of ``phi`` on a grid; ``n_clipped`` counts negative variances set to 0."""

    grid: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    n_clipped: int = 0

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
            raise InvalidInputError("grid must be one-dimensional and strictly increasing")
        if not (len(self.mean) == len(self.variance) == grid.size):
            raise InvalidInputError("grid, mean and variance must have equal length")

    @property
    def sd(self):
        return np.sqrt(np.maximum(self.variance, 0.0))

    @property
    def lo(self):
        return self.mean - 2.0 * self.sd

    @property
    def hi(self):
        return self.mean + 2.0 * self.sd

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in zip(self.grid, self.mean, self.sd, self.lo, self.hi):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def interpolant(self):
        """Monotone cubic interpolant of the mean, held constant outside the grid."""
        pchip = PchipInterpolator(self.grid, self.mean, extrapolate=False)
        g0, g1 = self.grid[0], self.grid[-1]

        def phi_hat(r):
            return pchip(np.clip(r, g0, g1))

        return phi_hat


def estimate_kernel_curve(model, obs: ObservationSet, grid) -> KernelEstimate:
    """Posterior mean and variance of ``phi`` at each grid point of a trained model."""
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0):
        raise InvalidInputError("grid must lie in [0, inf)")
    mean, var = model.posterior(obs, grid)
    neg = var < 0
    if neg.any():
        log.debug("clipped %d negative posterior variances (min %.3e)", neg.sum(), var.min())
    return KernelEstimate(grid, mean, np.where(neg, 0.0, var), int(neg.sum()))


# ---------------------------------------------------------------------------
# pairwise-distance measure


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Histogram of pairwise distances on ``[0, R]``.

    ``rho`` holds probability masses per bin; ``rho_tilde`` holds the
    ``r^2``-weighted masses (sum of ``r^2`` over samples in the bin divided by
    the sample count), so ``sum(rho_tilde)`` is the second moment.
    """

    edges: np.ndarray
    rho: np.ndarray
    rho_tilde: np.ndarray
    n_samples: int
    n_traj: int
    n_failed: int = 0

    @property
    def R(self) -> float:
        return float(self.edges[-1])

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def cdf(self, r):
        """Piecewise-linear distribution function of ``rho``."""
        F = np.concatenate([[0.0], np.cumsum(self.rho)])
        return np.interp(r, self.edges, F)

    @classmethod
    def from_distances(cls, r, bins=200, n_traj=0, n_failed=0) -> "EmpiricalMeasure":
        r = np.asarray(r, dtype=float).ravel()
        if r.size == 0:
            raise InvalidInputError("no distances to histogram")
        R = float(r.max())
        if R <= 0:
            R = 1.0
        edges = np.linspace(0.0, R, bins + 1)
        counts, _ = np.histogram(r, bins=edges)
        sq, _ = np.histogram(r, bins=edges, weights=r * r)
        return cls(edges, counts / r.size, sq / r.size, int(r.size), int(n_traj), int(n_failed))


def _pair_distances(X):
    N = X.shape[-2]
    iu, ku = np.triu_indices(N, 1)
    return np.linalg.norm(X[..., ku, :] - X[..., iu, :], axis=-1)


def simulate_ensemble(spec: ParticleSystemSpec, n_traj, t_grid, seed=0, batch=250, stream=ENSEMBLE_STREAM):
    """Integrate ``n_traj`` initial conditions drawn from ``mu0``.

    Returns ``(X, V, n_failed)`` with ``X`` shaped ``(n_ok, L, N, d)``. A failing
    batch is retried member by member and failing members are dropped.
    """
    ics = [sample_initial(spec, trajectory_rng(seed, k, stream)) for k in range(n_traj)]
    X0 = np.stack([ic[0] for ic in ics])
    V0 = None if spec.order is Order.FIRST else np.stack([ic[1] for ic in ics])
    Xs, Vs, failed = [], [], 0
    for start in range(0, n_traj, batch):
        sl = slice(start, min(start + batch, n_traj))
        vb = None if V0 is None else V0[sl]
        try:
            X, V = integrate_batch(spec, X0[sl], vb, t_grid)
            Xs.append(X)
            Vs.append(V)
            continue
        except (IntegrationError, NumericalError):
            pass
        for k in range(sl.start, sl.stop):
            try:
                X, V = integrate_batch(spec, X0[k : k + 1], None if V0 is None else V0[k : k + 1], t_grid)
            except (IntegrationError, NumericalError):
                failed += 1
                continue
            Xs.append(X)
            Vs.append(V)
    if not Xs:
        raise IntegrationError("every ensemble trajectory failed")
    X = np.concatenate(Xs)
    V = None if V0 is None else np.concatenate(Vs)
    return X, V, failed


def empirical_rho(spec: ParticleSystemSpec, n_traj: int, L: int, T: float, bins: int = 200, seed: int = 0) -> EmpiricalMeasure:
    """Histogram the pairwise distances of ``n_traj`` noise-free trajectories at ``L`` equispaced times.

    With ``L == 1`` only the initial conditions are used and ``T`` is ignored.
    """
    if n_traj < 1:
        raise InvalidInputError("n_traj must be >= 1")
    t_grid = np.array([0.0]) if L == 1 else np.linspace(0.0, float(T), int(L))
    X, _, failed = simulate_ensemble(spec, n_traj, t_grid, seed)
    if failed:
        log.warning("empirical_rho: %d of %d trajectories failed and were skipped", failed, n_traj)
    return EmpiricalMeasure.from_distances(_pair_distances(X), bins, n_traj, failed)


# ---------------------------------------------------------------------------
# metrics


def error_metrics(estimate: KernelEstimate, true_phi, rho: EmpiricalMeasure) -> dict:
    """Relative sup-norm error on ``[0, R]`` and relative ``rho_tilde``-weighted L2 error.

    Both norms use the estimate's own grid points inside ``[0, R]``. The L2
    quadrature weights are trapezoid weights times the ``rho_tilde`` density
    of the histogram bin holding each point.

    Raises
    ------
    NumericalError
        If the true kernel has zero norm, leaving the relative error undefined.
    """
    R = rho.R
    if estimate.grid[0] > 0 or estimate.grid[-1] < R * (1 - 1e-12):
        raise InvalidInputError(f"estimate grid [{estimate.grid[0]}, {estimate.grid[-1]}] does not cover [0, {R}]")
    inside = estimate.grid <= R
    g = estimate.grid[inside]
    phi = np.asarray(true_phi(g), dtype=float)
    diff = estimate.mean[inside] - phi

    widths = np.diff(rho.edges)
    idx = np.clip(np.searchsorted(rho.edges, g, side="right") - 1, 0, widths.size - 1)
    trap = np.zeros(g.size)
    if g.size > 1:
        dg = np.diff(g)
        trap[:-1] += 0.5 * dg
        trap[1:] += 0.5 * dg
    else:
        trap[:] = 1.0
    w = trap * rho.rho_tilde[idx] / widths[idx]

    sup_phi = np.max(np.abs(phi))
    l2_phi = np.sqrt(np.sum(w * phi**2))
    if sup_phi == 0 or l2_phi == 0:
        raise NumericalError("true kernel has zero norm; relative error undefined", value=0.0)
    rel_inf = np.max(np.abs(diff)) / sup_phi
    rel_l2 = np.sqrt(np.sum(w * diff**2)) / l2_phi
    return {"rel_Linf": float(rel_inf), "rel_L2_rho_tilde": float(rel_l2)}


def _state_path(traj, positions_only):
    X = np.asarray(traj.X if hasattr(traj, "X") else traj, dtype=float)
    L = X.shape[0]
    parts = [X.reshape(L, -1)]
    V = getattr(traj, "V", None)
    if V is not None and not positions_only:
        parts.append(np.asarray(V, dtype=float).reshape(L, -1))
    return np.concatenate(parts, axis=1)


def trajectory_error(truth, pred, interval=None, positions_only=False) -> float:
    """Largest Euclidean state distance over grid times inside ``interval``.

    ``truth`` and ``pred`` are Trajectory objects on the same time grid.
    """
    t1, t2 = np.asarray(truth.times, dtype=float), np.asarray(pred.times, dtype=float)
    if t1.shape != t2.shape or not np.array_equal(t1, t2):
        raise InvalidInputError("trajectories are on different time grids")
    A, B = _state_path(truth, positions_only), _state_path(pred, positions_only)
    if A.shape != B.shape:
        raise InvalidInputError(f"state shapes differ: {A.shape} vs {B.shape}")
    mask = np.ones(t1.size, dtype=bool)
    if interval is not None:
        lo, hi = interval
        span = max(abs(lo), abs(hi), 1.0) * 1e-12
        mask = (t1 >= lo - span) & (t1 <= hi + span)
    if not mask.any():
        raise InvalidInputError(f"no grid times inside {interval}")
    return float(np.max(np.linalg.norm(A[mask] - B[mask], axis=1)))


@dataclass(frozen=True)
class FlockingScore:
    direction: np.ndarray
    score: float
    degenerate: bool = False


def flocking_score(V, tie_tol=1e-12) -> FlockingScore:
    """Alignment of unit velocities with their dominant direction.

    The direction is the top eigenvector of ``(1/N) sum u_i u_i^T`` with
    ``u_i = v_i / |v_i|``, signed so that it has a positive inner product with
    ``u_1``. If the top eigenvalue is not simple the direction is ``u_1`` and
    ``degenerate`` is set.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2:
        raise InvalidInputError(f"velocities must be (N, d), got {V.shape}")
    speed = np.linalg.norm(V, axis=1)
    zero = np.flatnonzero(speed == 0)
    if zero.size:
        raise InvalidInputError(f"agent {int(zero[0])} has zero velocity")
    U = V / speed[:, None]
    G = U.T @ U / U.shape[0]
    w, Q = np.linalg.eigh(G)
    degenerate = U.shape[1] > 1 and w[-1] - w[-2] <= tie_tol * max(w[-1], 1.0)
    if degenerate:
        v = U[0].copy()
    else:
        v = Q[:, -1]
        if v @ U[0] < 0:
            v = -v
    return FlockingScore(v, float(np.mean(U @ v)), bool(degenerate))


# ---------------------------------------------------------------------------
# prediction with a learned model


def learned_system(model, obs: ObservationSet, spec_truth: ParticleSystemSpec, R: float, n_grid=1000):
    """Learned system (fitted alpha, posterior-mean kernel) and its kernel estimate on ``[0, 1.5 R]``."""
    grid = np.linspace(0.0, 1.5 * R, n_grid)
    est = estimate_kernel_curve(model, obs, grid)
    spec_hat = spec_truth.with_kernel(est.interpolant(), alpha=model.alpha)
    return spec_hat, est


def predict_and_score(
    model,
    obs: ObservationSet,
    spec_truth: ParticleSystemSpec,
    rho: EmpiricalMeasure,
    T: float,
    T_f: float,
    initial=None,
    n_times: int = 201,
    positions_only: bool = False,
) -> dict:
    """Compare learned and true dynamics from the same initial conditions.

    ``initial`` is a pair ``(X0, V0)`` of stacked initial states; default is
    the first snapshot of every training trajectory. Errors are the
    max-in-time state distance per initial condition, averaged over initial
    conditions, on ``[0, T]`` and ``[T, T_f]``. Relative kernel errors are
    ``None`` when the true kernel vanishes on ``[0, R]``.
    """
    if (spec_truth.d, spec_truth.N, spec_truth.order) != (model.skeleton.d, model.skeleton.N, model.skeleton.order):
        raise InvalidInputError("model and reference system differ in (d, N, order)")
    spec_hat, est = learned_system(model, obs, spec_truth, rho.R)
    if initial is None:
        X0 = obs.X[:, 0]
        V0 = None if obs.V is None else obs.V[:, 0]
    else:
        X0, V0 = initial
    t_grid = np.linspace(0.0, float(T_f), int(n_times))
    Xt, Vt = integrate_batch(spec_truth, X0, V0, t_grid)
    Xp, Vp = integrate_batch(spec_hat, X0, V0, t_grid)

    class _Path:
        def __init__(self, X, V):
            self.times, self.X, self.V = t_grid, X, V

    train, future = [], []
    for b in range(X0.shape[0]):
        a = _Path(Xt[b], None if Vt is None else Vt[b])
        p = _Path(Xp[b], None if Vp is None else Vp[b])
        train.append(trajectory_error(a, p, (0.0, T), positions_only))
        future.append(trajectory_error(a, p, (T, T_f), positions_only))
    try:
        kernel_errors = error_metrics(est, spec_truth.kernel, rho)
    except NumericalError:
        kernel_errors = {"rel_Linf": None, "rel_L2_rho_tilde": None}
    report = {
        "traj_err_train": float(np.mean(train)),
        "traj_err_future": float(np.mean(future)),
        **kernel_errors,
    }
    if Vp is not None:
        report["flocking_score_final"] = [flocking_score(Vp[b, -1]).score for b in range(X0.shape[0])]
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
