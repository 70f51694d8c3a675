"""Gaussian-process machinery for the force field induced by a scalar kernel prior.

With a prior ``phi ~ GP(0, K)`` the stacked interaction force at the observed
states is Gaussian with covariance ``(1/N^2) R G R^T`` where ``G`` is the
kernel matrix over all pairwise distances and ``R`` holds the pair weight
vectors (position or velocity differences). ``R`` is block-diagonal over
snapshots, so everything is assembled per snapshot pair.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import kernels
from .dynamics import Interaction, SystemSkeleton, ZeroForce
from .errors import ContractError, InvalidInputError, NumericalError, ResourceError
from .kernels import KernelHyperparams
from .observations import ObservationSet

MAX_DIM = 6000
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
LOG_2PI = np.log(2.0 * np.pi)


class PairFeatures:
    """Unique pair distances and weight blocks of an ObservationSet.

    Attributes
    ----------
    r : (S, P) array
        Distances ``|x_k - x_i|`` for the ``P = N(N-1)/2`` pairs ``i < k`` of
        each of the ``S = M L`` snapshots.
    W : (S, N*d, P) array
        ``W[s, i*d + a, pair]`` is the weight of the pair on row ``(i, a)``:
        ``u_ik[a]`` for ``i`` and ``u_ki[a]`` for ``k``.
    """

    def __init__(self, obs: ObservationSet, interaction=Interaction.POSITION, max_dim=MAX_DIM):
        interaction = Interaction(interaction)
        if obs.n_obs > max_dim:
            raise ResourceError(f"dNML = {obs.n_obs} exceeds the configured cap {max_dim}")
        if interaction is Interaction.VELOCITY and obs.V is None:
            raise InvalidInputError("velocity-difference interaction needs velocity data")
        S, N, d = obs.snapshots, obs.N, obs.d
        X = obs.X.reshape(S, N, d)
        iu, ku = np.triu_indices(N, 1)
        diff = X[:, ku, :] - X[:, iu, :]
        self.r = np.linalg.norm(diff, axis=-1)
        if interaction is Interaction.VELOCITY:
            V = obs.V.reshape(S, N, d)
            u = V[:, ku, :] - V[:, iu, :]
        else:
            u = diff
        P = iu.size
        W = np.zeros((S, N, d, P))
        cols = np.arange(P)
        W[:, iu, :, cols] = u.transpose(1, 0, 2)
        W[:, ku, :, cols] = -u.transpose(1, 0, 2)
        self.W = W.reshape(S, N * d, P)
        self.N, self.d, self.S, self.P = N, d, S, P
        self.interaction = interaction

    @property
    def n_obs(self):
        return self.S * self.N * self.d

    def _sandwich(self, G):
        # (1/N^2) W_s G_st W_t^T for all snapshot pairs, flattened to (n, n)
        G4 = G.reshape(self.S, self.P, self.S, self.P).transpose(0, 2, 1, 3)
        WG = np.matmul(self.W[:, None], G4)
        K4 = np.matmul(WG, self.W.transpose(0, 2, 1)[None])
        n = self.n_obs
        return K4.transpose(0, 2, 1, 3).reshape(n, n) / self.N**2

    def ff_cov(self, h: KernelHyperparams):
        return self._sandwich(kernels.gram(h, self.r))

    def ff_cov_with_grad(self, h: KernelHyperparams):
        """Return ``K_ff`` and ``dK_ff/dlog omega``."""
        G, dG = kernels.gram_with_grad(h, self.r)
        return self._sandwich(G), self._sandwich(dG)

    def cross_cov(self, h: KernelHyperparams, r_star):
        """``Cov(f(X), phi(r*))`` as an ``(n_obs, len(r_star))`` matrix."""
        r_star = np.atleast_1d(np.asarray(r_star, dtype=float))
        k = kernels.gram(h, self.r, r_star).reshape(self.S, self.P, -1)
        return np.matmul(self.W, k).reshape(self.n_obs, -1) / self.N


def assemble_ff_cov(obs: ObservationSet, h: KernelHyperparams, interaction=Interaction.POSITION):
    """Covariance of the stacked interaction force, shape ``(dNML, dNML)``."""
    return PairFeatures(obs, interaction).ff_cov(h)


def assemble_cross_cov(obs: ObservationSet, h: KernelHyperparams, r_star, interaction=Interaction.POSITION):
    """Cross-covariance between the stacked force and ``phi(r_star)`` (vector for scalar ``r_star``)."""
    out = PairFeatures(obs, interaction).cross_cov(h, r_star)
    return out[:, 0] if np.ndim(r_star) == 0 else out


def _factor(C):
    """Cholesky of ``C`` with a diagonal jitter ladder relative to its mean diagonal."""
    scale = max(float(np.mean(np.diag(C))), np.finfo(float).tiny)
    n = C.shape[0]
    for jitter in JITTER_LADDER:
        try:
            L = linalg.cholesky(C + (jitter * scale) * np.eye(n), lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jitter * scale
    try:
        smallest = float(linalg.eigvalsh(C, subset_by_index=[0, 0], check_finite=False)[0])
    except (linalg.LinAlgError, ValueError):
        smallest = float("nan")
    raise NumericalError(
        f"Cholesky failed at maximum jitter; smallest eigenvalue estimate {smallest:.3e}", value=smallest
    )


@dataclass(frozen=True, eq=False)
class CovarianceCache:
    """Factorized training covariance for fast posterior queries.

    ``key`` fingerprints the data and parameters the factor belongs to.
    """

    K_ff: np.ndarray
    chol: np.ndarray
    residual: np.ndarray
    alpha_vec: np.ndarray
    jitter: float
    data_hash: str
    kernel: KernelHyperparams
    alpha: tuple
    sigma: float
    key: str


def _cache_key(data_hash, alpha, h, sigma, interaction):
    payload = json.dumps(
        {
            "data": data_hash,
            "alpha": [float(a) for a in np.ravel(alpha)],
            "kernel": h.to_dict(),
            "sigma": float(sigma),
            "interaction": Interaction(interaction).value,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


class InteractionGP:
    """Likelihood and posterior for one ObservationSet under a system skeleton.

    The pair features are computed once here and shared by every evaluation.
    """

    def __init__(self, obs: ObservationSet, skeleton: SystemSkeleton = None, max_dim=MAX_DIM):
        if skeleton is None:
            skeleton = SystemSkeleton(
                obs.d, obs.N, "second" if obs.second_order else "first", ZeroForce(), Interaction.POSITION
            )
        if (obs.d, obs.N) != (skeleton.d, skeleton.N):
            raise InvalidInputError(
                f"data has (d, N) = {(obs.d, obs.N)}, skeleton expects {(skeleton.d, skeleton.N)}"
            )
        if skeleton.force.needs_velocity and obs.V is None:
            raise InvalidInputError(f"{skeleton.force.family} force needs velocity data")
        self.obs = obs
        self.skeleton = skeleton
        self.force = skeleton.force
        self.pairs = PairFeatures(obs, skeleton.interaction, max_dim)
        self._z = obs.targets.ravel()

    @property
    def n_alpha(self):
        return self.force.n_params

    def mean(self, alpha):
        return self.force(self.obs.X, self.obs.V, alpha).ravel()

    def mean_jacobian(self, alpha):
        return self.force.jacobian(self.obs.X, self.obs.V, alpha).reshape(self.n_alpha, self.obs.n_obs)

    def residual(self, alpha):
        return self._z - self.mean(alpha)

    def _covariance(self, h, sigma, with_grad=False):
        if with_grad:
            K, dK = self.pairs.ff_cov_with_grad(h)
        else:
            K, dK = self.pairs.ff_cov(h), None
        C = K + sigma**2 * np.eye(K.shape[0])
        return K, dK, C

    def nll(self, alpha, h: KernelHyperparams, sigma: float) -> float:
        """Negative log marginal likelihood of the targets."""
        r = self.residual(alpha)
        _, _, C = self._covariance(h, sigma)
        L, _ = _factor(C)
        gamma = linalg.cho_solve((L, True), r, check_finite=False)
        return float(0.5 * r @ gamma + np.sum(np.log(np.diag(L))) + 0.5 * r.size * LOG_2PI)

    def nll_and_grad(self, alpha, h: KernelHyperparams, sigma: float):
        """NLL and its gradient over ``(alpha, log s, log omega, log sigma)``."""
        r = self.residual(alpha)
        K, dK_omega, C = self._covariance(h, sigma, with_grad=True)
        L, _ = _factor(C)
        n = r.size
        gamma = linalg.cho_solve((L, True), r, check_finite=False)
        value = 0.5 * r @ gamma + np.sum(np.log(np.diag(L))) + 0.5 * n * LOG_2PI

        C_inv = linalg.cho_solve((L, True), np.eye(n), check_finite=False)
        g_alpha = -(self.mean_jacobian(alpha) @ gamma)
        # -1/2 Tr((gamma gamma^T - C^-1) dK) without forming the outer product; dK/dlog s = 2 K
        g_log_s = -(gamma @ K @ gamma - np.sum(C_inv * K))
        g_log_omega = -0.5 * (gamma @ dK_omega @ gamma - np.sum(C_inv * dK_omega))
        g_log_sigma = -sigma**2 * (gamma @ gamma - np.trace(C_inv))
        grad = np.concatenate([g_alpha, [g_log_s, g_log_omega, g_log_sigma]])
        return float(value), grad

    def build_cache(self, alpha, h: KernelHyperparams, sigma: float) -> CovarianceCache:
        r = self.residual(alpha)
        K, _, C = self._covariance(h, sigma)
        L, jitter = _factor(C)
        alpha_vec = linalg.cho_solve((L, True), r, check_finite=False)
        key = _cache_key(self.obs.data_hash, alpha, h, sigma, self.skeleton.interaction)
        for a in (K, L, r, alpha_vec):
            a.setflags(write=False)
        return CovarianceCache(
            K_ff=K,
            chol=L,
            residual=r,
            alpha_vec=alpha_vec,
            jitter=jitter,
            data_hash=self.obs.data_hash,
            kernel=h,
            alpha=tuple(float(a) for a in np.ravel(alpha)),
            sigma=float(sigma),
            key=key,
        )

    def check_cache(self, cache: CovarianceCache, h: KernelHyperparams):
        if cache.data_hash != self.obs.data_hash or cache.kernel != h:
            raise ContractError("covariance cache was built for different data or hyperparameters")

    def posterior(self, cache: CovarianceCache, h: KernelHyperparams, r_star):
        """Posterior mean and variance of ``phi`` at ``r_star`` (arrays)."""
        r_star = np.atleast_1d(np.asarray(r_star, dtype=float))
        k = self.pairs.cross_cov(h, r_star)
        mean = k.T @ cache.alpha_vec
        v = linalg.solve_triangular(cache.chol, k, lower=True, check_finite=False)
        var = h.s**2 - np.sum(v * v, axis=0)
        return mean, var


def nll(obs, alpha, h, sigma, skeleton=None):
    return InteractionGP(obs, skeleton).nll(alpha, h, sigma)


def nll_grad(obs, alpha, h, sigma, skeleton=None):
    return InteractionGP(obs, skeleton).nll_and_grad(alpha, h, sigma)[1]


def build_cache(obs, alpha, h, sigma, skeleton=None):
    return InteractionGP(obs, skeleton).build_cache(alpha, h, sigma)


def posterior_phi(cache: CovarianceCache, obs, h, r_star, skeleton=None):
    """Posterior ``(mean, variance)`` of ``phi(r_star)``; scalars for scalar ``r_star``.

    Raises
    ------
    ContractError
        If ``cache`` was built from other data or other kernel hyperparameters.
    """
    gp = InteractionGP(obs, skeleton)
    gp.check_cache(cache, h)
    mean, var = gp.posterior(cache, h, r_star)
    if np.ndim(r_star) == 0:
        return float(mean[0]), float(var[0])
    return mean, var
