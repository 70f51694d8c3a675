"""Interacting particle systems: right-hand sides, integration, synthetic data.

State arrays are shaped ``(N, d)`` (agent-major), optionally with leading
batch axes ``(..., N, d)``; flattening is row-major so agent ``i`` occupies
entries ``i*d .. i*d + d - 1`` of a ``dN`` vector.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError, InvalidInputError, NumericalError

DEFAULT_RTOL = 1e-5
DEFAULT_ATOL = 1e-6


class Order(str, enum.Enum):
    FIRST = "first"
    SECOND = "second"


class Interaction(str, enum.Enum):
    POSITION = "position"  # weights x_k - x_i
    VELOCITY = "velocity"  # weights v_k - v_i (Cucker-Smale alignment)


# ---------------------------------------------------------------------------
# non-collective forces


class NonCollectiveForce:
    """Parametric per-agent force ``F(x_i, v_i; alpha)``.

    Subclasses define ``family``, ``param_names`` and the evaluation and
    parameter Jacobian on arrays shaped ``(..., N, d)``.
    """

    family = "abstract"
    needs_velocity = False

    @property
    def param_names(self) -> tuple:
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def __call__(self, X, V, alpha):
        raise NotImplementedError

    def jacobian(self, X, V, alpha):
        """Derivative with respect to alpha, shape ``(n_params, ..., N, d)``."""
        raise NotImplementedError

    def check_alpha(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float).ravel()
        if alpha.size != self.n_params:
            raise InvalidInputError(
                f"{self.family} force expects {self.n_params} parameters, got {alpha.size}"
            )
        return alpha

    def unpack(self, alpha) -> dict:
        alpha = self.check_alpha(alpha)
        return {name: float(a) for name, a in zip(self.param_names, alpha)}

    def pack(self, params: dict) -> np.ndarray:
        return np.array([float(params[name]) for name in self.param_names])

    def to_dict(self) -> dict:
        return {"family": self.family}


@dataclass(frozen=True)
class ZeroForce(NonCollectiveForce):
    family = "zero"

    @property
    def param_names(self):
        return ()

    def __call__(self, X, V, alpha):
        return np.zeros_like(np.asarray(X, dtype=float))

    def jacobian(self, X, V, alpha):
        return np.zeros((0,) + np.shape(X))


@dataclass(frozen=True)
class StubbornOpinion(NonCollectiveForce):
    """``-kappa (x_i - P_i)`` on the stubborn agents, zero elsewhere.

    Parameters are ``(P_1, ..., P_k, kappa)`` for ``k = len(stubborn)``.
    """

    stubborn: tuple = (0, 1, 2)
    family = "stubborn_opinion"

    def __post_init__(self):
        object.__setattr__(self, "stubborn", tuple(int(i) for i in self.stubborn))

    @property
    def param_names(self):
        return tuple(f"P{j + 1}" for j in range(len(self.stubborn))) + ("kappa",)

    def __call__(self, X, V, alpha):
        alpha = self.check_alpha(alpha)
        X = np.asarray(X, dtype=float)
        out = np.zeros_like(X)
        idx = list(self.stubborn)
        bias = alpha[:-1]
        out[..., idx, :] = -alpha[-1] * (X[..., idx, :] - bias[:, None])
        return out

    def jacobian(self, X, V, alpha):
        alpha = self.check_alpha(alpha)
        X = np.asarray(X, dtype=float)
        jac = np.zeros((self.n_params,) + X.shape)
        kappa = alpha[-1]
        for j, i in enumerate(self.stubborn):
            jac[j][..., i, :] = kappa
            jac[-1][..., i, :] = -(X[..., i, :] - alpha[j])
        return jac

    def to_dict(self):
        return {"family": self.family, "stubborn": list(self.stubborn)}


@dataclass(frozen=True)
class SelfPropulsion(NonCollectiveForce):
    """``(gamma - beta |v_i|^2) v_i`` with parameters ``(gamma, beta)``."""

    family = "self_propulsion"
    needs_velocity = True

    @property
    def param_names(self):
        return ("gamma", "beta")

    def __call__(self, X, V, alpha):
        gamma, beta = self.check_alpha(alpha)
        V = np.asarray(V, dtype=float)
        speed2 = np.sum(V * V, axis=-1, keepdims=True)
        return (gamma - beta * speed2) * V

    def jacobian(self, X, V, alpha):
        self.check_alpha(alpha)
        V = np.asarray(V, dtype=float)
        speed2 = np.sum(V * V, axis=-1, keepdims=True)
        return np.stack([V, -speed2 * V])


@dataclass(frozen=True)
class RayleighFriction(NonCollectiveForce):
    """``kappa v_i (1 - |v_i|^p)`` with parameters ``(kappa, p)``."""

    family = "rayleigh_friction"
    needs_velocity = True

    @property
    def param_names(self):
        return ("kappa", "p")

    def __call__(self, X, V, alpha):
        kappa, p = self.check_alpha(alpha)
        V = np.asarray(V, dtype=float)
        speed = np.linalg.norm(V, axis=-1, keepdims=True)
        return kappa * V * (1.0 - speed**p)

    def jacobian(self, X, V, alpha):
        kappa, p = self.check_alpha(alpha)
        V = np.asarray(V, dtype=float)
        speed = np.linalg.norm(V, axis=-1, keepdims=True)
        powered = speed**p
        with np.errstate(divide="ignore", invalid="ignore"):
            log_speed = np.where(speed > 0, np.log(np.where(speed > 0, speed, 1.0)), 0.0)
        return np.stack([V * (1.0 - powered), -kappa * V * powered * log_speed])


_FORCES = {
    "zero": lambda d: ZeroForce(),
    "stubborn_opinion": lambda d: StubbornOpinion(tuple(d.get("stubborn", (0, 1, 2)))),
    "self_propulsion": lambda d: SelfPropulsion(),
    "rayleigh_friction": lambda d: RayleighFriction(),
}


def force_from_dict(data: dict) -> NonCollectiveForce:
    try:
        return _FORCES[data["family"]](data)
    except KeyError:
        raise InvalidInputError(
            f"unknown force family {data.get('family')!r}; valid: {sorted(_FORCES)}"
        ) from None


# ---------------------------------------------------------------------------
# interaction kernels (ground truth for synthetic data)


def opinion_kernel(r):
    """Piecewise-linear opinion influence: rises on [0, 0.4), flat to 0.6, decays to 0 at 1."""
    r = np.asarray(r, dtype=float)
    return np.select(
        [r < 0.4, r < 0.6, r < 1.0],
        [2.5 * r, np.ones_like(r), 2.5 - 2.5 * r],
        default=0.0,
    )


def morse_kernel(c_rep=0.5, l_rep=0.5, c_att=4.0, l_att=4.0):
    """Return ``(phi, dphi)`` for the Morse-potential force kernel."""

    def bracket(r):
        return -(c_rep / l_rep) * np.exp(-r / l_rep) + (c_att / l_att) * np.exp(-r / l_att)

    def dbracket(r):
        return (c_rep / l_rep**2) * np.exp(-r / l_rep) - (c_att / l_att**2) * np.exp(-r / l_att)

    def phi(r):
        r = np.asarray(r, dtype=float)
        return bracket(r) / r

    def dphi(r):
        r = np.asarray(r, dtype=float)
        return dbracket(r) / r - bracket(r) / r**2

    return phi, dphi


def truncate_c1(phi, dphi, r0):
    """Replace ``phi`` below ``r0`` by ``a exp(-b r)`` matching value and slope at ``r0``."""
    f0 = float(phi(np.float64(r0)))
    g0 = float(dphi(np.float64(r0)))
    if f0 == 0.0:
        raise InvalidInputError("cannot C1-match an exponential to a zero value")
    b = -g0 / f0
    a = f0 * np.exp(b * r0)

    def truncated(r):
        r = np.asarray(r, dtype=float)
        inner = a * np.exp(-b * np.minimum(r, r0))
        with np.errstate(divide="ignore", invalid="ignore"):
            outer = phi(np.maximum(r, r0))
        return np.where(r < r0, inner, outer)

    truncated.a, truncated.b, truncated.r0 = a, b, r0
    return truncated


def fish_milling_kernel(r0=0.05, scale=1.0):
    """C1-truncated Morse kernel multiplied by ``scale``."""
    phi, dphi = morse_kernel()
    return truncate_c1(lambda r: scale * phi(r), lambda r: scale * dphi(r), r0)


def constant_kernel(c):
    def phi(r):
        return np.full(np.shape(r), float(c))

    return phi


# ---------------------------------------------------------------------------
# initial conditions


@dataclass(frozen=True)
class UniformInitial:
    """Independent uniform positions per coordinate; velocities uniform or zero."""

    x_low: float
    x_high: float
    v_low: Optional[float] = None
    v_high: Optional[float] = None

    def sample(self, rng, N, d, order):
        X = rng.uniform(self.x_low, self.x_high, size=(N, d))
        if order is Order.FIRST:
            return X, None
        if self.v_low is None:
            return X, np.zeros((N, d))
        return X, rng.uniform(self.v_low, self.v_high, size=(N, d))

    def to_dict(self):
        return {"x_low": self.x_low, "x_high": self.x_high, "v_low": self.v_low, "v_high": self.v_high}


# ---------------------------------------------------------------------------
# system description


@dataclass(frozen=True)
class SystemSkeleton:
    """Structural part of a system: what a learner needs, without the truth."""

    d: int
    N: int
    order: Order
    force: NonCollectiveForce = field(default_factory=ZeroForce)
    interaction: Interaction = Interaction.POSITION

    def __post_init__(self):
        object.__setattr__(self, "order", Order(self.order))
        object.__setattr__(self, "interaction", Interaction(self.interaction))
        if self.d < 1 or self.N < 2:
            raise InvalidInputError(f"need d >= 1 and N >= 2, got d={self.d}, N={self.N}")
        if self.interaction is Interaction.VELOCITY and self.order is Order.FIRST:
            raise InvalidInputError("velocity-difference interaction requires a second-order system")
        if self.force.needs_velocity and self.order is Order.FIRST:
            raise InvalidInputError(f"{self.force.family} force requires a second-order system")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "N": self.N,
            "order": self.order.value,
            "interaction": self.interaction.value,
            "force": self.force.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SystemSkeleton":
        return cls(
            d=int(data["d"]),
            N=int(data["N"]),
            order=Order(data["order"]),
            force=force_from_dict(data["force"]),
            interaction=Interaction(data["interaction"]),
        )


@dataclass(frozen=True)
class ParticleSystemSpec:
    """A fully specified system: skeleton plus true parameters, kernel and ``mu0``."""

    d: int
    N: int
    order: Order
    kernel: Callable
    force: NonCollectiveForce = field(default_factory=ZeroForce)
    alpha: tuple = ()
    interaction: Interaction = Interaction.POSITION
    masses: Optional[tuple] = None
    mu0: Optional[UniformInitial] = None

    def __post_init__(self):
        object.__setattr__(self, "order", Order(self.order))
        object.__setattr__(self, "interaction", Interaction(self.interaction))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.force.check_alpha(self.alpha)))
        masses = (1.0,) * self.N if self.masses is None else tuple(float(m) for m in self.masses)
        if len(masses) != self.N or min(masses) <= 0:
            raise InvalidInputError("masses must be N positive values")
        object.__setattr__(self, "masses", masses)
        self.skeleton  # validates the structural invariants

    @property
    def skeleton(self) -> SystemSkeleton:
        return SystemSkeleton(self.d, self.N, self.order, self.force, self.interaction)

    @property
    def state_dim(self) -> int:
        return self.d * self.N

    def with_kernel(self, kernel, alpha=None) -> "ParticleSystemSpec":
        """Copy of this system with a different kernel (and optionally alpha)."""
        return ParticleSystemSpec(
            d=self.d,
            N=self.N,
            order=self.order,
            kernel=kernel,
            force=self.force,
            alpha=self.alpha if alpha is None else tuple(alpha),
            interaction=self.interaction,
            masses=self.masses,
            mu0=self.mu0,
        )


@dataclass(frozen=True)
class State:
    """Positions ``X`` and velocities ``V`` (``None`` for first order) at time ``t``."""

    X: np.ndarray
    V: Optional[np.ndarray] = None
    t: float = 0.0

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim != 2:
            raise InvalidInputError(f"positions must be (N, d), got shape {X.shape}")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        if self.V is not None:
            V = np.array(self.V, dtype=float)
            if V.shape != X.shape:
                raise InvalidInputError(f"velocity shape {V.shape} != position shape {X.shape}")
            V.setflags(write=False)
            object.__setattr__(self, "V", V)


# ---------------------------------------------------------------------------
# right-hand side


def pairwise(X):
    """Difference vectors ``x_k - x_i`` at ``[..., i, k, :]`` and their norms."""
    X = np.asarray(X, dtype=float)
    diff = X[..., None, :, :] - X[..., :, None, :]
    return diff, np.linalg.norm(diff, axis=-1)


def eval_kernel_offdiag(kernel, r):
    """Evaluate ``kernel`` on pairwise distances with the self-pairs set to zero."""
    N = r.shape[-1]
    eye = np.eye(N, dtype=bool)
    r_safe = np.where(eye, 1.0, r)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        values = np.asarray(kernel(r_safe), dtype=float)
    values = np.where(eye, 0.0, values)
    bad = ~np.isfinite(values)
    if bad.any():
        dist = float(r[bad].flat[0])
        raise NumericalError(f"interaction kernel is not finite at distance {dist!r}", value=dist)
    return values


def interaction_force(kernel, X, V=None, interaction=Interaction.POSITION):
    """``(1/N) sum_{k != i} phi(|x_k - x_i|) u_ik`` for every agent; shape ``(..., N, d)``."""
    diff, r = pairwise(X)
    N = r.shape[-1]
    weights = eval_kernel_offdiag(kernel, r)
    if Interaction(interaction) is Interaction.VELOCITY:
        V = np.asarray(V, dtype=float)
        u = V[..., None, :, :] - V[..., :, None, :]
    else:
        u = diff
    return np.einsum("...ik,...ikd->...id", weights, u) / N


def _derivative(spec: ParticleSystemSpec, X, V):
    f = interaction_force(spec.kernel, X, V, spec.interaction)
    F = spec.force(X, V, spec.alpha)
    if spec.order is Order.FIRST:
        return F + f
    masses = np.asarray(spec.masses)[:, None]
    return (F + f) / masses


def _check_state(spec, state):
    if state.X.shape != (spec.N, spec.d):
        raise InvalidInputError(f"state positions have shape {state.X.shape}, expected {(spec.N, spec.d)}")
    if spec.order is Order.SECOND and state.V is None:
        raise InvalidInputError("second-order system needs velocities")


def rhs(spec: ParticleSystemSpec, state: State) -> np.ndarray:
    """Velocity (first order) or acceleration (second order) as a ``dN`` vector."""
    _check_state(spec, state)
    V = state.V if spec.order is Order.SECOND else None
    return _derivative(spec, state.X, V).ravel()


# ---------------------------------------------------------------------------
# integration


class Trajectory(Sequence):
    """Integrated path sampled on a time grid; behaves as a sequence of States."""

    def __init__(self, times, X, V=None):
        self.times = np.asarray(times, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.V = None if V is None else np.asarray(V, dtype=float)

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return Trajectory(self.times[k], self.X[k], None if self.V is None else self.V[k])
        return State(self.X[k], None if self.V is None else self.V[k], float(self.times[k]))


def _check_grid(t_grid, rtol, atol):
    t_grid = np.asarray(t_grid, dtype=float).ravel()
    if t_grid.size == 0 or np.any(np.diff(t_grid) <= 0):
        raise InvalidInputError("t_grid must be nonempty and strictly increasing")
    if not (rtol > 0 and atol > 0):
        raise InvalidInputError("rtol and atol must be positive")
    return t_grid


def _solve(fun, y0, t_grid, rtol, atol, what):
    if t_grid.size == 1:
        return y0[None, :]
    sol = solve_ivp(
        fun, (t_grid[0], t_grid[-1]), y0, method="RK45", t_eval=t_grid, rtol=rtol, atol=atol
    )
    if sol.status != 0:
        last = float(sol.t[-1]) if sol.t.size else float(t_grid[0])
        raise IntegrationError(f"{what}: {sol.message} (last good time {last})", last_time=last)
    return sol.y.T


def integrate_batch(spec, X0, V0=None, t_grid=(0.0,), rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Integrate a stack of initial conditions ``(B, N, d)`` as one ODE system.

    The error control acts on the stacked vector, so each member is solved at
    least as accurately as on its own. Returns ``(X, V)`` shaped ``(B, L, N, d)``.
    """
    t_grid = _check_grid(t_grid, rtol, atol)
    X0 = np.asarray(X0, dtype=float)
    B, N, d = X0.shape
    second = spec.order is Order.SECOND
    if second:
        V0 = np.zeros_like(X0) if V0 is None else np.asarray(V0, dtype=float)
        y0 = np.concatenate([X0.ravel(), V0.ravel()])
    else:
        y0 = X0.ravel().copy()
    n = B * N * d

    def fun(t, y):
        X = y[:n].reshape(B, N, d)
        if not second:
            return _derivative(spec, X, None).ravel()
        V = y[n:].reshape(B, N, d)
        return np.concatenate([V.ravel(), _derivative(spec, X, V).ravel()])

    Y = _solve(fun, y0, t_grid, rtol, atol, "batch integration failed")
    L = t_grid.size
    X = Y[:, :n].reshape(L, B, N, d).transpose(1, 0, 2, 3)
    V = Y[:, n:].reshape(L, B, N, d).transpose(1, 0, 2, 3) if second else None
    return X, V


def integrate(spec: ParticleSystemSpec, initial: State, t_grid, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Adaptive RK45 solution sampled exactly on ``t_grid``.

    ``initial`` is taken to hold at ``t_grid[0]``.

    Raises
    ------
    IntegrationError
        If the step size underflows before ``t_grid[-1]``.
    """
    _check_state(spec, initial)
    t_grid = _check_grid(t_grid, rtol, atol)
    V0 = None if spec.order is Order.FIRST else initial.V[None]
    X, V = integrate_batch(spec, initial.X[None], V0, t_grid, rtol, atol)
    return Trajectory(t_grid, X[0], None if V is None else V[0])


# ---------------------------------------------------------------------------
# synthetic observations


def trajectory_rng(seed, index, stream=0):
    """Independent generator for trajectory ``index`` of sub-stream ``stream``.

    Streams are keyed by position, so results do not depend on the order in
    which trajectories are generated.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index))))


def observation_times(L, T):
    if L < 1 or not T > 0:
        raise InvalidInputError("need L >= 1 and T > 0")
    return np.linspace(0.0, float(T), int(L))


def sample_initial(spec, rng):
    if spec.mu0 is None:
        raise InvalidInputError("system has no initial-condition distribution")
    return spec.mu0.sample(rng, spec.N, spec.d, spec.order)


def generate_observations(spec, M, L, T, sigma, seed, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Simulate ``M`` trajectories and record noisy derivatives at ``L`` equispaced times.

    Noise ``N(0, sigma^2)`` is added to the derivative targets only; the
    stored states are exact solver output.
    """
    from .observations import ObservationSet

    if M < 1:
        raise InvalidInputError("need M >= 1")
    if sigma < 0:
        raise InvalidInputError("sigma must be >= 0")
    times = observation_times(L, T)
    Xs, Vs, Zs = [], [], []
    for m in range(M):
        rng = trajectory_rng(seed, m)
        X0, V0 = sample_initial(spec, rng)
        try:
            traj = integrate(spec, State(X0, V0), times, rtol, atol)
        except IntegrationError as exc:
            raise IntegrationError(
                f"trajectory {m}: {exc}", last_time=exc.last_time, trajectory=m
            ) from exc
        Z = _derivative(spec, traj.X, traj.V)
        if sigma > 0:
            Z = Z + sigma * rng.standard_normal(Z.shape)
        Xs.append(traj.X)
        Vs.append(traj.V)
        Zs.append(Z)
    return ObservationSet(
        times=times,
        X=np.stack(Xs),
        V=None if spec.order is Order.FIRST else np.stack(Vs),
        targets=np.stack(Zs),
        sigma_true=float(sigma),
        seed=int(seed),
    )
