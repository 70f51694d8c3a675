"""Half-integer Matérn kernels on distances, with log-parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

_NUS = (0.5, 1.5, 2.5)
_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class KernelHyperparams:
    """Matérn hyperparameters in natural units.

    Parameters
    ----------
    nu : float
        Smoothness, one of 1/2, 3/2, 5/2.
    s : float
        Amplitude; ``K(r, r) = s**2``. Zero gives the degenerate prior.
    omega : float
        Length-scale.
    """

    nu: float = 1.5
    s: float = 1.0
    omega: float = 1.0

    def __post_init__(self):
        if self.nu not in _NUS:
            raise InvalidInputError(f"nu must be one of {_NUS}, got {self.nu}")
        if not (np.isfinite(self.s) and self.s >= 0):
            raise InvalidInputError(f"amplitude s must be finite and >= 0, got {self.s}")
        if not (np.isfinite(self.omega) and self.omega > 0):
            raise InvalidInputError(f"length-scale omega must be > 0, got {self.omega}")

    @property
    def log_s(self) -> float:
        return float(np.log(self.s)) if self.s > 0 else -np.inf

    @property
    def log_omega(self) -> float:
        return float(np.log(self.omega))

    @classmethod
    def from_log(cls, log_s: float, log_omega: float, nu: float = 1.5) -> "KernelHyperparams":
        return cls(nu=nu, s=float(np.exp(log_s)), omega=float(np.exp(log_omega)))

    def scaled(self, factor: float) -> "KernelHyperparams":
        """Return the kernel multiplied by ``factor`` (so ``s`` scales by its root)."""
        return KernelHyperparams(nu=self.nu, s=self.s * float(np.sqrt(factor)), omega=self.omega)

    def to_dict(self) -> dict:
        return {"nu": self.nu, "s": self.s, "omega": self.omega}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelHyperparams":
        return cls(nu=float(data["nu"]), s=float(data["s"]), omega=float(data["omega"]))


def _shape(nu, u):
    # correlation as a function of scaled lag u = |r - r'| / omega
    if nu == 0.5:
        return np.exp(-u)
    if nu == 1.5:
        a = _SQRT3 * u
        return (1.0 + a) * np.exp(-a)
    a = _SQRT5 * u
    return (1.0 + a + a * a / 3.0) * np.exp(-a)


def _shape_dlog_omega(nu, u):
    # d/d(log omega) of the correlation; equals -u * d/du
    if nu == 0.5:
        return u * np.exp(-u)
    if nu == 1.5:
        return 3.0 * u * u * np.exp(-_SQRT3 * u)
    a = _SQRT5 * u
    return (5.0 / 3.0) * u * u * (1.0 + a) * np.exp(-a)


def _lag(h, r, rp):
    r = np.asarray(r, dtype=float)
    rp = np.asarray(rp, dtype=float)
    return np.abs(r - rp) / h.omega


def matern(h: KernelHyperparams, r, rp):
    """Evaluate ``K(r, r')``; broadcasts over array arguments."""
    return h.s**2 * _shape(h.nu, _lag(h, r, rp))


def matern_grad(h: KernelHyperparams, r, rp):
    """Return ``(dK/dlog s, dK/dlog omega)`` at ``(r, r')``."""
    u = _lag(h, r, rp)
    s2 = h.s**2
    return 2.0 * s2 * _shape(h.nu, u), s2 * _shape_dlog_omega(h.nu, u)


def gram(h: KernelHyperparams, r, rp=None):
    """Kernel matrix between two 1-D sets of distances."""
    r = np.asarray(r, dtype=float).ravel()
    rp = r if rp is None else np.asarray(rp, dtype=float).ravel()
    return matern(h, r[:, None], rp[None, :])


def gram_with_grad(h: KernelHyperparams, r):
    """Kernel matrix on ``r`` together with its log-omega derivative."""
    r = np.asarray(r, dtype=float).ravel()
    u = np.abs(r[:, None] - r[None, :]) / h.omega
    s2 = h.s**2
    return s2 * _shape(h.nu, u), s2 * _shape_dlog_omega(h.nu, u)

