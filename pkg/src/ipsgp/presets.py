"""Named experiment setups: the system, the data design and the optimizer start."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    Interaction,
    Order,
    ParticleSystemSpec,
    RayleighFriction,
    SelfPropulsion,
    StubbornOpinion,
    UniformInitial,
    fish_milling_kernel,
    opinion_kernel,
)
from .errors import InvalidInputError
from .training import FitConfig


def alignment_kernel(r):
    """Cucker-Smale communication weight ``(1 + r^2)^(-1/2)``."""
    r = np.asarray(r, dtype=float)
    return 1.0 / np.sqrt(1.0 + r * r)


@dataclass(frozen=True)
class Preset:
    """A system with its data design, prediction horizon and optimizer settings."""

    name: str
    spec: ParticleSystemSpec
    M: int
    L: int
    T: float
    T_f: float
    sigma: float
    fit: FitConfig
    n_rho: int = 2000
    trials: int = 10
    extras: dict = field(default_factory=dict)


def _od():
    spec = ParticleSystemSpec(
        d=1,
        N=10,
        order=Order.FIRST,
        kernel=opinion_kernel,
        force=StubbornOpinion(stubborn=(0, 1, 2)),
        alpha=(1.0, 0.0, -1.0, 10.0),
        mu0=UniformInitial(-1.0, 1.0),
    )
    fit = FitConfig(alpha0=(0.5, 0.5, 0.5, 0.5), sigma0=0.5)
    return Preset("od", spec, M=6, L=4, T=15.0, T_f=20.0, sigma=0.05, fit=fit)


def _dorsogma():
    # interaction summed without the 1/N average: the kernel carries a factor N
    spec = ParticleSystemSpec(
        d=2,
        N=10,
        order=Order.SECOND,
        kernel=fish_milling_kernel(0.05, scale=10.0),
        force=SelfPropulsion(),
        alpha=(1.5, 0.5),
        mu0=UniformInitial(-0.5, 0.5),
    )
    fit = FitConfig(alpha0=(1.0, 1.0), sigma0=1.0)
    return Preset("dorsogma", spec, M=3, L=3, T=5.0, T_f=10.0, sigma=0.1, fit=fit)


def _cucker_smale():
    # synthetic stand-in for the real fish data: velocity alignment plus Rayleigh friction
    spec = ParticleSystemSpec(
        d=2,
        N=10,
        order=Order.SECOND,
        kernel=alignment_kernel,
        force=RayleighFriction(),
        alpha=(0.5, 2.0),
        interaction=Interaction.VELOCITY,
        mu0=UniformInitial(0.0, 1.0, -0.5, 1.0),
    )
    fit = FitConfig(alpha0=(1.0, 1.0), s0=1.0, omega0=1.0, sigma0=0.001, max_evals=100)
    return Preset("cucker-smale", spec, M=3, L=3, T=5.0, T_f=10.0, sigma=0.01, fit=fit)


_PRESETS = {"od": _od, "dorsogma": _dorsogma, "cucker-smale": _cucker_smale}
PRESET_NAMES = tuple(_PRESETS)


def get_preset(name: str) -> Preset:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise InvalidInputError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}") from None
