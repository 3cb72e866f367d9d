"""Isotropic radial-basis covariance kernel and width conversions.

The kernel is ``k(d) = tau_sq * exp(-psi * d**nu)`` with partial sill
``tau_sq``, decay ``psi`` (units mm**-nu), and exponent ``nu`` in (0, 2].
``nu = 1`` gives the exponential family, ``nu = 2`` the Gaussian family.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KernelParams:
    """Parameters (tau_sq, psi, nu) of the radial-basis covariance."""

    tau_sq: float
    psi: float
    nu: float

    def __post_init__(self):
        if not self.tau_sq > 0:
            raise ValueError(f"tau_sq must be positive, got {self.tau_sq}")
        if not self.psi > 0:
            raise ValueError(f"psi must be positive, got {self.psi}")
        if not 0 < self.nu <= 2:
            raise ValueError(f"nu must lie in (0, 2], got {self.nu}")


def k(params: KernelParams, distance):
    """Evaluate the kernel at one or more distances (mm).

    Accepts scalars or arrays; distances must be non-negative.
    """
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    return params.tau_sq * np.exp(-params.psi * d**params.nu)


def fwhm(params: KernelParams) -> float:
    """Full width (mm) at which correlation drops to one half.

    Uses the half-maximum convention 2 * (ln 2 / psi)**(1/nu).
    """
    return 2.0 * (math.log(2.0) / params.psi) ** (1.0 / params.nu)


def params_from_fwhm(width: float, nu: float, tau_sq: float) -> KernelParams:
    """Kernel parameters with a given half-maximum full width (mm)."""
    if not width > 0:
        raise ValueError(f"fwhm must be positive, got {width}")
    psi = math.log(2.0) * (2.0 / width) ** nu
    return KernelParams(tau_sq=tau_sq, psi=psi, nu=nu)


def correlation_radius(params: KernelParams, level: float = 0.05) -> float:
    """Distance (mm) past which correlation falls below ``level``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return (-math.log(level) / params.psi) ** (1.0 / params.nu)
