"""Mollified risk aversion and the regularized PDE coefficients.

Convolving the two-level risk aversion with a unit-mass kernel of width
``epsilon`` gives the closed form

    gamma_eps(y) = gamma2 + (gamma1 - gamma2) * W_eps(y - m(t))

where ``W_eps`` is the kernel's distribution function, so no numerical
convolution is ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from .errors import InvalidParameter
from .model import DerivedMarket, MeanFieldCurve, Preferences

KERNELS = ("quartic-polynomial", "bump-exponential")


@dataclass(frozen=True)
class MollifierKernel:
    kind: str
    epsilon: float

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise InvalidParameter(f"unknown mollifier kind {self.kind!r}; expected one of {KERNELS}")
        if not self.epsilon > 0:
            raise InvalidParameter(f"mollifier width must be positive, got {self.epsilon}")

    @property
    def sup(self):
        """Supremum of the unit-width kernel."""
        if self.kind == "quartic-polynomial":
            return 15.0 / 16.0
        return _bump_norm() * np.exp(-1.0)


@lru_cache(maxsize=None)
def _bump_norm():
    mass, _ = quad(lambda z: np.exp(-1.0 / (1.0 - z * z)), -1.0, 1.0, epsabs=1e-14, epsrel=1e-14)
    return 1.0 / mass


def kernel_pdf(kind: str, z):
    """Unit-width kernel density on [-1, 1]."""
    z = np.asarray(z, dtype=float)
    inside = np.abs(z) < 1.0
    if kind == "quartic-polynomial":
        return np.where(inside, 15.0 / 16.0 * (1.0 - z * z) ** 2, 0.0)
    zz = np.where(inside, z, 0.0)
    return np.where(inside, _bump_norm() * np.exp(-1.0 / (1.0 - zz * zz)), 0.0)


# Composite Gauss-Legendre for the bump antiderivative: 16 panels x 24 nodes
# resolves the flat ends to ~1e-13 against adaptive quadrature.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)
_GL_PANELS = 16


def _bump_cdf_unit(z):
    z = np.clip(np.asarray(z, dtype=float), -1.0, 1.0)
    flat = z.reshape(-1)
    h = (flat + 1.0) / _GL_PANELS
    k = np.arange(_GL_PANELS)
    # nodes: -1 + h*(k + (xi+1)/2)
    pts = -1.0 + h[:, None, None] * (k[None, :, None] + 0.5 * (_GL_NODES[None, None, :] + 1.0))
    vals = kernel_pdf("bump-exponential", pts)
    out = 0.5 * h * np.einsum("nkj,j->n", vals, _GL_WEIGHTS)
    return out.reshape(z.shape)


def kernel_cdf(kernel: MollifierKernel, s):
    """Distribution function of the scaled kernel omega_eps evaluated at ``s``."""
    z = np.asarray(s, dtype=float) / kernel.epsilon
    if kernel.kind == "quartic-polynomial":
        zc = np.clip(z, -1.0, 1.0)
        inner = np.clip(0.5 + 15.0 / 16.0 * (zc - 2.0 * zc**3 / 3.0 + zc**5 / 5.0), 0.0, 1.0)
    else:
        inner = np.clip(_bump_cdf_unit(z), 0.0, 1.0)
    # exact 0 / 1 outside the support so the far field sees gamma2 / gamma1 bitwise
    return np.where(z <= -1.0, 0.0, np.where(z >= 1.0, 1.0, inner))


def gamma_eps_gap(gap, prefs: Preferences, kernel: MollifierKernel):
    """Mollified risk aversion as a function of the gap ``y - m(t)``."""
    if prefs.is_constant:
        return np.full_like(np.asarray(gap, dtype=float), prefs.gamma1)
    w = kernel_cdf(kernel, gap)
    return prefs.gamma2 + (prefs.gamma1 - prefs.gamma2) * w


def gamma_eps(t, y, m: MeanFieldCurve, prefs: Preferences, kernel: MollifierKernel):
    """Mollified risk aversion at wealth ``y`` and time ``t``."""
    return gamma_eps_gap(np.asarray(y, dtype=float) - m(t), prefs, kernel)


def gamma_eps_lipschitz(prefs: Preferences, kernel: MollifierKernel) -> float:
    """Upper bound for the Lipschitz constant of gamma_eps(t, .)."""
    return (prefs.gamma2 - prefs.gamma1) * kernel.sup / kernel.epsilon


def coeff_D_eps(t, y, m, prefs, dm: DerivedMarket, kernel):
    """Diffusion coefficient of the regularized PDE; ``y`` is the raw unknown u."""
    g = gamma_eps(t, np.asarray(y) / dm.P0_at(t), m, prefs, kernel)
    return 0.5 * dm.lam_norm_at(t) ** 2 * g**2


def coeff_V_eps(t, y, m, prefs, dm: DerivedMarket, kernel):
    """Transport coefficient of the regularized PDE."""
    g = gamma_eps(t, np.asarray(y) / dm.P0_at(t), m, prefs, kernel)
    return dm.lam_norm_at(t) ** 2 * g
