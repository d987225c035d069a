"""Normal-Inverse-Gamma outputs, the evidential regression loss and its gradient.

All functions accept scalars or numpy arrays and broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

DEFAULT_LAMBDA = 0.01

_LANCZOS_G = 7.0
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _positive(x, name):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DomainError(f"{name} requires finite x > 0")
    return x


def log_gamma(x):
    """ln Gamma(x) for x > 0 (Lanczos, g = 7, nine terms)."""
    x = _positive(x, "log_gamma")
    small = x < 0.5
    # reflection: Gamma(x) Gamma(1 - x) = pi / sin(pi x)
    z = np.where(small, 1.0 - x, x) - 1.0
    acc = np.full_like(z, _LANCZOS[0])
    for i, c in enumerate(_LANCZOS[1:], 1):
        acc = acc + c / (z + i)
    t = z + _LANCZOS_G + 0.5
    lg = _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(acc)
    out = np.where(small, math.log(math.pi) - np.log(np.abs(np.sin(math.pi * x))) - lg, lg)
    return out[()] if out.ndim == 0 else out


def digamma(x):
    """psi(x) for x > 0: shift up to x >= 6, then the asymptotic series."""
    x = _positive(x, "digamma")
    acc = np.zeros_like(x)
    z = x.copy()
    low = z < 6.0
    while np.any(low):
        acc = acc - np.where(low, 1.0 / z, 0.0)
        z = np.where(low, z + 1.0, z)
        low = z < 6.0
    inv2 = 1.0 / (z * z)
    series = inv2 * (
        1.0 / 12
        - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760))))
    )
    out = acc + np.log(z) - 0.5 / z - series
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class NIGParams:
    """Evidential output; fields may be scalars or equally shaped arrays."""

    gamma: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for name in ("gamma", "nu", "alpha", "beta"):
            v = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise DomainError(f"non-finite {name}")
            object.__setattr__(self, name, v)
        if np.any(self.nu <= 0) or np.any(self.beta <= 0):
            raise DomainError("nu and beta must be > 0")
        if np.any(self.alpha <= 0):
            raise DomainError("alpha must be > 0")

    def __len__(self):
        return int(np.size(self.gamma))

    def __getitem__(self, idx):
        return NIGParams(self.gamma[idx], self.nu[idx], self.alpha[idx], self.beta[idx])

    def stack(self) -> np.ndarray:
        return np.stack([self.gamma, self.nu, self.alpha, self.beta], axis=-1)


def omega(p: NIGParams):
    return 2.0 * p.beta * (1.0 + p.nu)


def nll_loss(p: NIGParams, y):
    """Per-sample NIG negative log-likelihood."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError("non-finite target")
    om = omega(p)
    resid = y - p.gamma
    return (
        0.5 * np.log(math.pi / p.nu)
        - p.alpha * np.log(om)
        + (p.alpha + 0.5) * np.log(resid * resid * p.nu + om)
        + log_gamma(p.alpha)
        - log_gamma(p.alpha + 0.5)
    )


def reg_loss(p: NIGParams, y):
    """Evidence regulariser |y - gamma| (2 nu + alpha)."""
    return np.abs(np.asarray(y, dtype=float) - p.gamma) * (2.0 * p.nu + p.alpha)


def der_loss(p: NIGParams, y, lam: float = DEFAULT_LAMBDA) -> float:
    """Batch mean of nll + lam * reg."""
    if np.size(p.gamma) == 0:
        raise ValueError("empty batch")
    return float(np.mean(nll_loss(p, y) + lam * reg_loss(p, y)))


def der_loss_grad(p: NIGParams, y, lam: float = DEFAULT_LAMBDA):
    """Partial derivatives of the per-sample loss nll + lam * reg.

    Returns ``(d_gamma, d_nu, d_alpha, d_beta)``.  At ``y == gamma`` the
    regulariser contributes a zero subgradient to ``d_gamma``.
    """
    y = np.asarray(y, dtype=float)
    g, nu, a, b = p.gamma, p.nu, p.alpha, p.beta
    r = y - g
    om = 2.0 * b * (1.0 + nu)
    big = r * r * nu + om
    ap = a + 0.5

    d_gamma = -ap * 2.0 * r * nu / big
    d_nu = -0.5 / nu - a / (1.0 + nu) + ap * (r * r + 2.0 * b) / big
    d_alpha = np.log(big) - np.log(om) + digamma(a) - digamma(ap)
    d_beta = -a / b + ap * 2.0 * (1.0 + nu) / big

    absr = np.abs(r)
    d_gamma = d_gamma - lam * np.sign(r) * (2.0 * nu + a)
    d_nu = d_nu + lam * 2.0 * absr
    d_alpha = d_alpha + lam * absr
    return d_gamma, d_nu, d_alpha, d_beta


def eviu_per_sample(p: NIGParams):
    """Total evidential uncertainty beta/(nu(alpha-1)) + beta/(alpha-1)."""
    if np.any(p.alpha <= 1):
        raise DomainError("evidential uncertainty needs alpha > 1")
    am1 = p.alpha - 1.0
    return p.beta / (p.nu * am1) + p.beta / am1
