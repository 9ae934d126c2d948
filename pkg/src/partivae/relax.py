"""Reparameterised sampling primitives.

All functions are vectorised over numpy arrays and take their uniform noise
explicitly, so the same draw can be replayed (e.g. for finite differences).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from partivae.errors import NoiseError, ParameterError

U_CLAMP = 1e-12


@dataclass(frozen=True)
class RelaxConfig:
    tau: float = 1.0 / 16.0
    sigmoid_k: float = 50.0
    beta_mode: str = "kumaraswamy"

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not self.sigmoid_k > 0:
            raise ParameterError(f"sigmoid_k must be positive, got {self.sigmoid_k}")
        if self.beta_mode not in ("kumaraswamy", "beta_newton"):
            raise ParameterError(f"unknown beta_mode {self.beta_mode!r}")


def check_noise(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if not np.all((u > 0) & (u < 1)):
        raise NoiseError("uniform variates must lie strictly inside (0, 1)")
    return np.clip(u, U_CLAMP, 1.0 - U_CLAMP)


def sigmoid(z):
    return special.expit(z)


def logistic_noise(u) -> np.ndarray:
    u = check_noise(u)
    return np.log(u) - np.log1p(-u)


def gumbel_soft_spin(log_odds, tau: float, u, return_grad: bool = False):
    """Binary Concrete sample mapped to a soft spin in (-1, 1).

    ``log_odds`` is ``2 * phi`` for a spin with mass proportional to
    ``exp(x * phi)``. With ``return_grad`` also returns d(spin)/d(log_odds).
    """
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    s = sigmoid((np.asarray(log_odds, dtype=np.float64) + logistic_noise(u)) / tau)
    spin = 2.0 * s - 1.0
    if return_grad:
        return spin, 2.0 * s * (1.0 - s) / tau
    return spin


def harden_spin(log_odds, u) -> np.ndarray:
    """Exact Bernoulli spin: +1 with probability sigmoid(log_odds)."""
    u = check_noise(u)
    return np.where(np.asarray(log_odds, dtype=np.float64) + np.log(u) - np.log1p(-u) > 0, 1.0, -1.0)


def _check_ab(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.all(a > 0) and np.all(b > 0)):
        raise ParameterError("Kumaraswamy parameters must be positive")
    return a, b


def kuma_sample(a, b, u, return_grad: bool = False):
    """Kumaraswamy quantile ``(1 - (1-u)^(1/b))^(1/a)``.

    With ``return_grad`` returns ``(x, dx/da, dx/db)``.
    """
    a, b = _check_ab(a, b)
    u = check_noise(u)
    log1mu = np.log1p(-u)
    t = np.exp(log1mu / b)  # (1-u)^(1/b)
    z = -np.expm1(log1mu / b)  # 1 - t
    log_x = np.log(z) / a
    x = np.exp(log_x)
    if not return_grad:
        return x
    dx_da = -x * log_x / a
    dx_db = x / (a * z) * t * log1mu / (b * b)
    return x, dx_da, dx_db


def kuma_log_x(a, b, u) -> np.ndarray:
    """``log`` of :func:`kuma_sample`, accurate when the sample underflows."""
    a, b = _check_ab(a, b)
    u = check_noise(u)
    return np.log(-np.expm1(np.log1p(-u) / b)) / a


def kuma_cdf(x, a, b) -> np.ndarray:
    a, b = _check_ab(a, b)
    return -np.expm1(b * np.log1p(-np.power(x, a)))


def kuma_log_pdf(x, a, b, return_grad: bool = False):
    """``ln a + ln b + (a-1) ln x + (b-1) ln(1 - x^a)``.

    With ``return_grad`` also returns partials w.r.t. ``x``, ``a`` and ``b``.
    """
    a, b = _check_ab(a, b)
    x = np.asarray(x, dtype=np.float64)
    log_x = np.log(x)
    xa = np.exp(a * log_x)
    log1m_xa = np.log1p(-xa)
    lp = np.log(a) + np.log(b) + (a - 1.0) * log_x + (b - 1.0) * log1m_xa
    if not return_grad:
        return lp
    ratio = xa / (1.0 - xa)
    d_x = (a - 1.0) / x - (b - 1.0) * a * ratio / x
    d_a = 1.0 / a + log_x - (b - 1.0) * ratio * log_x
    d_b = 1.0 / b + log1m_xa
    return lp, d_x, d_a, d_b


def kuma_log_pdf_from_noise(a, b, u) -> np.ndarray:
    """Log-density of the reparameterised sample, evaluated without forming ``x``.

    Uses ``1 - x^a = (1-u)^(1/b)``, which stays accurate when ``x`` rounds to 0 or 1.
    """
    a, b = _check_ab(a, b)
    u = check_noise(u)
    log1mu = np.log1p(-u)
    log_x = np.log(-np.expm1(log1mu / b)) / a
    return np.log(a) + np.log(b) + (a - 1.0) * log_x + (b - 1.0) * log1mu / b


def beta_sample(a, b, u, return_grad: bool = False):
    """Beta quantile by Newton iteration on the regularised incomplete beta.

    Gradients come from implicit differentiation of ``I_x(a, b) = u``; the
    parameter partials of ``I_x`` are taken by central differences since scipy
    exposes none.
    """
    a, b = _check_ab(a, b)
    u = check_noise(u)
    a, b, u = np.broadcast_arrays(a, b, u)
    x = special.betaincinv(a, b, u)
    for _ in range(3):
        pdf = np.exp(beta_log_pdf(np.clip(x, 1e-300, 1 - 1e-16), a, b))
        step = (special.betainc(a, b, x) - u) / np.where(pdf > 0, pdf, np.inf)
        x = np.clip(x - step, np.nextafter(0, 1), np.nextafter(1, 0))
    if not return_grad:
        return x
    pdf = np.exp(beta_log_pdf(x, a, b))
    ha = 1e-6 * np.maximum(a, 1.0)
    hb = 1e-6 * np.maximum(b, 1.0)
    dI_da = (special.betainc(a + ha, b, x) - special.betainc(a - ha, b, x)) / (2 * ha)
    dI_db = (special.betainc(a, b + hb, x) - special.betainc(a, b - hb, x)) / (2 * hb)
    return x, -dI_da / pdf, -dI_db / pdf


def beta_log_pdf(x, a, b, return_grad: bool = False):
    a, b = _check_ab(a, b)
    x = np.asarray(x, dtype=np.float64)
    log_x = np.log(x)
    log1mx = np.log1p(-x)
    lp = (a - 1.0) * log_x + (b - 1.0) * log1mx - special.betaln(a, b)
    if not return_grad:
        return lp
    dig = special.digamma(a + b)
    d_x = (a - 1.0) / x - (b - 1.0) / (1.0 - x)
    d_a = log_x - special.digamma(a) + dig
    d_b = log1mx - special.digamma(b) + dig
    return lp, d_x, d_a, d_b


def soft_indicator(d, k: float, return_grad: bool = False):
    """Steep sigmoid ``sigmoid(k d)`` standing in for ``I(d > 0)``."""
    if not k > 0:
        raise ParameterError(f"steepness must be positive, got {k}")
    z = k * np.asarray(d, dtype=np.float64)
    # evaluate the upper half and reflect, so s(d) + s(-d) == 1 bit-exactly
    s = np.where(z >= 0, sigmoid(np.abs(z)), 1.0 - sigmoid(np.abs(z)))
    if return_grad:
        return s, k * s * (1.0 - s)
    return s
