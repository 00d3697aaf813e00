"""Shared 1-D empowerment test fixtures: a toy shift transition and a
grid-quadrature mutual-information oracle for tanh-squashed Gaussian
sources over a Gaussian channel z' = z + u + noise."""

import numpy as np

from dvbf import diffcore as dc
from dvbf.model import DiagGaussian


class ToyShiftTransition:
    """z' = z + u with fixed Gaussian noise; the 1-D quadrature toy."""

    latent_dim = 1

    def __init__(self, sigma: float = 0.2):
        self.sigma = sigma

    def prior(self, z, u) -> DiagGaussian:
        var = dc.Tensor(np.full(z.data.shape, self.sigma ** 2,
                                dtype=z.data.dtype))
        return DiagGaussian(dc.add(z, u), var)


def squashed_source_grid(mu, var, bound=1.0, n=4001, span=9.0):
    """Quadrature nodes for a = mu + sqrt(var)*eps and their density."""
    sd = np.sqrt(var)
    a = np.linspace(mu - span * sd, mu + span * sd, n)
    pa = np.exp(-0.5 * (a - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)
    u = bound * np.tanh(a)
    return a, pa, u


def quadrature_mi(mu, var, sigma, z0=0.0, bound=1.0, n=4001, m=4001):
    """I(z'; u) for u = bound*tanh(a), a ~ N(mu, var), z' ~ N(z0+u, sigma^2).

    Integrates in a-space (no atanh singularities) and on a dense z' grid.
    """
    a, pa, u = squashed_source_grid(mu, var, bound, n)
    zp = np.linspace(z0 - bound - 9 * sigma, z0 + bound + 9 * sigma, m)
    cond = np.exp(-0.5 * (zp[None, :] - (z0 + u)[:, None]) ** 2 / sigma ** 2) \
        / np.sqrt(2 * np.pi * sigma ** 2)                       # [n, m]
    marg = np.trapezoid(pa[:, None] * cond, a, axis=0)          # [m]
    ratio = np.where(cond > 0, cond / np.maximum(marg[None, :], 1e-300), 1.0)
    inner = np.trapezoid(cond * np.log(np.maximum(ratio, 1e-300)), zp, axis=1)
    return float(np.trapezoid(pa * inner, a))


def squashed_entropy(mu, var, bound=1.0, n=20001):
    """Differential entropy of u = bound*tanh(a), a ~ N(mu, var)."""
    a, pa, u = squashed_source_grid(mu, var, bound, n)
    log_jac = np.log(bound * np.maximum(1.0 - np.tanh(a) ** 2, 1e-300))
    log_pa = -0.5 * ((a - mu) ** 2 / var + np.log(2 * np.pi * var))
    # H(u) = H(a) + E[log |du/da|]
    return float(np.trapezoid(pa * (-log_pa + log_jac), a))


def pin_gaussian_head(hidden, head, mean, var, floor=1e-4):
    """Force an MLP Gaussian head to a constant (mean, var) output."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(var, dtype=float))
    hidden.w.data = np.zeros_like(hidden.w.data)
    hidden.b.data = np.zeros_like(hidden.b.data)
    head.mean.w.data = np.zeros_like(head.mean.w.data)
    head.mean.b.data = mean.astype(head.mean.b.data.dtype)
    head.rawvar.w.data = np.zeros_like(head.rawvar.w.data)
    raw = np.log(np.expm1(np.maximum(var - floor, 1e-12)))
    head.rawvar.b.data = raw.astype(head.rawvar.b.data.dtype)
