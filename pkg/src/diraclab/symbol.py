"""Dirac matrices, the Bloch symbol H_m(k) and its spectral data.

All functions are vectorised: a momentum argument of shape (..., 2) yields
matrices of shape (..., 2, 2) and scalars of shape (...).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

I2 = np.eye(2, dtype=complex)
SIGMA1 = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA2 = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA3 = np.array([[1, 0], [0, -1]], dtype=complex)

GAMMA0 = SIGMA3
ALPHA1 = SIGMA2
ALPHA2 = -SIGMA1
ALPHA = np.stack([ALPHA1, ALPHA2])


class SingularPointError(ValueError):
    """Projector-based quantity requested at (or too close to) a band crossing."""


@dataclass(frozen=True)
class DiracConstants:
    m: float = 1.0
    c: float = 1.0
    hbar: float = 1.0

    def __post_init__(self):
        if self.m < 0 or self.c <= 0 or self.hbar <= 0:
            raise ValueError(f"need m >= 0, c > 0, hbar > 0; got {self}")

    @property
    def massless(self):
        return self.m == 0

    @property
    def rest_energy(self):
        return self.m * self.c ** 2


def band_sign(band) -> int:
    if band in (1, "+", "plus", "+1"):
        return 1
    if band in (-1, "-", "minus", "-1"):
        return -1
    raise ValueError(f"band must be '+' or '-', got {band!r}")


def _k(k):
    k = np.asarray(k, dtype=float)
    if k.shape[-1] != 2:
        raise ValueError("momentum must have trailing dimension 2")
    return k


def symbol(k, consts: DiracConstants):
    """H_m(k) = c (k1 alpha^1 + k2 alpha^2) + m c^2 gamma^0."""
    k = _k(k)
    c, mc2 = consts.c, consts.rest_energy
    H = np.empty(k.shape[:-1] + (2, 2), dtype=complex)
    H[..., 0, 0] = mc2
    H[..., 1, 1] = -mc2
    H[..., 0, 1] = c * (-1j * k[..., 0] - k[..., 1])
    H[..., 1, 0] = c * (1j * k[..., 0] - k[..., 1])
    return H


def energy(k, consts: DiracConstants):
    k = _k(k)
    return np.sqrt(consts.c ** 2 * np.sum(k * k, axis=-1) + consts.rest_energy ** 2)


def _check_regular(k, consts, kappa=0.0):
    if not consts.massless:
        return
    r = np.linalg.norm(k, axis=-1)
    if np.any(r <= kappa) or np.any(r == 0):
        raise SingularPointError(
            f"massless symbol evaluated at |k| = {r.min():.3e} inside cutoff {kappa}")


def group_velocity(k, consts: DiracConstants):
    """c^2 k / E (massive) or c k/|k| (massless)."""
    k = _k(k)
    _check_regular(k, consts)
    return consts.c ** 2 * k / energy(k, consts)[..., None]


def projector(k, consts: DiracConstants, band="+"):
    """Pi_pm(k) = (1 +- H/E) / 2."""
    k = _k(k)
    _check_regular(k, consts)
    s = band_sign(band)
    E = energy(k, consts)
    return 0.5 * (I2 + s * symbol(k, consts) / E[..., None, None])


def projector_gradient(k, consts: DiracConstants, band="+", kappa=0.0):
    """Analytic (d/dk1, d/dk2) of Pi_pm, stacked on a leading axis of length 2."""
    k = _k(k)
    _check_regular(k, consts, kappa)
    s = band_sign(band)
    c = consts.c
    E = energy(k, consts)[..., None, None]
    H = symbol(k, consts)
    out = np.empty((2,) + k.shape[:-1] + (2, 2), dtype=complex)
    for j in range(2):
        out[j] = 0.5 * s * (c * ALPHA[j] / E - H * c ** 2 * k[..., j, None, None] / E ** 3)
    return out


def kinetic_phase(k, consts: DiracConstants, dt):
    """exp(-i dt H(k) / hbar) = cos(theta) 1 - i sin(theta) H/E, theta = dt E / hbar."""
    k = _k(k)
    E = energy(k, consts)
    theta = dt * E / consts.hbar
    # sin(theta)/E written through sinc so that E = 0 is harmless
    s_over_e = (dt / consts.hbar) * np.sinc(theta / np.pi)
    return (np.cos(theta)[..., None, None] * I2
            - 1j * s_over_e[..., None, None] * symbol(k, consts))


def opnorm(M):
    """Spectral norm of a stack of 2x2 matrices, closed form.

    Largest eigenvalue of h = M^dagger M written without cancellation:
    (h00 + h11)/2 + hypot((h00 - h11)/2, |h01|).
    """
    M = np.asarray(M)
    p, q, r, s = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    h00 = np.abs(p) ** 2 + np.abs(r) ** 2
    h11 = np.abs(q) ** 2 + np.abs(s) ** 2
    h01 = np.conj(p) * q + np.conj(r) * s
    return np.sqrt(0.5 * (h00 + h11) + np.hypot(0.5 * (h00 - h11), np.abs(h01)))
