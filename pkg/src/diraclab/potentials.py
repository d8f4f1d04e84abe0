"""Periodic external potential V_Gamma(x/a) and Hartree mean-field kernels."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lattice import Grid2D, LatticeSpec


@dataclass(frozen=True)
class PeriodicPotential:
    """V_Gamma(y) = sum_mu Vhat(mu) exp(i mu . y) over dual-lattice points mu.

    ``coefficients`` maps integer pairs (m1, m2) to complex amplitudes, where
    mu = m1 e^1 + m2 e^2.
    """
    lattice: LatticeSpec
    coefficients: dict = field(default_factory=dict)

    def __post_init__(self):
        coeffs = {(int(a), int(b)): complex(v) for (a, b), v in dict(self.coefficients).items()}
        for (a, b), v in coeffs.items():
            w = coeffs.get((-a, -b))
            if w is None or abs(w - np.conj(v)) > 1e-14 * max(1.0, abs(v)):
                raise ValueError(f"coefficient at {(a, b)} lacks its conjugate partner; "
                                 "the potential must be real")
        object.__setattr__(self, "coefficients", coeffs)

    @classmethod
    def from_records(cls, lattice, records):
        """Build from (m1, m2, re, im) records; missing conjugate partners are added."""
        coeffs = {}
        for m1, m2, re, im in records:
            coeffs[(int(m1), int(m2))] = complex(re, im)
        for (a, b), v in list(coeffs.items()):
            coeffs.setdefault((-a, -b), np.conj(v))
        return cls(lattice, coeffs)

    def modes(self, rel_tol=1e-14):
        """Arrays (mu, Vhat) of retained coefficients, |Vhat| > rel_tol * max."""
        if not self.coefficients:
            return np.zeros((0, 2)), np.zeros(0, dtype=complex)
        idx = np.array(list(self.coefficients.keys()), dtype=float)
        val = np.array(list(self.coefficients.values()), dtype=complex)
        keep = np.abs(val) > rel_tol * np.abs(val).max()
        return idx[keep] @ self.lattice.dual, val[keep]

    @property
    def is_zero(self):
        return all(v == 0 for v in self.coefficients.values())


def eval_periodic(pot: PeriodicPotential, x, a):
    """Value and gradient of V_Gamma(x/a) at points x of shape (..., 2).

    Returns (V, gradV) with shapes (...) and (..., 2).
    """
    x = np.asarray(x, dtype=float)
    mu, vhat = pot.modes()
    V = np.zeros(x.shape[:-1])
    G = np.zeros(x.shape)
    for m, v in zip(mu, vhat):
        ph = v * np.exp(1j * (x @ m) / a)
        V += ph.real
        G += (1j * ph)[..., None].real * (m / a)
    return V, G


def periodic_on_grid(pot: PeriodicPotential, grid: Grid2D, a):
    """V_Gamma(x/a) and its gradient sampled on the grid nodes, shapes (nx,ny), (2,nx,ny)."""
    X = np.moveaxis(grid.mesh(), 0, -1)
    V, G = eval_periodic(pot, X, a)
    return V, np.moveaxis(G, -1, 0)


def wiener_norm(pot: PeriodicPotential, weight_power=2):
    """sum_mu |mu|^p |Vhat(mu)|."""
    if weight_power not in (0, 1, 2):
        raise ValueError("weight_power must be 0, 1 or 2")
    mu, vhat = pot.modes(rel_tol=0.0)
    return float(np.sum(np.linalg.norm(mu, axis=-1) ** weight_power * np.abs(vhat)))


@dataclass(frozen=True)
class HartreeKernel:
    fourier_symbol: Callable
    tag: str = "custom"
    sigma: float | None = None

    def __call__(self, xi):
        """Symbol at wavevectors xi of shape (2, ...)."""
        return self.fourier_symbol(np.asarray(xi, dtype=float))


def gaussian_kernel(width=1.0):
    w2 = float(width) ** 2

    def sym(xi):
        return np.exp(-0.5 * w2 * (xi[0] ** 2 + xi[1] ** 2))
    return HartreeKernel(sym, f"gaussian(width={width})", float(width))


def delta_kernel():
    return HartreeKernel(lambda xi: np.ones(np.shape(xi)[1:]), "delta")


def zero_kernel():
    return HartreeKernel(lambda xi: np.zeros(np.shape(xi)[1:]), "none")


def regularized_coulomb(sigma):
    """Khat(xi) = exp(-sigma^2 |xi|^2 / 2) / |xi|, zero mode removed."""
    sigma = float(sigma)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    def sym(xi):
        r = np.sqrt(xi[0] ** 2 + xi[1] ** 2)
        out = np.zeros_like(r)
        nz = r > 0
        out[nz] = np.exp(-0.5 * sigma ** 2 * r[nz] ** 2) / r[nz]
        return out
    return HartreeKernel(sym, f"coulomb(sigma={sigma:.6g})", sigma)


def kernel_from_name(name, sigma=1.0):
    if name == "gaussian":
        return gaussian_kernel(sigma)
    if name == "coulomb":
        return regularized_coulomb(sigma)
    if name == "none":
        return zero_kernel()
    raise ValueError(f"unknown kernel {name!r}")


def _rfft_wavenumbers(grid: Grid2D):
    kx = 2 * np.pi * np.fft.fftfreq(grid.n[0], grid.spacing[0])
    ky = 2 * np.pi * np.fft.rfftfreq(grid.n[1], grid.spacing[1])
    return np.array(np.meshgrid(kx, ky, indexing="ij"))


def hartree_potential(rho, kernel: HartreeKernel, grid: Grid2D, with_gradient=True):
    """V_int = K * rho on the torus (spectral) and optionally its gradient (2, nx, ny)."""
    rho = np.asarray(rho, dtype=float)
    xi = _rfft_wavenumbers(grid)
    vh = np.fft.rfft2(rho) * kernel(xi)
    V = np.fft.irfft2(vh, s=rho.shape)
    if not with_gradient:
        return V
    nx, ny = grid.n
    G = np.empty((2,) + rho.shape)
    for j in range(2):
        d = 1j * xi[j] * vh
        # odd derivative of the Nyquist mode is not representable as a real field
        if j == 0:
            d[nx // 2, :] = 0
        else:
            d[:, -1] = 0 if ny % 2 == 0 else d[:, -1]
        G[j] = np.fft.irfft2(d, s=rho.shape)
    return V, G
