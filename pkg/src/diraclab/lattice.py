"""Periodic lattice, dual lattice and the uniform grids shared by every solver.

Discrete Fourier convention used throughout the package: a field u sampled on a
Grid2D is expanded as u(x) = sum_n c_n exp(i xi_n . x) with c = fft2(u) / (nx*ny)
and xi_n = 2*pi*n / extent for the signed integer index n (numpy fftfreq order).
"""
from __future__ import annotations

from dataclasses import dataclass, field
import itertools

import numpy as np

DET_TOL = 1e-12


class LatticeError(ValueError):
    """Rejected lattice or grid input."""


def dual_basis(basis):
    """Return (e^1, e^2) with e_j . e^l = 2 pi delta_jl."""
    B = np.asarray(basis, dtype=float).reshape(2, 2)
    det = np.linalg.det(B)
    if abs(det) < DET_TOL:
        raise LatticeError(f"degenerate lattice basis (det={det:.3e})")
    # rows of B are e1, e2; rows of the result are e^1, e^2
    D = 2.0 * np.pi * np.linalg.inv(B).T
    return D[0].copy(), D[1].copy()


@dataclass(frozen=True)
class LatticeSpec:
    basis: np.ndarray
    scale_a: float = 1.0
    dual: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        B = np.asarray(self.basis, dtype=float).reshape(2, 2)
        if not (0.0 < self.scale_a <= 1.0):
            raise LatticeError(f"scale a must lie in (0, 1], got {self.scale_a}")
        d1, d2 = dual_basis(B)
        B.setflags(write=False)
        D = np.vstack([d1, d2])
        D.setflags(write=False)
        object.__setattr__(self, "basis", B)
        object.__setattr__(self, "dual", D)

    @property
    def dual_basis(self):
        return self.dual[0], self.dual[1]

    def dual_point(self, m1, m2):
        return m1 * self.dual[0] + m2 * self.dual[1]

    def duality_error(self):
        return float(np.max(np.abs(self.basis @ self.dual.T - 2 * np.pi * np.eye(2))))


def square_lattice(scale_a=1.0, side=1.0):
    return LatticeSpec(np.array([[side, 0.0], [0.0, side]]), scale_a)


def hexagonal_lattice(scale_a=1.0, side=1.0):
    return LatticeSpec(side * np.array([[1.0, 0.0], [0.5, np.sqrt(3) / 2]]), scale_a)


def dual_lattice_points(lattice: LatticeSpec, radius: float):
    """All mu = m1 e^1 + m2 e^2 with |mu| <= radius, returned as (indices, points)."""
    if radius < 0:
        raise LatticeError("radius must be nonnegative")
    D = lattice.dual
    # |m| is bounded by radius / (smallest singular value of D)
    smin = np.linalg.svd(D, compute_uv=False).min()
    mmax = int(np.floor(radius / smin + 1e-9)) + 1
    r = np.arange(-mmax, mmax + 1)
    m = np.array(list(itertools.product(r, r)), dtype=int)
    pts = m @ D
    keep = np.linalg.norm(pts, axis=1) <= radius * (1 + 1e-12)
    return m[keep], pts[keep]


def _is_pow2(v):
    v = int(v)
    return v > 0 and (v & (v - 1)) == 0


@dataclass(frozen=True)
class Grid2D:
    extent: tuple
    n: tuple

    def __post_init__(self):
        ext = tuple(float(e) for e in np.broadcast_to(np.asarray(self.extent, dtype=float), (2,)))
        n = tuple(int(v) for v in np.broadcast_to(np.asarray(self.n), (2,)))
        if any(e <= 0 for e in ext):
            raise LatticeError(f"grid extent must be positive, got {ext}")
        if not all(_is_pow2(v) for v in n):
            raise LatticeError(f"grid sizes must be powers of two, got {n}")
        object.__setattr__(self, "extent", ext)
        object.__setattr__(self, "n", n)

    @property
    def spacing(self):
        return (self.extent[0] / self.n[0], self.extent[1] / self.n[1])

    @property
    def cell_area(self):
        dx, dy = self.spacing
        return dx * dy

    @property
    def area(self):
        return self.extent[0] * self.extent[1]

    @property
    def shape(self):
        return self.n

    def axes(self):
        dx, dy = self.spacing
        return np.arange(self.n[0]) * dx, np.arange(self.n[1]) * dy

    def mesh(self):
        """Node coordinates, shape (2, nx, ny)."""
        return np.array(np.meshgrid(*self.axes(), indexing="ij"))

    def mode_indices(self):
        """Signed integer Fourier indices per axis (fftfreq order)."""
        return (np.fft.fftfreq(self.n[0], 1.0 / self.n[0]).astype(int),
                np.fft.fftfreq(self.n[1], 1.0 / self.n[1]).astype(int))

    def wavenumbers(self):
        """Angular wavenumbers xi per axis: 2 pi n / extent."""
        i, j = self.mode_indices()
        return 2 * np.pi * i / self.extent[0], 2 * np.pi * j / self.extent[1]

    def wavenumber_mesh(self):
        return np.array(np.meshgrid(*self.wavenumbers(), indexing="ij"))

    def conjugate(self):
        """Momentum grid dual to this one, spacing 2 pi / extent, centred range."""
        return Grid2D(tuple(2 * np.pi * v / e for v, e in zip(self.n, self.extent)), self.n)

    def centred_axes(self):
        """Axes in [-extent/2, extent/2) for use as a momentum grid."""
        d = self.spacing
        return tuple((np.arange(n) - n // 2) * h for n, h in zip(self.n, d))

    def wrap(self, idx):
        return np.mod(idx, np.asarray(self.n).reshape((2,) + (1,) * (np.ndim(idx) - 1)))

    def subsample(self, stride):
        stride = int(stride)
        if self.n[0] % stride or self.n[1] % stride:
            raise LatticeError(f"stride {stride} does not divide grid {self.n}")
        return Grid2D(self.extent, (self.n[0] // stride, self.n[1] // stride))


def make_grid(extent, n) -> Grid2D:
    return Grid2D(tuple(np.broadcast_to(extent, (2,))), tuple(np.broadcast_to(n, (2,))))


def forward(u):
    """Fourier coefficients c_n of a grid field (last two axes)."""
    return np.fft.fft2(u, norm="forward")


def inverse(c):
    return np.fft.ifft2(c, norm="forward")
