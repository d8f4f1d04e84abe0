"""Split-step Fourier propagation of the Dirac-Hartree equation on the torus.

Equation solved:  i hbar d_t psi = [-i hbar c alpha . grad + m c^2 gamma^0
                                    + V_Gamma(x/a) + (K * |psi|^2)(x)] psi.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .lattice import Grid2D, forward, inverse
from .potentials import HartreeKernel, PeriodicPotential, hartree_potential, periodic_on_grid
from .symbol import DiracConstants, band_sign, energy, kinetic_phase, projector, symbol

log = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    """Initial data construction produced a (numerically) zero state."""


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step, t):
        super().__init__(f"non-finite spinor values detected at step {step} (t={t:.6g})")
        self.step = step
        self.t = t


@dataclass
class SpinorField:
    grid: Grid2D
    values: np.ndarray  # shape (2, nx, ny), complex
    hbar: float
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (2,) + tuple(self.grid.n):
            raise ValueError(f"spinor shape {self.values.shape} does not match grid {self.grid.n}")

    def copy(self):
        return SpinorField(self.grid, self.values.copy(), self.hbar, self.t)

    def density(self):
        return np.abs(self.values[0]) ** 2 + np.abs(self.values[1]) ** 2

    def l2_norm(self):
        return math.sqrt(float(np.sum(self.density())) * self.grid.cell_area)

    def coefficients(self):
        return forward(self.values)

    def momenta(self):
        """Symbol momenta k = hbar xi of every Fourier mode, shape (nx, ny, 2)."""
        return self.hbar * np.moveaxis(self.grid.wavenumber_mesh(), 0, -1)


def l2_norm(psi: SpinorField):
    return psi.l2_norm()


def h1_seminorm(psi: SpinorField):
    """(||psi||^2 + ||grad psi||^2)^(1/2), gradient taken spectrally."""
    c = psi.coefficients()
    xi = psi.grid.wavenumber_mesh()
    w = 1.0 + xi[0] ** 2 + xi[1] ** 2
    return math.sqrt(psi.grid.area * float(np.sum(w * (np.abs(c[0]) ** 2 + np.abs(c[1]) ** 2))))


def apply_modewise(M, c):
    """Apply a field of 2x2 matrices M (nx, ny, 2, 2) to coefficients c (2, nx, ny)."""
    return np.stack([M[..., 0, 0] * c[0] + M[..., 0, 1] * c[1],
                     M[..., 1, 0] * c[0] + M[..., 1, 1] * c[1]])


def _torus_offset(X, x0, extent):
    L = np.asarray(extent).reshape((2,) + (1,) * (X.ndim - 1))
    x0 = np.asarray(x0, dtype=float).reshape((2,) + (1,) * (X.ndim - 1))
    return np.mod(X - x0 + L / 2, L) - L / 2


def periodic_packet(X, x0, k0, extent, w, hbar, images=3):
    """Periodisation of exp(-|y|^2/(2 w^2) + i k0.y/hbar), y = x - x0: smooth on the torus."""
    d = _torus_offset(X, x0, extent)
    out = np.ones(X.shape[1:], dtype=complex)
    for j in range(2):
        acc = np.zeros(X.shape[1:], dtype=complex)
        for n in range(-images, images + 1):
            y = d[j] + n * extent[j]
            acc += np.exp(-y ** 2 / (2 * w * w) + 1j * k0[j] * y / hbar)
        out = out * acc
    return out


def initial_wavepacket(grid: Grid2D, x0, k0, band, consts: DiracConstants, width=None,
                       kappa=None, margin_sigmas=3.0):
    """Band-purified Gaussian wavepacket of unit L^2 norm.

    Envelope exp(-|x-x0|^2 / (2 w^2)) (w defaults to sqrt(hbar)) times the carrier
    exp(i k0.(x-x0) / hbar), periodised over the torus; polarisation the band eigenvector at k0; afterwards every
    Fourier mode is projected with Pi_band(hbar xi).
    """
    hbar = consts.hbar
    w = math.sqrt(hbar) if width is None else float(width)
    k0 = np.asarray(k0, dtype=float)
    if consts.massless:
        kap = 0.0 if kappa is None else float(kappa)
        spread = hbar / (w * math.sqrt(2.0))
        need = kap + margin_sigmas * spread
        if np.linalg.norm(k0) < need:
            raise DegenerateDataError(
                f"massless packet needs |k0| >= kappa + {margin_sigmas:g} momentum spreads "
                f"= {need:.4g}, got {np.linalg.norm(k0):.4g}")
    X = grid.mesh()
    packet = periodic_packet(X, x0, k0, grid.extent, w, hbar)
    if consts.massless and np.linalg.norm(k0) == 0:
        raise DegenerateDataError("massless packet at the band crossing k0 = 0")
    P0 = projector(k0, consts, band)
    evals, evecs = np.linalg.eigh(P0)
    u = evecs[:, np.argmax(evals)]
    vals = u[:, None, None] * packet[None]
    psi = SpinorField(grid, vals, hbar)
    psi = band_purify(psi, consts, band)
    nrm = psi.l2_norm()
    ref = math.sqrt(float(np.sum(np.abs(packet) ** 2)) * grid.cell_area)
    if not nrm > 1e-8 * ref:
        raise DegenerateDataError("band purification annihilated the wavepacket")
    psi.values /= nrm
    return psi


def band_purify(psi: SpinorField, consts: DiracConstants, band):
    """Project every Fourier mode onto the requested band; crossing modes are dropped."""
    c = psi.coefficients()
    k = psi.momenta()
    r = np.linalg.norm(k, axis=-1)
    if consts.massless:
        P = np.zeros(k.shape[:-1] + (2, 2), dtype=complex)
        ok = r > 0
        P[ok] = projector(k[ok], consts, band)
    else:
        P = projector(k, consts, band)
    out = psi.copy()
    out.values = inverse(apply_modewise(P, c))
    return out


def band_mass_fraction(psi: SpinorField, consts: DiracConstants, band):
    """int |Pi_band(hbar xi) psi_hat|^2 / ||psi||^2."""
    c = psi.coefficients()
    k = psi.momenta()
    r = np.linalg.norm(k, axis=-1)
    ok = r > 0 if consts.massless else np.ones(r.shape, bool)
    P = projector(k[ok], consts, band)
    cc = np.moveaxis(c, 0, -1)[ok]
    pc = np.einsum("nij,nj->ni", P, cc)
    return float(np.sum(np.abs(pc) ** 2) / np.sum(np.abs(c) ** 2))


def default_dt(grid: Grid2D, consts: DiracConstants):
    xi = grid.wavenumber_mesh()
    kmax = consts.hbar * np.sqrt(np.max(xi[0] ** 2 + xi[1] ** 2))
    emax = math.sqrt((consts.c * kmax) ** 2 + consts.rest_energy ** 2)
    return min(1e-3, 0.1 * consts.hbar / emax)


class SplitStepper:
    """Strang splitting: half potential kick, exact kinetic step, half kick.

    hartree="symmetric" evaluates V_int for the closing half kick from the
    post-kinetic density (time-symmetric, explicit since kicks leave |psi|
    unchanged); hartree="lagged" freezes V_int at the pre-step density.
    """

    def __init__(self, grid: Grid2D, pot: PeriodicPotential, kernel: HartreeKernel,
                 consts: DiracConstants, a: float, dt: float, hartree="symmetric"):
        if hartree not in ("symmetric", "lagged"):
            raise ValueError("hartree must be 'symmetric' or 'lagged'")
        self.grid, self.pot, self.kernel, self.consts = grid, pot, kernel, consts
        self.a, self.dt, self.hartree = a, float(dt), hartree
        self.v_ext = periodic_on_grid(pot, grid, a)[0] if pot is not None else np.zeros(grid.n)
        self.has_hartree = kernel is not None and kernel.tag != "none"
        k = consts.hbar * np.moveaxis(grid.wavenumber_mesh(), 0, -1)
        self.U = kinetic_phase(k, consts, self.dt)

    def potential(self, psi_values):
        if not self.has_hartree:
            return self.v_ext
        rho = np.abs(psi_values[0]) ** 2 + np.abs(psi_values[1]) ** 2
        return self.v_ext + hartree_potential(rho, self.kernel, self.grid, with_gradient=False)

    def _kick(self, vals, V):
        return vals * np.exp(-0.5j * self.dt * V / self.consts.hbar)[None]

    def step_values(self, vals, V_start=None):
        """One step on raw values; returns (new values, potential at end of step)."""
        V0 = self.potential(vals) if V_start is None else V_start
        v = self._kick(vals, V0)
        v = inverse(apply_modewise(self.U, forward(v)))
        V1 = self.potential(v) if self.hartree == "symmetric" else V0
        v = self._kick(v, V1)
        V_end = V1 if self.hartree == "symmetric" else None
        return v, V_end

    def step(self, psi: SpinorField):
        vals, _ = self.step_values(psi.values)
        return SpinorField(psi.grid, vals, psi.hbar, psi.t + self.dt)


def strang_step(psi: SpinorField, pot: PeriodicPotential, kernel: HartreeKernel,
                consts: DiracConstants, dt, a=1.0, hartree="symmetric"):
    return SplitStepper(psi.grid, pot, kernel, consts, a, dt, hartree).step(psi)


def field_energy(psi: SpinorField, pot, kernel, consts: DiracConstants, a):
    """<psi, H_kin psi> + <psi, V_Gamma psi> + (1/2) <rho, K * rho>."""
    c = psi.coefficients()
    H = symbol(psi.momenta(), consts)
    hc = apply_modewise(H, c)
    ekin = psi.grid.area * float(np.real(np.sum(np.conj(c) * hc)))
    rho = psi.density()
    dA = psi.grid.cell_area
    eext = float(np.sum(periodic_on_grid(pot, psi.grid, a)[0] * rho) * dA) if pot is not None else 0.0
    eint = 0.0
    if kernel is not None and kernel.tag != "none":
        eint = 0.5 * float(np.sum(hartree_potential(rho, kernel, psi.grid, False) * rho) * dA)
    return ekin + eext + eint


@dataclass
class TrajectoryRecord:
    times: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    dt: float = 0.0

    def append(self, step, psi: SpinorField, diag):
        if self.times and psi.t <= self.times[-1]:
            raise ValueError("snapshot times must be strictly increasing")
        self.times.append(psi.t)
        self.steps.append(step)
        self.snapshots.append(psi)
        self.diagnostics.append(diag)

    def at_step(self, step):
        return self.snapshots[self.steps.index(step)]

    def l2_drift(self):
        n = [d["l2"] for d in self.diagnostics]
        return max(abs(v - n[0]) for v in n)


@dataclass(frozen=True)
class EvolveConfig:
    T: float
    dt: float | None = None
    snapshot_stride: int | None = None
    extra_steps: tuple = ()
    hartree: str = "symmetric"
    energy_diagnostics: bool = True


def steps_for(T, dt):
    """Number of steps and the adjusted dt so that n * dt == T exactly."""
    if T == 0:
        return 0, dt
    n = max(1, int(math.ceil(T / dt - 1e-9)))
    return n, T / n


def evolve(psi0: SpinorField, pot, kernel, consts: DiracConstants, a, cfg: EvolveConfig):
    """Strang evolution up to T recording snapshots with diagnostics."""
    dt = default_dt(psi0.grid, consts) if cfg.dt is None else cfg.dt
    nsteps, dt = steps_for(cfg.T, dt)
    stride = cfg.snapshot_stride or max(nsteps, 1)
    wanted = set(range(0, nsteps + 1, stride)) | {nsteps} | {s for s in cfg.extra_steps}
    last = max(wanted)
    stepper = SplitStepper(psi0.grid, pot, kernel, consts, a, dt, cfg.hartree)
    rec = TrajectoryRecord(dt=dt)

    def diag(p):
        d = {"t": p.t, "l2": p.l2_norm(), "h1": h1_seminorm(p)}
        if cfg.energy_diagnostics:
            d["energy"] = field_energy(p, pot, kernel, consts, a)
        return d

    vals = psi0.values.copy()
    rec.append(0, SpinorField(psi0.grid, vals.copy(), psi0.hbar, psi0.t), diag(psi0))
    V = None
    for n in range(1, last + 1):
        vals, V = stepper.step_values(vals, V)
        if not np.isfinite(vals[0, 0, 0]) or (n % 64 == 0 or n in wanted) and not np.all(np.isfinite(vals)):
            raise NonFiniteStateError(n, psi0.t + n * dt)
        if n in wanted:
            p = SpinorField(psi0.grid, vals.copy(), psi0.hbar, psi0.t + n * dt)
            rec.append(n, p, diag(p))
    return rec
