"""Weighted-particle solver for the limiting relativistic Vlasov equations.

Characteristics of band +/- :  dx/dt = +/- v(k),  dk/dt = -(grad V_Gamma(x/a) + grad K*rho)(x).
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
import warnings

import numpy as np

from .lattice import Grid2D, forward
from .potentials import eval_periodic, hartree_potential
from .propagator import SpinorField
from .symbol import DiracConstants, band_sign, energy, group_velocity
from .wigner import BandDensity, projector_field

log = logging.getLogger(__name__)


class EmptyEnsembleError(ValueError):
    pass


@dataclass
class ParticleEnsemble:
    x: np.ndarray        # (N, 2), wrapped to the torus
    k: np.ndarray        # (N, 2)
    w: np.ndarray        # (N,), never modified after creation
    band: np.ndarray     # (N,) int8, +1 / -1
    extent: tuple
    t: float = 0.0
    seed: int = 0
    frozen: np.ndarray | None = None   # massless particles caught inside the cutoff
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.x.shape[0]
        if self.frozen is None:
            self.frozen = np.zeros(n, bool)

    @property
    def size(self):
        return self.x.shape[0]

    def total_weight(self, band=None):
        if band is None:
            return float(np.sum(self.w))
        return float(np.sum(self.w[self.band == band_sign(band)]))

    def leakage(self):
        tot = self.total_weight()
        return float(np.sum(self.w[self.frozen])) / tot if tot else 0.0

    def copy(self):
        return ParticleEnsemble(self.x.copy(), self.k.copy(), self.w.copy(), self.band.copy(),
                                self.extent, self.t, self.seed, self.frozen.copy(), dict(self.meta))

    def pair(self, test, band):
        """sum_p w_p eta(x_p) phi(k_p) over particles of the given band."""
        sel = self.band == band_sign(band)
        return float(np.sum(self.w[sel] * test.eta(self.x[sel]) * test.phi(self.k[sel])))


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------

def _systematic_counts(p, n, rng):
    """Low-variance (systematic) allocation of n draws over probabilities p."""
    p = np.asarray(p, dtype=float)
    tot = p.sum()
    if n == 0 or tot <= 0:
        return np.zeros(p.shape, dtype=np.int64)
    cum = np.cumsum(p) / tot
    cum[-1] = 1.0
    u = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(cum, u, side="right")
    return np.bincount(np.minimum(idx, p.size - 1), minlength=p.size)


def sample_from_band_density(f: BandDensity, N, seed, xspacing, jitter=True, extent=None):
    """Draw N equal-weight particles from max(f, 0) on its phase-space cells.

    Returns (ensemble, report) where report holds the clipped negative mass.
    """
    rng = np.random.default_rng(seed)
    vals = np.asarray(f.values, dtype=float)
    pos = np.clip(vals, 0, None)
    dV = f.dx_weight * f.dk_weight
    mass_pos = float(pos.sum()) * dV
    mass_neg = float(-np.clip(vals, None, 0).sum()) * dV
    if mass_pos <= 0:
        raise EmptyEnsembleError("band density has no positive mass")
    counts = _systematic_counts(pos.ravel(), int(N), rng)
    cells = np.repeat(np.arange(pos.size), counts)
    ip, ik, iq = np.unravel_index(cells, pos.shape)
    x = f.x[ip].astype(float)
    k = np.stack([f.kx[ik], f.ky[iq]], axis=-1).astype(float)
    if jitter:
        x += (rng.random(x.shape) - 0.5) * np.asarray(xspacing)
        k += (rng.random(k.shape) - 0.5) * np.array([_sp(f.kx), _sp(f.ky)])
    ext = extent if extent is not None else tuple(np.asarray(xspacing) * np.asarray(f.shape or (1, 1)))
    x = np.mod(x, np.asarray(ext))
    n = x.shape[0]
    ens = ParticleEnsemble(x, k, np.full(n, mass_pos / n), np.full(n, f.band, np.int8), tuple(ext),
                           seed=seed)
    rep = {"positive_mass": mass_pos, "clipped_mass": mass_neg,
           "clipped_fraction": mass_neg / (mass_pos - mass_neg) if mass_pos > mass_neg else float("inf")}
    ens.meta.update(rep)
    return ens, rep


def _sp(ax):
    return float(np.min(np.abs(np.diff(np.sort(ax))))) if len(ax) > 1 else 1.0


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


def _edge_taper(x, L, frac):
    """C-infinity window: 0 at both ends of [0, L], 1 outside the outer `frac * L` layers."""
    if frac <= 0:
        return np.ones_like(x)
    w = frac * L
    return _smoothstep(x / w) * _smoothstep((L - x) / w)


class PaddedBandDensity:
    """Ghost-free band density of a localised spinor, evaluated one momentum at a time.

    The spinor is embedded in a box twice as large (zero outside the physical
    torus) so the discrete Wigner transform has no wrap-around images inside the
    physical box; momentum nodes are k = pi hbar m / L.  Valid for data that are
    negligible near the box boundary (initial wavepackets).  A smooth taper over
    the outer `taper` fraction of each side removes the jump that the exponential
    tails of band-projected data would otherwise leave at the padding seam; the
    discarded mass is reported as `taper_defect`.
    """

    def __init__(self, psi: SpinorField, consts: DiracConstants, tol=1e-5, kappa=0.0, taper=0.1):
        grid = psi.grid
        N1, N2 = grid.n
        self.N = (N1, N2)
        self.grid = grid
        self.hbar = psi.hbar
        self.consts = consts
        self.kappa = kappa
        edge = max(np.abs(psi.values[:, 0, :]).max(), np.abs(psi.values[:, :, 0]).max(),
                   np.abs(psi.values[:, -1, :]).max(), np.abs(psi.values[:, :, -1]).max())
        self.edge_amplitude = float(edge / np.abs(psi.values).max())
        ax1, ax2 = grid.axes()
        L1, L2 = grid.extent
        chi = np.outer(_edge_taper(ax1, L1, taper), _edge_taper(ax2, L2, taper))
        tapered = psi.values * chi
        m0 = float(np.sum(np.abs(psi.values) ** 2))
        self.taper_defect = 1.0 - float(np.sum(np.abs(tapered) ** 2)) / m0 if m0 > 0 else 0.0
        if self.taper_defect > 1e-4:
            warnings.warn(f"spinor is not localised in the box (taper removes {self.taper_defect:.1e} of the mass)")
        pad = np.zeros((2, 2 * N1, 2 * N2), dtype=complex)
        pad[:, :N1, :N2] = tapered
        c = forward(pad)
        amp = np.sqrt(np.abs(c[0]) ** 2 + np.abs(c[1]) ** 2)
        n1 = np.fft.fftfreq(2 * N1, 1.0 / (2 * N1)).astype(int)
        n2 = np.fft.fftfreq(2 * N2, 1.0 / (2 * N2)).astype(int)
        sig = np.argwhere(amp > tol * amp.max())
        self.lo = np.array([n1[sig[:, 0]].min(), n2[sig[:, 1]].min()])
        self.hi = np.array([n1[sig[:, 0]].max(), n2[sig[:, 1]].max()])
        r1 = np.arange(self.lo[0], self.hi[0] + 1)
        r2 = np.arange(self.lo[1], self.hi[1] + 1)
        self.cb = c[:, r1[:, None] % (2 * N1), r2[None, :] % (2 * N2)]
        self.cr = self.cb[:, ::-1, ::-1]
        self.L = np.asarray(grid.extent)
        self.dk = math.pi * psi.hbar / self.L
        self.dkp2 = float(np.prod(self.dk / 2))
        # momentum window: k = pi hbar m / L with 2m in [2 lo, 2 hi]
        self.m1 = np.arange(self.lo[0], self.hi[0] + 1)
        self.m2 = np.arange(self.lo[1], self.hi[1] + 1)
        self.kx = self.dk[0] * self.m1
        self.ky = self.dk[1] * self.m2
        if self.hi[0] - self.lo[0] >= N1 or self.hi[1] - self.lo[1] >= N2:
            raise ValueError("spinor spectrum wider than the grid; refine the grid")
        X = grid.mesh()
        self._x = X
        self._ax = grid.axes()
        self._r1 = np.mod(r1, N1)
        self._r2 = np.mod(r2, N2)

    @property
    def x(self):
        return np.moveaxis(self._x, 0, -1).reshape(-1, 2)

    def slice(self, i1, i2, bands=("+", "-")):
        """Band densities at momentum (kx[i1], ky[i2]) over the fine grid; dict band -> (N1, N2)."""
        m = (2 * self.m1[i1], 2 * self.m2[i2])
        B1, B2 = self.cb.shape[1:]
        hilo = self.hi + self.lo
        o = (hilo[0] - m[0], hilo[1] - m[1])
        a1 = slice(max(0, -o[0]), min(B1, B1 - o[0]))
        a2 = slice(max(0, -o[1]), min(B2, B2 - o[1]))
        b1 = slice(a1.start + o[0], a1.stop + o[0])
        b2 = slice(a2.start + o[1], a2.stop + o[1])
        k = np.array([self.kx[i1], self.ky[i2]])
        out = {}
        cn = self.cb[:, a1, a2]
        cm = self.cr[:, b1, b2]
        N1, N2 = self.N
        r1 = self._r1[a1]
        r2 = self._r2[a2]
        phase = np.outer(np.exp(-1j * m[0] * math.pi / self.L[0] * self._ax[0]),
                         np.exp(-1j * m[1] * math.pi / self.L[1] * self._ax[1]))
        for band in bands:
            P, mask = projector_field(k[None], self.consts, band, self.kappa)
            if mask[0]:
                out[band] = None
                continue
            h = np.einsum("aij,ab,bij->ij", np.conj(cm), P[0], cn)
            H = np.zeros((N1, N2), dtype=complex)
            H[r1[:, None], r2[None, :]] = h  # window narrower than the grid: no collisions
            val = np.fft.ifft2(H, norm="forward") * phase / self.dkp2
            out[band] = val.real
        return out

    def to_band_density(self, band, xstride=1):
        """Materialise f_band on the (subsampled) grid and the full momentum window."""
        nk = (len(self.kx), len(self.ky))
        sub = self._x[:, ::xstride, ::xstride]
        vals = np.zeros((sub.shape[1] * sub.shape[2],) + nk)
        mask = np.zeros(nk, bool)
        for i1 in range(nk[0]):
            for i2 in range(nk[1]):
                f = self.slice(i1, i2, (band,))[band]
                if f is None:
                    mask[i1, i2] = True
                    continue
                vals[:, i1, i2] = f[::xstride, ::xstride].ravel()
        dxw = self.grid.area / (sub.shape[1] * sub.shape[2])
        return BandDensity(np.moveaxis(sub, 0, -1).reshape(-1, 2), self.kx, self.ky, vals,
                           band_sign(band), dxw, mask, sub.shape[1:])


def sample_from_spinor(psi: SpinorField, consts: DiracConstants, N, seed, bands=("+", "-"),
                       kappa=0.0, jitter=True, tol=1e-5):
    """Particles for f_band(0) = Tr[Pi_band W_0] of a localised spinor, both bands.

    Two streaming passes over the momentum window (masses, then positions)
    keep memory at one position grid per band.  Negative values are clipped and
    the clipped mass reported.  Particles are spread over bands in proportion to
    their positive mass.
    """
    rng = np.random.default_rng(seed)
    pb = PaddedBandDensity(psi, consts, tol, kappa)
    nk = (len(pb.kx), len(pb.ky))
    dxa = psi.grid.cell_area
    dka = float(np.prod(pb.dk))
    pos = {b: np.zeros(nk) for b in bands}
    neg = {b: 0.0 for b in bands}
    for i1 in range(nk[0]):
        for i2 in range(nk[1]):
            sl = pb.slice(i1, i2, bands)
            for b in bands:
                if sl[b] is None:
                    continue
                pos[b][i1, i2] = np.clip(sl[b], 0, None).sum() * dxa * dka
                neg[b] += -np.clip(sl[b], None, 0).sum() * dxa * dka
    tot = {b: float(pos[b].sum()) for b in bands}
    grand = sum(tot.values())
    if grand <= 0:
        raise EmptyEnsembleError("spinor has no positive band mass")
    nb = _systematic_counts(np.array([tot[b] for b in bands]), int(N), rng)
    counts = {b: _systematic_counts(pos[b].ravel(), int(n), rng).reshape(nk) for b, n in zip(bands, nb)}
    xs, ks, bs = [], [], []
    h = np.asarray(psi.grid.spacing)
    for i1 in range(nk[0]):
        for i2 in range(nk[1]):
            need = {b: int(counts[b][i1, i2]) for b in bands}
            if not any(need.values()):
                continue
            sl = pb.slice(i1, i2, tuple(b for b in bands if need[b]))
            for b in bands:
                if not need[b]:
                    continue
                p = np.clip(sl[b], 0, None).ravel()
                cc = _systematic_counts(p, need[b], rng)
                cells = np.repeat(np.arange(p.size), cc)
                ix, iy = np.unravel_index(cells, sl[b].shape)
                xs.append(np.stack([ix * h[0], iy * h[1]], axis=-1))
                ks.append(np.tile([pb.kx[i1], pb.ky[i2]], (cells.size, 1)))
                bs.append(np.full(cells.size, band_sign(b), np.int8))
    x = np.concatenate(xs)
    k = np.concatenate(ks)
    band = np.concatenate(bs)
    if jitter:
        x += (rng.random(x.shape) - 0.5) * h
        k += (rng.random(k.shape) - 0.5) * pb.dk
    x = np.mod(x, np.asarray(psi.grid.extent))
    n = x.shape[0]
    ens = ParticleEnsemble(x, k, np.full(n, grand / n), band, psi.grid.extent, psi.t, seed)
    rep = {"positive_mass": tot, "clipped_mass": neg,
           "clipped_fraction": {b: neg[b] / grand for b in bands},
           "edge_amplitude": pb.edge_amplitude, "taper_defect": pb.taper_defect, "k_window": nk}
    ens.meta.update(rep)
    return ens, rep


# ----------------------------------------------------------------------------
# grid transfer
# ----------------------------------------------------------------------------

def _cic_weights(x, grid: Grid2D):
    h = np.asarray(grid.spacing)
    u = x / h
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    n = np.asarray(grid.n)
    i0 = np.mod(i0, n)
    i1 = np.mod(i0 + 1, n)
    return i0, i1, f


def deposit_density(ens: ParticleEnsemble, grid: Grid2D):
    """Cloud-in-cell density of all particles (both bands); sum(rho) * dA == sum(w)."""
    i0, i1, f = _cic_weights(ens.x, grid)
    n1, n2 = grid.n
    w = ens.w
    rho = np.zeros(n1 * n2)
    # fixed order of the four corner passes keeps the reduction deterministic
    for ia, fa in ((i0[:, 0], 1 - f[:, 0]), (i1[:, 0], f[:, 0])):
        for ib, fb in ((i0[:, 1], 1 - f[:, 1]), (i1[:, 1], f[:, 1])):
            rho += np.bincount(ia * n2 + ib, weights=w * fa * fb, minlength=n1 * n2)
    return rho.reshape(n1, n2) / grid.cell_area


def interpolate(field_, x, grid: Grid2D):
    """Bilinear periodic interpolation of fields (..., n1, n2) at points x (N, 2)."""
    i0, i1, f = _cic_weights(x, grid)
    fx, fy = f[:, 0], f[:, 1]
    return (field_[..., i0[:, 0], i0[:, 1]] * (1 - fx) * (1 - fy)
            + field_[..., i1[:, 0], i0[:, 1]] * fx * (1 - fy)
            + field_[..., i0[:, 0], i1[:, 1]] * (1 - fx) * fy
            + field_[..., i1[:, 0], i1[:, 1]] * fx * fy)


def phase_histogram(ens: ParticleEnsemble, xgrid: Grid2D, kx, ky, band):
    """CIC-binned band density on a position grid and uniform momentum axes."""
    sel = ens.band == band_sign(band)
    n1, n2 = xgrid.n
    nk1, nk2 = len(kx), len(ky)
    vals = np.zeros((n1 * n2, nk1, nk2))
    dk1, dk2 = _sp(kx), _sp(ky)
    if np.any(sel):
        x, k, w = ens.x[sel], ens.k[sel], ens.w[sel]
        i0, i1, f = _cic_weights(x, xgrid)
        u = np.stack([(k[:, 0] - kx[0]) / dk1, (k[:, 1] - ky[0]) / dk2], axis=-1)
        j0 = np.floor(u).astype(np.int64)
        g = u - j0
        flat = np.zeros(vals.size)
        for ia, fa in ((i0[:, 0], 1 - f[:, 0]), (i1[:, 0], f[:, 0])):
            for ib, fb in ((i0[:, 1], 1 - f[:, 1]), (i1[:, 1], f[:, 1])):
                for ja, ga in ((j0[:, 0], 1 - g[:, 0]), (j0[:, 0] + 1, g[:, 0])):
                    for jb, gb in ((j0[:, 1], 1 - g[:, 1]), (j0[:, 1] + 1, g[:, 1])):
                        ok = (ja >= 0) & (ja < nk1) & (jb >= 0) & (jb < nk2)
                        lin = ((ia * n2 + ib) * nk1 + ja) * nk2 + jb
                        flat += np.bincount(lin[ok], weights=(w * fa * fb * ga * gb)[ok],
                                            minlength=vals.size)
        vals = flat.reshape(vals.shape) / (xgrid.cell_area * dk1 * dk2)
    X = np.moveaxis(xgrid.mesh(), 0, -1).reshape(-1, 2)
    return BandDensity(X, np.asarray(kx), np.asarray(ky), vals, band_sign(band), xgrid.cell_area,
                       None, xgrid.n)


# ----------------------------------------------------------------------------
# dynamics
# ----------------------------------------------------------------------------

def _velocity(k, band, consts):
    if consts.massless:
        r = np.linalg.norm(k, axis=-1)
        v = np.zeros(k.shape)
        ok = r > 0
        v[ok] = consts.c * k[ok] / r[ok, None]
    else:
        v = consts.c ** 2 * k / energy(k, consts)[:, None]
    return band[:, None] * v


def characteristics_rhs(x, k, band, pot, a, consts: DiracConstants, vint_grad=None, grid=None,
                        kappa=0.0):
    """(dx/dt, dk/dt) for particles; frozen massless particles inside the cutoff get zeros."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = np.atleast_2d(np.asarray(k, dtype=float))
    band = np.broadcast_to(np.atleast_1d(np.asarray([band_sign(b) for b in np.atleast_1d(band)]
                                                    if np.asarray(band).dtype.kind in "UO"
                                                    else band)), (x.shape[0],)).astype(float)
    dx = _velocity(k, band, consts)
    F = np.zeros(x.shape)
    if pot is not None:
        F += eval_periodic(pot, x, a)[1]
    if vint_grad is not None:
        F += interpolate(vint_grad, x, grid).T
    dk = -F
    if consts.massless:
        inside = np.linalg.norm(k, axis=-1) < kappa
        dx[inside] = 0
        dk[inside] = 0
    return dx, dk


def vlasov_step(ens: ParticleEnsemble, pot, kernel, consts: DiracConstants, dt, a, grid: Grid2D,
                kappa=0.0):
    """One RK4 step with the mean field frozen at the step start; weights untouched."""
    out = ens.copy()
    vg = None
    if kernel is not None and kernel.tag != "none":
        rho = deposit_density(ens, grid)
        vg = hartree_potential(rho, kernel, grid)[1]
    if consts.massless:
        out.frozen |= np.linalg.norm(ens.k, axis=-1) < kappa
    act = ~out.frozen
    x, k, b = ens.x[act], ens.k[act], ens.band[act].astype(float)

    def rhs(xx, kk):
        return characteristics_rhs(xx, kk, b, pot, a, consts, vg, grid, 0.0)

    k1x, k1k = rhs(x, k)
    k2x, k2k = rhs(x + 0.5 * dt * k1x, k + 0.5 * dt * k1k)
    k3x, k3k = rhs(x + 0.5 * dt * k2x, k + 0.5 * dt * k2k)
    k4x, k4k = rhs(x + dt * k3x, k + dt * k3k)
    out.x[act] = np.mod(x + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x), np.asarray(ens.extent))
    out.k[act] = k + dt / 6 * (k1k + 2 * k2k + 2 * k3k + k4k)
    if consts.massless:
        newly = act & (np.linalg.norm(out.k, axis=-1) < kappa)
        out.frozen |= newly
    out.t = ens.t + dt
    return out


def vlasov_evolve(ens: ParticleEnsemble, pot, kernel, consts, T, dt, a, grid, kappa=0.0,
                  record_times=()):
    n = max(1, int(math.ceil(T / dt - 1e-9))) if T > 0 else 0
    dt = T / n if n else dt
    rec_steps = {int(round(t / dt)): t for t in record_times} if n else {}
    snaps = {}
    cur = ens
    if 0 in rec_steps:
        snaps[rec_steps[0]] = cur.copy()
    for i in range(1, n + 1):
        cur = vlasov_step(cur, pot, kernel, consts, dt, a, grid, kappa)
        if i in rec_steps:
            snaps[rec_steps[i]] = cur.copy()
    if consts.massless and cur.leakage() > 0.01:
        warnings.warn(f"cutoff leakage {cur.leakage():.2%} exceeds 1%: assumption of the massless limit violated")
    return cur, snaps


def particle_energy(x, k, pot, a, consts):
    """E_m(k) + V_Gamma(x/a) per particle."""
    V = eval_periodic(pot, np.atleast_2d(x), a)[0] if pot is not None else 0.0
    return energy(np.atleast_2d(k), consts) + V
