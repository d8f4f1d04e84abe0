"""Matrix-valued Wigner transform on the torus, band densities and weak pairings.

Discretisation.  With psi sampled on an N1 x N2 grid of spacing dx over a box of
side L, the half-shift z = hbar y / 2 is taken on the grid itself, z_s = s dx, so
no interpolation is ever needed:

    W(x, k_m) = C sum_s exp(-2 pi i m.s / N) psi(x + z_s) psi(x - z_s)^dagger,

with momentum nodes k_m = pi hbar m / L (spacing pi hbar / L per axis) and
C = dx1 dx2 / (pi hbar)^2.  For a band-limited psi (|n| < N/4 per axis) this is
the mode sum W(x, k_m) = (1/dk^2) sum_{n + n' = m} c_n c_n'^dagger e^{i(xi_n - xi_n').x},
which is what the mode-space routines below evaluate directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
import warnings

import numpy as np

from .lattice import Grid2D, forward, inverse
from .potentials import PeriodicPotential, eval_periodic, hartree_potential, periodic_on_grid
from .propagator import SpinorField
from .symbol import ALPHA, DiracConstants, band_sign, group_velocity, projector, symbol

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# containers
# ----------------------------------------------------------------------------

@dataclass
class WignerField:
    """W at a set of fine-grid position nodes and the full torus momentum grid.

    values has shape (P, N1, N2, 2, 2); momentum axes are in fftfreq order.
    ``xidx`` holds the fine-grid indices (P, 2) of the position nodes and
    ``shape`` the coarse layout when the nodes form a subsampled grid.
    """
    grid: Grid2D
    hbar: float
    xidx: np.ndarray
    values: np.ndarray
    shape: tuple | None = None
    t: float = 0.0

    @property
    def dk(self):
        return tuple(math.pi * self.hbar / e for e in self.grid.extent)

    @property
    def k_axes(self):
        return tuple(d * np.fft.fftfreq(n, 1.0 / n) for d, n in zip(self.dk, self.grid.n))

    def k_mesh(self):
        """Momentum nodes, shape (N1, N2, 2)."""
        return np.stack(np.meshgrid(*self.k_axes, indexing="ij"), axis=-1)

    @property
    def x(self):
        return self.xidx * np.asarray(self.grid.spacing)

    @property
    def dx_weight(self):
        """Quadrature weight of one stored position node."""
        P = self.xidx.shape[0]
        return self.grid.area / P

    @property
    def dk_weight(self):
        d1, d2 = self.dk
        return d1 * d2

    def l2_norm(self):
        return math.sqrt(float(np.sum(np.abs(self.values) ** 2)) * self.dx_weight * self.dk_weight)


@dataclass
class BandDensity:
    """Real band-projected phase-space density f(x_p, k) on explicit momentum axes."""
    x: np.ndarray          # (P, 2) positions
    kx: np.ndarray
    ky: np.ndarray
    values: np.ndarray     # (P, nkx, nky)
    band: int
    dx_weight: float
    mask: np.ndarray | None = None   # True where the projector is undefined (massless cutoff)
    shape: tuple | None = None

    @property
    def dk_weight(self):
        return _spacing(self.kx) * _spacing(self.ky)

    def total_mass(self):
        return float(np.sum(self.values)) * self.dx_weight * self.dk_weight


def _spacing(ax):
    if len(ax) < 2:
        return 1.0
    return float(np.min(np.abs(np.diff(np.sort(ax)))))


# ----------------------------------------------------------------------------
# transform
# ----------------------------------------------------------------------------

def coarse_indices(grid: Grid2D, xstride, offset=0):
    """Fine-grid indices of every xstride-th node, shifted by offset; also the coarse shape."""
    xstride = int(xstride)
    g = grid.subsample(xstride)
    i = np.arange(g.n[0]) * xstride + offset
    j = np.arange(g.n[1]) * xstride + offset
    I, J = np.meshgrid(i, j, indexing="ij")
    return np.stack([I.ravel(), J.ravel()], axis=-1), g.n


def _shift_products(a, b, idx):
    """rho_ab(x, z_s) = a(x + z_s) b(x - z_s)^dagger for nodes idx (P, 2), shape (P, 2, 2, N1, N2)."""
    N1, N2 = a.shape[-2:]
    s1 = np.arange(N1)
    s2 = np.arange(N2)
    ip = (idx[:, 0, None] + s1[None]) % N1
    jp = (idx[:, 1, None] + s2[None]) % N2
    im = (idx[:, 0, None] - s1[None]) % N1
    jm = (idx[:, 1, None] - s2[None]) % N2
    A = a[:, ip[:, :, None], jp[:, None, :]]   # (2, P, N1, N2)
    B = b[:, im[:, :, None], jm[:, None, :]]
    return np.einsum("apij,bpij->pabij", A, np.conj(B))


def _norm_const(grid: Grid2D, hbar):
    dx1, dx2 = grid.spacing
    return dx1 * dx2 / (math.pi * hbar) ** 2


def _to_w(rho, grid, hbar):
    """FFT over the shift index, moving the 2x2 axes last: (P, N1, N2, 2, 2)."""
    W = np.fft.fft2(rho, axes=(-2, -1)) * _norm_const(grid, hbar)
    return np.moveaxis(W, (1, 2), (3, 4))


def _from_w(W, grid, hbar):
    rho = np.fft.ifft2(np.moveaxis(W, (3, 4), (1, 2)), axes=(-2, -1))
    return rho / _norm_const(grid, hbar)


def cross_wigner(a, b, grid: Grid2D, hbar, idx):
    return _to_w(_shift_products(a, b, idx), grid, hbar)


def _auto_wigner(a, grid: Grid2D, hbar, idx, out):
    """Wigner matrix of a a^dagger at nodes idx, written into out (P, N1, N2, 2, 2).

    Hermitian symmetry halves the FFTs: the diagonal shift products satisfy
    rho(x, -z) = conj(rho(x, z)), so their transforms are real and
    W_00 + i W_11 comes out of a single FFT, while W_10 = conj(W_01).
    """
    N1, N2 = a.shape[-2:]
    # a(x + z) and conj a(x - z) as windows into periodically doubled copies;
    # the normalization and the factor i of the packed diagonal are folded in here
    a = a * math.sqrt(_norm_const(grid, hbar))
    af = a.copy()
    af[1] *= 1j
    win = (N1, N2)
    fwd = np.lib.stride_tricks.sliding_window_view(np.tile(af, (1, 2, 2)), win, axis=(1, 2))
    flip = np.roll(np.conj(a[:, ::-1, ::-1]), (1, 1), axis=(1, 2))
    bwd = np.lib.stride_tricks.sliding_window_view(np.tile(flip, (1, 2, 2)), win, axis=(1, 2))
    A = fwd[:, idx[:, 0], idx[:, 1]]
    B = bwd[:, (-idx[:, 0]) % N1, (-idx[:, 1]) % N2]
    diag = A[0] * B[0]
    diag += A[1] * B[1]
    off = A[0] * B[1]
    np.fft.fft2(diag, axes=(-2, -1), out=out[..., 0, 0])
    out[..., 1, 1] = out[..., 0, 0].imag
    out[..., 0, 0].imag = 0.0
    np.fft.fft2(off, axes=(-2, -1), out=out[..., 0, 1])
    np.conjugate(out[..., 0, 1], out=out[..., 1, 0])


def wigner_transform(psi: SpinorField, xstride=1, xidx=None, chunk=None):
    """Discrete Wigner transform of psi psi^dagger on a subsampled position grid."""
    if xidx is None:
        xidx, shape = coarse_indices(psi.grid, xstride)
    else:
        xidx, shape = np.atleast_2d(np.asarray(xidx, dtype=int)), None
    P = xidx.shape[0]
    N1, N2 = psi.grid.n
    chunk = chunk or max(1, int(2 ** 19 // (N1 * N2)))
    out = np.empty((P, N1, N2, 2, 2), dtype=complex)

    def fill(nodes, dest):
        for s in range(0, nodes.shape[0], chunk):
            sl = slice(s, min(nodes.shape[0], s + chunk))
            _auto_wigner(psi.values, psi.grid, psi.hbar, nodes[sl], dest[sl])

    # ghost images: W(x + L/2 e_j, k_m) = (-1)^{m_j} W(x, k_m), so only one node
    # per class modulo half the box needs a transform
    h1, h2 = N1 // 2, N2 // 2
    if N1 % 2 or N2 % 2:
        fill(xidx, out)
        return WignerField(psi.grid, psi.hbar, xidx, out, shape, psi.t)
    canon = np.stack([xidx[:, 0] % h1, xidx[:, 1] % h2], axis=1)
    uniq, inv = np.unique(canon, axis=0, return_inverse=True)
    if uniq.shape[0] == P:
        fill(xidx, out)
        return WignerField(psi.grid, psi.hbar, xidx, out, shape, psi.t)
    inv = inv.reshape(-1)
    base = np.empty((uniq.shape[0], N1, N2, 2, 2), dtype=complex)
    fill(uniq, base)
    alt1 = 1.0 - 2.0 * (np.arange(N1) % 2)
    alt2 = 1.0 - 2.0 * (np.arange(N2) % 2)
    b1, b2 = xidx[:, 0] // h1, xidx[:, 1] // h2
    small = max(1, int(2 ** 16 // (N1 * N2)))      # keep the copies cache resident
    for p1 in (0, 1):
        for p2 in (0, 1):
            sel = np.flatnonzero((b1 == p1) & (b2 == p2))
            sgn = np.outer(alt1 if p1 else np.ones(N1), alt2 if p2 else np.ones(N2))[:, :, None, None]
            for s in range(0, sel.size, small):
                q = sel[s:s + small]
                out[q] = base[inv[q]] * sgn if (p1 or p2) else base[inv[q]]
    return WignerField(psi.grid, psi.hbar, xidx, out, shape, psi.t)


def density_marginal(W: WignerField):
    """rho(x) = sum_k Tr W(x, k) dk, real part; returns (rho, max imaginary residue)."""
    v = W.values
    rho = (v[..., 0, 0].sum(axis=(1, 2)) + v[..., 1, 1].sum(axis=(1, 2))) * W.dk_weight
    imag = float(np.max(np.abs(rho.imag))) if rho.size else 0.0
    rho = rho.real
    if W.shape is not None:
        rho = rho.reshape(W.shape)
    return rho, imag


def hermiticity_defect(W: WignerField):
    return float(np.max(np.abs(W.values - np.conj(np.swapaxes(W.values, -1, -2)))))


# ----------------------------------------------------------------------------
# band split
# ----------------------------------------------------------------------------

def projector_field(k, consts: DiracConstants, band, kappa=0.0):
    """Pi_band on a momentum array (..., 2); zero (and masked) where |k| <= kappa for m = 0."""
    r = np.linalg.norm(k, axis=-1)
    if not consts.massless:
        return projector(k, consts, band), np.zeros(r.shape, bool)
    mask = r <= max(kappa, 0.0)
    P = np.zeros(k.shape[:-1] + (2, 2), dtype=complex)
    P[~mask] = projector(k[~mask], consts, band)
    return P, mask


def band_split(W: WignerField, consts: DiracConstants, kappa=0.0, imag_tol=1e-10):
    """(f_plus, f_minus, W_OD) with f = Re Tr[Pi W] and W_OD = Pi+ W Pi- + Pi- W Pi+."""
    k = W.k_mesh()
    Pp, mask = projector_field(k, consts, "+", kappa)
    Pm, _ = projector_field(k, consts, "-", kappa)
    scale = max(float(np.max(np.abs(W.values))), 1e-300)
    dens = []
    for P, s in ((Pp, 1), (Pm, -1)):
        tr = np.einsum("kqab,pkqba->pkq", P, W.values)
        im = float(np.max(np.abs(tr.imag))) / scale
        if im > imag_tol:
            warnings.warn(f"band density has relative imaginary part {im:.2e}")
        val = tr.real
        val[:, mask] = 0.0
        kx, ky = W.k_axes
        dens.append(BandDensity(W.x, kx, ky, val, s, W.dx_weight, mask, W.shape))
    od = (np.einsum("kqab,pkqbc,kqcd->pkqad", Pp, W.values, Pm)
          + np.einsum("kqab,pkqbc,kqcd->pkqad", Pm, W.values, Pp))
    od[:, mask] = 0.0
    W_od = WignerField(W.grid, W.hbar, W.xidx, od, W.shape, W.t)
    return dens[0], dens[1], W_od


# ----------------------------------------------------------------------------
# potential terms
# ----------------------------------------------------------------------------

def _shift_k(values, d):
    """values(k + d) for a shift d given in k-grid units (per axis), periodic, bilinear."""
    out = values
    for ax, di in zip((1, 2), d):
        lo = math.floor(di)
        fr = di - lo
        if abs(fr) < 1e-12:
            out = np.roll(out, -lo, axis=ax)
        elif abs(fr - 1) < 1e-12:
            out = np.roll(out, -(lo + 1), axis=ax)
        else:
            out = (1 - fr) * np.roll(out, -lo, axis=ax) + fr * np.roll(out, -(lo + 1), axis=ax)
    return out


def q_ext(W: WignerField, pot: PeriodicPotential, consts: DiracConstants, a):
    """(i/hbar) sum_mu e^{i mu.x/a} Vhat(mu) [W(k + hbar mu/2a) - W(k - hbar mu/2a)]."""
    out = np.zeros_like(W.values)
    if pot is None:
        return WignerField(W.grid, W.hbar, W.xidx, out, W.shape, W.t)
    dk = np.asarray(W.dk)
    x = W.x
    for mu, v in zip(*pot.modes()):
        d = consts.hbar * mu / (2 * a) / dk
        ph = v * np.exp(1j * (x @ mu) / a)
        diff = _shift_k(W.values, d) - _shift_k(W.values, -d)
        out += ph[:, None, None, None, None] * diff
    out *= 1j / consts.hbar
    return WignerField(W.grid, W.hbar, W.xidx, out, W.shape, W.t)


def q_int(W: WignerField, vint, consts: DiracConstants, method="fft", rel_tol=1e-14):
    """(i/hbar) sum_xi' e^{i xi'.x} Vhat_int(xi') [W(k + hbar xi'/2) - W(k - hbar xi'/2)].

    vint is the real interaction potential on the fine grid of W.  The k-shifts
    hbar xi'/2 are exact integer moves on the momentum grid.  method="direct"
    loops over the retained Fourier modes; method="fft" applies the same operator
    as the multiplication by V(x - z) - V(x + z) in the shift variable.
    """
    vint = np.asarray(vint, dtype=float)
    if method == "direct":
        c = forward(vint)
        keep = np.argwhere(np.abs(c) > rel_tol * max(np.abs(c).max(), 1e-300))
        N1, N2 = W.grid.n
        n1 = np.fft.fftfreq(N1, 1.0 / N1).astype(int)
        n2 = np.fft.fftfreq(N2, 1.0 / N2).astype(int)
        xi1, xi2 = W.grid.wavenumbers()
        x = W.x
        out = np.zeros_like(W.values)
        for i, j in keep:
            ph = c[i, j] * np.exp(1j * (x[:, 0] * xi1[i] + x[:, 1] * xi2[j]))
            d = (n1[i], n2[j])
            diff = np.roll(W.values, (-d[0], -d[1]), axis=(1, 2)) - np.roll(W.values, d, axis=(1, 2))
            out += ph[:, None, None, None, None] * diff
        out *= 1j / consts.hbar
        return WignerField(W.grid, W.hbar, W.xidx, out, W.shape, W.t)
    if method != "fft":
        raise ValueError("method must be 'fft' or 'direct'")
    rho = _from_w(W.values, W.grid, W.hbar)
    dv = _potential_difference(vint, W.xidx)
    Q = _to_w((1j / consts.hbar) * dv[:, None, None] * rho, W.grid, W.hbar)
    return WignerField(W.grid, W.hbar, W.xidx, Q, W.shape, W.t)


def _potential_difference(V, idx):
    """V(x - z_s) - V(x + z_s) for nodes idx, shape (P, N1, N2)."""
    N1, N2 = V.shape
    s1 = np.arange(N1)
    s2 = np.arange(N2)
    ip = (idx[:, 0, None] + s1[None]) % N1
    jp = (idx[:, 1, None] + s2[None]) % N2
    im = (idx[:, 0, None] - s1[None]) % N1
    jm = (idx[:, 1, None] - s2[None]) % N2
    return V[im[:, :, None], jm[:, None, :]] - V[ip[:, :, None], jp[:, None, :]]


def q_ext_yform(W: WignerField, pot: PeriodicPotential, consts: DiracConstants, a):
    """External term through the shift-variable form, -(i/hbar)(V(x+z) - V(x-z)) rho."""
    V = periodic_on_grid(pot, W.grid, a)[0]
    return q_int(W, V, consts, method="fft")


# ----------------------------------------------------------------------------
# Wigner-equation residual
# ----------------------------------------------------------------------------

def _spectral_gradient(vals, grid):
    xi = grid.wavenumber_mesh()
    c = forward(vals)
    return np.stack([inverse(1j * xi[j] * c) for j in range(2)])


def wigner_equation_terms(psi: SpinorField, V_total, consts: DiracConstants, idx):
    """Transport, commutator and potential terms of the Wigner equation at nodes idx.

    Returns (W, transport, commutator, Q) each (P, N1, N2, 2, 2), where
    transport = (c/2) sum_j {alpha_j, d_j W}, commutator = (i/hbar) [H(k), W]
    and Q = Q^a + Q^int built from the total potential V_total on the fine grid.
    """
    grid, hbar = psi.grid, psi.hbar
    W = cross_wigner(psi.values, psi.values, grid, hbar, idx)
    dpsi = _spectral_gradient(psi.values, grid)
    wf = WignerField(grid, hbar, idx, W)
    k = wf.k_mesh()
    transport = np.zeros_like(W)
    for j in range(2):
        dW = cross_wigner(dpsi[j], psi.values, grid, hbar, idx)
        dW = dW + np.conj(np.swapaxes(dW, -1, -2))
        transport += 0.5 * consts.c * (ALPHA[j] @ dW + dW @ ALPHA[j])
    H = symbol(k, consts)
    comm = 1j * (H @ W - W @ H) / hbar
    Q = q_int(wf, V_total, consts, method="fft").values
    return W, transport, comm, Q


@dataclass
class ResidualReport:
    t: float
    norm: float
    component_norms: np.ndarray
    w_norm: float
    terms: dict = field(default_factory=dict)

    @property
    def relative(self):
        return self.norm / self.w_norm if self.w_norm else float("nan")


def wigner_residual(traj, pot, kernel, consts: DiracConstants, a, xstride=8, steps=None,
                    chunk=16, dt_warn=0.3, offset=None):
    """Discrete L2 norm of the Wigner-equation left side at interior snapshots.

    The time derivative is the centred difference of W over the neighbouring
    snapshots, which must be equally spaced around the evaluation step.  Nodes
    sit at cell centres of the coarse grid by default (offset xstride // 2), so
    they do not line up with the nodal lines of lattice-periodic potentials.
    """
    from .potentials import hartree_potential as _hp
    off = xstride // 2 if offset is None else offset
    idx, shape = coarse_indices(traj.snapshots[0].grid, xstride, off)
    stp = list(traj.steps)
    if steps is None:
        steps = stp[1:-1]
    reports = []
    for s in steps:
        i = stp.index(s)
        if i == 0 or i == len(stp) - 1:
            raise ValueError(f"step {s} has no neighbours for a centred difference")
        pm, p0, pp = traj.snapshots[i - 1], traj.snapshots[i], traj.snapshots[i + 1]
        h1, h2 = p0.t - pm.t, pp.t - p0.t
        if abs(h1 - h2) > 1e-12 * max(h1, h2):
            raise ValueError("centred difference needs equally spaced neighbours")
        hbar = p0.hbar
        grid = p0.grid
        xi = grid.wavenumber_mesh()
        emax = consts.c * hbar * math.sqrt(float(np.max(xi[0] ** 2 + xi[1] ** 2)))
        if h1 * emax / hbar > dt_warn * math.pi * 4:
            warnings.warn(f"snapshot spacing {h1:.3g} is coarse for the centred time derivative")
        V = periodic_on_grid(pot, grid, a)[0] if pot is not None else np.zeros(grid.n)
        if kernel is not None and kernel.tag != "none":
            V = V + _hp(p0.density(), kernel, grid, with_gradient=False)
        sq = np.zeros((2, 2))
        wsq = 0.0
        tsq = {"dt": 0.0, "transport": 0.0, "commutator": 0.0, "potential": 0.0}
        for c0 in range(0, idx.shape[0], chunk):
            sub = idx[c0:c0 + chunk]
            W, tr, cm, Q = wigner_equation_terms(p0, V, consts, sub)
            Wp = cross_wigner(pp.values, pp.values, grid, hbar, sub)
            Wm = cross_wigner(pm.values, pm.values, grid, hbar, sub)
            dW = (Wp - Wm) / (2 * h1)
            R = dW + tr + cm - Q
            sq += np.sum(np.abs(R) ** 2, axis=(0, 1, 2))
            wsq += float(np.sum(np.abs(W) ** 2))
            for key, val in (("dt", dW), ("transport", tr), ("commutator", cm), ("potential", Q)):
                tsq[key] += float(np.sum(np.abs(val) ** 2))
        wf = WignerField(grid, hbar, idx, np.empty((0,)))
        wgt = grid.area / idx.shape[0] * wf.dk_weight
        comp = np.sqrt(sq * wgt)
        reports.append(ResidualReport(p0.t, float(np.sqrt(np.sum(sq) * wgt)), comp,
                                      math.sqrt(wsq * wgt),
                                      {k: math.sqrt(v * wgt) for k, v in tsq.items()}))
    return reports


# ----------------------------------------------------------------------------
# test functions
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrigPoly:
    """eta(x) = sum_j amp_j cos(xi_j . x + phase_j), xi_j = 2 pi n_j / L (at most two terms)."""
    extent: tuple
    terms: tuple   # ((n1, n2, amp, phase), ...)

    def __post_init__(self):
        if len(self.terms) > 2:
            raise ValueError("at most two modes")

    def _xi(self, n1, n2):
        return np.array([2 * np.pi * n1 / self.extent[0], 2 * np.pi * n2 / self.extent[1]])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for n1, n2, amp, ph in self.terms:
            out += amp * np.cos(x @ self._xi(n1, n2) + ph)
        return out

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for n1, n2, amp, ph in self.terms:
            xi = self._xi(n1, n2)
            out -= (amp * np.sin(x @ xi + ph))[..., None] * xi
        return out

    def fourier(self):
        """Dict (n1, n2) -> coefficient of exp(i xi_n . x)."""
        out = {}
        for n1, n2, amp, ph in self.terms:
            for s in (1, -1):
                key = (s * n1, s * n2)
                out[key] = out.get(key, 0) + 0.5 * amp * np.exp(1j * s * ph)
        return out

    def grad_fourier(self, j):
        L = self.extent[j]
        return {key: 1j * 2 * np.pi * key[j] / L * v for key, v in self.fourier().items()
                if key[j] != 0}

    def sup_norms(self, n=512):
        """(sup |eta|, sup |grad eta|) from a dense periodic sample, polished locally."""
        g1 = np.linspace(0, self.extent[0], n, endpoint=False)
        g2 = np.linspace(0, self.extent[1], n, endpoint=False)
        X = np.stack(np.meshgrid(g1, g2, indexing="ij"), axis=-1)
        v = np.abs(self(X)).max()
        gr = np.linalg.norm(self.grad(X), axis=-1).max()
        return float(v), float(gr)


@dataclass(frozen=True)
class Bump:
    """phi(k) = (1 - |k - k0|^2 / r^2)^3 on the disc of radius r, zero outside."""
    center: tuple
    radius: float

    def _u(self, k):
        d = np.asarray(k, dtype=float) - np.asarray(self.center)
        return d, np.sum(d * d, axis=-1) / self.radius ** 2

    def __call__(self, k):
        _, u2 = self._u(k)
        return np.where(u2 < 1, np.clip(1 - u2, 0, None) ** 3, 0.0)

    def grad(self, k):
        d, u2 = self._u(k)
        w = np.where(u2 < 1, -6 * np.clip(1 - u2, 0, None) ** 2 / self.radius ** 2, 0.0)
        return w[..., None] * d

    def hessian(self, k):
        d, u2 = self._u(k)
        r2 = self.radius ** 2
        inside = u2 < 1
        a = np.where(inside, -6 * np.clip(1 - u2, 0, None) ** 2 / r2, 0.0)
        b = np.where(inside, 24 * np.clip(1 - u2, 0, None) / r2 ** 2, 0.0)
        return a[..., None, None] * np.eye(2) + b[..., None, None] * d[..., :, None] * d[..., None, :]

    def sup_norms(self):
        r = self.radius
        return 1.0, 96.0 / (25.0 * math.sqrt(5.0) * r), 6.0 / r ** 2

    def min_abs_k(self):
        return float(np.linalg.norm(self.center) - self.radius)


@dataclass(frozen=True)
class TestFunction:
    eta: TrigPoly
    phi: Bump
    name: str = ""

    @property
    def eta_norm(self):
        v, g = self.eta.sup_norms()
        return v + g

    @property
    def phi_norm(self):
        return sum(self.phi.sup_norms())

    @property
    def norm(self):
        return self.eta_norm * self.phi_norm

    def check_support(self, kappa):
        if self.phi.min_abs_k() <= kappa:
            raise ValueError(f"test function {self.name} reaches into the cutoff disc |k| < {kappa}")


# ----------------------------------------------------------------------------
# grid pairings
# ----------------------------------------------------------------------------

def weak_pair(f: BandDensity, test: TestFunction):
    """sum_{x,k} f eta phi dx dk."""
    eta = test.eta(f.x)
    K = np.stack(np.meshgrid(f.kx, f.ky, indexing="ij"), axis=-1)
    phi = test.phi(K)
    return float(np.einsum("p,pkq,kq->", eta, f.values, phi)) * f.dx_weight * f.dk_weight


def _grid_pair(f: BandDensity, bx, gk):
    return float(np.einsum("p,pkq,kq->", bx, f.values, gk)) * f.dx_weight * f.dk_weight


def transport_residual_grid(f_series, times, band, pot, a, grad_v_series, test: TestFunction,
                            consts: DiracConstants):
    """<E, eta phi> at the middle of three BandDensity snapshots (grid quadrature).

    grad_v_series[i] is the total force field grad(V_Gamma + V_int) at the nodes
    of f_series[i] (shape (P, 2)); pot and a are kept for symmetry with the
    spinor route and may be None.
    """
    fm, f0, fp = f_series
    tm, t0, tp = times
    s = band_sign(band)
    ddt = (weak_pair(fp, test) - weak_pair(fm, test)) / (tp - tm)
    K = np.stack(np.meshgrid(f0.kx, f0.ky, indexing="ij"), axis=-1)
    phi = test.phi(K)
    gphi = test.phi.grad(K)
    geta = test.eta.grad(f0.x)
    eta = test.eta(f0.x)
    mask = f0.mask if f0.mask is not None else np.zeros(K.shape[:-1], bool)
    v = np.zeros(K.shape)
    v[~mask] = group_velocity(K[~mask], consts)
    transport = sum(_grid_pair(f0, geta[:, j], v[..., j] * phi) for j in range(2))
    gv = np.asarray(grad_v_series[1])
    force = sum(_grid_pair(f0, eta * gv[:, j], gphi[..., j]) for j in range(2))
    return ddt - s * transport + force


# ----------------------------------------------------------------------------
# mode-space (Weyl) pairings
# ----------------------------------------------------------------------------

class ModeBox:
    """Significant Fourier modes of a spinor gathered in a signed-index box."""

    def __init__(self, psi: SpinorField, tol=1e-12, pad=0):
        self.grid = psi.grid
        self.hbar = psi.hbar
        c = psi.coefficients()
        amp = np.sqrt(np.abs(c[0]) ** 2 + np.abs(c[1]) ** 2)
        n1, n2 = psi.grid.mode_indices()
        sig = np.argwhere(amp > tol * amp.max())
        s1 = n1[sig[:, 0]]
        s2 = n2[sig[:, 1]]
        self.lo = np.array([s1.min() - pad, s2.min() - pad])
        self.hi = np.array([s1.max() + pad, s2.max() + pad])
        N = np.asarray(psi.grid.n)
        # aliasing only matters once modes above 1e-8 of the peak spill over half the grid
        big = np.argwhere(amp > max(tol, 1e-8) * amp.max())
        width = np.array([np.ptp(n1[big[:, 0]]), np.ptp(n2[big[:, 1]])]) + 1
        if np.any(width > N // 2):
            warnings.warn("spinor spectrum is not confined to half the grid; mode pairings alias")
        r1 = np.arange(self.lo[0], self.hi[0] + 1)
        r2 = np.arange(self.lo[1], self.hi[1] + 1)
        self.n = (r1, r2)
        self.c = c[:, r1[:, None] % N[0], r2[None, :] % N[1]]   # (2, B1, B2)
        L = np.asarray(psi.grid.extent)
        self.L = L
        self.xi = (2 * np.pi * r1 / L[0], 2 * np.pi * r2 / L[1])

    @property
    def size(self):
        return self.c.shape[1:]


def weyl_pair(box: ModeBox, b_coeffs: dict, symbol_fn):
    """sum_{x,k} Tr[M(k) W(x,k)] b(x) dx dk evaluated exactly in mode space.

    b_coeffs maps signed index q -> coefficient of exp(i xi_q . x); symbol_fn
    maps momenta (..., 2) to matrices (..., 2, 2) (or scalars).  Equals
    area * sum_q bhat_q sum_n c_{n+q}^dagger M(hbar (xi_n + xi_q / 2)) c_n.
    """
    B1, B2 = box.size
    total = 0j
    for (q1, q2), bq in b_coeffs.items():
        if bq == 0 or abs(q1) >= B1 or abs(q2) >= B2:
            continue
        a1 = slice(max(0, -q1), min(B1, B1 - q1))
        a2 = slice(max(0, -q2), min(B2, B2 - q2))
        b1 = slice(max(0, q1), min(B1, B1 + q1))
        b2 = slice(max(0, q2), min(B2, B2 + q2))
        cn = box.c[:, a1, a2]
        cq = box.c[:, b1, b2]
        k1 = box.hbar * (box.xi[0][a1] + np.pi * q1 / box.L[0])
        k2 = box.hbar * (box.xi[1][a2] + np.pi * q2 / box.L[1])
        K = np.stack(np.meshgrid(k1, k2, indexing="ij"), axis=-1)
        M = symbol_fn(K)
        if np.ndim(M) == K.ndim - 1:
            val = np.sum(M * np.sum(np.conj(cq) * cn, axis=0))
        else:
            val = np.einsum("aij,ijab,bij->", np.conj(cq), M, cn)
        total += bq * val
    return total * box.L[0] * box.L[1]


def _band_symbol(consts, band, kappa, g):
    def fn(K):
        P, mask = projector_field(K, consts, band, kappa)
        gv = g(K)
        gv = np.where(mask, 0.0, gv)
        return P * gv[..., None, None]
    return fn


def field_coeffs(vals, tol=1e-14):
    """Signed-index Fourier coefficients of a real grid field above tol * max."""
    c = forward(vals)
    a = np.abs(c)
    keep = np.argwhere(a > tol * max(a.max(), 1e-300))
    n1 = np.fft.fftfreq(vals.shape[0], 1.0 / vals.shape[0]).astype(int)
    n2 = np.fft.fftfreq(vals.shape[1], 1.0 / vals.shape[1]).astype(int)
    return {(int(n1[i]), int(n2[j])): c[i, j] for i, j in keep}


def band_pair(box: ModeBox, consts, band, b_coeffs, g, kappa=0.0):
    """<f_band, b(x) g(k)> with f_band = Tr[Pi_band W]."""
    return float(np.real(weyl_pair(box, b_coeffs, _band_symbol(consts, band, kappa, g))))


def pair_test(box: ModeBox, consts, band, test: TestFunction, kappa=0.0):
    return band_pair(box, consts, band, test.eta.fourier(), test.phi, kappa)


def force_field(psi: SpinorField, pot, kernel, a):
    """Total force field grad(V_Gamma(x/a) + K * rho) on the fine grid, (2, N1, N2)."""
    G = np.zeros((2,) + tuple(psi.grid.n))
    if pot is not None:
        G += periodic_on_grid(pot, psi.grid, a)[1]
    if kernel is not None and kernel.tag != "none":
        G += hartree_potential(psi.density(), kernel, psi.grid)[1]
    return G


def transport_residual(psi_series, band, pot, kernel, test: TestFunction, consts: DiracConstants,
                       a, kappa=0.0, tol=1e-12):
    """<E_band, eta phi> from three spinor snapshots (t - d, t, t + d), mode-space route.

    <E, eta phi> = d/dt <f, eta phi> -+ <f, v.grad(eta) phi> + <f, eta grad V . grad phi>,
    where the upper sign is for band +.
    """
    pm, p0, pp = psi_series
    s = band_sign(band)
    if consts.massless:
        test.check_support(kappa)
    boxm, box0, boxp = (ModeBox(p, tol) for p in psi_series)
    ddt = (pair_test(boxp, consts, band, test, kappa) - pair_test(boxm, consts, band, test, kappa)) \
        / (pp.t - pm.t)
    transport = 0.0
    for j in range(2):
        gj = test.eta.grad_fourier(j)
        transport += band_pair(box0, consts, band, gj,
                               lambda K, j=j: _safe_velocity(K, consts)[..., j] * test.phi(K), kappa)
    F = force_field(p0, pot, kernel, a)
    X = np.moveaxis(p0.grid.mesh(), 0, -1)
    eta = test.eta(X)
    force = 0.0
    for j in range(2):
        bj = field_coeffs(eta * F[j])
        force += band_pair(box0, consts, band, bj, lambda K, j=j: test.phi.grad(K)[..., j], kappa)
    return ddt - s * transport + force


def _safe_velocity(K, consts):
    if not consts.massless:
        return group_velocity(K, consts)
    v = np.zeros(K.shape)
    r = np.linalg.norm(K, axis=-1)
    ok = r > 0
    v[ok] = group_velocity(K[ok], consts)
    return v


# ----------------------------------------------------------------------------
# off-diagonal (interband) norm
# ----------------------------------------------------------------------------

def offdiag_norm(psi: SpinorField, consts: DiracConstants, kappa=0.0, tol=1e-8, chunk=4096):
    """(||W_OD||, ||W||) in phase-space L2 over the full torus, from mode pairs.

    Uses sum_x |Pi+ W Pi-|^2 = (area/dk^2) sum_{n,n'} |Pi+(kbar) c_n|^2 |Pi-(kbar) c_n'|^2
    with kbar = hbar (xi_n + xi_n') / 2, which is exact for band-limited spinors.
    """
    c = psi.coefficients()
    amp2 = np.abs(c[0]) ** 2 + np.abs(c[1]) ** 2
    sig = np.argwhere(amp2 > tol ** 2 * amp2.max())
    n1, n2 = psi.grid.mode_indices()
    L = np.asarray(psi.grid.extent)
    xi = np.stack([2 * np.pi * n1[sig[:, 0]] / L[0], 2 * np.pi * n2[sig[:, 1]] / L[1]], axis=-1)
    cs = c[:, sig[:, 0], sig[:, 1]].T   # (M, 2)
    dk2 = (math.pi * psi.hbar) ** 2 / (L[0] * L[1])
    area = L[0] * L[1]
    M = cs.shape[0]
    acc = 0.0
    for s0 in range(0, M, max(1, chunk // max(M, 1) + 1)):
        rows = slice(s0, min(M, s0 + max(1, chunk // max(M, 1) + 1)))
        K = 0.5 * psi.hbar * (xi[rows, None, :] + xi[None, :, :])
        Pp, mask = projector_field(K, consts, "+", kappa)
        Pm, _ = projector_field(K, consts, "-", kappa)
        a_p = np.einsum("ijab,ib->ija", Pp, cs[rows])
        a_m = np.einsum("ijab,ib->ija", Pm, cs[rows])
        b_p = np.einsum("ijab,jb->ija", Pp, cs)
        b_m = np.einsum("ijab,jb->ija", Pm, cs)
        term = (np.sum(np.abs(a_p) ** 2, -1) * np.sum(np.abs(b_m) ** 2, -1)
                + np.sum(np.abs(a_m) ** 2, -1) * np.sum(np.abs(b_p) ** 2, -1))
        acc += float(np.sum(np.where(mask, 0.0, term)))
    od = math.sqrt(acc * area / dk2)
    w = float(np.sum(amp2)) * area / math.sqrt(area * dk2)
    return od, w
