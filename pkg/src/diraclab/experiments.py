"""Experiment drivers: single runs, hbar sweeps, Dirac-vs-Vlasov and Coulomb studies."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
import os
import time

import numpy as np

from . import io as dio
from .config import RunConfig
from .propagator import EvolveConfig, default_dt, evolve, initial_wavepacket, steps_for
from .wigner import (BandDensity, ModeBox, coarse_indices, density_marginal,
                     hermiticity_defect, offdiag_norm, pair_test, projector_field, transport_residual,
                     wigner_transform)

log = logging.getLogger(__name__)


def fit_slope(hbars, values):
    """Least-squares slope and intercept of log(values) against log(hbars)."""
    h = np.log(np.asarray(hbars, dtype=float))
    v = np.log(np.asarray(values, dtype=float))
    if h.size < 2:
        raise ValueError("need at least two points")
    A = np.vstack([h, np.ones_like(h)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, v, rcond=None)
    return float(slope), float(icpt)


@dataclass
class DiracRun:
    cfg: RunConfig
    traj: object
    dt: float
    nsteps: int
    time_steps: dict          # residual time -> step index
    od_steps: list
    wall: float

    def state_at(self, step):
        return self.traj.at_step(step)

    def triple(self, t):
        s = self.time_steps[t]
        d = self.cfg.fd_steps
        return [self.traj.at_step(s - d), self.traj.at_step(s), self.traj.at_step(s + d)]


def run_dirac(cfg: RunConfig, extra_times=()):
    """Evolve the configured initial data, keeping the snapshots every diagnostic needs."""
    cfg.validate()
    consts, grid = cfg.consts, cfg.grid
    psi0 = initial_wavepacket(grid, cfg.x0, cfg.k0, cfg.band, consts, cfg.width,
                              kappa=cfg.kappa if consts.massless else None)
    dt0 = cfg.dt if cfg.dt is not None else default_dt(grid, consts)
    nsteps, dt = steps_for(cfg.T, dt0) if cfg.T > 0 else (0, dt0)
    # make every residual time land on a step
    times = sorted(set(float(t) for t in cfg.residual_times if t <= cfg.T) | set(float(t) for t in extra_times))
    if nsteps:
        while any(abs(t / dt - round(t / dt)) > 1e-6 for t in times):
            nsteps += 1
            dt = cfg.T / nsteps
    tsteps = {t: int(round(t / dt)) for t in times}
    d = cfg.fd_steps
    extra = set()
    for s in tsteps.values():
        extra |= {max(s - d, 0), s, s + d}
    od_steps = sorted(set(int(round(v)) for v in np.linspace(0, nsteps, max(cfg.od_samples, 2))))
    extra |= set(od_steps)
    extra.discard(0)
    t0 = time.time()
    rec = evolve(psi0, cfg.pot, cfg.hartree_kernel, consts, cfg.a,
                 EvolveConfig(T=cfg.T, dt=dt, snapshot_stride=max(nsteps, 1),
                              extra_steps=tuple(sorted(extra)), hartree=cfg.hartree_update,
                              energy_diagnostics=False))
    return DiracRun(cfg, rec, dt, nsteps, tsteps, od_steps, time.time() - t0)


def residual_rows(run: DiracRun, bands=("+",)):
    """Rows (t, hbar, a, band, test, residual, normalized) for every time, band and test."""
    cfg = run.cfg
    consts = cfg.consts
    rows = []
    tests = cfg.tests()
    for t in sorted(run.time_steps):
        if run.time_steps[t] - cfg.fd_steps < 0:
            continue
        trip = run.triple(t)
        for band in bands:
            for test in tests:
                r = transport_residual(trip, band, cfg.pot, cfg.hartree_kernel, test, consts, cfg.a,
                                       kappa=cfg.kappa if consts.massless else 0.0)
                rows.append({"t": t, "hbar": cfg.hbar, "a": cfg.a, "band": band, "test": test.name,
                             "residual": r, "normalized": abs(r) / test.norm})
    return rows


def offdiag_series(run: DiracRun):
    cfg = run.cfg
    out = []
    for s in run.od_steps:
        p = run.state_at(s)
        od, w = offdiag_norm(p, cfg.consts, cfg.kappa if cfg.consts.massless else 0.0)
        out.append({"t": p.t, "hbar": cfg.hbar, "od": od, "w": w, "relative": od / w})
    return out


@dataclass
class SweepReport:
    hbars: list
    residuals: list
    slope: float
    intercept: float
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    monotone: bool = True
    meta: dict = field(default_factory=dict)


def convergence_sweep(base: RunConfig, hbars, runs=None, bands=("+",)):
    """Max normalized residual over battery and times for each hbar; log-log slope."""
    if len(hbars) < 3:
        raise ValueError("a sweep needs at least three hbar values")
    rows, res, diags = [], [], []
    t0 = time.time()
    for h in hbars:
        run = runs[h] if runs is not None and h in runs else run_dirac(base.with_(hbar=h))
        r = residual_rows(run, bands)
        rows += r
        res.append(max(x["normalized"] for x in r))
        diags.append({"hbar": h, "dt": run.dt, "steps": run.nsteps, "wall": run.wall,
                      "l2_drift": run.traj.l2_drift()})
    slope, icpt = fit_slope(hbars, res)
    order = np.argsort(hbars)[::-1]
    seq = np.asarray(res)[order]
    mono = bool(np.all(np.diff(seq) < 0))
    if not mono:
        log.warning("residuals are not monotone in hbar: %s", res)
    return SweepReport(list(hbars), res, slope, icpt, rows, diags, mono,
                       {"config_hash": base.hash(), "wall": time.time() - t0})


# ----------------------------------------------------------------------------
# Dirac versus Vlasov
# ----------------------------------------------------------------------------

def compare_dirac_vlasov(cfg: RunConfig, n_particles=None, run=None, bands=("+", "-"), times=None):
    """Dual-norm proxy D(hbar, t) between Dirac band densities and the Vlasov ensemble.

    The Vlasov ensemble is sampled from f(0) = Tr[Pi W_0] of the same initial
    spinor and pushed with the same external potential and kernel.
    """
    from .vlasov import sample_from_spinor, vlasov_evolve
    run = run or run_dirac(cfg)
    consts = cfg.consts
    kappa = cfg.kappa if consts.massless else 0.0
    N = int(n_particles or cfg.particles)
    psi0 = run.state_at(0)
    t0 = time.time()
    ens, rep = sample_from_spinor(psi0, consts, N, cfg.seed, bands, kappa)
    t_sample = time.time() - t0
    times = sorted(times or set(run.time_steps) | {cfg.T})
    ens_end, snaps = vlasov_evolve(ens, cfg.pot, cfg.hartree_kernel, consts, cfg.T, cfg.vlasov_dt,
                                   cfg.a, cfg.grid, kappa, record_times=[0.0] + list(times))
    tests = cfg.tests()
    rows = []
    for t in [0.0] + list(times):
        step = 0 if t == 0 else int(round(t / run.dt))
        box = ModeBox(run.state_at(step))
        e = snaps[t]
        worst = 0.0
        for band in bands:
            for test in tests:
                qd = pair_test(box, consts, band, test, kappa)
                vl = e.pair(test, band)
                d = abs(qd - vl) / test.norm
                worst = max(worst, d)
                rows.append({"t": t, "hbar": cfg.hbar, "band": band, "test": test.name,
                             "dirac": qd, "vlasov": vl, "distance": d})
        rows.append({"t": t, "hbar": cfg.hbar, "band": "*", "test": "max", "distance": worst})
    info = {"sample": rep, "sample_wall": t_sample, "leakage": ens_end.leakage(), "particles": ens.size,
            "wall": time.time() - t0}
    return rows, info


def distance_at(rows, t):
    return max(r["distance"] for r in rows if r["test"] == "max" and abs(r["t"] - t) < 1e-12)


def coulomb_study(base: RunConfig, alphas, hbars, runs=None):
    """Residual sweeps with kernel regularized_coulomb(hbar^alpha) for each alpha."""
    out = {}
    for al in alphas:
        cfg = base.with_(kernel="coulomb", alpha=float(al))
        rr = None if runs is None else runs.get(al)
        out[al] = convergence_sweep(cfg, hbars, runs=rr)
    return out


# ----------------------------------------------------------------------------
# time-step studies
# ----------------------------------------------------------------------------

def residual_dt_study(cfg: RunConfig, dts, t_eval=0.05, xstride=None):
    """Wigner-equation residual at t_eval on trajectories computed with each dt."""
    from .wigner import wigner_residual
    consts, grid = cfg.consts, cfg.grid
    psi0 = initial_wavepacket(grid, cfg.x0, cfg.k0, cfg.band, consts, cfg.width,
                              kappa=cfg.kappa if consts.massless else None)
    out = []
    for dt in dts:
        s = int(round(t_eval / dt))
        if abs(s * dt - t_eval) > 1e-9 * t_eval:
            raise ValueError(f"t_eval={t_eval} is not a multiple of dt={dt}")
        rec = evolve(psi0, cfg.pot, cfg.hartree_kernel, consts, cfg.a,
                     EvolveConfig(T=(s + 1) * dt, dt=dt, snapshot_stride=s + 1,
                                  extra_steps=(s - 1, s), hartree=cfg.hartree_update,
                                  energy_diagnostics=False))
        rep = wigner_residual(rec, cfg.pot, cfg.hartree_kernel, consts, cfg.a,
                              xstride=xstride or cfg.xstride, steps=[s])[0]
        out.append({"dt": dt, "t": rep.t, "residual": rep.norm, "relative": rep.relative,
                    "w_norm": rep.w_norm, **{"term_" + k: v for k, v in rep.terms.items()}})
    return out


def strang_order(cfg: RunConfig, dts, T=0.2, n=32):
    """Global error of the split step against exact exponentiation, static potential.

    Without the mean field the discrete Hamiltonian is a fixed Hermitian matrix
    on the (n x n) grid, so the exact solution is obtained from its
    eigendecomposition.  Returns (rows, fitted slope).
    """
    from .lattice import Grid2D, forward, inverse
    from .potentials import periodic_on_grid, zero_kernel
    from .propagator import SplitStepper, SpinorField
    from .symbol import symbol
    consts = cfg.consts
    grid = Grid2D(tuple(cfg.grid.extent), (n, n))
    psi0 = initial_wavepacket(grid, cfg.x0, cfg.k0, cfg.band, consts, cfg.width,
                              kappa=cfg.kappa if consts.massless else None)
    V = periodic_on_grid(cfg.pot, grid, cfg.a)[0]
    # dense Hamiltonian: spectral kinetic part plus diagonal potential
    N = n * n
    k = cfg.hbar * np.moveaxis(grid.wavenumber_mesh(), 0, -1)
    Hk = symbol(k, consts).reshape(N, 2, 2)
    F = np.fft.fft(np.eye(n), axis=0)
    F2 = np.kron(F, F)
    Fi = F2.conj().T / N
    H = np.zeros((2 * N, 2 * N), dtype=complex)
    for i in range(2):
        for j in range(2):
            H[i * N:(i + 1) * N, j * N:(j + 1) * N] = Fi @ (Hk[:, i, j][:, None] * F2)
    H[:N, :N] += np.diag(V.ravel())
    H[N:, N:] += np.diag(V.ravel())
    H = 0.5 * (H + H.conj().T)
    lam, U = np.linalg.eigh(H)
    v0 = psi0.values.reshape(2 * N)
    exact = U @ (np.exp(-1j * lam * T / cfg.hbar) * (U.conj().T @ v0))
    rows = []
    for dt in dts:
        nst = int(round(T / dt))
        if abs(nst * dt - T) > 1e-9 * T:
            raise ValueError(f"T={T} is not a multiple of dt={dt}")
        st = SplitStepper(grid, cfg.pot, zero_kernel(), consts, cfg.a, dt)
        vals = psi0.values.copy()
        Vs = st.potential(vals)
        for _ in range(nst):
            vals, Vs = st.step_values(vals, Vs)
        err = float(np.sqrt(np.sum(np.abs(vals.reshape(-1) - exact) ** 2) * grid.cell_area))
        rows.append({"dt": dt, "steps": nst, "error": err})
    slope, _ = fit_slope([r["dt"] for r in rows], [r["error"] for r in rows])
    return rows, slope


# ----------------------------------------------------------------------------
# single run with artifacts
# ----------------------------------------------------------------------------

def band_density_window(psi, consts, kappa=0.0, xstride=8, kwin=64, chunk=8):
    """f_+ and f_- on the coarse position grid, cropped to a kwin^2 momentum window.

    The window is centred on the peak of the momentum marginal (torus nodes
    k = pi hbar m / L); the full transform is streamed over position chunks.
    """
    idx, shape = coarse_indices(psi.grid, xstride)
    N1, N2 = psi.grid.n
    kw1, kw2 = min(kwin, N1), min(kwin, N2)
    c = np.fft.fft2(psi.values)
    amp = np.abs(c[0]) ** 2 + np.abs(c[1]) ** 2
    p1, p2 = np.unravel_index(int(np.argmax(amp)), amp.shape)
    # mode n sits at Wigner momentum index 2n
    n1 = int(np.fft.fftfreq(N1, 1.0 / N1)[p1]) * 2
    n2 = int(np.fft.fftfreq(N2, 1.0 / N2)[p2]) * 2
    r1 = np.arange(n1 - kw1 // 2, n1 - kw1 // 2 + kw1) % N1
    r2 = np.arange(n2 - kw2 // 2, n2 - kw2 // 2 + kw2) % N2
    vals = {1: np.empty((idx.shape[0], kw1, kw2)), -1: np.empty((idx.shape[0], kw1, kw2))}
    probe = wigner_transform(psi, xidx=idx[:1])
    kx, ky = probe.k_axes[0][r1], probe.k_axes[1][r2]
    kk = np.stack(np.meshgrid(kx, ky, indexing="ij"), axis=-1)
    proj = {b: projector_field(kk, consts, b, kappa) for b in (1, -1)}
    for s0 in range(0, idx.shape[0], chunk):
        W = wigner_transform(psi, xidx=idx[s0:s0 + chunk]).values[:, r1[:, None], r2[None, :]]
        for b, (P, mask) in proj.items():
            v = np.einsum("kqab,pkqba->pkq", P, W).real
            v[:, mask] = 0.0
            vals[b][s0:s0 + chunk] = v
    dxw = psi.grid.area / idx.shape[0]
    X = idx * np.asarray(psi.grid.spacing)
    return tuple(BandDensity(X, kx, ky, vals[b], b, dxw, None, shape) for b in (1, -1))


def _git_revision():
    import subprocess
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _monitor(name, value, limit):
    return {"name": name, "value": float(value), "limit": float(limit), "passed": bool(value <= limit)}


def run(cfg: RunConfig, outdir=None):
    """Evolve one configuration and write snapshots, band densities, tables and a manifest.

    Returns the artifact directory.  A T = 0 configuration writes the initial
    snapshot, its band densities and the manifest only.
    """
    cfg.validate()
    h = cfg.hash()
    outdir = outdir or os.path.join(cfg.output_dir, f"run-{h}")
    os.makedirs(outdir, exist_ok=True)
    t0 = time.time()
    dr = run_dirac(cfg)
    consts = cfg.consts
    kappa = cfg.kappa if consts.massless else 0.0
    files = []

    def path(name):
        files.append(name)
        return os.path.join(outdir, name)

    cfg.dump(path("config.yaml"))
    steps = sorted({0, dr.nsteps} | set(dr.time_steps.values()))
    for s in steps:
        p = dr.state_at(s)
        dio.write_snapshot(path(f"psi_{s:07d}.spn"), p, {"step": s}, h)
        files.append(f"psi_{s:07d}.spn.json")
    monitors = []
    psi0, psiT = dr.state_at(0), dr.state_at(dr.nsteps)
    for s, p in ((0, psi0), (dr.nsteps, psiT)):
        fp, fm = band_density_window(p, consts, kappa, cfg.xstride)
        dio.write_band_density(path(f"band_plus_{s:07d}.phs"), fp, p.hbar, p.t)
        dio.write_band_density(path(f"band_minus_{s:07d}.phs"), fm, p.hbar, p.t)
    # invariant monitors on the final state
    drift = abs(psiT.l2_norm() - psi0.l2_norm())
    monitors.append(_monitor("l2_conservation", drift, 1e-10))
    idx, shape = coarse_indices(psiT.grid, cfg.xstride)
    sel = idx[:: max(1, idx.shape[0] // 16)]
    W = wigner_transform(psiT, xidx=sel)
    rho_w, imag = density_marginal(W)
    dens = psiT.density()
    monitors.append(_monitor("density_marginal", float(np.max(np.abs(rho_w - dens[sel[:, 0], sel[:, 1]])))
                             / max(float(dens.max()), 1e-300), 1e-8))
    monitors.append(_monitor("wigner_hermiticity", hermiticity_defect(W) / max(np.abs(W.values).max(), 1e-300),
                             1e-10))
    monitors.append(_monitor("finite_state", 0.0 if np.all(np.isfinite(psiT.values)) else 1.0, 0.0))
    od = offdiag_series(dr)
    dio.write_csv(path("offdiag.csv"), od, ("t", "hbar", "od", "w", "relative"), h)
    rows = residual_rows(dr, ("+",)) if dr.nsteps else []
    if rows:
        dio.write_csv(path("residuals.csv"), rows, dio.RESIDUAL_COLUMNS, h)
    diags = [{"t": d["t"], "l2": d["l2"], "h1": d["h1"]} for d in dr.traj.diagnostics]
    dio.write_csv(path("diagnostics.csv"), diags, ("t", "l2", "h1"), h)
    manifest = {
        "config_hash": h, "config": cfg.to_dict(), "seed": cfg.seed, "git_revision": _git_revision(),
        "dt": dr.dt, "steps": dr.nsteps, "wall_time": time.time() - t0, "files": sorted(files),
        "monitors": monitors, "all_monitors_passed": all(m["passed"] for m in monitors),
        "max_normalized_residual": max((r["normalized"] for r in rows), default=None),
        "max_offdiag_relative": max(r["relative"] for r in od) if od else None,
    }
    dio.write_manifest(outdir, manifest)
    return outdir
