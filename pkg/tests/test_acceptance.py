"""The twelve acceptance criteria at their stated tolerances.

Heavy runs are session-scoped and shared: the massive sweep feeds criteria
5, 7, 8 and 9.  Expect a total runtime of roughly an hour on one core.
"""
import math
import time

import numpy as np
import pytest

from diraclab.config import benchmark_config
from diraclab.experiments import (coulomb_study, compare_dirac_vlasov, convergence_sweep, distance_at,
                                  offdiag_series, residual_dt_study, run_dirac, strang_order)
from diraclab.lattice import Grid2D, square_lattice
from diraclab.potentials import PeriodicPotential, zero_kernel
from diraclab.symbol import DiracConstants, energy, opnorm, projector, projector_gradient, symbol
from diraclab.vlasov import ParticleEnsemble, particle_energy, vlasov_evolve
from diraclab.wigner import density_marginal, wigner_transform

from conftest import random_spinor, record_criterion
from test_wigner import brute_force_wigner

HBARS = [1 / 8, 1 / 16, 1 / 32, 1 / 64]


def _kgrid(n=64, half=4.0):
    ax = (np.arange(n) - n // 2) * (2 * half / n)       # contains k = 0
    return np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1)


@pytest.fixture(scope="session")
def massive_runs():
    base = benchmark_config()
    return {h: run_dirac(base.with_(hbar=h)) for h in HBARS}


@pytest.fixture(scope="session")
def massive_sweep(massive_runs):
    return convergence_sweep(benchmark_config(), HBARS, runs=massive_runs)


def test_c01_projector_algebra():
    t0 = time.time()
    worst = 0.0
    for consts, kappa in ((DiracConstants(1.0, 1.0, 1 / 16), 0.0), (DiracConstants(0.0, 1.0, 1 / 16), 0.5)):
        k = _kgrid()
        k = k[np.linalg.norm(k, axis=-1) > kappa] if kappa else k.reshape(-1, 2)
        H = symbol(k, consts)
        E = energy(k, consts)[:, None, None]
        Pp, Pm = projector(k, consts, "+"), projector(k, consts, "-")
        I = np.eye(2)
        checks = [Pp @ Pp - Pp, Pm @ Pm - Pm, Pp @ Pm, Pm @ Pp, Pp + Pm - I,
                  H @ Pp - Pp @ H, H @ Pm - Pm @ H, H @ Pp - E * Pp, H @ Pm + E * Pm]
        for b, P in (("+", Pp), ("-", Pm)):
            G = projector_gradient(k, consts, b, kappa)
            checks += [P @ G[j] @ P for j in range(2)]
        worst = max(worst, max(np.abs(c).max() for c in checks))
    ok = worst < 1e-10 and time.time() - t0 < 1.0
    record_criterion(1, ok, f"max entry defect {worst:.2e} (limit 1e-10), {time.time() - t0:.2f} s")
    assert ok


def test_c02_gradient_bound():
    t0 = time.time()
    consts = DiracConstants(1.0, 1.0, 1 / 16)
    k = _kgrid().reshape(-1, 2)
    worst = max(opnorm(projector_gradient(k, consts, b)[j]).max() for b in "+-" for j in range(2))
    # the full gradient operator norm: sup over unit directions of |sum_j u_j dPi/dk_j|
    th = np.linspace(0, np.pi, 91)
    u = np.stack([np.cos(th), np.sin(th)])
    for b in "+-":
        G = projector_gradient(k, consts, b)
        worst = max(worst, opnorm(np.einsum("jd,jkab->dkab", u, G)).max())
    bound = 1 / (2 * consts.m * consts.c)
    ok = worst <= bound + 1e-10 and time.time() - t0 < 1.0
    record_criterion(2, ok, f"max |grad Pi| {worst:.12f} vs 1/(2mc) = {bound}, {time.time() - t0:.2f} s")
    assert ok


def test_c03_marginal_identity():
    t0 = time.time()
    rng = np.random.default_rng(3)
    g = Grid2D((2.0, 2.0), (64, 64))
    worst = 0.0
    for _ in range(5):
        psi = random_spinor(g, 1 / 16, rng)
        rho, _ = density_marginal(wigner_transform(psi))
        dens = psi.density()
        worst = max(worst, np.abs(rho - dens).max() / dens.max())
    ok = worst < 1e-8 and time.time() - t0 < 10
    record_criterion(3, ok, f"relative marginal defect {worst:.2e} (limit 1e-8), {time.time() - t0:.1f} s")
    assert ok


def test_c04_wigner_brute_force():
    t0 = time.time()
    rng = np.random.default_rng(4)
    g = Grid2D((2.0, 2.0), (16, 16))
    psi = random_spinor(g, 1 / 8, rng)
    W = wigner_transform(psi)
    nodes = [(i, j) for i in range(16) for j in range(16)]
    ref = brute_force_wigner(psi.values, g, 1 / 8, nodes)
    err = np.abs(W.values - ref).max()
    ok = err < 1e-10 and time.time() - t0 < 30
    record_criterion(4, ok, f"max deviation {err:.2e} (limit 1e-10), {time.time() - t0:.1f} s")
    assert ok


def test_c05_l2_conservation(massive_runs):
    run = massive_runs[1 / 16]
    drift = abs(run.state_at(run.nsteps).l2_norm() - run.state_at(0).l2_norm())
    ok = drift < 1e-10 and run.wall < 300
    record_criterion(5, ok, f"| ||psi(T)|| - ||psi0|| | = {drift:.2e} (limit 1e-10), {run.wall:.0f} s")
    assert ok


def test_c06_strang_order():
    t0 = time.time()
    rows, slope = strang_order(benchmark_config(), [4e-3, 2e-3, 1e-3], T=0.5)
    wall = time.time() - t0
    ok = abs(slope - 2.0) <= 0.1 and wall < 300
    errs = ", ".join(f"{r['error']:.2e}" for r in rows)
    record_criterion(6, ok, f"slope {slope:.4f} (2.0 +- 0.1), errors {errs}, {wall:.0f} s")
    assert ok


def test_c07_adiabatic_decoupling(massive_runs):
    vals = {}
    for h in (1 / 8, 1 / 16, 1 / 32):
        vals[h] = max(r["relative"] for r in offdiag_series(massive_runs[h])) / h
    ratio = max(vals.values()) / min(vals.values())
    ok = ratio < 2
    txt = ", ".join(f"{v:.3f}" for v in vals.values())
    record_criterion(7, ok, f"sup_t ||W_OD||/hbar = {txt}; spread {ratio:.3f} (limit 2)")
    assert ok


def test_c08_semiclassical_rate(massive_sweep):
    ml = convergence_sweep(benchmark_config(massless=True), HBARS)
    ok_m = 0.7 <= massive_sweep.slope <= 1.3
    ok_z = 0.6 <= ml.slope <= 1.3
    record_criterion(8, ok_m and ok_z, f"massive slope {massive_sweep.slope:.3f} in [0.7,1.3]; "
                                       f"massless slope {ml.slope:.3f} in [0.6,1.3]; "
                                       f"massless residuals monotone {ml.monotone}")
    assert ok_m and ok_z


def test_c09_dirac_vlasov(massive_runs):
    cfg0 = benchmark_config()
    D = []
    for h in HBARS:
        cfg = cfg0.with_(hbar=h)
        rows, info = compare_dirac_vlasov(cfg, 10 ** 6, run=massive_runs[h])
        D.append(distance_at(rows, cfg.T))
    mono = all(b < a for a, b in zip(D, D[1:]))
    ratio = D[0] / D[-1]
    ok = mono and ratio >= 4
    txt = ", ".join(f"{d:.2e}" for d in D)
    record_criterion(9, ok, f"D(hbar, T) = {txt}; monotone {mono}, ratio {ratio:.2f} (>= 4)")
    assert ok


def test_c10_wigner_residual_dt():
    t0 = time.time()
    rows = residual_dt_study(benchmark_config(hbar=1 / 16), [1e-3, 5e-4], t_eval=0.05, xstride=16)
    ratio = rows[0]["residual"] / rows[1]["residual"]
    ok = 3 <= ratio <= 5
    record_criterion(10, ok, f"residual {rows[0]['residual']:.3e} -> {rows[1]['residual']:.3e}, "
                             f"ratio {ratio:.3f} in [3,5], {time.time() - t0:.0f} s")
    assert ok


def test_c11_coulomb_contrast():
    t0 = time.time()
    res = coulomb_study(benchmark_config(), [0.0, 0.2, 0.3], HBARS)
    s = {a: r.slope for a, r in res.items()}
    ok_range = all(0.6 <= s[a] <= 1.3 for a in (0.0, 0.2))
    ok_contrast = s[0.3] < s[0.2]
    record_criterion(11, ok_range and ok_contrast,
                     f"slopes alpha=0: {s[0.0]:.3f}, 0.2: {s[0.2]:.3f} (in [0.6,1.3]: {ok_range}); "
                     f"alpha=0.3: {s[0.3]:.3f} < {s[0.2]:.3f}: {ok_contrast}; {time.time() - t0:.0f} s")
    assert ok_range
    assert ok_contrast


def test_c12_vlasov_streaming_and_energy():
    t0 = time.time()
    rng = np.random.default_rng(12)
    consts = DiracConstants(1.0, 1.0, 1 / 16)
    n = 1000
    x = rng.random((n, 2)) * 2
    k = rng.normal(size=(n, 2))
    band = rng.choice([-1, 1], n).astype(np.int8)
    ens = ParticleEnsemble(x, k, np.full(n, 1 / n), band, (2.0, 2.0))
    g = Grid2D((2.0, 2.0), (32, 32))
    out, _ = vlasov_evolve(ens, None, zero_kernel(), consts, 1.0, 0.01, 0.5, g)
    v = k / energy(k, consts)[:, None] * band[:, None]
    d = np.abs(out.x - np.mod(x + v, 2.0))
    stream = float(np.minimum(d, 2.0 - d).max())

    pot = PeriodicPotential.from_records(square_lattice(0.5), [(1, 0, 0.05, 0.0)])
    one = ParticleEnsemble(np.array([[0.3, 0.7]]), np.array([[0.8, -0.4]]), np.ones(1),
                           np.ones(1, np.int8), (2.0, 2.0))
    E0 = particle_energy(one.x, one.k, pot, 0.5, consts)[0]
    end, _ = vlasov_evolve(one, pot, zero_kernel(), consts, 10.0, 1e-3, 0.5, g)
    drift = abs(particle_energy(end.x, end.k, pot, 0.5, consts)[0] - E0)
    wall = time.time() - t0
    ok = stream < 1e-10 and drift < 1e-6 and wall < 60
    record_criterion(12, ok, f"streaming error {stream:.1e} (1e-10), energy drift {drift:.1e} (1e-6), {wall:.1f} s")
    assert ok
