import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diraclab.symbol import (ALPHA, ALPHA1, ALPHA2, GAMMA0, I2, DiracConstants, SingularPointError,
                             energy, group_velocity, kinetic_phase, opnorm, projector,
                             projector_gradient, symbol)

momenta = st.tuples(st.floats(-20, 20, allow_nan=False), st.floats(-20, 20, allow_nan=False))


def test_clifford_relations():
    for a in (ALPHA1, ALPHA2, GAMMA0):
        assert np.allclose(a @ a, I2)
        assert np.allclose(a, a.conj().T)
    for a, b in ((ALPHA1, ALPHA2), (ALPHA1, GAMMA0), (ALPHA2, GAMMA0)):
        assert np.allclose(a @ b + b @ a, 0)


def test_symbol_is_linear_combination():
    consts = DiracConstants(0.7, 1.3, 1.0)
    k = np.array([0.4, -1.1])
    H = symbol(k, consts)
    ref = consts.c * (k[0] * ALPHA1 + k[1] * ALPHA2) + consts.m * consts.c ** 2 * GAMMA0
    assert np.allclose(H, ref, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(momenta, st.floats(0.0, 3.0))
def test_spectrum(k, m):
    consts = DiracConstants(m, 1.0, 1.0)
    k = np.array(k)
    if m == 0 and np.linalg.norm(k) < 1e-6:
        return
    H = symbol(k, consts)
    assert np.allclose(H @ H, energy(k, consts) ** 2 * I2, rtol=1e-12, atol=1e-10)
    ev = np.linalg.eigvalsh(H)
    assert np.allclose(ev, [-energy(k, consts), energy(k, consts)], rtol=1e-12, atol=1e-10)


def test_projector_gradient_finite_difference():
    consts = DiracConstants(1.0, 1.0, 1.0)
    rng = np.random.default_rng(1)
    k = rng.normal(size=(20, 2)) * 2
    h = 1e-5
    for band in "+-":
        G = projector_gradient(k, consts, band)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (projector(k + e, consts, band) - projector(k - e, consts, band)) / (2 * h)
            assert np.max(np.abs(fd - G[j])) < 1e-8


def test_massless_gradient_finite_difference():
    consts = DiracConstants(0.0, 2.0, 1.0)
    k = np.array([[0.8, -0.3], [-1.5, 2.0]])
    h = 1e-6
    G = projector_gradient(k, consts, "+", kappa=0.5)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (projector(k + e, consts) - projector(k - e, consts)) / (2 * h)
        assert np.max(np.abs(fd - G[j])) < 1e-7


def test_massless_cutoff_raises():
    consts = DiracConstants(0.0, 1.0, 1.0)
    with pytest.raises(SingularPointError):
        projector(np.zeros(2), consts)
    with pytest.raises(SingularPointError):
        projector_gradient(np.array([0.3, 0.0]), consts, "+", kappa=0.5)


def test_group_velocity_is_energy_gradient():
    consts = DiracConstants(1.0, 1.5, 1.0)
    k = np.array([[0.3, 0.2], [-2.0, 1.0]])
    h = 1e-6
    v = group_velocity(k, consts)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (energy(k + e, consts) - energy(k - e, consts)) / (2 * h)
        assert np.allclose(fd, v[:, j], atol=1e-8)
    assert np.all(np.linalg.norm(v, axis=-1) < consts.c)


def _taylor_expm(A, terms=40):
    # scaled and squared Taylor series
    s = max(0, int(np.ceil(np.log2(max(np.abs(A).max(), 1e-300)))) + 1)
    B = A / 2 ** s
    out = np.eye(2, dtype=complex)
    term = np.eye(2, dtype=complex)
    for n in range(1, terms):
        term = term @ B / n
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


@pytest.mark.parametrize("m", [0.0, 1.0])
def test_kinetic_phase_matches_matrix_exponential(m):
    consts = DiracConstants(m, 1.0, 1 / 16)
    rng = np.random.default_rng(3)
    ks = rng.normal(size=(10, 2)) * 3
    dt = 1e-2
    U = kinetic_phase(ks, consts, dt)
    for k, u in zip(ks, U):
        ref = _taylor_expm(-1j * dt * symbol(k, consts) / consts.hbar)
        assert np.max(np.abs(u - ref)) < 1e-12
        assert np.allclose(u @ u.conj().T, I2, atol=1e-13)


def test_kinetic_phase_at_zero_energy():
    U = kinetic_phase(np.zeros(2), DiracConstants(0.0, 1.0, 1.0), 0.1)
    assert np.allclose(U, I2)


def test_opnorm():
    M = np.array([[[3, 0], [0, -4]]], dtype=complex)
    assert opnorm(M)[0] == pytest.approx(4.0)
    # closed form against the SVD
    rng = np.random.default_rng(5)
    R = rng.normal(size=(500, 2, 2)) + 1j * rng.normal(size=(500, 2, 2))
    R[:5] = [[1, 1], [1, 1]]   # rank one
    assert np.allclose(opnorm(R), np.linalg.norm(R, ord=2, axis=(-2, -1)), rtol=1e-12, atol=0)


def test_constants_validation():
    with pytest.raises(ValueError):
        DiracConstants(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        DiracConstants(1.0, 0.0, 1.0)
