import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import sqrtm

import oracles
from ecw import detspace, ecwhf, nonorth
from ecw.nonorth import NonorthError, RankDeficiencyError, SlaterState


def random_orbitals(rng, m, n, complex_=True):
    c = rng.normal(size=(m, n))
    if complex_:
        c = c + 1j * rng.normal(size=(m, n))
    return c


def deficient_pair(rng, m, n, k, complex_=True):
    """A bra and a ket whose overlap matrix has exactly ``k`` vanishing singular values."""
    cb = np.linalg.qr(random_orbitals(rng, m, n, complex_))[0]
    ck = random_orbitals(rng, m, n, complex_)
    proj = np.eye(m) - cb @ cb.conj().T
    for j in range(k):
        ck[:, j] = proj @ ck[:, j]
    return cb, ck


def fock_pair(cb, ck):
    return oracles.slater_fock_vector(cb), oracles.slater_fock_vector(ck)


def test_identical_orthonormal_overlap():
    c = np.eye(4)[:, :2]
    ov = nonorth.pair_overlap(SlaterState(c), SlaterState(c))
    assert ov.det_sigma == pytest.approx(1.0)
    assert np.array_equal(ov.sigma, np.eye(2))


def test_orthogonal_orbital_gives_zero_overlap():
    rng = np.random.default_rng(0)
    cb, ck = deficient_pair(rng, 6, 3, 1)
    assert abs(nonorth.pair_overlap(cb, ck).det_sigma) < 1e-14


def test_overlap_matches_expansion():
    rng = np.random.default_rng(1)
    for _ in range(10):
        cb, ck = random_orbitals(rng, 8, 3), random_orbitals(rng, 8, 3)
        b, k = fock_pair(cb, ck)
        assert abs(nonorth.pair_overlap(cb, ck).det_sigma - np.vdot(b, k)) < 1e-11 * max(1.0, abs(np.vdot(b, k)))
        vb, vk = detspace.slater_to_ci(cb), detspace.slater_to_ci(ck)
        assert nonorth.pair_overlap(cb, ck).det_sigma == pytest.approx(np.vdot(vb.coeffs, vk.coeffs), rel=1e-11)


def test_shape_mismatch():
    with pytest.raises(NonorthError):
        nonorth.pair_overlap(np.eye(4)[:, :2], np.eye(4)[:, :3])


def test_same_state_density_is_projector():
    rng = np.random.default_rng(2)
    c = np.linalg.qr(random_orbitals(rng, 6, 3))[0]
    td = nonorth.tdm1(c, c)
    assert np.allclose(td.gamma1, c @ c.conj().T, atol=1e-13)


def test_one_electron_states():
    rng = np.random.default_rng(3)
    cb, ck = random_orbitals(rng, 4, 1), random_orbitals(rng, 4, 1)
    td = nonorth.tdm2(cb, ck)
    assert np.allclose(td.gamma1, ck @ cb.conj().T, atol=1e-14)
    assert np.array_equal(td.gamma2, np.zeros((4,) * 4))


def test_pair_energy_of_closed_shell_determinant(h2):
    ham, _ = h2
    c = np.eye(4)[:, :2]
    td = nonorth.tdm2(c, c)
    occ = range(2)
    expected = 0.5 * sum(ham.g[a, b, a, b] for a in occ for b in occ)
    assert nonorth.two_body_value(td, ham.g) == pytest.approx(expected, abs=1e-13)
    total = nonorth.hamiltonian_element(ham, c, c)
    assert total == pytest.approx(ecwhf.hf_energy(ham, c @ c.T), abs=1e-13)


def test_overlap_operator_counts_electrons():
    rng = np.random.default_rng(4)
    m, n = 6, 3
    x = rng.normal(size=(m, m))
    s = x @ x.T + m * np.eye(m)
    c = random_orbitals(rng, m, n, complex_=False)
    c = c @ np.linalg.inv(np.linalg.cholesky(c.T @ s @ c)).T
    td = nonorth.tdm1(c, c, s)
    assert nonorth.observable(td, s) == pytest.approx(n, abs=1e-12)
    assert nonorth.observable(td, np.zeros((m, m))) == 0.0


def test_fixture_dipole_matches_ci_expectation(heh):
    ham, props = heh
    states, _ = ecwhf.scf_solve(ham, props, None, 1)
    c = states[0].c
    dip = {p.id: p for p in props}["dipole_z"].a
    v = detspace.slater_to_ci(c, detspace.DetSpace.full(4, 2))
    assert nonorth.observable(nonorth.tdm1(c, c), dip) == pytest.approx(detspace.expectation(dip, v, v), abs=1e-10)


@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 4), extra=st.integers(0, 4),
       deficiency=st.integers(0, 2))
def test_densities_match_second_quantization(seed, n, extra, deficiency):
    rng = np.random.default_rng(seed)
    m = n + extra
    k = min(deficiency, n, m - n)
    cb, ck = deficient_pair(rng, m, n, k)
    b, kv = fock_pair(cb, ck)
    td = nonorth.tdm2(cb, ck)
    assert np.allclose(td.gamma1, oracles.rdm1(b, kv, m), atol=1e-10)
    assert np.allclose(td.gamma2, oracles.rdm2(b, kv, m), atol=1e-10)


@given(seed=st.integers(0, 2 ** 32 - 1))
def test_conjugation_symmetry(seed):
    rng = np.random.default_rng(seed)
    cb, ck = random_orbitals(rng, 6, 3), random_orbitals(rng, 6, 3)
    a = nonorth.tdm2(cb, ck)
    b = nonorth.tdm2(ck, cb)
    assert np.allclose(a.gamma1, b.gamma1.conj().T, atol=1e-10)
    assert np.allclose(a.gamma2, b.gamma2.transpose(2, 3, 0, 1).conj(), atol=1e-10)
    assert a.det_sigma == pytest.approx(np.conj(b.det_sigma), abs=1e-12)


@pytest.mark.parametrize("phi", [np.pi / 2, np.pi])
def test_phase_covariance(phi):
    rng = np.random.default_rng(5)
    cb, ck = random_orbitals(rng, 6, 3), random_orbitals(rng, 6, 3)
    ref = nonorth.tdm2(cb, ck)
    rotated = ck.copy()
    rotated[:, 0] *= np.exp(1j * phi)
    td = nonorth.tdm2(cb, rotated)
    assert np.allclose(td.gamma1, np.exp(1j * phi) * ref.gamma1, atol=1e-12)
    assert np.allclose(td.gamma2, np.exp(1j * phi) * ref.gamma2, atol=1e-12)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_routes_agree(k):
    rng = np.random.default_rng(6 + k)
    cb, ck = deficient_pair(rng, 7, 3, k)
    sigma = nonorth.pair_overlap(cb, ck).sigma
    svd = nonorth.adjugate(sigma, "svd")
    assert np.allclose(svd, nonorth.adjugate(sigma, "minors"), atol=1e-12)
    assert np.allclose(nonorth.second_cofactors(sigma, "svd"), nonorth.second_cofactors(sigma, "minors"), atol=1e-12)
    if k == 0:
        assert np.allclose(nonorth.adjugate(sigma, "inverse"), svd, atol=1e-12)


def test_rank_deficiency_beyond_two():
    rng = np.random.default_rng(9)
    cb, ck = deficient_pair(rng, 8, 4, 3)
    with pytest.raises(RankDeficiencyError, match="higher-rank deficiency"):
        nonorth.tdm2(cb, ck)
    # the one-particle object alone is still defined (and zero)
    assert np.allclose(nonorth.tdm1(cb, ck).gamma1, 0.0, atol=1e-14)


def test_unknown_route():
    with pytest.raises(NonorthError):
        nonorth.adjugate(np.eye(2), "qr")


def test_non_orthogonal_basis_through_symmetric_transform():
    rng = np.random.default_rng(10)
    m, n = 6, 2
    x = rng.normal(size=(m, m))
    s = x @ x.T + m * np.eye(m)
    half = np.real(sqrtm(s))
    cb, ck = random_orbitals(rng, m, n), random_orbitals(rng, m, n)
    td = nonorth.tdm2(cb, ck, s)
    # in the orthonormal basis X = S^{1/2} the orbitals become S^{1/2} C
    b, k = fock_pair(half @ cb, half @ ck)
    assert td.det_sigma == pytest.approx(np.vdot(b, k), rel=1e-11)
    g_orth = oracles.rdm1(b, k, m)
    a_orth = rng.normal(size=(m, m))
    # the density seen from the orthonormal basis is S^{1/2} gamma S^{1/2}
    lhs = np.einsum("pq,qp->", a_orth, half @ td.gamma1 @ half)
    assert lhs == pytest.approx(np.trace(a_orth @ g_orth), rel=1e-10, abs=1e-10)
