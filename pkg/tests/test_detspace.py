import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from ecw import constraints as cons
from ecw import detspace
from ecw.detspace import CIVector, DetSpace, DetSpaceError, OracleRefusal

# oracle output for the HeH+ dipole sweep (target 0.3 below the FCI value), frozen
SWEEP = [
    (0.01, -0.8570901972407607),
    (0.03, -0.9031334036723438),
    (0.1, -0.9237140287109726),
    (0.3, -0.9301420212734559),
    (1.0, -0.9324548861200007),
    (3.0, -0.9331218842487782),
]
HEH_DIPOLE_FCI = -0.6334564234907174


@pytest.mark.parametrize("m,na,nb,count", [(4, 1, 1, 4), (4, 2, 2, 1), (8, 2, 2, 36), (6, 2, 1, 9)])
def test_enumeration_counts(m, na, nb, count):
    dets = detspace.enumerate_determinants(m, na, nb)
    assert len(dets) == count
    assert dets == sorted(dets)
    assert len(set(dets)) == count


def test_enumeration_rejects_overfull():
    with pytest.raises(DetSpaceError):
        detspace.enumerate_determinants(4, 3, 0)


def test_ladder_signs():
    # a_2 on a+_0 a+_2 |vac> passes one occupied orbital
    assert detspace.annihilate(0b101, 2) == (-1, 0b001)
    assert detspace.annihilate(0b101, 1) is None
    assert detspace.create(0b001, 0) is None
    assert detspace.apply_string(0b011, [(2, True), (0, False)]) == (-1, 0b110)


@given(st.integers(0, 2 ** 32 - 1))
def test_number_operator(seed):
    rng = np.random.default_rng(seed)
    space = DetSpace.sector(6, 2, 1)
    v = CIVector(space, rng.normal(size=space.dim))
    out = detspace.apply_operator(np.eye(6), v)
    assert np.allclose(out.coeffs, 3 * v.coeffs, atol=1e-13)


def test_filled_space_diagonal(h2):
    ham, _ = h2
    space = DetSpace.sector(4, 2, 2)
    v = space.basis_vector(space.dets[0])
    out = detspace.apply_operator(ham, v)
    occ = range(4)
    expected = ham.e_core + sum(ham.h[a, a] for a in occ) + 0.5 * sum(ham.g[a, b, a, b] for a in occ for b in occ)
    assert out.coeffs[0] == pytest.approx(expected, abs=1e-12)
    ((e, _),) = detspace.fci_solve(ham, (2, 2), 1)
    assert e == pytest.approx(expected, abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_operators_match_jordan_wigner(seed):
    rng = np.random.default_rng(seed)
    m = 6
    a = rng.normal(size=(m, m))
    # a spin-mixing operator needs the space of all 3-electron determinants
    space = DetSpace.full(m, 3)
    v = CIVector(space, rng.normal(size=space.dim))
    masks = list(space.dets)
    ref = oracles.fock_one_body(a)[np.ix_(masks, masks)] @ v.coeffs
    assert np.allclose(detspace.apply_operator(a, v).coeffs, ref, atol=1e-12)


def test_hamiltonian_matrix_matches_jordan_wigner(heh):
    ham, _ = heh
    ref, masks = oracles.sector_hamiltonian(ham)
    space = DetSpace.sector(4, 1, 1)
    assert list(space.dets) == masks
    assert np.allclose(detspace.hamiltonian_matrix(ham, space).toarray(), ref, atol=1e-12)


def test_fci_two_routes(h2):
    ham, _ = h2
    e = [x for x, _ in detspace.fci_solve(ham, (1, 1), 4)]
    hmat = detspace.hamiltonian_matrix(ham, DetSpace.sector(4, 1, 1)).toarray()
    assert np.allclose(e, np.sort(np.linalg.eigvals(hmat).real), atol=1e-10)


def test_fci_k_too_large(h2):
    with pytest.raises(DetSpaceError):
        detspace.fci_solve(h2[0], (1, 1), 5)


def test_oracle_refuses_large_space(h6, monkeypatch):
    monkeypatch.setattr(detspace, "MAX_ORACLE_DIM", 10)
    with pytest.raises(OracleRefusal, match="size"):
        detspace.constrained_fci_minimize(h6[0], cons.ConstraintSet(), 1)


def test_single_determinant_density():
    space = DetSpace.sector(6, 2, 1)
    mask = space.dets[3]
    v = space.basis_vector(mask)
    occ = np.array([mask >> p & 1 for p in range(6)], dtype=float)
    assert np.array_equal(detspace.fci_tdm(v, v), np.diag(occ))


@given(st.integers(0, 2 ** 32 - 1))
def test_density_contractions(seed):
    rng = np.random.default_rng(seed)
    space = DetSpace.full(6, 3)
    bra = CIVector(space, rng.normal(size=space.dim))
    ket = CIVector(space, rng.normal(size=space.dim))
    a = rng.normal(size=(6, 6))
    gamma = detspace.fci_tdm(bra, ket)
    assert np.trace(a @ gamma) == pytest.approx(bra.coeffs @ detspace.apply_operator(a, ket).coeffs, abs=1e-12)
    unit = CIVector(space, ket.coeffs / np.linalg.norm(ket.coeffs))
    assert np.trace(detspace.fci_tdm(unit, unit)) == pytest.approx(3.0, abs=1e-12)


def test_tdm2_matches_jordan_wigner():
    rng = np.random.default_rng(7)
    space = DetSpace.sector(6, 2, 1)
    bra = CIVector(space, rng.normal(size=space.dim))
    ket = CIVector(space, rng.normal(size=space.dim))
    full_b, full_k = np.zeros(64), np.zeros(64)
    full_b[list(space.dets)] = bra.coeffs
    full_k[list(space.dets)] = ket.coeffs
    assert np.allclose(detspace.fci_tdm2(bra, ket), oracles.rdm2(full_b, full_k, 6), atol=1e-12)


def test_fci_energy_is_rotation_invariant(heh):
    ham, _ = heh
    rng = np.random.default_rng(3)
    from scipy.linalg import expm
    k = rng.normal(size=(2, 2))
    u_sp = expm(k - k.T)
    u = np.kron(u_sp, np.eye(2))
    g = np.einsum("pqrs,pi,qj,rk,sl->ijkl", ham.g, u, u, u, u)
    rotated = type(ham)(u.T @ ham.h @ u, g, ham.e_core, ham.s, ham.n_alpha, ham.n_beta)
    e0 = [x for x, _ in detspace.fci_solve(ham, (1, 1), 4)]
    e1 = [x for x, _ in detspace.fci_solve(rotated, (1, 1), 4)]
    assert np.allclose(e0, e1, atol=1e-12)


def test_empty_constraints_reproduce_fci(h2):
    ham, props = h2
    res = detspace.constrained_fci_minimize(ham, cons.ConstraintSet(), 3, props)
    ref = detspace.fci_solve(ham, (1, 1), 3)
    assert res.converged and res.q == 0.0
    assert np.allclose(res.energies, [e for e, _ in ref], atol=1e-8)
    for v, (_, w) in zip(res.vectors, ref):
        assert abs(abs(v.coeffs @ w.coeffs) - 1.0) < 1e-10


def test_exact_datum_leaves_ground_state(heh):
    ham, props = heh
    ((e0, _),) = detspace.fci_solve(ham, (1, 1), 1)
    for lam in (0.1, 10.0):
        cs = cons.ConstraintSet((cons.ExperimentalDatum("dipole_z", 0, 0, HEH_DIPOLE_FCI, 0.05, weight=lam),))
        res = detspace.constrained_fci_minimize(ham, cs, 1, props)
        assert res.converged
        assert res.q < 1e-20
        assert res.energies[0] == pytest.approx(e0, abs=1e-10)


def test_displaced_dipole_sweep(heh):
    ham, props = heh
    target = HEH_DIPOLE_FCI - 0.3
    values = []
    for lam, frozen in SWEEP:
        cs = cons.ConstraintSet((cons.ExperimentalDatum("dipole_z", 0, 0, target, 0.1, weight=lam),))
        res = detspace.constrained_fci_minimize(ham, cs, 1, props)
        assert res.converged
        y = res.observables["dipole_z[0,0]"]
        assert y == pytest.approx(frozen, abs=1e-8)
        values.append(y)
    dist = [abs(y - target) for y in [HEH_DIPOLE_FCI] + values]
    assert all(b < a for a, b in zip(dist, dist[1:]))


def test_descent_agrees_with_root(heh):
    ham, props = heh
    cs = cons.ConstraintSet((cons.ExperimentalDatum("dipole_z", 0, 0, HEH_DIPOLE_FCI - 0.3, 0.1, weight=0.1),))
    a = detspace.constrained_fci_minimize(ham, cs, 1, props)
    b = detspace.constrained_fci_minimize(ham, cs, 1, props, {"method": "descent", "tol": 1e-8})
    assert b.converged
    assert a.q == pytest.approx(b.q, abs=1e-8)
    assert a.energies[0] == pytest.approx(b.energies[0], abs=1e-8)


def test_slater_expansion_overlap():
    rng = np.random.default_rng(11)
    c = np.linalg.qr(rng.normal(size=(6, 3)))[0]
    v = detspace.slater_to_ci(c)
    assert np.linalg.norm(v.coeffs) == pytest.approx(1.0, abs=1e-12)
    full = np.zeros(64)
    full[list(v.space.dets)] = v.coeffs
    assert np.allclose(full, oracles.slater_fock_vector(c), atol=1e-12)


def test_hf_minimize_is_variational(heh):
    ham, _ = heh
    e_hf, c, _ = detspace.hf_minimize(ham)
    ((e_fci, _),) = detspace.fci_solve(ham, (1, 1), 1)
    assert e_hf > e_fci
    psi = oracles.slater_fock_vector(c)
    assert psi @ oracles.fock_hamiltonian(ham) @ psi == pytest.approx(e_hf, abs=1e-10)


def test_small_weight_solve_without_bisection(h2):
    # an expectation plus an intensity on three states: MINPACK's hybrid method alone stalls here
    ham, props = h2
    cs = cons.ConstraintSet((
        cons.ExperimentalDatum("dipole_z", 0, 0, -1.3982903616373379, 0.1),
        cons.ExperimentalDatum("dipole_z", 0, 2, 1.4132661017043366, 0.1, mode="intensity")))
    res = detspace.constrained_fci_minimize(ham, cs.scaled(1e-6), 3, props, {"bisect": 0})
    assert res.converged
    assert res.gradient_norm < 1e-9
    fci = [e for e, _ in detspace.fci_solve(ham, (1, 1), 3)]
    assert np.allclose(res.energies, fci, atol=1e-6)
