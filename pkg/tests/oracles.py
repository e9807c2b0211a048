"""Independent Fock-space reference built from Jordan-Wigner matrices.

Nothing here touches the package's determinant code.  The Fock-space index
of a basis state equals its occupation bit mask, so results can be compared
entry by entry with the package's determinant ordering.
"""
from functools import lru_cache

import numpy as np

_LOWER = np.array([[0.0, 1.0], [0.0, 0.0]])   # |1> -> |0>
_Z = np.diag([1.0, -1.0])
_I = np.eye(2)


@lru_cache(maxsize=None)
def annihilators(m):
    """Dense a_p for p = 0..m-1 on the 2**m dimensional Fock space."""
    ops = []
    for p in range(m):
        mat = np.ones((1, 1))
        # kron places the last factor on bit 0
        for q in reversed(range(m)):
            f = _LOWER if q == p else (_Z if q < p else _I)
            mat = np.kron(mat, f)
        ops.append(mat)
    return tuple(ops)


def fock_hamiltonian(ham):
    m = ham.n_spin_orbitals
    a = annihilators(m)
    ad = [x.T for x in a]
    dim = 2 ** m
    out = ham.e_core * np.eye(dim)
    for p in range(m):
        for q in range(m):
            if ham.h[p, q] != 0:
                out = out + ham.h[p, q] * ad[p] @ a[q]
    for p in range(m):
        for q in range(m):
            pq = ad[p] @ ad[q]
            for r in range(m):
                for s in range(m):
                    if ham.g[p, q, r, s] != 0:
                        out = out + 0.25 * ham.g[p, q, r, s] * pq @ a[s] @ a[r]
    return out


def fock_one_body(a_mat):
    m = a_mat.shape[0]
    a = annihilators(m)
    out = np.zeros((2 ** m, 2 ** m), dtype=np.result_type(a_mat, float))
    for p in range(m):
        for q in range(m):
            if a_mat[p, q] != 0:
                out = out + a_mat[p, q] * a[p].T @ a[q]
    return out


def sector_masks(m, n_alpha, n_beta):
    out = []
    for mask in range(2 ** m):
        na = sum(mask >> p & 1 for p in range(0, m, 2))
        nb = sum(mask >> p & 1 for p in range(1, m, 2))
        if na == n_alpha and nb == n_beta:
            out.append(mask)
    return out


def sector_hamiltonian(ham):
    masks = sector_masks(ham.n_spin_orbitals, ham.n_alpha, ham.n_beta)
    full = fock_hamiltonian(ham)
    return full[np.ix_(masks, masks)], masks


def slater_fock_vector(c):
    """prod_i (sum_p c[p, i] a+_p) |vac> as a Fock-space vector (first column acts last)."""
    c = np.asarray(c)
    m, n = c.shape
    a = annihilators(m)
    v = np.zeros(2 ** m, dtype=np.result_type(c, float))
    v[0] = 1.0
    for i in reversed(range(n)):
        create = sum(c[p, i] * a[p].T for p in range(m))
        v = create @ v
    return v


def rdm1(bra, ket, m):
    """gamma[p, q] = <bra| a+_q a_p |ket>."""
    a = annihilators(m)
    ka = np.array([x @ ket for x in a])
    ba = np.array([x @ bra for x in a])
    return np.einsum("qi,pi->pq", ba.conj(), ka)


def rdm2(bra, ket, m):
    """gamma2[p, q, r, s] = <bra| a+_r a+_s a_q a_p |ket>."""
    a = annihilators(m)
    kk = np.array([[a[q] @ (a[p] @ ket) for q in range(m)] for p in range(m)])
    bb = np.array([[a[s] @ (a[r] @ bra) for s in range(m)] for r in range(m)])
    return np.einsum("rsi,pqi->pqrs", bb.conj(), kk)


def random_antisymmetric_g(rng, m, complex_=False):
    g = rng.normal(size=(m,) * 4)
    if complex_:
        g = g + 1j * rng.normal(size=(m,) * 4)
    g = g - g.transpose(1, 0, 2, 3)
    return g - g.transpose(0, 1, 3, 2)
