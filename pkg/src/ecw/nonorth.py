"""Overlaps and transition densities between non-orthogonal Slater determinants.

For a bra determinant with occupied coefficients ``Cb`` and a ket with
``Ck`` the occupied overlap matrix is ``sigma = Cb^H S Ck`` and the
many-body overlap is its determinant.

Index conventions (shared with :mod:`ecw.detspace`)::

    gamma1[p, q]       = <bra| a+_q a_p |ket>
    gamma2[p, q, r, s] = <bra| a+_r a+_s a_q a_p |ket>

so a one-body observable is ``trace(A @ gamma1)`` and a two-body one is
``1/4 sum g[p,q,r,s] gamma2[r,s,p,q]``.  In the occupied basis the
one-particle object is the adjugate of sigma, ``adj[a, b] = det(sigma) *
inv(sigma)[a, b]`` (ket index first), and the two-particle one is the
second-order analogue built from 2x2 minors of the inverse.  When sigma
is singular both are evaluated from its SVD, which stays exact for any
number of vanishing singular values (the first-order object dies beyond
one zero, the second-order one beyond two).
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

MAX_GAMMA2_M = 12
INVERSE_RCOND = 1e-6
ZERO_SV = 1e-10


class NonorthError(ValueError):
    pass


class RankDeficiencyError(NonorthError):
    """More than two vanishing singular values while second cofactors were requested."""


@dataclass(frozen=True)
class SlaterState:
    c: np.ndarray
    eps: Optional[np.ndarray] = None
    state_index: int = 0

    @property
    def n_orbitals(self):
        return self.c.shape[0]

    @property
    def n_occupied(self):
        return self.c.shape[1]

    def orthonormality_error(self, s=None):
        s = np.eye(self.n_orbitals) if s is None else s
        return float(np.abs(self.c.conj().T @ s @ self.c - np.eye(self.n_occupied)).max(initial=0.0))

    def check(self, s=None, tol=1e-10):
        err = self.orthonormality_error(s)
        if err > tol:
            raise NonorthError(f"occupied orbitals of state {self.state_index} are not "
                               f"orthonormal (error {err:.2e})")
        return self


@dataclass(frozen=True)
class PairOverlap:
    sigma: np.ndarray
    det_sigma: complex
    bra_index: int
    ket_index: int


@dataclass(frozen=True)
class TransitionDensity:
    gamma1: np.ndarray
    pair: tuple                       # (bra, ket)
    det_sigma: complex = 1.0
    gamma2: Optional[np.ndarray] = None
    route: str = ""


def _coeffs(x):
    return np.asarray(getattr(x, "c", x))


def _index(x, default):
    return getattr(x, "state_index", default)


def pair_overlap(bra, ket, s=None) -> PairOverlap:
    cb, ck = _coeffs(bra), _coeffs(ket)
    if cb.shape != ck.shape:
        raise NonorthError(f"bra {cb.shape} and ket {ck.shape} shapes differ")
    m = cb.shape[0]
    s = np.eye(m) if s is None else np.asarray(s)
    if s.shape != (m, m):
        raise NonorthError("overlap matrix does not match the orbital dimension")
    sigma = cb.conj().T @ s @ ck
    # numpy's det goes through LU with partial pivoting; N=0 gives 1
    det = np.linalg.det(sigma) if sigma.size else 1.0
    return PairOverlap(sigma, det, _index(bra, 0), _index(ket, 1))


# -- occupied-basis cofactors ---------------------------------------------

def _svd_parts(sigma):
    u, sv, vh = np.linalg.svd(sigma)
    phase = np.linalg.det(u) * np.linalg.det(vh)
    return u, sv, vh.conj().T, phase


def _products_without(sv, k):
    """prod_{j not in k} sv[j] for every single index or pair in ``k``."""
    return np.prod(np.delete(sv, k))


def adjugate(sigma, route="auto"):
    """adj[a, b] = det(sigma) inv(sigma)[a, b], any rank."""
    n = sigma.shape[0]
    if n == 0:
        return np.zeros((0, 0), dtype=sigma.dtype)
    route = _choose(sigma, route)
    if route == "inverse":
        return np.linalg.det(sigma) * np.linalg.inv(sigma)
    if route == "minors":
        adj = np.empty_like(sigma, dtype=np.result_type(sigma, float))
        for a in range(n):
            for b in range(n):
                minor = np.delete(np.delete(sigma, b, axis=0), a, axis=1)
                adj[a, b] = (-1) ** (a + b) * (np.linalg.det(minor) if minor.size else 1.0)
        return adj
    u, sv, v, phase = _svd_parts(sigma)
    w = np.array([_products_without(sv, [k]) for k in range(n)])
    return phase * (v * w) @ u.conj().T


def second_cofactors(sigma, route="auto"):
    """D[a, b, a2, b2] = det(sigma) (inv[a,a2] inv[b,b2] - inv[a,b2] inv[b,a2]), any rank <= 2 deficiency."""
    n = sigma.shape[0]
    dtype = np.result_type(sigma, float)
    if n < 2:
        return np.zeros((n,) * 4, dtype=dtype)
    route = _choose(sigma, route, second=True)
    if route == "inverse":
        inv = np.linalg.inv(sigma)
        return np.linalg.det(sigma) * (np.einsum("ac,bd->abcd", inv, inv)
                                       - np.einsum("ad,bc->abcd", inv, inv))
    if route == "minors":
        out = np.zeros((n,) * 4, dtype=dtype)
        for a, b in combinations(range(n), 2):
            for a2, b2 in combinations(range(n), 2):
                minor = np.delete(np.delete(sigma, [a2, b2], axis=0), [a, b], axis=1)
                val = (-1) ** (a + b + a2 + b2) * (np.linalg.det(minor) if minor.size else 1.0)
                out[a, b, a2, b2] = val
                out[b, a, a2, b2] = -val
                out[a, b, b2, a2] = -val
                out[b, a, b2, a2] = val
        return out
    u, sv, v, phase = _svd_parts(sigma)
    p = np.zeros((n, n))
    for k, l in combinations(range(n), 2):
        p[k, l] = p[l, k] = _products_without(sv, [k, l])
    eye = np.eye(n)
    core = p[:, :, None, None] * (np.einsum("kc,ld->klcd", eye, eye) - np.einsum("kd,lc->klcd", eye, eye))
    uc = u.conj()
    return phase * np.einsum("ak,bl,klcd,xc,yd->abxy", v, v, core, uc, uc, optimize=True)


def _choose(sigma, route, second=False):
    if route != "auto":
        if route not in ("inverse", "svd", "minors"):
            raise NonorthError(f"unknown cofactor route {route!r}")
        return route
    sv = np.linalg.svd(sigma, compute_uv=False)
    if sv[-1] > INVERSE_RCOND * max(sv[0], 1.0):
        return "inverse"
    return "svd"


def _check_deficiency(sigma):
    sv = np.linalg.svd(sigma, compute_uv=False) if sigma.size else np.zeros(0)
    zeros = int(np.sum(sv < ZERO_SV * max(1.0, sv[0] if sv.size else 1.0)))
    if zeros > 2:
        raise RankDeficiencyError(f"higher-rank deficiency: {zeros} vanishing singular values of sigma")


# -- common-basis densities --------------------------------------------

def tdm1(bra, ket, s=None, route="auto") -> TransitionDensity:
    """One-particle transition density gamma1[p, q] = <bra|a+_q a_p|ket>."""
    ov = pair_overlap(bra, ket, s)
    cb, ck = _coeffs(bra), _coeffs(ket)
    sigma = ov.sigma
    used = _choose(sigma, route) if sigma.size else "trivial"
    adj = adjugate(sigma, used if sigma.size else "auto")
    gamma1 = ck @ adj @ cb.conj().T
    return TransitionDensity(gamma1, (ov.bra_index, ov.ket_index), ov.det_sigma, None, used)


def tdm2(bra, ket, s=None, route="auto") -> TransitionDensity:
    """One- and two-particle transition densities.

    gamma2[p, q, r, s] = <bra| a+_r a+_s a_q a_p |ket>; stored densely, so
    at most ``MAX_GAMMA2_M`` spin-orbitals are accepted.
    """
    cb, ck = _coeffs(bra), _coeffs(ket)
    m = cb.shape[0]
    if m > MAX_GAMMA2_M:
        raise NonorthError(f"dense gamma2 refused for M={m} > {MAX_GAMMA2_M}")
    one = tdm1(bra, ket, s, route)
    sigma = pair_overlap(bra, ket, s).sigma
    _check_deficiency(sigma)
    d2 = second_cofactors(sigma, route)
    cbc = cb.conj()
    gamma2 = np.einsum("pa,qb,abcd,rc,sd->pqrs", ck, ck, d2, cbc, cbc, optimize=True)
    return TransitionDensity(one.gamma1, one.pair, one.det_sigma, gamma2, one.route)


def observable(td: TransitionDensity, a) -> complex:
    """sum_{pq} A[p, q] gamma1[q, p], i.e. <bra|A|ket>."""
    a = np.asarray(getattr(a, "a", a))
    if a.shape != td.gamma1.shape:
        raise NonorthError(f"operator {a.shape} vs density {td.gamma1.shape}")
    val = np.einsum("pq,qp->", a, td.gamma1)
    return val.item() if np.iscomplexobj(val) and val.imag != 0 else float(np.real(val))


def two_body_value(td: TransitionDensity, g) -> complex:
    """1/4 sum g[p,q,r,s] gamma2[r,s,p,q] = <bra| G |ket> for antisymmetrized g."""
    if td.gamma2 is None:
        raise NonorthError("transition density carries no gamma2")
    val = 0.25 * np.einsum("pqrs,rspq->", np.asarray(g), td.gamma2)
    return val.item() if np.iscomplexobj(val) and val.imag != 0 else float(np.real(val))


def hamiltonian_element(ham, bra, ket, route="auto"):
    """<bra|H|ket> between two non-orthogonal determinants."""
    td = tdm2(bra, ket, ham.s, route)
    return ham.e_core * td.det_sigma + observable(td, ham.h) + two_body_value(td, ham.g)
