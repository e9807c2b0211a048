"""Coupled cluster and EOM with experimental constraints, in an exact determinant space.

All operators act on CI vectors of one (n_alpha, n_beta) sector expressed
in the reference molecular-orbital basis.  Excitation operators are sparse
matrices, e^{+-T} is the terminating power series, and similarity
transformed quantities are obtained by composition.  Nothing here is
diagrammatic, so every equation can be checked on its own.

Orbital labels follow the code convention: ``i, j`` occupied and ``a, b``
virtual in the reference determinant.

    T1 = sum t1[i, a] a+_a a_i
    T2 = 1/4 sum t2[i, j, a, b] a+_a a+_b a_j a_i

The left operators use the adjoint strings with the same index layout.
Within the projected space spanned by ``e_0 = |ref>`` and
``e_nu = tau_nu |ref>`` an EOM vector R(n)|ref> is just a coefficient
vector, and so is <ref|L(n).  The EOM vectors in this module store them that way.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from ecw import constraints as cons
from ecw import detspace
from ecw.integrals_io import Hamiltonian, SolveReport

log = logging.getLogger(__name__)

MAX_CC_DIM = 10_000
DENSE_DIM = 1500          # below this many determinants operators are stored densely
CONVENTIONS = ("consistent", "printed")


class CcError(ValueError):
    pass


@dataclass(frozen=True)
class CcConfig:
    tol: float = 1e-9
    max_outer: int = 300
    max_inner: int = 100
    level_shift: float = 0.0
    root_overlap_min: float = 0.5
    damping: float = 0.0
    diis_depth: int = 8
    convention: str = "consistent"
    schedule: tuple = (1.0,)
    max_step: float = 0.05
    bisect: int = 6

    def __post_init__(self):
        if self.tol <= 0 or self.max_outer < 1 or self.max_inner < 1:
            raise CcError("cc.tol must be positive and iteration limits at least 1")
        if not 0.0 <= self.damping < 1.0:
            raise CcError("cc.damping must lie in [0, 1)")
        if self.convention not in CONVENTIONS:
            raise CcError(f"unknown sign convention {self.convention!r}")
        if not 0.0 <= self.root_overlap_min <= 1.0:
            raise CcError("cc.root_overlap_min must lie in [0, 1]")
        object.__setattr__(self, "schedule", tuple(float(x) for x in self.schedule) or (1.0,))

    @classmethod
    def from_dict(cls, d, schedule=None):
        known = {k: v for k, v in (d or {}).items() if k in cls.__dataclass_fields__}
        if schedule is not None:
            known["schedule"] = tuple(schedule)
        unknown = set(d or {}) - set(known)
        if unknown:
            raise CcError(f"unknown cc config keys: {sorted(unknown)}")
        return cls(**known)


# -- amplitudes ---------------------------------------------------------------

@dataclass(frozen=True)
class Amplitudes:
    t1: np.ndarray
    t2: np.ndarray
    occ: tuple
    vir: tuple
    truncation: str = "CCSD"

    @classmethod
    def zeros(cls, occ, vir):
        no, nv = len(occ), len(vir)
        return cls(np.zeros((no, nv)), np.zeros((no, no, nv, nv)), tuple(occ), tuple(vir))

    def antisymmetry_error(self):
        t2 = self.t2
        return float(max(np.abs(t2 + t2.transpose(1, 0, 2, 3)).max(initial=0.0),
                         np.abs(t2 + t2.transpose(0, 1, 3, 2)).max(initial=0.0)))


@dataclass(frozen=True)
class LambdaAmplitudes:
    l1: np.ndarray
    l2: np.ndarray
    occ: tuple
    vir: tuple


@dataclass
class EomVector:
    """Scalar part (r0 or l0), singles and doubles of one R(n) or L(n)."""
    c0: float
    c1: np.ndarray
    c2: np.ndarray
    state_index: int
    energy: float
    side: str = "R"


@dataclass(frozen=True)
class MoBasis:
    """Reference orbitals and every operator expressed in them."""
    c: np.ndarray            # AO spin-orbital -> MO spin-orbital, interleaved alpha/beta
    eps: np.ndarray          # diagonal of the reference Fock matrix in the MO basis
    ham: Hamiltonian         # MO-basis Hamiltonian (orthonormal)
    props: dict              # property id -> MO-basis matrix
    reference: int           # bit mask of the reference determinant


@dataclass
class CcState:
    mo: MoBasis
    amp: Amplitudes
    lam: LambdaAmplitudes
    eom: list                # [(R(n), L(n))] for n = 1..N-1
    e0: float
    vectors: list = field(default_factory=list)   # projected (r_n, l_n) incl. n = 0

    @property
    def energies(self):
        return [self.e0] + [r.energy for r, _ in self.eom]


# -- the excitation manifold --------------------------------------------------

def _spin(p):
    return p % 2


class Manifold:
    """Singles and doubles out of one reference, with their sparse matrices.

    ``basis`` is the (1 + n_ex) x dim sparse map whose rows are e_0 and
    e_nu = tau_nu |ref>, so that coefficient vectors in the projected space
    become CI vectors through ``basis.T``.
    """

    def __init__(self, space, reference):
        if space.dim > MAX_CC_DIM:
            raise CcError(f"determinant space of size {space.dim} exceeds {MAX_CC_DIM}")
        if reference not in space.index:
            raise CcError("reference determinant is not in the space")
        self.space = space
        self.reference = reference
        self.occ = tuple(detspace.occupied(reference))
        self.vir = tuple(p for p in range(space.m) if not reference >> p & 1)
        self.singles = [(i, a) for i in self.occ for a in self.vir if _spin(i) == _spin(a)]
        self.doubles = [(i, j, a, b) for i, j in combinations(self.occ, 2)
                        for a, b in combinations(self.vir, 2)
                        if _spin(i) + _spin(j) == _spin(a) + _spin(b)]
        self.labels = [("S",) + x for x in self.singles] + [("D",) + x for x in self.doubles]
        rows, cols, vals, owner = [], [], [], []
        signs, dets = [], []
        for k, lab in enumerate(self.labels):
            mat = detspace.string_matrix(self._ops(lab), space).tocoo()
            rows.append(mat.row)
            cols.append(mat.col)
            vals.append(mat.data)
            owner.append(np.full(mat.nnz, k))
            res = detspace.apply_string(reference, self._ops(lab))
            signs.append(res[0])
            dets.append(space.index[res[1]])
        cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0))
        self._rows = cat(rows).astype(int)
        self._cols = cat(cols).astype(int)
        self._vals = cat(vals)
        self._owner = cat(owner).astype(int)
        d = 1 + len(self.labels)
        self.basis = sp.csr_matrix(
            (np.array([1.0] + [float(s) for s in signs]),
             (np.arange(d), np.array([space.index[reference]] + dets))), shape=(d, space.dim))
        self._pos_o = {p: k for k, p in enumerate(self.occ)}
        self._pos_v = {p: k for k, p in enumerate(self.vir)}
        self.max_level = min(len(self.occ), len(self.vir))
        self.dense = space.dim <= DENSE_DIM

    @staticmethod
    def _ops(lab):
        if lab[0] == "S":
            _, i, a = lab
            return [(a, True), (i, False)]
        _, i, j, a, b = lab
        return [(a, True), (b, True), (j, False), (i, False)]

    @property
    def n_ex(self):
        return len(self.labels)

    @property
    def dim(self):
        return 1 + self.n_ex

    def operator(self, x, adjoint=False):
        """sum_nu x_nu tau_nu (or its adjoint), dense for small spaces."""
        x = np.asarray(x)
        vals = self._vals * x[self._owner]
        if adjoint:
            vals = vals.conj()
            r, c = self._cols, self._rows
        else:
            r, c = self._rows, self._cols
        n = self.space.dim
        if self.dense:
            out = np.zeros((n, n), dtype=vals.dtype)
            np.add.at(out, (r, c), vals)
            return out
        return sp.csr_matrix((vals, (r, c)), shape=(n, n))

    # packing between amplitude arrays and manifold vectors

    def pack(self, a1, a2):
        x = np.zeros(self.n_ex, dtype=np.result_type(a1, a2, float))
        po, pv = self._pos_o, self._pos_v
        for k, lab in enumerate(self.labels):
            if lab[0] == "S":
                x[k] = a1[po[lab[1]], pv[lab[2]]]
            else:
                x[k] = a2[po[lab[1]], po[lab[2]], pv[lab[3]], pv[lab[4]]]
        return x

    def unpack(self, x):
        no, nv = len(self.occ), len(self.vir)
        a1 = np.zeros((no, nv), dtype=np.result_type(x, float))
        a2 = np.zeros((no, no, nv, nv), dtype=a1.dtype)
        po, pv = self._pos_o, self._pos_v
        for k, lab in enumerate(self.labels):
            if lab[0] == "S":
                a1[po[lab[1]], pv[lab[2]]] = x[k]
            else:
                i, j, a, b = po[lab[1]], po[lab[2]], pv[lab[3]], pv[lab[4]]
                a2[i, j, a, b] = a2[j, i, b, a] = x[k]
                a2[j, i, a, b] = a2[i, j, b, a] = -x[k]
        return a1, a2

    def amplitudes(self, x):
        t1, t2 = self.unpack(x)
        return Amplitudes(t1, t2, self.occ, self.vir)

    def denominators(self, eps, shift=0.0):
        out = np.empty(self.n_ex)
        for k, lab in enumerate(self.labels):
            if lab[0] == "S":
                out[k] = eps[lab[2]] - eps[lab[1]]
            else:
                out[k] = eps[lab[3]] + eps[lab[4]] - eps[lab[1]] - eps[lab[2]]
        out = out + shift
        # guard against (near) degenerate denominators
        return np.where(np.abs(out) < 1e-8, 1.0, out)


_MANIFOLDS = {}


def manifold_for(space, reference):
    key = (space.m, space.dets, reference)
    if key not in _MANIFOLDS:
        if len(_MANIFOLDS) > 16:
            _MANIFOLDS.clear()
        _MANIFOLDS[key] = Manifold(space, reference)
    return _MANIFOLDS[key]


def _amp_manifold(amp, space):
    ref = sum(1 << p for p in amp.occ)
    man = manifold_for(space, ref)
    if man.vir != tuple(amp.vir):
        raise CcError("amplitude orbital split does not match the space")
    return man


# -- e^T and friends ------------------------------------------------------

def _series(tmat, v, sign, max_terms):
    """e^{sign T} v by the power series; T is nilpotent so it terminates."""
    out = np.array(v, dtype=np.result_type(v, tmat.dtype, float), copy=True)
    term = out
    # runaway trial amplitudes may overflow; the caller rejects them via the error below
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, max_terms + 2):
            term = (tmat @ term) * (sign / k)
            if not np.any(term):
                return out
            out = out + term
        if np.any(tmat @ term) or not np.all(np.isfinite(out)):
            raise CcError("excitation series did not terminate")
    return out


def apply_T(amp: Amplitudes, v) -> detspace.CIVector:
    man = _amp_manifold(amp, v.space)
    t = man.operator(man.pack(amp.t1, amp.t2))
    return detspace.CIVector(v.space, t @ v.coeffs)


def apply_expT(amp: Amplitudes, v) -> detspace.CIVector:
    man = _amp_manifold(amp, v.space)
    t = man.operator(man.pack(amp.t1, amp.t2))
    return detspace.CIVector(v.space, _series(t, v.coeffs, 1.0, man.max_level))


def apply_expT_inv(amp: Amplitudes, v) -> detspace.CIVector:
    man = _amp_manifold(amp, v.space)
    t = man.operator(man.pack(amp.t1, amp.t2))
    return detspace.CIVector(v.space, _series(t, v.coeffs, -1.0, man.max_level))


class Similarity:
    """e^{-T} O e^{T} restricted to the projected space, for fixed T."""

    def __init__(self, man: Manifold, x):
        self.man = man
        self.x = np.asarray(x)
        self.t = man.operator(self.x)
        self.tt = self.t.T.conj()
        if sp.issparse(self.tt):
            self.tt = self.tt.tocsr()
        self._ket = None
        self._bra = None

    def ket_block(self):
        """e^{T} basis^T as a dense dim x d block."""
        if self._ket is None:
            self._ket = _series(self.t, self.man.basis.T.toarray(), 1.0, self.man.max_level)
        return self._ket

    def bra_block(self):
        """(e^{-T})^H basis^T, i.e. the rows <e_mu| e^{-T} stored as columns."""
        if self._bra is None:
            self._bra = _series(self.tt, self.man.basis.T.toarray(), -1.0, self.man.max_level)
        return self._bra

    def matrix(self, op):
        """Dense d x d matrix <e_mu| e^{-T} op e^{T} |e_nu>."""
        return self.bra_block().conj().T @ (op @ self.ket_block())

    def ket(self, r):
        return _series(self.t, self.man.basis.T @ r, 1.0, self.man.max_level)

    def bra(self, l):
        """Coefficients b with <b| = <ref|L e^{-T} for the projected left vector l."""
        return _series(self.tt, self.man.basis.T @ np.conj(l), -1.0, self.man.max_level)

    def column0(self, op):
        """<e_mu| e^{-T} op e^{T} |ref> for all mu."""
        return self.project(op @ self.ket(_unit(self.man.dim)))

    def project(self, w):
        """<e_mu| e^{-T} w for a full-space vector w."""
        return self.man.basis @ _series(self.t, w, -1.0, self.man.max_level)


def _unit(d, k=0):
    e = np.zeros(d)
    e[k] = 1.0
    return e


# -- reference basis ------------------------------------------------------

def _transform(ham, c):
    cc = c.conj()
    h = cc.T @ ham.h @ c
    g = np.einsum("pqrs,pi,qj,rk,sl->ijkl", ham.g, cc, cc, c, c, optimize=True)
    return Hamiltonian(h, g, ham.e_core, np.eye(c.shape[1]), ham.n_alpha, ham.n_beta)


def _prop_matrices(properties):
    if isinstance(properties, dict):
        return {k: np.asarray(getattr(v, "a", v)) for k, v in properties.items()}
    return {p.id: np.asarray(p.a) for p in properties}


def mo_basis(ham, properties=(), orbitals=None):
    """Reference MO basis from an unconstrained HF solution (or given orbitals).

    ``orbitals`` is an M x M matrix of spin-pure columns, occupied first.
    Columns are re-ordered so that spatial MO k gives spin-orbitals 2k and
    2k+1 and the reference occupies the lowest n_alpha / n_beta of each spin.
    """
    from ecw import ecwhf

    props = _prop_matrices(properties)
    n = ham.n_electrons
    if orbitals is None:
        states, rep = ecwhf.scf_solve(ham, props, cons.ConstraintSet(), 1,
                                      ecwhf.ScfConfig(occupied_selection="aufbau"))
        if not rep.converged:
            raise CcError("reference Hartree-Fock did not converge")
        orb = ecwhf._orbitals_from_state(ham, states[0])
        c_all = np.hstack([orb.c_occ, orb.c_vir])
    else:
        c_all = np.asarray(orbitals)
    m = c_all.shape[0]
    cols = {0: [], 1: []}
    for k in range(m):
        col = c_all[:, k]
        a, b = np.sum(np.abs(col[0::2]) ** 2), np.sum(np.abs(col[1::2]) ** 2)
        if min(a, b) > 1e-10:
            raise CcError("reference orbitals are not spin-pure")
        cols[0 if b <= 1e-10 else 1].append(k)
    if len(cols[0]) != m // 2 or len(cols[1]) != m // 2:
        raise CcError("reference orbitals do not split evenly into alpha and beta")
    occ_cols = set(range(n))
    nocc = {s: sum(1 for k in cols[s] if k in occ_cols) for s in (0, 1)}
    if (nocc[0], nocc[1]) != (ham.n_alpha, ham.n_beta):
        raise CcError("reference occupation does not match the electron counts")
    c = np.zeros((m, m), dtype=c_all.dtype)
    for s in (0, 1):
        # occupied of this spin first, each group keeps its given order
        ordered = [k for k in cols[s] if k in occ_cols] + [k for k in cols[s] if k not in occ_cols]
        for j, k in enumerate(ordered):
            c[:, 2 * j + s] = c_all[:, k]
    err = np.abs(c.conj().T @ ham.s @ c - np.eye(m)).max()
    if err > 1e-8:
        raise CcError(f"reference orbitals are not orthonormal (error {err:.1e})")
    ham_mo = _transform(ham, c)
    reference = sum(1 << (2 * k) for k in range(ham.n_alpha)) | sum(
        1 << (2 * k + 1) for k in range(ham.n_beta))
    occ = detspace.occupied(reference)
    fock = ham_mo.h + np.einsum("pkqk->pq", ham_mo.g[:, occ][:, :, :, occ])
    mo_props = {k: c.conj().T @ a @ c for k, a in props.items()}
    return MoBasis(c, np.real(np.diag(fock)).copy(), ham_mo, mo_props, reference)


# -- problem context --------------------------------------------------------

class CcContext:
    """Sparse operators of one MO basis, shared by all solver stages."""

    def __init__(self, mo: MoBasis):
        self.mo = mo
        ham = mo.ham
        self.space = detspace.DetSpace.sector(ham.n_spin_orbitals, ham.n_alpha, ham.n_beta)
        self.man = manifold_for(self.space, mo.reference)
        self.dense = self.man.dense
        self.h = self._store(detspace.hamiltonian_matrix(ham, self.space))
        self.props = {k: self._store(detspace.one_body_matrix(a, self.space, tol=1e-12))
                      for k, a in mo.props.items()}
        self.identity = self._store(sp.identity(self.space.dim, format="csr"))

    def _store(self, mat):
        return mat.toarray() if self.dense else mat.tocsr()

    def one_body(self, v):
        return self._store(detspace.one_body_matrix(v, self.space, tol=1e-12))

    def similarity(self, x):
        return Similarity(self.man, x)


@dataclass
class Coupling:
    """Frozen constraint operators for one outer cycle.

    ``v`` maps ordered state pairs to sparse full-space operators.
    ``right`` / ``left`` hold the projected R(m) / L(m) vectors of every
    state (index 0 is the ground state: e_0 and (1, lambda)).
    """
    v: dict
    right: list
    left: list
    sign: float = 1.0


def _empty_coupling(n_states, d):
    return Coupling({}, [_unit(d)] + [None] * (n_states - 1), [_unit(d)] + [None] * (n_states - 1))


# -- ground state -----------------------------------------------------------

def t_residual(ctx: CcContext, x, coupling: Coupling = None):
    """Projected T-equation residual (rows 1..) and the ref row, for amplitudes ``x``.

    Returns ``(residual, e_row)`` where ``e_row`` is <ref| e^{-T}(H + sign V) e^{T}|ref>
    plus the cross-state terms, i.e. the ground-state energy expression.
    """
    sim = ctx.similarity(x)
    ket0 = sim.ket(_unit(ctx.man.dim))
    w = ctx.h @ ket0
    w_v = np.zeros_like(w)
    if coupling is not None:
        if (0, 0) in coupling.v:
            w_v = w_v + coupling.v[(0, 0)] @ ket0
        for (n, m), op in coupling.v.items():
            if n == 0 and m != 0:
                w_v = w_v + op @ sim.ket(coupling.right[m])
    proj_h = sim.project(w)
    proj_v = sim.project(w_v) if np.any(w_v) else np.zeros_like(proj_h)
    sign = coupling.sign if coupling is not None else 1.0
    # the amplitude equations always carry +V; the energy row follows the convention
    return proj_h[1:] + proj_v[1:], float(np.real(proj_h[0] + sign * proj_v[0]))


class _Diis:
    def __init__(self, depth):
        self.depth = depth
        self.xs, self.errs = [], []

    def step(self, x, err):
        if self.depth < 2:
            return x
        self.xs.append(x)
        self.errs.append(err)
        if len(self.xs) > self.depth:
            self.xs.pop(0)
            self.errs.pop(0)
        k = len(self.xs)
        if k < 2:
            return x
        b = -np.ones((k + 1, k + 1))
        b[k, k] = 0.0
        for i in range(k):
            for j in range(k):
                b[i, j] = np.real(np.vdot(self.errs[i], self.errs[j]))
        rhs = np.zeros(k + 1)
        rhs[k] = -1.0
        try:
            coef = np.linalg.solve(b, rhs)[:k]
        except np.linalg.LinAlgError:
            return x
        if not np.all(np.isfinite(coef)):
            return x
        return sum(c * v for c, v in zip(coef, self.xs))


def mp2_guess(ctx: CcContext, cfg: CcConfig = None):
    """First quasi-Newton step from T = 0: second-order amplitudes."""
    cfg = cfg or CcConfig()
    res, _ = t_residual(ctx, np.zeros(ctx.man.n_ex))
    return -res / ctx.man.denominators(ctx.mo.eps, cfg.level_shift)


def solve_T(ctx: CcContext, coupling: Coupling = None, cfg: CcConfig = None, x0=None, tol=None):
    """Quasi-Newton (r / D) iterations with DIIS.

    Returns ``(x, E0, max_residual, iterations, converged, first_residual_norm)``.
    """
    cfg = cfg or CcConfig()
    tol = cfg.tol * 1e-2 if tol is None else tol
    denom = ctx.man.denominators(ctx.mo.eps, cfg.level_shift)
    x = mp2_guess(ctx, cfg) if x0 is None else np.array(x0, dtype=float)
    diis = _Diis(cfg.diis_depth)
    first = None
    res, e0 = t_residual(ctx, x, coupling)
    for it in range(1, 20 * cfg.max_inner + 1):
        rmax = float(np.abs(res).max(initial=0.0))
        if first is None:
            first = float(np.linalg.norm(res))
        if rmax < tol:
            return x, e0, rmax, it - 1, True, first
        x = diis.step(x - res / denom, res / denom)
        res, e0 = t_residual(ctx, x, coupling)
        if not np.all(np.isfinite(res)):
            break
    return x, e0, float(np.abs(res).max(initial=0.0)), it, False, first


def lambda_residual(ctx: CcContext, sim: Similarity, lam, e0, coupling: Coupling = None, hbar=None, vbar=None):
    """<ref|(1+Lambda)(Hbar + sign Vbar00)|nu> + sign sum_m <ref|L(m) Vbar^{m0}|nu> - E0 lambda_nu."""
    hbar = sim.matrix(ctx.h) if hbar is None else hbar
    a, rhs = _lambda_system(ctx, sim, e0, coupling, hbar, vbar)
    return a @ lam - rhs


def _lambda_system(ctx, sim, e0, coupling, hbar, vbar):
    sign = coupling.sign if coupling is not None else 1.0
    a_full = hbar.copy()
    extra = np.zeros(hbar.shape[0], dtype=hbar.dtype)
    if coupling is not None:
        vbar = vbar if vbar is not None else {k: sim.matrix(op) for k, op in coupling.v.items()}
        if (0, 0) in vbar:
            a_full = a_full + sign * vbar[(0, 0)]
        for (m, n), vb in vbar.items():
            if n == 0 and m != 0:
                extra = extra + sign * (coupling.left[m] @ vb)
    # row-vector equation (1, lam) A[:, 1:] + extra[1:] = e0 lam
    a = a_full[1:, 1:].T - e0 * np.eye(a_full.shape[0] - 1)
    rhs = -(a_full[0, 1:] + extra[1:])
    return a, rhs


def solve_Lambda(ctx: CcContext, sim: Similarity, e0, coupling: Coupling = None, hbar=None, vbar=None):
    hbar = sim.matrix(ctx.h) if hbar is None else hbar
    a, rhs = _lambda_system(ctx, sim, e0, coupling, hbar, vbar)
    try:
        lam = scipy.linalg.solve(a, rhs)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
        raise CcError(f"singular Lambda system: {exc}") from exc
    if not np.all(np.isfinite(lam)):
        raise CcError("singular Lambda system")
    return lam


def as_lambda(man: Manifold, lam):
    l1, l2 = man.unpack(lam)
    return LambdaAmplitudes(l1, l2, man.occ, man.vir)


# -- EOM --------------------------------------------------------------------

def eom_apply(ctx: CcContext, x, vec, op=None, side="R"):
    """Right action <e_mu|Obar R|ref> or left action <ref|L Obar|e_mu> of Obar = e^{-T} O e^{T}."""
    sim = ctx.similarity(x)
    op = ctx.h if op is None else op
    vec = np.asarray(vec)
    if side == "R":
        return sim.project(op @ sim.ket(vec))
    if side == "L":
        b = sim.bra(vec)
        w = op.T.conj() @ b
        return np.conj(ctx.man.basis @ _series(sim.tt, w, 1.0, ctx.man.max_level))
    raise CcError(f"unknown side {side!r}")


def eom_spectrum(hbar):
    """Right and left eigen decompositions of the projected Hbar, ascending real part."""
    w, vl, vr = scipy.linalg.eig(hbar, left=True, right=True)
    order = np.lexsort((np.imag(w), np.round(np.real(w), 10)))
    return w[order], vl[:, order], vr[:, order]


def _excited_roots(hbar, n_excited):
    """Lowest excited EOM roots: (energies, right vectors, left vectors) with l^T r = 1."""
    w, vl, vr = eom_spectrum(hbar)
    # the ground-state root is the one whose right vector is e_0
    ground = int(np.argmax(np.abs(vr[0, :]) / np.linalg.norm(vr, axis=0)))
    keep = [k for k in range(len(w)) if k != ground][:n_excited]
    if len(keep) < n_excited:
        raise CcError(f"only {len(keep)} excited roots available")
    out = []
    for k in keep:
        r, l = np.real_if_close(vr[:, k]), np.real_if_close(vl[:, k].conj())
        if np.iscomplexobj(r) or abs(w[k].imag) > 1e-8:
            raise CcError("complex EOM root")
        s = float(l @ r)
        if abs(s) < 1e-12:
            raise CcError("left and right EOM vectors are orthogonal")
        r, l = _balance(r, l / s)
        out.append((float(w[k].real), r, l))
    return out


def _balance(r, l, reference=None):
    """Fix the R/L gauge: equal norms and a sign convention."""
    a = np.sqrt(np.linalg.norm(l) / np.linalg.norm(r))
    r, l = r * a, l / a
    if reference is not None:
        s = float(np.real(np.vdot(reference, r)))
        sign = -1.0 if s < 0 else 1.0
    else:
        lead = np.flatnonzero(np.abs(r) > 1e-8 * np.abs(r).max())[0]
        sign = -1.0 if np.real(r[lead]) < 0 else 1.0
    return r * sign, l * sign


def _bordered_newton(a, b, c, v0, e_guess, max_iter, tol):
    """Solve (A - E) v = -b, c.v = 1 for (v, E) by Newton's method."""
    d = a.shape[0]
    v = v0 / (c @ v0)
    e = e_guess
    for it in range(max_iter):
        f = np.concatenate([a @ v + b - e * v, [c @ v - 1.0]])
        if np.abs(f).max() < tol:
            return v, e, True
        jac = np.zeros((d + 1, d + 1), dtype=np.result_type(a, float))
        jac[:d, :d] = a - e * np.eye(d)
        jac[:d, d] = -v
        jac[d, :d] = c
        step = np.linalg.lstsq(jac, -f, rcond=None)[0]
        v = v + step[:d]
        e = e + float(np.real(step[d]))
    f = np.concatenate([a @ v + b - e * v, [c @ v - 1.0]])
    return v, e, bool(np.abs(f).max() < tol)


def solve_EOM_constrained(ctx, sim, coupling: Coupling, energies, cfg: CcConfig = None,
                          hbar=None, vbar=None, report=None):
    """Per-state bordered solves of the constrained R and L equations.

    For each excited state n the right problem
        (Hbar + s Vbar^{nn}) r + s sum_{m != n} Vbar^{nm} r_m = E_n r,  l_prev . r = 1
    is solved for (r, E_n) and then the left problem with its own scalar,
        l (Hbar + s Vbar^{nn}) + s sum_{m != n} l_m Vbar^{mn} = E^L l,  l . r = 1.
    ``E^L - E_n`` is returned as the consistency diagnostic of the l0 row.
    Other states enter with their previous-cycle vectors (frozen).
    """
    cfg = cfg or CcConfig()
    hbar = sim.matrix(ctx.h) if hbar is None else hbar
    vbar = {k: sim.matrix(op) for k, op in coupling.v.items()} if vbar is None else vbar
    n_states = len(coupling.right)
    sign = coupling.sign
    out = []
    for n in range(1, n_states):
        a = hbar + sign * vbar[(n, n)] if (n, n) in vbar else hbar
        b_r = np.zeros(hbar.shape[0], dtype=hbar.dtype)
        b_l = np.zeros_like(b_r)
        for (p, q), vb in vbar.items():
            if p == n and q != n:
                b_r = b_r + sign * (vb @ coupling.right[q])
            if q == n and p != n:
                b_l = b_l + sign * (coupling.left[p] @ vb)
        r_prev, l_prev = coupling.right[n], coupling.left[n]
        e_prev = energies[n]
        tol = cfg.tol * 1e-2
        r, e_r, ok_r = _bordered_newton(a, b_r, l_prev, r_prev, e_prev, cfg.max_inner, tol)
        l, e_l, ok_l = _bordered_newton(a.T, b_l, r, l_prev, e_r, cfg.max_inner, tol)
        overlap = abs(r @ r_prev) / (np.linalg.norm(r) * np.linalg.norm(r_prev))
        if overlap < cfg.root_overlap_min and report is not None:
            report.event(f"root flip suspected for state {n}: overlap {overlap:.3f}")
        r, l = _balance(r, l, r_prev)
        out.append({"r": r, "l": l, "energy": e_r, "energy_left": e_l,
                    "converged": ok_r and ok_l, "overlap": float(overlap)})
    return out


def eom_vector(man: Manifold, vec, n, energy, side):
    c1, c2 = man.unpack(vec[1:])
    return EomVector(float(np.real(vec[0])), c1, c2, n, float(energy), side)


# -- densities and observables ------------------------------------------------

def cc_rdm(ctx: CcContext, x, l, r):
    """gamma[p, q] = <ref|L e^{-T} a+_q a_p e^{T} R|ref> for projected vectors ``l`` and ``r``."""
    sim = ctx.similarity(x)
    bra = detspace.CIVector(ctx.space, sim.bra(l))
    ket = detspace.CIVector(ctx.space, sim.ket(r))
    return detspace.fci_tdm(bra, ket)


def _state_vectors(ctx, sim, rights, lefts):
    kets = [sim.ket(r) for r in rights]
    bras = [sim.bra(l) for l in lefts]
    return bras, kets


def pair_quantities(ctx, sim, rights, lefts, cs):
    """Raw elements <L_n|A|R_m> and overlaps <ref|L(n) R(m)|ref> for the constraint set."""
    bras, kets = _state_vectors(ctx, sim, rights, lefts)
    raw = {}
    for (pid, b, k) in cs.elements():
        raw[(pid, b, k)] = complex(np.vdot(bras[b], ctx.props[pid] @ kets[k]))
        if raw[(pid, b, k)].imag == 0.0:
            raw[(pid, b, k)] = raw[(pid, b, k)].real
    overlaps = {}
    if cs.ortho_weight > 0:
        n = len(rights)
        overlaps = {(p, q): float(np.real(lefts[p] @ rights[q])) for p in range(n) for q in range(n) if p != q}
    return raw, overlaps


def build_coupling(ctx, cs, raw, overlaps, n_states, rights, lefts, sign):
    # same sums as constraints.build_vexp, assembled from the many-body property matrices;
    # the overlap penalty's one-particle identity / N is the identity on N-electron space
    v = {}
    for (pid, b, k), dq in cons.element_derivatives(cs, raw).items():
        if dq != 0.0:
            v[(b, k)] = v.get((b, k), 0.0) + dq * ctx.props[pid]
    for pair, od in cons.overlap_derivatives(cs, overlaps or {}).items():
        if od != 0.0 and pair[0] != pair[1]:
            v[pair] = v.get(pair, 0.0) + od * ctx.identity
    return Coupling({k: v[k] for k in sorted(v)}, list(rights), list(lefts), sign)


def _mix(new: Coupling, old: Coupling, damping):
    if old is None or damping == 0.0:
        return new
    keys = set(new.v) | set(old.v)
    mixed = {}
    for k in keys:
        a = new.v.get(k, 0.0)
        b = old.v.get(k, 0.0)
        mixed[k] = (1.0 - damping) * a + damping * b
        if sp.issparse(mixed[k]):
            mixed[k] = mixed[k].tocsr()
    return replace(new, v=mixed)


# -- the outer driver -------------------------------------------------------

@dataclass
class _Iterate:
    x: np.ndarray
    rights: list
    lefts: list
    energies: list


def _outer_cycle(ctx, cs, it: _Iterate, cfg, sign, prev_coupling=None, damping=0.0, report=None):
    """One pass of the six-step scheme; returns (new iterate, coupling, info)."""
    n_states = len(it.rights)
    d = ctx.man.dim
    sim = ctx.similarity(it.x)
    # steps 1-3: densities from the current vectors, potentials, frozen additions to H
    raw, overlaps = pair_quantities(ctx, sim, it.rights, it.lefts, cs)
    q = cons.eval_Q(cons.fitted_values(cs, raw), cs, overlaps or None)
    coupling = build_coupling(ctx, cs, raw, overlaps, n_states, it.rights, it.lefts, sign)
    coupling = _mix(coupling, prev_coupling, damping)
    # step 4: T equations and the energy row
    x, e0, rmax, _, ok_t, _ = solve_T(ctx, coupling, cfg, x0=it.x)
    if not np.all(np.isfinite(x)):
        raise CcError("T amplitudes diverged")
    sim = ctx.similarity(x)
    hbar = sim.matrix(ctx.h)
    vbar = {k: sim.matrix(op) for k, op in coupling.v.items()}
    # step 5: Lambda, R and L with the potentials frozen
    lam = solve_Lambda(ctx, sim, e0, coupling, hbar, vbar)
    eom = solve_EOM_constrained(ctx, sim, coupling, it.energies, cfg, hbar, vbar, report)
    new = _Iterate(x, [_unit(d)] + [s["r"] for s in eom],
                   [np.concatenate([[1.0], lam])] + [s["l"] for s in eom],
                   [e0] + [s["energy"] for s in eom])
    info = {"q": q, "t_residual": rmax, "inner_ok": ok_t and all(s["converged"] for s in eom),
            "left_gap": [abs(s["energy_left"] - s["energy"]) for s in eom]}
    return new, coupling, info


def _change(a: _Iterate, b: _Iterate):
    return max([float(np.abs(a.x - b.x).max(initial=0.0))]
               + [float(np.abs(p - q).max()) for p, q in zip(a.rights, b.rights)]
               + [float(np.abs(p - q).max()) for p, q in zip(a.lefts, b.lefts)])


def _flatten(it: _Iterate):
    parts = [it.x, it.lefts[0][1:]]
    for r, l in zip(it.rights[1:], it.lefts[1:]):
        parts += [r, l]
    return np.concatenate(parts)


def _unflatten(z, template: _Iterate):
    n_ex = len(template.x)
    d = n_ex + 1
    x, lam = z[:n_ex], z[n_ex:2 * n_ex]
    rights, lefts = [_unit(d)], [np.concatenate([[1.0], lam])]
    pos = 2 * n_ex
    for _ in template.rights[1:]:
        rights.append(z[pos:pos + d])
        lefts.append(z[pos + d:pos + 2 * d])
        pos += 2 * d
    return _Iterate(x.copy(), rights, lefts, list(template.energies))


def _full_residual(ctx, cs, z, template, sign):
    """Every constrained equation at once, with the potentials built from ``z`` itself.

    Unknowns are the T amplitudes, Lambda, and (r_n, l_n, E_n) per excited
    state.  Besides the T, Lambda, R and L rows each excited state adds its
    normalization l.r = 1 and the balance |r|^2 = |l|^2, which fixes the
    R/L scale left free by the equations.
    """
    it = _unflatten_full(z, template)
    n_states = len(it.rights)
    sim = ctx.similarity(it.x)
    raw, overlaps = pair_quantities(ctx, sim, it.rights, it.lefts, cs)
    coupling = build_coupling(ctx, cs, raw, overlaps, n_states, it.rights, it.lefts, sign)
    t_res, e0 = t_residual(ctx, it.x, coupling)
    hbar = sim.matrix(ctx.h)
    vbar = {k: sim.matrix(op) for k, op in coupling.v.items()}
    a, rhs = _lambda_system(ctx, sim, e0, coupling, hbar, vbar)
    parts = [t_res, a @ it.lefts[0][1:] - rhs]
    for n in range(1, n_states):
        r, l, e = it.rights[n], it.lefts[n], it.energies[n]
        rr = hbar @ r - e * r
        ll = l @ hbar - e * l
        for (p, q), vb in vbar.items():
            if p == n:
                rr = rr + sign * (vb @ it.rights[q])
            if q == n:
                ll = ll + sign * (it.lefts[p] @ vb)
        parts += [rr, ll, [l @ r - 1.0, r @ r - l @ l]]
    return np.real(np.concatenate(parts)), e0


def _flatten_full(it: _Iterate):
    return np.concatenate([_flatten(it), np.asarray(it.energies[1:], dtype=float)])


def _unflatten_full(z, template: _Iterate):
    k = len(template.rights) - 1
    it = _unflatten(z[:len(z) - k] if k else z, template)
    it.energies = [template.energies[0]] + list(z[len(z) - k:]) if k else [template.energies[0]]
    return it


def _polish(ctx, cs, it: _Iterate, cfg, sign, report):
    """Least-squares Newton (Levenberg-Marquardt) on the full coupled residual."""
    import scipy.optimize

    z0 = _flatten_full(it)
    fun = lambda z: _full_residual(ctx, cs, z, it, sign)[0]
    try:
        sol = scipy.optimize.least_squares(fun, z0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                                           max_nfev=50 * (len(z0) + 1))
    except (CcError, np.linalg.LinAlgError, ValueError) as exc:
        report.event(f"coupled polish failed: {exc}")
        return it, False
    cur = _unflatten_full(sol.x, it)
    res, e0 = _full_residual(ctx, cs, sol.x, it, sign)
    cur.energies[0] = e0
    cur.rights[1:], cur.lefts[1:] = zip(*[_balance(r, l, r0) for r, l, r0 in
                                          zip(cur.rights[1:], cur.lefts[1:], it.rights[1:])]) \
        if len(cur.rights) > 1 else ((), ())
    cur.rights, cur.lefts = list(cur.rights), list(cur.lefts)
    rmax = float(np.abs(res).max(initial=0.0))
    report.event(f"coupled polish: {sol.nfev} residual evaluations, max residual {rmax:.2e}")
    return cur, rmax < cfg.tol


def outer_driver(ham, properties, cs, n_states, cfg: CcConfig = None, mo: MoBasis = None,
                 report: SolveReport = None, initial: CcState = None):
    """Self-consistent constrained CCSD/EOM.

    Every outer cycle (1) evaluates densities from the current amplitudes,
    (2) builds the potentials V^{nm}, (3) freezes them as per-pair additions
    to H, (4) solves T and the energy row, (5) solves Lambda and the R/L
    equations of every excited state, (6) repeats until amplitude changes
    and the relative change of Q drop below ``cfg.tol``.

    When plain repetition stalls or runs away (strong weights make the
    cycle map expansive) the fixed point of the same cycle map is located
    by a quasi-Newton root finder instead.
    Returns ``(CcState, SolveReport)``.
    """
    cfg = cfg or CcConfig()
    cs = cons.ConstraintSet() if cs is None else cs
    report = report or SolveReport(method="cc")
    if mo is None:
        mo = initial.mo if initial is not None else mo_basis(ham, properties)
    cs.validate(n_states, set(mo.props))
    ctx = CcContext(mo)
    d = ctx.man.dim
    sign = 1.0 if cfg.convention == "consistent" else -1.0

    if initial is not None:
        if len(initial.vectors) != n_states:
            raise CcError("warm start has a different number of states")
        it = _Iterate(ctx.man.pack(initial.amp.t1, initial.amp.t2),
                      [v[0] for v in initial.vectors], [v[1] for v in initial.vectors],
                      list(initial.energies))
    else:
        x, e0, rmax, _, ok, first = solve_T(ctx, None, cfg)
        report.extra["t_first_residual_norm"] = first
        if not ok:
            report.event(f"unconstrained T equations not converged (max residual {rmax:.2e})")
        sim = ctx.similarity(x)
        hbar = sim.matrix(ctx.h)
        lam = solve_Lambda(ctx, sim, e0, None, hbar)
        roots = _excited_roots(hbar, n_states - 1) if n_states > 1 else []
        it = _Iterate(x, [_unit(d)] + [r for _, r, _ in roots],
                      [np.concatenate([[1.0], lam])] + [l for _, _, l in roots],
                      [e0] + [e for e, _, _ in roots])

    converged = True
    counter = {"cycles": 0}
    prev = 0.0 if initial is None else None
    for scale in cfg.schedule:
        lo = scale if prev is None else prev
        it, ok = _advance(ctx, cs, it, lo, scale, cfg, sign, report, counter, cfg.bisect)
        prev = scale
        if not ok:
            report.event(f"scale {scale:g}: outer iterations not converged")
            converged = False
            break
    cycle_total = counter["cycles"]

    state = _finish(ctx, it.x, it.rights, it.lefts, it.energies, cs.scaled(cfg.schedule[-1]), report)
    report.extra["convention"] = cfg.convention
    report.converged = converged
    report.n_iter = cycle_total
    return state, report


def _advance(ctx, cs, it, lo, hi, cfg, sign, report, counter, depth):
    """Move the weights from scale ``lo`` to ``hi``, halving the step on failure.

    A stage counts as failed when it does not converge or when its solution
    lies farther than ``cfg.max_step`` from its starting point (a jump to
    another branch of the nonlinear equations).
    """
    scs = cs.scaled(hi)
    new, ok, counter["cycles"] = _stage(ctx, scs, it, cfg, sign, report, counter["cycles"])
    step = _change(new, it)
    if ok and (step <= cfg.max_step or scs.is_empty or lo == hi):
        return new, True
    if not scs.is_empty:
        # the plain cycle can overshoot onto a distant fixed point; Newton from
        # the entry point stays on the branch that passes through it
        near, ok_near = _polish(ctx, scs, it, cfg, sign, report)
        if ok_near:
            near, ok_near, counter["cycles"] = _confirm(ctx, scs, near, cfg, sign, report, counter["cycles"])
        if ok_near and _change(near, it) <= cfg.max_step:
            return near, True
    if depth == 0 or hi == lo:
        return new, ok and step <= cfg.max_step
    report.event(f"scale {hi:g}: step from {lo:g} rejected (converged={ok}, distance {step:.2e}), bisecting")
    mid = 0.5 * (lo + hi)
    it, ok = _advance(ctx, cs, it, lo, mid, cfg, sign, report, counter, depth - 1)
    if not ok:
        return it, False
    return _advance(ctx, cs, it, mid, hi, cfg, sign, report, counter, depth - 1)


def _stage(ctx, cs, it, cfg, sign, report, cycle_total):
    start = it
    runaway = False
    damping = cfg.damping
    prev_coupling = None
    q_prev = None
    q_hist, changes = [], []
    # with every weight zero Q is identically zero and needs no settling
    weightless = cs.ortho_weight == 0.0 and all(d.weight == 0.0 for d in cs.data)
    for _ in range(cfg.max_outer):
        cycle_total += 1
        try:
            new, coupling, info = _outer_cycle(ctx, cs, it, cfg, sign, prev_coupling, damping, report)
        except (CcError, np.linalg.LinAlgError, ValueError) as exc:
            report.event(f"cycle {cycle_total}: {exc}")
            runaway = True
            break
        change = _change(new, it)
        if changes and change > changes[-1]:
            runaway = True
            # the cycle map is expanding here: keep the last contracting iterate
            report.event(f"cycle {cycle_total}: outer change grew to {change:.2e}, switching to coupled polish")
            break
        prev_coupling = coupling if damping > 0 else None
        q = info["q"]
        report.log(cycle_total, 0, new.energies[0], q, change)
        for n, gap in enumerate(info["left_gap"], start=1):
            report.log(cycle_total, n, new.energies[n], q, gap)
        dq = abs(q - q_prev) / max(1.0, abs(q)) if q_prev is not None else np.inf
        q_prev = q
        it = new
        if change < cfg.tol and (dq < cfg.tol or weightless) and info["inner_ok"]:
            return it, True, cycle_total
        changes.append(change)
        q_hist.append(q)
        if _oscillating(q_hist) and damping < 0.9:
            damping = min(0.9, 0.5 if damping == 0.0 else damping + 0.5 * (1.0 - damping))
            q_hist.clear()
            report.event(f"cycle {cycle_total}: oscillation detected, damping raised to {damping:.3f}")
    # when the last contracting iterate is a poor Newton start, retry from the stage's entry point
    seeds = [it, start] if runaway and it is not start else [it]
    for seed in seeds:
        it, ok = _polish(ctx, cs, seed, cfg, sign, report)
        if ok:
            break
    if ok:
        it, ok, cycle_total = _confirm(ctx, cs, it, cfg, sign, report, cycle_total)
    return it, ok, cycle_total


def _confirm(ctx, cs, it, cfg, sign, report, cycle_total):
    """One plain cycle: a fixed point of the coupled equations must be one of the cycle map."""
    cycle_total += 1
    try:
        new, _, info = _outer_cycle(ctx, cs, it, cfg, sign, report=report)
    except (CcError, np.linalg.LinAlgError, ValueError) as exc:
        report.event(f"confirmation cycle failed: {exc}")
        return it, False, cycle_total
    change = _change(new, it)
    report.log(cycle_total, 0, new.energies[0], info["q"], change)
    ok = change < max(cfg.tol, 1e-8) and info["inner_ok"]
    return (new if ok else it), ok, cycle_total


def _oscillating(hist, window=10):
    if len(hist) < window:
        return False
    d = np.diff(hist[-window:])
    flips = np.sum(np.sign(d[1:]) != np.sign(d[:-1]))
    return flips >= window - 3


def _finish(ctx, x, rights, lefts, energies, cs, report):
    man = ctx.man
    sim = ctx.similarity(x)
    raw, overlaps = pair_quantities(ctx, sim, rights, lefts, cs)
    calc = cons.fitted_values(cs, raw)
    amp = man.amplitudes(x)
    lam = as_lambda(man, lefts[0][1:])
    eom = [(eom_vector(man, rights[n], n, energies[n], "R"), eom_vector(man, lefts[n], n, energies[n], "L"))
           for n in range(1, len(rights))]
    state = CcState(ctx.mo, amp, lam, eom, float(energies[0]), list(zip(rights, lefts)))
    report.energies = [float(e) for e in energies]
    report.q = cons.eval_Q(calc, cs, overlaps or None)
    report.residuals = cons.residual_rows(cs, calc)
    report.extra["normalization_residual"] = [float(abs(l @ r - 1.0)) for r, l in zip(rights, lefts)]
    report.extra["l0"] = [float(np.real(l[0])) for l in lefts[1:]]
    report.extra["r0"] = [float(np.real(r[0])) for r in rights[1:]]
    report.extra["overlaps"] = {f"{n},{m}": float(np.real(lefts[n] @ rights[m]))
                                for n in range(len(rights)) for m in range(len(rights)) if n != m}
    report.densities = {f"gamma_{n}{n}": ctx.mo.c @ cc_rdm(ctx, x, lefts[n], rights[n]) @ ctx.mo.c.conj().T
                        for n in range(len(rights))}
    return state


def observables(state: CcState, cs, ctx: CcContext = None):
    """Fitted values {(pid, (bra, ket)): y} and overlaps of a converged state."""
    ctx = ctx or CcContext(state.mo)
    sim = ctx.similarity(ctx.man.pack(state.amp.t1, state.amp.t2))
    rights = [r for r, _ in state.vectors]
    lefts = [l for _, l in state.vectors]
    raw, overlaps = pair_quantities(ctx, sim, rights, lefts, cs)
    return cons.fitted_values(cs, raw), overlaps


def sign_convention_diagnostic(ham, properties, cs, n_states, cfg: CcConfig = None, oracle_options=None):
    """Run both sign conventions of the constrained equations against the constrained-FCI oracle.

    Returns a dict with Q, energies and convergence of each convention plus
    the oracle Q; nothing is asserted.
    """
    cfg = cfg or CcConfig()
    mo = mo_basis(ham, properties)
    out = {}
    ora = detspace.constrained_fci_minimize(ham, cs, n_states, properties, oracle_options)
    out["oracle"] = {"Q": ora.q, "converged": ora.converged}
    for conv in CONVENTIONS:
        try:
            _, rep = outer_driver(ham, properties, cs, n_states, replace(cfg, convention=conv), mo=mo)
            out[conv] = {"Q": rep.q, "energies": rep.energies, "converged": rep.converged,
                         "Q_gap": abs(rep.q - ora.q)}
        except CcError as exc:
            out[conv] = {"error": str(exc), "converged": False}
    return out
