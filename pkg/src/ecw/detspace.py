"""Exact determinant-space machinery used as the reference implementation.

A determinant is an int bit mask over spin-orbitals (bit p set means
spin-orbital p occupied).  The state it stands for is

    |D> = a+_{p1} a+_{p2} ... a+_{pN} |vac>,   p1 < p2 < ... < pN

so that annihilating p from |D> costs (-1)**(number of occupied q < p).
Everything here is dense or scipy-sparse and intentionally unclever.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp

from ecw import constraints as _cons

MAX_FCI_DIM = 100_000
MAX_ORACLE_DIM = 10_000


class DetSpaceError(ValueError):
    pass


class OracleRefusal(DetSpaceError):
    """The requested space is larger than the oracle is willing to handle."""


# -- bit helpers ---------------------------------------------------------

def _parity_below(mask, p):
    return -1 if (mask & ((1 << p) - 1)).bit_count() & 1 else 1


def annihilate(mask, p):
    """Return (sign, new_mask) for a_p|mask>, or None when p is empty."""
    if not mask >> p & 1:
        return None
    return _parity_below(mask, p), mask ^ (1 << p)


def create(mask, p):
    if mask >> p & 1:
        return None
    return _parity_below(mask, p), mask | (1 << p)


def apply_string(mask, ops):
    """Apply a ladder string right-to-left.

    ``ops`` is a sequence of ``(orbital, dagger)`` written in operator order,
    e.g. ``[(p, True), (q, False)]`` is a+_p a_q.
    """
    sign = 1
    for p, dagger in reversed(ops):
        res = create(mask, p) if dagger else annihilate(mask, p)
        if res is None:
            return None
        s, mask = res
        sign *= s
    return sign, mask


def occupied(mask):
    out = []
    p = 0
    while mask:
        if mask & 1:
            out.append(p)
        mask >>= 1
        p += 1
    return out


# -- spaces and vectors --------------------------------------------------

def enumerate_determinants(m, n_alpha, n_beta):
    """All masks with the given alpha/beta counts, sorted by integer value."""
    if m % 2:
        raise DetSpaceError("interleaved spin-orbitals need an even orbital count")
    n_sp = m // 2
    if not (0 <= n_alpha <= n_sp and 0 <= n_beta <= n_sp):
        raise DetSpaceError(f"cannot place ({n_alpha}, {n_beta}) electrons in {n_sp} spatial orbitals")
    alpha = [sum(1 << (2 * p) for p in c) for c in itertools.combinations(range(n_sp), n_alpha)]
    beta = [sum(1 << (2 * p + 1) for p in c) for c in itertools.combinations(range(n_sp), n_beta)]
    return sorted(a | b for a in alpha for b in beta)


@dataclass(frozen=True, eq=False)
class DetSpace:
    m: int
    dets: tuple
    label: tuple = ()

    @classmethod
    def sector(cls, m, n_alpha, n_beta):
        return cls(m, tuple(enumerate_determinants(m, n_alpha, n_beta)), ("sector", n_alpha, n_beta))

    @classmethod
    def full(cls, m, n):
        """Every N-electron determinant regardless of spin."""
        if not 0 <= n <= m:
            raise DetSpaceError(f"cannot place {n} electrons in {m} spin-orbitals")
        dets = sorted(sum(1 << p for p in c) for c in itertools.combinations(range(m), n))
        return cls(m, tuple(dets), ("full", n))

    @cached_property
    def index(self):
        return {d: i for i, d in enumerate(self.dets)}

    @property
    def dim(self):
        return len(self.dets)

    @property
    def n_electrons(self):
        return self.dets[0].bit_count() if self.dets else 0

    def __eq__(self, other):
        return isinstance(other, DetSpace) and self.m == other.m and self.dets == other.dets

    def __hash__(self):
        return hash((self.m, self.dets))

    def __len__(self):
        return len(self.dets)

    def basis_vector(self, mask):
        v = np.zeros(self.dim)
        v[self.index[mask]] = 1.0
        return CIVector(self, v)


@dataclass(frozen=True, eq=False)
class CIVector:
    space: DetSpace
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs)
        if c.shape != (self.space.dim,):
            raise DetSpaceError(f"coefficient length {c.shape} does not match space dimension {self.space.dim}")
        if not np.all(np.isfinite(c)):
            raise DetSpaceError("non-finite CI coefficients")
        object.__setattr__(self, "coeffs", c)

    @property
    def norm(self):
        return float(np.linalg.norm(self.coeffs))

    def dot(self, other):
        """<self|other>."""
        _same_space(self, other)
        return np.vdot(self.coeffs, other.coeffs)

    def scaled(self, f):
        return CIVector(self.space, f * self.coeffs)

    def __add__(self, other):
        _same_space(self, other)
        return CIVector(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _same_space(self, other)
        return CIVector(self.space, self.coeffs - other.coeffs)


def _same_space(u, v):
    if u.space != v.space:
        raise DetSpaceError("vectors live in different determinant spaces")


def _as_space(space_or_sector, m=None):
    if isinstance(space_or_sector, DetSpace):
        return space_or_sector
    na, nb = space_or_sector
    return DetSpace.sector(m, na, nb)


# -- operator matrices ---------------------------------------------------

def string_matrix(ops, space, target=None):
    """Sparse matrix of one ladder string mapping ``space`` into ``target``.

    Amplitude that lands outside ``target`` is dropped; callers that need
    closure should use operators that conserve the space.
    """
    target = target or space
    rows, cols, vals = [], [], []
    idx = target.index
    for j, d in enumerate(space.dets):
        res = apply_string(d, ops)
        if res is None or res[1] not in idx:
            continue
        rows.append(idx[res[1]])
        cols.append(j)
        vals.append(float(res[0]))
    return sp.csr_matrix((vals, (rows, cols)), shape=(target.dim, space.dim))


def one_body_matrix(a, space, tol=0.0):
    """Sparse matrix of sum_pq a[p, q] a+_p a_q on ``space``."""
    a = np.asarray(a)
    if a.shape != (space.m, space.m):
        raise DetSpaceError(f"operator is {a.shape}, space has {space.m} spin-orbitals")
    idx = space.index
    rows, cols, vals = [], [], []
    m = space.m
    for j, d in enumerate(space.dets):
        for q in occupied(d):
            s1, d1 = annihilate(d, q)
            for p in range(m):
                x = a[p, q]
                if x == 0:
                    continue
                res = create(d1, p)
                if res is None:
                    continue
                s2, d2 = res
                i = idx.get(d2)
                if i is None:
                    if abs(x) > tol:
                        raise DetSpaceError("operator leaves the determinant space")
                    continue
                rows.append(i)
                cols.append(j)
                vals.append(s1 * s2 * x)
    dtype = np.result_type(a.dtype, float)
    return sp.csr_matrix((np.asarray(vals, dtype=dtype), (rows, cols)), shape=(space.dim, space.dim))


def two_body_matrix(g, space, tol=0.0):
    """Sparse matrix of 1/4 sum g[p,q,r,s] a+_p a+_q a_s a_r (g antisymmetrized)."""
    g = np.asarray(g)
    m = space.m
    if g.shape != (m,) * 4:
        raise DetSpaceError(f"two-body tensor is {g.shape}, space has {m} spin-orbitals")
    idx = space.index
    rows, cols, vals = [], [], []
    pairs = [(p, q) for p in range(m) for q in range(p + 1, m)]
    for j, d in enumerate(space.dets):
        occ = occupied(d)
        for r, s in itertools.combinations(occ, 2):
            s1, d1 = annihilate(d, r)
            s2, d2 = annihilate(d1, s)
            for p, q in pairs:
                x = g[p, q, r, s]
                if x == 0:
                    continue
                res = create(d2, q)
                if res is None:
                    continue
                s3, d3 = res
                res = create(d3, p)
                if res is None:
                    continue
                s4, d4 = res
                i = idx.get(d4)
                if i is None:
                    if abs(x) > tol:
                        raise DetSpaceError("operator leaves the determinant space")
                    continue
                rows.append(i)
                cols.append(j)
                vals.append(s1 * s2 * s3 * s4 * x)
    dtype = np.result_type(g.dtype, float)
    return sp.csr_matrix((np.asarray(vals, dtype=dtype), (rows, cols)), shape=(space.dim, space.dim))


def hamiltonian_matrix(ham, space):
    """Sparse H (including the core energy) on ``space``."""
    if ham.n_spin_orbitals != space.m:
        raise DetSpaceError("Hamiltonian and space disagree on the spin-orbital count")
    if np.abs(np.asarray(ham.s) - np.eye(space.m)).max() > 1e-12:
        raise DetSpaceError("determinant-space oracle needs an orthonormal orbital basis")
    mat = one_body_matrix(ham.h, space, tol=1e-14) + two_body_matrix(ham.g, space, tol=1e-14)
    return (mat + ham.e_core * sp.identity(space.dim, format="csr")).tocsr()


def apply_operator(op, v: CIVector) -> CIVector:
    """Exact action of a Hamiltonian or a one-body matrix on a CI vector."""
    if hasattr(op, "g"):
        mat = hamiltonian_matrix(op, v.space)
    else:
        a = getattr(op, "a", op)
        a = np.asarray(a)
        if a.shape != (v.space.m, v.space.m):
            raise DetSpaceError(f"operator is {a.shape}, space has {v.space.m} spin-orbitals")
        mat = one_body_matrix(a, v.space)
    return CIVector(v.space, mat @ v.coeffs)


# -- eigenproblems and densities -----------------------------------------

def fci_solve(ham, sector, k=1):
    """The ``k`` lowest (energy, CIVector) pairs from a dense eigensolve."""
    space = _as_space(sector, ham.n_spin_orbitals)
    if space.dim > MAX_FCI_DIM:
        raise OracleRefusal(f"determinant space of size {space.dim} exceeds {MAX_FCI_DIM}")
    if not 1 <= k <= space.dim:
        raise DetSpaceError(f"asked for {k} states in a space of dimension {space.dim}")
    hmat = hamiltonian_matrix(ham, space).toarray()
    w, u = scipy.linalg.eigh(hmat, subset_by_index=[0, k - 1])
    out = []
    for e, col in zip(w, u.T):
        # deterministic sign: first sizeable coefficient positive
        lead = np.flatnonzero(np.abs(col) > 1e-8)[0]
        col = col * np.sign(col[lead].real)
        out.append((float(e), CIVector(space, col)))
    return out


def fci_tdm(bra: CIVector, ket: CIVector):
    """gamma[p, q] = <bra| a+_q a_p |ket>."""
    _same_space(bra, ket)
    space = ket.space
    m = space.m
    gamma = np.zeros((m, m), dtype=np.result_type(bra.coeffs, ket.coeffs, float))
    idx = space.index
    cb = bra.coeffs.conj()
    for j, d in enumerate(space.dets):
        cj = ket.coeffs[j]
        if cj == 0:
            continue
        for p in occupied(d):
            s1, d1 = annihilate(d, p)
            for q in range(m):
                res = create(d1, q)
                if res is None:
                    continue
                i = idx.get(res[1])
                if i is not None:
                    gamma[p, q] += cb[i] * s1 * res[0] * cj
    return gamma


def fci_tdm2(bra: CIVector, ket: CIVector):
    """gamma2[p, q, r, s] = <bra| a+_r a+_s a_q a_p |ket>."""
    _same_space(bra, ket)
    space = ket.space
    m = space.m
    out = np.zeros((m,) * 4, dtype=np.result_type(bra.coeffs, ket.coeffs, float))
    idx = space.index
    cb = bra.coeffs.conj()
    for j, d in enumerate(space.dets):
        cj = ket.coeffs[j]
        if cj == 0:
            continue
        for p, q in itertools.permutations(occupied(d), 2):
            s1, d1 = annihilate(d, p)
            s2, d2 = annihilate(d1, q)
            for r, s in itertools.permutations([x for x in range(m) if not d2 >> x & 1], 2):
                s3, d3 = create(d2, s)
                s4, d4 = create(d3, r)
                i = idx.get(d4)
                if i is not None:
                    out[p, q, r, s] += cb[i] * s1 * s2 * s3 * s4 * cj
    return out


def expectation(a, bra: CIVector, ket: CIVector):
    """<bra| sum_pq a[p,q] a+_p a_q |ket>, returned as a Python scalar."""
    a = np.asarray(getattr(a, "a", a))
    val = np.trace(a @ fci_tdm(bra, ket))
    return complex(val) if np.iscomplexobj(val) and val.imag != 0 else float(np.real(val))


def slater_to_ci(c, space=None):
    """Expand the determinant built from the columns of ``c`` (M x N)."""
    c = np.asarray(c)
    m, n = c.shape
    space = space or DetSpace.full(m, n)
    coeffs = np.zeros(space.dim, dtype=np.result_type(c.dtype, float))
    for i, d in enumerate(space.dets):
        rows = occupied(d)
        if len(rows) != n:
            raise DetSpaceError("space electron count differs from the orbital count")
        coeffs[i] = np.linalg.det(c[rows, :]) if n else 1.0
    return CIVector(space, coeffs)


# -- constrained oracles -------------------------------------------------

@dataclass
class OracleResult:
    vectors: list
    energies: list          # <Psi_n|H|Psi_n>
    multipliers: list       # E_n of the stationarity equations
    q: float
    gradient_norm: float
    converged: bool
    observables: dict
    overlaps: dict
    message: str = ""
    orbitals: list = None

    def __iter__(self):
        return iter(zip(self.vectors, self.energies))


def _property_mats(properties):
    if isinstance(properties, dict):
        return {k: np.asarray(getattr(v, "a", v)) for k, v in properties.items()}
    return {p.id: np.asarray(p.a) for p in properties}


class _Coupling:
    """Evaluates the raw elements, Q and the potentials for a list of CI vectors."""

    def __init__(self, space, cs, props, n_states):
        self.cs = cs
        self.n_states = n_states
        self.space = space
        self.mats = {pid: one_body_matrix(a, space, tol=1e-14) for pid, a in props.items()}
        self.elements = cs.elements()

    def with_constraints(self, cs):
        other = _Coupling.__new__(_Coupling)
        other.__dict__.update(self.__dict__)
        other.cs = cs
        other.elements = cs.elements()
        return other

    def raw(self, vecs):
        out = {}
        for pid, b, k in self.elements:
            out[(pid, b, k)] = float(vecs[b] @ (self.mats[pid] @ vecs[k]))
        return out

    def overlaps(self, vecs):
        if self.cs.ortho_weight == 0.0:
            return {}
        return {(n, m): float(vecs[n] @ vecs[m])
                for n in range(self.n_states) for m in range(self.n_states) if n != m}

    def q(self, vecs):
        raw = self.raw(vecs)
        return _cons.eval_Q(_cons.fitted_values(self.cs, raw), self.cs, self.overlaps(vecs))

    def coupling(self, vecs):
        """sum_m V^{nm} Psi_m for every n (the constraint part of W_n)."""
        raw = self.raw(vecs)
        out = [np.zeros_like(v) for v in vecs]
        for (pid, b, k), dq in _cons.element_derivatives(self.cs, raw).items():
            out[b] = out[b] + dq * (self.mats[pid] @ vecs[k])
        for (n, m), dq in _cons.overlap_derivatives(self.cs, self.overlaps(vecs)).items():
            # overlap penalty acts through N/N = 1 on the N-electron space
            out[n] = out[n] + dq * vecs[m]
        return out


def _observables(cs, raw):
    return {f"{pid}[{n},{m}]": y for (pid, (n, m)), y in _cons.fitted_values(cs, raw).items()}


def constrained_fci_minimize(ham, cs, n_states, properties=(), options=None):
    """Stationary points of E_n + Q over normalized CI vectors.

    Default method solves H Psi_n + sum_m V^{nm} Psi_m = E_n Psi_n together
    with |Psi_n| = 1 by a Newton-type root finder, seeded with the FCI
    eigenvectors and ramped through ``options['schedule']`` scale factors.
    A step is halved (up to ``options['bisect']`` times) when the solve fails
    or the vectors move by more than ``options['max_step']``, which keeps the
    solution on the branch connected to the unconstrained states.
    ``method='descent'`` instead runs projected gradient descent with an
    Armijo line search (adequate for a single ground state only).
    """
    opts = {"tol": 1e-11, "schedule": None, "method": "root", "max_iter": 5000, "sector": None}
    opts.update(options or {})
    sector = opts["sector"] or (ham.n_alpha, ham.n_beta)
    space = _as_space(sector, ham.n_spin_orbitals)
    if space.dim > MAX_ORACLE_DIM:
        raise OracleRefusal(f"constrained oracle refuses a space of size {space.dim}")
    if cs.max_state() >= n_states:
        raise DetSpaceError("constraint refers to a state beyond n_states")
    hmat = hamiltonian_matrix(ham, space).toarray()
    props = _property_mats(properties)
    coup = _Coupling(space, cs, props, n_states)

    w, u = np.linalg.eigh(hmat)
    if opts.get("initial") is not None:
        vecs = [np.array(getattr(v, "coeffs", v), dtype=float) for v in opts["initial"]]
    else:
        vecs = [u[:, k].copy() for k in range(n_states)]
    schedule = opts["schedule"] or [1.0]

    solve = _descent if opts["method"] == "descent" else _root

    max_step = opts.get("max_step", 0.02)

    def distance(a, b):
        return max(min(np.linalg.norm(x - y), np.linalg.norm(x + y)) for x, y in zip(a, b))

    def advance(vecs, lo, hi, depth):
        # step the weights from lo to hi; halve the step when the solve fails
        # or when the solution jumps (a sign of landing on another branch)
        out, ok, msg = solve(hmat, coup.with_constraints(cs.scaled(hi)), vecs, opts)
        if opts["method"] == "descent" or depth == 0 or (ok and distance(out, vecs) <= max_step):
            return out, ok, msg
        mid = 0.5 * (lo + hi)
        direct = (out, ok, msg)
        vecs, ok, msg = advance(vecs, lo, mid, depth - 1)
        if ok:
            vecs, ok, msg = advance(vecs, mid, hi, depth - 1)
        # a converged long step beats a failed chain of short ones
        return (vecs, ok, msg) if ok or not direct[1] else direct

    converged = True
    message = ""
    prev = float(opts.get("start", 0.0))     # scale at which ``initial`` is already converged
    for scale in schedule:
        vecs, ok, message = advance(vecs, prev, scale, opts.get("bisect", 6))
        converged = converged and ok
        prev = scale

    # report at the weights actually reached (the last schedule entry)
    coup = coup.with_constraints(cs.scaled(schedule[-1]))
    w_list = [hmat @ v + cv for v, cv in zip(vecs, coup.coupling(vecs))]
    mult = [float(v @ wv) for v, wv in zip(vecs, w_list)]
    grad = max(float(np.linalg.norm(wv - e * v)) for v, wv, e in zip(vecs, w_list, mult))
    raw = coup.raw(vecs)
    return OracleResult(
        vectors=[CIVector(space, v) for v in vecs],
        energies=[float(v @ hmat @ v) for v in vecs],
        multipliers=mult,
        q=coup.q(vecs),
        gradient_norm=grad,
        converged=converged and grad < max(1e2 * opts["tol"], 1e-8),
        observables=_observables(cs, raw),
        overlaps=coup.overlaps(vecs) if cs.ortho_weight else
        {(n, m): float(vecs[n] @ vecs[m]) for n in range(n_states) for m in range(n_states) if n < m},
        message=message,
    )


def _root(hmat, coup, vecs, opts):
    k = len(vecs)
    dim = hmat.shape[0]

    def unpack(x):
        return [x[i * dim:(i + 1) * dim] for i in range(k)], x[k * dim:]

    def fun(x):
        vs, es = unpack(x)
        cpl = coup.coupling(vs)
        res = [hmat @ v + cv - e * v for v, cv, e in zip(vs, cpl, es)]
        res.append(np.array([0.5 * (v @ v - 1.0) for v in vs]))
        return np.concatenate(res)

    cpl = coup.coupling(vecs)
    e0 = [float(v @ (hmat @ v + cv)) for v, cv in zip(vecs, cpl)]
    x0 = np.concatenate(vecs + [np.array(e0)])
    x, res = _damped_newton(fun, x0, opts["tol"])
    if res > opts["tol"]:
        # MINPACK's hybrid method sometimes stalls where Newton is fine, and vice versa
        sol = scipy.optimize.root(fun, x0, method="hybr", options={"xtol": 1e-14, "maxfev": 200 * len(x0)})
        if np.abs(fun(sol.x)).max() < res:
            x = sol.x
    # one polishing pass with a tighter target
    res = np.abs(fun(x)).max()
    if res > opts["tol"]:
        sol2 = scipy.optimize.root(fun, x, method="lm", options={"xtol": 1e-15, "ftol": 1e-15})
        if np.abs(fun(sol2.x)).max() < res:
            x = sol2.x
            res = np.abs(fun(x)).max()
    vs, _ = unpack(x)
    return [v.copy() for v in vs], bool(res <= max(opts["tol"], 1e-9)), f"root residual {res:.3e}"


def _damped_newton(fun, x0, tol, max_iter=30, h=1e-7):
    """Newton with a forward-difference Jacobian and residual backtracking.

    Returns ``(x, max|fun(x)|)`` for the best point seen.
    """
    x = np.array(x0, dtype=float)
    f = fun(x)
    res = np.abs(f).max()
    eye = np.eye(len(x))
    for _ in range(max_iter):
        if res <= tol:
            break
        jac = np.column_stack([(fun(x + h * eye[i]) - f) / h for i in range(len(x))])
        step = np.linalg.lstsq(jac, f, rcond=None)[0]
        t = 1.0
        while t > 1e-4:
            trial = x - t * step
            f_trial = fun(trial)
            if np.abs(f_trial).max() < res:
                break
            t *= 0.5
        else:
            break
        x, f, res = trial, f_trial, np.abs(f_trial).max()
    return x, res


def _descent(hmat, coup, vecs, opts):
    """Cyclic projected-gradient descent with Armijo backtracking."""
    vecs = [v / np.linalg.norm(v) for v in vecs]

    def lagr(vs):
        return sum(float(v @ hmat @ v) for v in vs) + coup.q(vs)

    step = 1.0
    for it in range(opts["max_iter"]):
        gmax = 0.0
        f_start = lagr(vecs)
        for n in range(len(vecs)):
            wv = hmat @ vecs[n] + coup.coupling(vecs)[n]
            g = 2.0 * (wv - (vecs[n] @ wv) * vecs[n])
            gn = float(np.linalg.norm(g))
            gmax = max(gmax, gn)
            if gn < opts["tol"]:
                continue
            f0 = lagr(vecs)
            t = step
            while t > 1e-14:
                trial = list(vecs)
                x = vecs[n] - t * g
                trial[n] = x / np.linalg.norm(x)
                if lagr(trial) <= f0 - 1e-4 * t * gn ** 2:
                    vecs = trial
                    step = min(2 * t, 10.0)
                    break
                t *= 0.5
        if gmax < opts["tol"]:
            return vecs, True, f"descent converged in {it} sweeps"
        if f_start - lagr(vecs) <= 8 * np.finfo(float).eps * max(1.0, abs(f_start)):
            # no decrease is resolvable in double precision any more
            return vecs, gmax < 1e2 * opts["tol"], f"line search stalled at gradient {gmax:.2e}"
    return vecs, False, "descent hit max_iter"


def hf_minimize(ham, c0=None, tol=1e-10):
    """Lowest single determinant by direct energy minimization (BFGS).

    The energy is evaluated from the CI expansion of the determinant, so no
    Fock matrix is involved.  Returns (energy, occupied coefficients,
    orbital energies of the Fock operator built from the CI density).
    """
    m, n = ham.n_spin_orbitals, ham.n_electrons
    space = DetSpace.full(m, n)
    hmat = hamiltonian_matrix(ham, space)
    if c0 is None:
        c0 = _spin_block_eigvecs(ham.h, ham)
    u0 = _complete(np.asarray(c0, dtype=float), n)

    def orbitals(kappa):
        return u0 @ scipy.linalg.expm(_rotation(kappa, m, n))

    def fun(kappa):
        u = orbitals(kappa)
        psi = slater_to_ci(u[:, :n], space).coeffs
        hpsi = hmat @ psi
        grad = np.array([2.0 * float((one_body_matrix(np.outer(u[:, a], u[:, i]), space) @ psi) @ hpsi)
                         for i in range(n) for a in range(n, m)])
        return float(psi @ hpsi), grad

    res = scipy.optimize.minimize(fun, np.zeros(n * (m - n)), jac=True, method="BFGS",
                                  options={"gtol": tol, "maxiter": 2000})
    u = orbitals(res.x)
    psi = slater_to_ci(u[:, :n], space)
    gamma = fci_tdm(psi, psi)
    f = ham.h + np.einsum("prqs,sr->pq", ham.g, gamma)
    eps = np.linalg.eigvalsh(f)
    return float(res.fun), u[:, :n], eps


def _rotation(kappa, m, n):
    k = np.zeros((m, m))
    k[n:, :n] = np.asarray(kappa).reshape(n, m - n).T
    return k - k.T


def _complete(c, n):
    """Orthogonal M x M matrix whose first N columns span ``c[:, :N]``."""
    m = c.shape[0]
    q, _ = np.linalg.qr(np.hstack([c[:, :n], np.eye(m)]))
    q = q[:, :m]
    # keep the original occupied vectors exactly when they are orthonormal
    if np.allclose(c[:, :n].T @ c[:, :n], np.eye(n), atol=1e-12):
        comp = q[:, n:] - c[:, :n] @ (c[:, :n].T @ q[:, n:])
        comp, _ = np.linalg.qr(comp)
        return np.hstack([c[:, :n], comp[:, : m - n]])
    return q


def _spin_block_eigvecs(f, ham):
    """Aufbau orbitals of ``f``: the first N columns are occupied."""
    m = f.shape[0]
    cols, occ = [], []
    for spin, nocc in ((0, ham.n_alpha), (1, ham.n_beta)):
        idx = np.arange(spin, m, 2)
        w, v = np.linalg.eigh(f[np.ix_(idx, idx)])
        for k in range(len(idx)):
            c = np.zeros(m)
            c[idx] = v[:, k]
            (occ if k < nocc else cols).append((w[k], spin, c))
    occ.sort(key=lambda x: (x[0], x[1]))
    cols.sort(key=lambda x: (x[0], x[1]))
    return np.array([x[2] for x in occ + cols]).T


def constrained_det_minimize(ham, cs, n_states, properties=(), initial=None, options=None):
    """Stationary single-determinant states of E_n + Q.

    Each state is a determinant U_n expm(K_n)[:, :N] with real
    occupied-virtual rotation parameters.  The root finder drives the local
    orbital gradients 2 Re <a+_a a_i Psi_n | W_n> to zero for every n, where
    W_n = H Psi_n + sum_m V^{nm} Psi_m.  Everything is evaluated on CI
    expansions.  ``initial`` is a list of M x M orthogonal matrices whose
    first N columns are the starting occupied orbitals of each state.
    """
    opts = {"tol": 1e-10, "schedule": None}
    opts.update(options or {})
    m, n = ham.n_spin_orbitals, ham.n_electrons
    space = DetSpace.full(m, n)
    if space.dim > MAX_ORACLE_DIM:
        raise OracleRefusal(f"constrained oracle refuses a space of size {space.dim}")
    hmat = hamiltonian_matrix(ham, space)
    props = _property_mats(properties)
    coup = _Coupling(space, cs, props, n_states)
    if initial is None:
        base = _spin_block_eigvecs(ham.h, ham)
        initial = [base]
        # excited guesses: HOMO -> k-th virtual of the same spin
        spin = 0 if np.abs(base[1::2, n - 1]).max(initial=0.0) == 0.0 else 1
        same = [j for j in range(n, m) if np.abs(base[1 - spin::2, j]).max(initial=0.0) == 0.0]
        for k in range(1, n_states):
            j = same[(k - 1) % len(same)]
            u = base.copy()
            u[:, [n - 1, j]] = u[:, [j, n - 1]]
            initial.append(u)
    us = [_complete(np.asarray(u, dtype=float), n) for u in initial]
    npar = n * (m - n)
    x_pairs = [(i, a) for i in range(n) for a in range(n, m)]

    def states(x):
        out = []
        for k in range(n_states):
            u = us[k] @ scipy.linalg.expm(_rotation(x[k * npar:(k + 1) * npar], m, n))
            out.append(u)
        return out

    def gradient(x, c):
        orbs = states(x)
        vecs = [slater_to_ci(u[:, :n], space).coeffs for u in orbs]
        cpl = c.coupling(vecs)
        g = []
        for k, u in enumerate(orbs):
            w = hmat @ vecs[k] + cpl[k]
            for i, a in x_pairs:
                xop = one_body_matrix(np.outer(u[:, a], u[:, i]), space)
                g.append(2.0 * float((xop @ vecs[k]) @ w))
        return np.array(g)

    x = np.zeros(npar * n_states)
    ok = True
    for scale in (opts["schedule"] or [1.0]):
        c = coup.with_constraints(cs.scaled(scale))
        sol = scipy.optimize.root(lambda y: gradient(y, c), x, method="hybr", options={"xtol": 1e-14})
        x = sol.x
        ok = ok and float(np.abs(gradient(x, c)).max()) < max(opts["tol"], 1e-9)
    coup = c
    orbs = states(x)
    vecs = [slater_to_ci(u[:, :n], space).coeffs for u in orbs]
    raw = coup.raw(vecs)
    gnorm = float(np.abs(gradient(x, coup)).max())
    return OracleResult(
        vectors=[CIVector(space, v) for v in vecs],
        energies=[float(v @ (hmat @ v)) for v in vecs],
        multipliers=[],
        q=coup.q(vecs),
        gradient_norm=gnorm,
        converged=ok,
        observables=_observables(cs, raw),
        overlaps={(a, b): float(vecs[a] @ vecs[b]) for a in range(n_states) for b in range(n_states) if a < b},
        orbitals=[u[:, :n] for u in orbs],
    )
