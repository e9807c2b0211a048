"""Constrained Hartree-Fock for several independently parametrized determinants.

Every state n owns a full set of orbitals (occupied first after selection).
The modified Fock matrix keeps the ordinary Fock matrix in the
occupied-occupied and virtual-virtual blocks and adds the experimental
potentials only in the occupied-virtual blocks, so that its commutator
with the state density vanishes exactly at a stationary point of E_n + Q.

Densities are in the common (possibly non-orthogonal) basis with the
``gamma[p, q] = <bra|a+_q a_p|ket>`` convention of :mod:`ecw.nonorth`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ecw import constraints as cons
from ecw import nonorth
from ecw.integrals_io import SolveReport

log = logging.getLogger(__name__)

SELECTIONS = ("aufbau", "mom")


class ScfError(ValueError):
    pass


@dataclass(frozen=True)
class ScfConfig:
    max_iter: int = 150
    energy_tol: float = 1e-11
    density_tol: float = 1e-9
    gradient_tol: float = 1e-9
    damping: float = 0.0
    diis_depth: int = 8
    level_shift: float = 0.0
    newton_polish: bool = True
    occupied_selection: str = "mom"
    seed: int = 0
    schedule: tuple = (1.0,)

    def __post_init__(self):
        if min(self.energy_tol, self.density_tol, self.gradient_tol) <= 0:
            raise ScfError("tolerances must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ScfError("damping must lie in [0, 1)")
        if self.level_shift < 0:
            raise ScfError("level_shift must be non-negative")
        if self.diis_depth < 0 or self.max_iter < 1:
            raise ScfError("diis_depth must be >= 0 and max_iter >= 1")
        if self.occupied_selection not in SELECTIONS:
            raise ScfError(f"occupied_selection must be one of {SELECTIONS}")
        object.__setattr__(self, "schedule", tuple(float(x) for x in self.schedule))

    @classmethod
    def from_dict(cls, d, schedule=None):
        d = dict(d or {})
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if schedule is not None:
            known["schedule"] = tuple(schedule)
        return cls(**known)


@dataclass
class ModifiedFock:
    fbar: np.ndarray
    parts: dict = field(default_factory=dict)


# -- Fock pieces -----------------------------------------------------------

def standard_fock(ham, gamma):
    """f[p, q] = h[p, q] + sum_rs <pr||qs> gamma[s, r]."""
    gamma = np.asarray(gamma)
    if gamma.shape != ham.h.shape:
        raise ScfError(f"density {gamma.shape} does not match Hamiltonian {ham.h.shape}")
    return ham.h + np.einsum("prqs,sr->pq", ham.g, gamma)


def hf_energy(ham, gamma):
    e1 = np.einsum("pq,qp->", ham.h, gamma)
    e2 = 0.5 * np.einsum("pqrs,rp,sq->", ham.g, gamma, gamma)
    return float(np.real(e1 + e2)) + ham.e_core


def vexp_same_state(v, gamma, s):
    v = np.asarray(getattr(v, "v", v))
    if v.shape != gamma.shape or s.shape != gamma.shape:
        raise ScfError("shape mismatch in same-state potential")
    vgs = v @ gamma @ s
    sgv = s @ gamma @ v
    return vgs + sgv - 2.0 * s @ gamma @ v @ gamma @ s


def _pair_field(v, gamma1, gamma2, s):
    """V gamma1 + S Gamma(V), Gamma(V)[x, r] = sum_pq gamma2[x, q, r, p] V[p, q]."""
    return v @ gamma1 + s @ np.einsum("xqrp,pq->xr", gamma2, v)


def vexp_cross_state(vnm, vmn, td_nm, td_mn, gamma_nn, s):
    """Cross-state potential v^(n,m) as an M x M matrix.

    ``td_nm`` is the transition density with bra n and ket m (gamma1 and
    gamma2), ``td_mn`` its partner with bra m and ket n.  The first line
    fills the virtual-occupied block of state n, the second the mirrored
    occupied-virtual block.
    """
    if td_nm.pair == td_nm.pair[::-1]:
        raise ScfError("cross-state potential needs two different states")
    if td_nm.gamma2 is None or td_mn.gamma2 is None:
        raise ScfError("cross-state potential needs two-particle transition densities")
    vnm = np.asarray(getattr(vnm, "v", vnm))
    vmn = np.asarray(getattr(vmn, "v", vmn))
    eye = np.eye(s.shape[0])
    sgs = s @ gamma_nn @ s
    left = eye - s @ gamma_nn
    right = eye - gamma_nn @ s
    line1 = left @ _pair_field(vnm, td_nm.gamma1, td_nm.gamma2, s) @ sgs
    inner = td_mn.gamma1 @ vmn + np.einsum("kqrp,pq->kr", td_mn.gamma2, vmn) @ s
    line2 = sgs @ inner @ right
    return line1 + line2


def assemble_modified_fock(f, v_n, v_nm_sum, c_occ, s):
    """Fock in the oo/vv blocks, Fock plus potentials in the ov/vo blocks."""
    c_occ = np.asarray(getattr(c_occ, "c", c_occ))
    gamma = c_occ @ c_occ.conj().T
    w = v_n + v_nm_sum
    eye = np.eye(s.shape[0])
    # (1 - S D) w D S keeps rows virtual, columns occupied
    a = (eye - s @ gamma) @ w @ gamma @ s
    fbar = f + a + a.conj().T
    fbar = 0.5 * (fbar + fbar.conj().T)
    return ModifiedFock(fbar, {"f": f, "v_n": v_n, "v_nm_sum": v_nm_sum})


# -- eigenproblem and occupation --------------------------------------------

def _inv_sqrt(s):
    w, u = np.linalg.eigh(s)
    if w.min() <= 0:
        raise ScfError("overlap matrix is not positive definite")
    return (u / np.sqrt(w)) @ u.conj().T


def _spin_blocks(mat):
    m = mat.shape[0]
    if m % 2:
        return None
    a, b = np.arange(0, m, 2), np.arange(1, m, 2)
    if np.abs(mat[np.ix_(a, b)]).max(initial=0.0) == 0.0:
        return a, b
    return None


def _phase_fix(c):
    for k in range(c.shape[1]):
        col = c[:, k]
        big = np.flatnonzero(np.abs(col) >= np.abs(col).max() - 1e-12)[0]
        ph = col[big] / abs(col[big])
        c[:, k] = col / ph
    return c


def solve_roothaan(fbar, s):
    """Eigenpairs of fbar C = S C eps, ascending, S-orthonormal, phase fixed.

    When neither matrix couples the two spin blocks they are diagonalized
    separately so that every eigenvector stays spin-pure.
    """
    fbar, s = np.asarray(fbar), np.asarray(s)
    blocks = _spin_blocks(fbar)
    if blocks is not None and _spin_blocks(s) is not None:
        m = fbar.shape[0]
        eps, cols = [], []
        for idx in blocks:
            e, v = solve_roothaan_dense(fbar[np.ix_(idx, idx)], s[np.ix_(idx, idx)])
            full = np.zeros((m, len(idx)), dtype=v.dtype)
            full[idx] = v
            eps.append(e)
            cols.append(full)
        eps = np.concatenate(eps)
        c = np.hstack(cols)
        # equal energies: lower spatial index first, then alpha before beta
        order = sorted(range(len(eps)), key=lambda k: (round(eps[k], 12), k % len(blocks[0]), k))
        return eps[order], c[:, order]
    return solve_roothaan_dense(fbar, s)


def solve_roothaan_dense(fbar, s):
    x = _inv_sqrt(s)
    eps, u = np.linalg.eigh(x.conj().T @ fbar @ x)
    return eps, _phase_fix(x @ u)


def select_occupied(c_all, eps, n_occ, previous=None, mode="aufbau", s=None):
    """Column indices of the occupied orbitals, in ascending energy order."""
    m = c_all.shape[1]
    if mode == "aufbau" or previous is None:
        if mode == "mom" and previous is None:
            raise ScfError("maximum-overlap selection needs the previous occupied orbitals")
        order = sorted(range(m), key=lambda k: (eps[k], k))
        return sorted(order[:n_occ], key=lambda k: (eps[k], k))
    s = np.eye(c_all.shape[0]) if s is None else s
    prev = np.asarray(getattr(previous, "c", previous))
    proj = np.sum(np.abs(prev.conj().T @ s @ c_all) ** 2, axis=0)
    order = sorted(range(m), key=lambda k: (-round(proj[k], 10), eps[k], k))
    return sorted(order[:n_occ], key=lambda k: (eps[k], k))


# -- the self-consistent loop ----------------------------------------------

@dataclass
class _Orbitals:
    c: np.ndarray        # all M orbitals
    eps: np.ndarray
    occ: list

    @property
    def c_occ(self):
        return self.c[:, self.occ]

    @property
    def c_vir(self):
        return self.c[:, [k for k in range(self.c.shape[1]) if k not in self.occ]]

    @property
    def gamma(self):
        co = self.c_occ
        return co @ co.conj().T


def _spin_of(col):
    a = np.sum(np.abs(col[0::2]) ** 2)
    b = np.sum(np.abs(col[1::2]) ** 2)
    if b < 1e-12:
        return 0
    if a < 1e-12:
        return 1
    return None


def initial_guess(ham, n_states):
    """Core-Hamiltonian orbitals; state k > 0 promotes the HOMO to its k-th same-spin virtual."""
    eps, c = solve_roothaan(ham.h, ham.s)
    n = ham.n_electrons
    occ = select_occupied(c, eps, n)
    out = [_Orbitals(c, eps, occ)]
    homo = occ[-1]
    virt = [k for k in range(c.shape[1]) if k not in occ]
    spin = _spin_of(c[:, homo])
    same = [k for k in virt if _spin_of(c[:, k]) == spin] or virt
    for k in range(1, n_states):
        target = same[(k - 1) % len(same)]
        new_occ = sorted([o for o in occ if o != homo] + [target], key=lambda j: (eps[j], j))
        out.append(_Orbitals(c.copy(), eps.copy(), new_occ))
    return out


def _orbitals_from_state(ham, st):
    """Complete a SlaterState's occupied set with virtuals from its own Fock matrix."""
    c_occ = np.asarray(getattr(st, "c", st))
    gamma = c_occ @ c_occ.conj().T
    f = standard_fock(ham, gamma)
    eps, c = solve_roothaan(f, ham.s)
    occ = select_occupied(c, eps, c_occ.shape[1], c_occ, "mom", ham.s)
    # keep the supplied occupied vectors themselves
    c = c.copy()
    c[:, occ] = c_occ
    proj = np.eye(c.shape[0]) - gamma @ ham.s
    vir = [k for k in range(c.shape[1]) if k not in occ]
    cv = proj @ c[:, vir]
    cv = cv @ _inv_sqrt(cv.conj().T @ ham.s @ cv)
    c[:, vir] = cv
    return _Orbitals(c, eps, list(occ))


@dataclass
class PairData:
    td: dict             # (bra, ket) -> TransitionDensity
    raw: dict            # (pid, bra, ket) -> element
    overlaps: dict       # (bra, ket) -> det sigma


def _prop_matrices(properties):
    if isinstance(properties, dict):
        return {k: np.asarray(getattr(v, "a", v)) for k, v in properties.items()}
    return {p.id: np.asarray(p.a) for p in properties}


def _coupled_pairs(cs, n_states):
    pairs = set()
    for (pid, b, k) in cs.elements():
        if b != k:
            pairs.add((b, k))
            pairs.add((k, b))
    if cs.ortho_weight > 0:
        pairs |= {(a, b) for a in range(n_states) for b in range(n_states) if a != b}
    return sorted(pairs)


def pair_data(ham, props, cs, orbs, need_gamma2=True):
    """Transition densities, raw observables and overlaps for every relevant pair."""
    n_states = len(orbs)
    td = {}
    for n in range(n_states):
        g = orbs[n].gamma
        td[(n, n)] = nonorth.TransitionDensity(g, (n, n), 1.0)
    coupled = _coupled_pairs(cs, n_states)
    for (b, k) in coupled:
        bra = nonorth.SlaterState(orbs[b].c_occ, state_index=b)
        ket = nonorth.SlaterState(orbs[k].c_occ, state_index=k)
        td[(b, k)] = (nonorth.tdm2 if need_gamma2 else nonorth.tdm1)(bra, ket, ham.s)
    raw = {}
    for (pid, b, k) in cs.elements():
        raw[(pid, b, k)] = nonorth.observable(td[(b, k)], props[pid])
    overlaps = {}
    if cs.ortho_weight > 0:
        overlaps = {(b, k): td[(b, k)].det_sigma for (b, k) in coupled}
    return PairData(td, raw, overlaps)


def potentials(ham, props, cs, pdata, n_states):
    """V^{nm} for every pair touched by the constraints."""
    out = {}
    pairs = {(n, n) for n in range(n_states)} | set(_coupled_pairs(cs, n_states))
    for pair in sorted(pairs):
        out[pair] = cons.build_vexp(pair, cs, pdata.raw, props, pdata.overlaps or None,
                                    s=ham.s, n_electrons=ham.n_electrons).v
    return out


def modified_focks(ham, props, cs, orbs, pdata=None):
    n_states = len(orbs)
    pdata = pdata or pair_data(ham, props, cs, orbs)
    vs = potentials(ham, props, cs, pdata, n_states)
    out = []
    for n, o in enumerate(orbs):
        g = o.gamma
        f = standard_fock(ham, g)
        v_n = vexp_same_state(vs[(n, n)], g, ham.s)
        v_cross = np.zeros_like(f)
        for m in range(n_states):
            if m == n or (n, m) not in pdata.td:
                continue
            v_cross = v_cross + vexp_cross_state(vs[(n, m)], vs[(m, n)], pdata.td[(n, m)],
                                                 pdata.td[(m, n)], g, ham.s)
        out.append(assemble_modified_fock(f, v_n, v_cross, o.c_occ, ham.s))
    return out, pdata


def brillouin_residual(mf, orb):
    """max |C_v^H fbar C_o| for one state."""
    return float(np.abs(orb.c_vir.conj().T @ mf.fbar @ orb.c_occ).max(initial=0.0))


def objective(ham, props, cs, occupied):
    """sum_n E_n + Q for a list of occupied coefficient matrices."""
    orbs = [_Orbitals(np.asarray(c), np.zeros(np.asarray(c).shape[1]), list(range(np.asarray(c).shape[1])))
            for c in occupied]
    pdata = pair_data(ham, props, cs, orbs, need_gamma2=False)
    energy = sum(hf_energy(ham, o.gamma) for o in orbs)
    calc = cons.fitted_values(cs, pdata.raw)
    return energy + cons.eval_Q(calc, cs, pdata.overlaps or None)


def orbital_gradient(fbar, c_occ, c_vir):
    """d(sum E + Q)/d kappa[a, i] for c_occ[:, i] += kappa[a, i] c_vir[:, a] (real rotations)."""
    return 2.0 * np.real(c_vir.conj().T @ fbar @ c_occ)


class _Diis:
    def __init__(self, depth):
        self.depth = depth
        self.focks, self.errors = [], []

    def push(self, f, err):
        self.focks.append(f)
        self.errors.append(err)
        if len(self.focks) > self.depth:
            self.focks.pop(0)
            self.errors.pop(0)

    def extrapolate(self):
        k = len(self.focks)
        if k < 2:
            return self.focks[-1]
        b = np.zeros((k + 1, k + 1))
        for i in range(k):
            for j in range(k):
                b[i, j] = np.real(np.vdot(self.errors[i], self.errors[j]))
        b[k, :k] = b[:k, k] = -1.0
        rhs = np.zeros(k + 1)
        rhs[k] = -1.0
        try:
            coef = np.linalg.solve(b, rhs)[:k]
        except np.linalg.LinAlgError:
            return self.focks[-1]
        if not np.all(np.isfinite(coef)):
            return self.focks[-1]
        return sum(c * f for c, f in zip(coef, self.focks))


def _slater_states(orbs):
    return [nonorth.SlaterState(o.c_occ.copy(), o.eps[o.occ].copy(), n) for n, o in enumerate(orbs)]


def scf_solve(ham, properties, cs, n_states, cfg=None, initial=None, report=None):
    """Self-consistent constrained HF for ``n_states`` determinants.

    Weights are ramped through ``cfg.schedule`` (scale factors applied to
    every Lagrange weight), each stage warm-started from the previous one.
    Returns ``(list of SlaterState, SolveReport)``.
    """
    cfg = cfg or ScfConfig()
    props = _prop_matrices(properties)
    cs = cons.ConstraintSet() if cs is None else cs
    cs.validate(n_states, set(props))
    if initial is None:
        orbs = initial_guess(ham, n_states)
    else:
        orbs = [_orbitals_from_state(ham, st) for st in initial]
        if len(orbs) != n_states:
            raise ScfError("initial guess count differs from n_states")
    report = report or SolveReport(method="hf")
    it_total = 0
    converged = True
    for scale in cfg.schedule:
        scs = cs.scaled(scale)
        orbs, ok, it_total = _scf_stage(ham, props, scs, orbs, cfg, report, it_total)
        if not ok and cfg.newton_polish:
            report.event(f"scale {scale:g}: Roothaan iterations stalled, Newton polish")
            orbs, ok = _newton_polish(ham, props, scs, orbs, cfg)
        converged = converged and ok
        if not ok:
            report.event(f"scale {scale:g}: not converged after {cfg.max_iter} iterations")

    cs = cs.scaled(cfg.schedule[-1])
    focks, pdata = modified_focks(ham, props, cs, orbs)
    energies = [hf_energy(ham, o.gamma) for o in orbs]
    calc = cons.fitted_values(cs, pdata.raw)
    report.converged = converged
    report.n_iter = it_total
    report.energies = energies
    report.q = cons.eval_Q(calc, cs, pdata.overlaps or None)
    report.residuals = cons.residual_rows(cs, calc)
    report.extra.update({
        "brillouin_residual": [brillouin_residual(f, o) for f, o in zip(focks, orbs)],
        "overlaps": {f"{b},{k}": float(np.real(nonorth.pair_overlap(orbs[b].c_occ, orbs[k].c_occ, ham.s).det_sigma))
                     for b in range(n_states) for k in range(b + 1, n_states)},
        "orbital_energies": [o.eps.tolist() for o in orbs],
    })
    report.densities = {f"gamma_{n}{n}": o.gamma for n, o in enumerate(orbs)}
    for n in range(1, n_states):
        ov = abs(nonorth.pair_overlap(orbs[0].c_occ, orbs[n].c_occ, ham.s).det_sigma)
        if ov > 0.999:
            report.event(f"variational collapse: state {n} overlaps the ground state by {ov:.4f}")
    return _slater_states(orbs), report


def _semicanonical(ham, fbar, orb):
    """Diagonalize fbar inside the occupied and the virtual space separately."""
    s = ham.s
    blocks = []
    eps = np.zeros(orb.c.shape[1])
    cols = []
    for part in (orb.c_occ, orb.c_vir):
        w, u = np.linalg.eigh(part.conj().T @ fbar @ part)
        blocks.append((w, part @ u))
    c = np.hstack([blocks[0][1], blocks[1][1]])
    eps = np.concatenate([blocks[0][0], blocks[1][0]])
    n = orb.c_occ.shape[1]
    return _Orbitals(_phase_fix(c), eps, list(range(n)))


def _newton_polish(ham, props, cs, orbs, cfg):
    """Root-find the occupied-virtual gradients of every state directly.

    Each state is rotated as C_n expm(K_n) with real antisymmetric
    occupied-virtual generators; the residual is C_v^H fbar C_o from the
    cofactor-based modified Fock matrices.
    """
    import scipy.optimize

    if any(np.iscomplexobj(o.c) for o in orbs) or np.iscomplexobj(ham.h):
        return orbs, False
    base = [np.hstack([o.c_occ, o.c_vir]) for o in orbs]
    m = base[0].shape[0]
    n = orbs[0].c_occ.shape[1]
    npar = n * (m - n)

    def rotated(x):
        out = []
        for k, c in enumerate(base):
            gen = np.zeros((m, m))
            gen[n:, :n] = x[k * npar:(k + 1) * npar].reshape(m - n, n)
            c_new = c @ scipy.linalg.expm(gen - gen.T)
            out.append(_Orbitals(c_new, np.zeros(m), list(range(n))))
        return out

    def residual(x):
        trial = rotated(x)
        focks, _ = modified_focks(ham, props, cs, trial)
        return np.concatenate([(t.c_vir.T @ f.fbar @ t.c_occ).ravel() for f, t in zip(focks, trial)])

    sol = scipy.optimize.root(residual, np.zeros(npar * len(orbs)), method="hybr",
                              options={"xtol": 1e-14, "maxfev": 400 * (npar * len(orbs) + 1)})
    final = rotated(sol.x)
    focks, _ = modified_focks(ham, props, cs, final)
    final = [_semicanonical(ham, f.fbar, o) for f, o in zip(focks, final)]
    focks, _ = modified_focks(ham, props, cs, final)
    gmax = max(brillouin_residual(f, o) for f, o in zip(focks, final))
    return final, gmax < cfg.gradient_tol


def _shift_operator(orb, s):
    """S (sum_v sign_v c_v c_v^H) S with sign +1 above the highest occupied level, -1 below.

    Adding mu times this to the Fock matrix widens every occupied-virtual
    gap in magnitude, including the inverted gaps of an excited
    configuration, without touching the occupied-virtual block.
    """
    top = max(orb.eps[k] for k in orb.occ)
    out = np.zeros_like(s, dtype=np.result_type(s, orb.c))
    for k in range(orb.c.shape[1]):
        if k in orb.occ:
            continue
        c = orb.c[:, k:k + 1]
        out += (1.0 if orb.eps[k] >= top else -1.0) * (c @ c.conj().T)
    return s @ out @ s


def _scf_stage(ham, props, cs, orbs, cfg, report, it0):
    n_states = len(orbs)
    n_occ = ham.n_electrons
    diis = [_Diis(cfg.diis_depth) for _ in range(n_states)]
    prev_f = [None] * n_states
    shift = cfg.level_shift
    last = None          # (orbitals, residual) of the previous iterate
    e_old = [hf_energy(ham, o.gamma) for o in orbs]
    for it in range(1, cfg.max_iter + 1):
        focks, pdata = modified_focks(ham, props, cs, orbs)
        grads = [brillouin_residual(f, o) for f, o in zip(focks, orbs)]
        gmax = max(grads)
        if last is not None and gmax > 1.5 * last[1] and gmax > cfg.gradient_tol:
            # the Roothaan step overshot (constraint curvature larger than
            # the orbital gaps): go back and retry with wider gaps
            shift = max(4.0 * shift, 0.5)
            report.event(f"iteration {it0 + it}: step rejected, level shift {shift:g}")
            for d in diis:
                d.focks.clear()
                d.errors.clear()
            orbs = last[0]
            focks, pdata = modified_focks(ham, props, cs, orbs)
            grads = [brillouin_residual(f, o) for f, o in zip(focks, orbs)]
            gmax = max(grads)
        elif last is not None and gmax < 0.5 * last[1] and shift > cfg.level_shift:
            shift = max(cfg.level_shift, 0.5 * shift)
        last = (orbs, gmax)
        q = cons.eval_Q(cons.fitted_values(cs, pdata.raw), cs, pdata.overlaps or None)
        new = []
        for n, (mf, o) in enumerate(zip(focks, orbs)):
            fbar = mf.fbar
            g = o.gamma
            err = fbar @ g @ ham.s - ham.s @ g @ fbar
            if cfg.diis_depth > 0:
                diis[n].push(fbar, err)
                fuse = diis[n].extrapolate()
            elif cfg.damping > 0 and prev_f[n] is not None:
                fuse = (1.0 - cfg.damping) * fbar + cfg.damping * prev_f[n]
            else:
                fuse = fbar
            prev_f[n] = fuse
            if shift:
                fuse = fuse + shift * _shift_operator(o, ham.s)
            eps, c = solve_roothaan(fuse, ham.s)
            occ = select_occupied(c, eps, n_occ, o.c_occ, cfg.occupied_selection, ham.s)
            if shift:
                # report unshifted orbital energies
                eps = np.real(np.einsum("pk,pq,qk->k", c.conj(), fbar, c))
            new.append(_Orbitals(c, eps, occ))
        d_change = max(float(np.abs(a.gamma - b.gamma).max()) for a, b in zip(new, orbs))
        orbs = new
        energies = [hf_energy(ham, o.gamma) for o in orbs]
        e_change = max(abs(a - b) for a, b in zip(energies, e_old))
        e_old = energies
        for n in range(n_states):
            report.log(it0 + it, n, energies[n], q, grads[n])
        log.debug("hf iter %d  E=%s  Q=%.3e  grad=%.2e shift=%g", it, energies, q, gmax, shift)
        if e_change < cfg.energy_tol and d_change < cfg.density_tol and gmax < cfg.gradient_tol:
            return orbs, True, it0 + it
    return orbs, False, it0 + cfg.max_iter
