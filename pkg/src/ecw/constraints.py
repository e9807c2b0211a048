"""Constraint function Q, its derivatives and the effective potentials V^{nm}.

A datum refers to a property operator and an ordered state pair (bra, ket).
Three fitted quantities are supported:

* ``expectation`` (bra == ket): y = A^{nn}
* ``intensity``   (bra != ket): y = A^{nm} A^{mn}, i.e. |A^{nm}|^2 for Hermitian
  wavefunctions; phase-free, so the transition gauge never matters
* ``difference``  (bra != ket): y = A^{mm} - A^{nn}, e.g. a transition energy
  built from an energy-like operator

Derivatives are taken with A^{nm} and A^{mn} as independent variables, which
is what the bra-side stationarity condition needs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

LOSSES = ("L2", "L1")
MODES = ("expectation", "intensity", "difference")


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentalDatum:
    property_id: str
    bra: int
    ket: int
    value: float
    sigma: float
    loss: str = "L2"
    weight: float = 1.0
    mode: str = ""

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConstraintError(f"{self.property_id}: sigma must be positive")
        if self.loss not in LOSSES:
            raise ConstraintError(f"{self.property_id}: unknown loss {self.loss!r}")
        if self.weight < 0:
            raise ConstraintError(f"{self.property_id}: weight must be non-negative")
        mode = self.mode or ("expectation" if self.bra == self.ket else "intensity")
        if mode not in MODES:
            raise ConstraintError(f"{self.property_id}: unknown mode {mode!r}")
        if (mode == "expectation") != (self.bra == self.ket):
            raise ConstraintError(f"{self.property_id}: mode {mode!r} does not fit pair "
                                  f"({self.bra}, {self.ket})")
        object.__setattr__(self, "mode", mode)

    @property
    def pair(self):
        return (self.bra, self.ket)

    @property
    def key(self):
        return (self.property_id, self.pair)

    def elements(self):
        """Raw matrix elements (property, bra, ket) this datum depends on."""
        n, m = self.pair
        if self.mode == "expectation":
            return [(self.property_id, n, n)]
        if self.mode == "intensity":
            return [(self.property_id, n, m), (self.property_id, m, n)]
        return [(self.property_id, n, n), (self.property_id, m, m)]


@dataclass(frozen=True)
class ConstraintSet:
    data: tuple = ()
    ortho_weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "data", tuple(self.data))
        if self.ortho_weight < 0:
            raise ConstraintError("ortho_weight must be non-negative")
        keys = [d.key for d in self.data]
        if len(set(keys)) != len(keys):
            raise ConstraintError("at most one datum per (property, pair) is allowed")

    def __len__(self):
        return len(self.data)

    def scaled(self, factor) -> "ConstraintSet":
        """Every Lagrange weight (including the overlap penalty) times ``factor``."""
        return ConstraintSet(tuple(replace(d, weight=d.weight * factor) for d in self.data),
                             self.ortho_weight * factor)

    def max_state(self):
        return max([max(d.pair) for d in self.data], default=-1)

    def elements(self):
        out = []
        for d in self.data:
            for e in d.elements():
                if e not in out:
                    out.append(e)
        return out

    def validate(self, n_states, property_ids):
        for d in self.data:
            if max(d.pair) >= n_states or min(d.pair) < 0:
                raise ConstraintError(f"{d.property_id}: pair {d.pair} outside {n_states} states")
            if d.property_id not in property_ids:
                raise ConstraintError(f"unknown property id {d.property_id!r}")
        return self

    @property
    def is_empty(self):
        return not self.data and self.ortho_weight == 0.0


def fitted_value(datum, raw):
    """Fitted scalar of one datum from raw elements ``raw[(pid, bra, ket)]``."""
    pid, (n, m) = datum.property_id, datum.pair
    if datum.mode == "expectation":
        return float(np.real(raw[(pid, n, n)]))
    if datum.mode == "intensity":
        return float(np.real(raw[(pid, n, m)] * raw[(pid, m, n)]))
    return float(np.real(raw[(pid, m, m)] - raw[(pid, n, n)]))


def fitted_values(cs, raw):
    return {d.key: fitted_value(d, raw) for d in cs.data}


def _loss(datum, y):
    r = abs(y - datum.value) / datum.sigma
    return r * r if datum.loss == "L2" else r


def _ordered_overlaps(overlaps):
    full = {k: v for k, v in (overlaps or {}).items() if k[0] != k[1]}
    for (n, m), o in list(full.items()):
        full.setdefault((m, n), np.conj(o))
    return full


def ortho_term(cs, overlaps):
    """lambda_ortho * sum over ordered pairs n != m of <n|m><m|n>."""
    if cs.ortho_weight == 0.0:
        return 0.0
    full = _ordered_overlaps(overlaps)
    return cs.ortho_weight * sum(float(np.real(o * full[(m, n)])) for (n, m), o in full.items())


def eval_Q(calc, cs, overlaps=None):
    """Q = sum_j lambda_j rho_j(|y_j - y_exp| / sigma_j) + overlap penalty.

    ``calc`` maps ``(property_id, (bra, ket))`` to the fitted value y_j.
    ``overlaps`` maps ordered state pairs to <bra|ket>; when only one order
    of a pair is given the other is taken as its complex conjugate.
    """
    q = 0.0
    for d in cs.data:
        if d.key not in calc:
            raise ConstraintError(f"missing calculated value for {d.key}")
        q += d.weight * _loss(d, calc[d.key])
    return q + ortho_term(cs, overlaps)


def dQ_dA(datum, a_calc):
    """Derivative of Q with respect to the fitted value of one datum."""
    diff = a_calc - datum.value
    if datum.loss == "L2":
        return 2.0 * datum.weight * diff / datum.sigma ** 2
    return datum.weight * float(np.sign(diff)) / datum.sigma


def element_derivatives(cs, raw):
    """dQ/dA^{nm}_j for every raw element, keyed ``(pid, bra, ket)``."""
    out = {}
    for d in cs.data:
        dq = dQ_dA(d, fitted_value(d, raw))
        pid, (n, m) = d.property_id, d.pair
        if d.mode == "expectation":
            contrib = {(pid, n, n): dq}
        elif d.mode == "intensity":
            contrib = {(pid, n, m): dq * raw[(pid, m, n)], (pid, m, n): dq * raw[(pid, n, m)]}
        else:
            contrib = {(pid, m, m): dq, (pid, n, n): -dq}
        for k, v in contrib.items():
            out[k] = out.get(k, 0.0) + v
    return out


def overlap_derivatives(cs, overlaps):
    """dQ/d<n|m> = 2 lambda_ortho <m|n> for n != m."""
    if cs.ortho_weight == 0.0:
        return {}
    full = _ordered_overlaps(overlaps)
    return {(n, m): 2.0 * cs.ortho_weight * full[(m, n)] for (n, m) in full}


@dataclass(frozen=True)
class VexpMatrix:
    v: np.ndarray
    pair: tuple


def build_vexp(pair, cs, raw, properties, overlaps=None, s=None, n_electrons=None):
    """V^{nm} = sum_j dQ/dA^{nm}_j A_j (plus the overlap-penalty term).

    ``properties`` maps property id to its M x M matrix (or PropertyOperator).
    The overlap penalty acts through the one-particle identity, whose matrix
    in the (possibly non-orthogonal) basis is ``s``, divided by the electron
    count so that <n|(S/N)|m> = <n|m>.
    """
    props = {k: getattr(v, "a", v) for k, v in dict(properties).items()}
    n, m = pair
    if not props and s is None:
        raise ConstraintError("no property matrices supplied")
    dim = (next(iter(props.values())) if props else s).shape[0]
    derivs = element_derivatives(cs, raw)
    v = np.zeros((dim, dim), dtype=np.result_type(*[np.asarray(x) for x in props.values()] or [0.0],
                                                   *[np.asarray(x) for x in derivs.values()] or [0.0]))
    for (pid, b, k), dq in derivs.items():
        if (b, k) != (n, m):
            continue
        if pid not in props:
            raise ConstraintError(f"unknown property id {pid!r}")
        v = v + dq * props[pid]
    if n != m and overlaps:
        od = overlap_derivatives(cs, overlaps).get((n, m), 0.0)
        if od != 0.0:
            if s is None or n_electrons is None:
                raise ConstraintError("overlap penalty needs the basis overlap and electron count")
            v = v + od * np.asarray(s) / n_electrons
    return VexpMatrix(v, (n, m))


def residual_rows(cs, calc):
    rows = []
    for d in cs.data:
        y = calc[d.key]
        rows.append({"property": d.property_id, "bra": d.bra, "ket": d.ket, "mode": d.mode,
                     "value": d.value, "sigma": d.sigma, "loss": d.loss, "weight": d.weight,
                     "calc": y, "residual": (y - d.value) / d.sigma})
    return rows


def load_experiment(path) -> ConstraintSet:
    """Read ``experiment.json``: {"ortho_weight": w, "data": [{property, bra, ket, ...}]}."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, list):
        doc = {"data": doc}
    data = []
    for e in doc.get("data", []):
        data.append(ExperimentalDatum(
            property_id=e["property"], bra=int(e["bra"]), ket=int(e["ket"]),
            value=float(e["value"]), sigma=float(e["sigma"]), loss=e.get("loss", "L2"),
            weight=float(e.get("weight", 1.0)), mode=e.get("mode", "")))
    return ConstraintSet(tuple(data), float(doc.get("ortho_weight", 0.0)))


def experiment_document(cs) -> dict:
    return {
        "ortho_weight": cs.ortho_weight,
        "data": [{"property": d.property_id, "bra": d.bra, "ket": d.ket, "mode": d.mode,
                  "value": d.value, "sigma": d.sigma, "loss": d.loss, "weight": d.weight}
                 for d in cs.data],
    }


def dump_experiment(cs, path):
    Path(path).write_text(json.dumps(experiment_document(cs), indent=1) + "\n", encoding="utf-8")


def synthesize_experiment(ham, properties, emit, noise=None, seed=0, sigma=None):
    """Synthetic data from exact (FCI) states of ``ham``.

    ``emit`` is a list of dicts with keys property, bra, ket and optionally
    mode, sigma, loss, weight.  ``noise`` is the standard deviation of added
    Gaussian noise (None or 0 for exact values).
    """
    from ecw import detspace

    props = {p.id: p for p in properties}
    n_states = 1 + max([max(int(e["bra"]), int(e["ket"])) for e in emit], default=0)
    for e in emit:
        if e["property"] not in props:
            raise ConstraintError(f"unknown property id {e['property']!r}")
    space = detspace.DetSpace.sector(ham.n_spin_orbitals, ham.n_alpha, ham.n_beta)
    if n_states > space.dim:
        raise ConstraintError(f"pair index {n_states - 1} exceeds the {space.dim} available states")
    states = [v for _, v in detspace.fci_solve(ham, (ham.n_alpha, ham.n_beta), n_states)]
    rng = np.random.default_rng(seed)
    data = []
    for e in emit:
        pid, n, m = e["property"], int(e["bra"]), int(e["ket"])
        mode = e.get("mode", "")
        if not mode:
            mode = "expectation" if n == m else (
                "difference" if props[pid].kind == "kinetic" else "intensity")
        probe = ExperimentalDatum(pid, n, m, 0.0, 1.0, mode=mode)
        raw = {}
        for (p, b, k) in probe.elements():
            raw[(p, b, k)] = detspace.expectation(props[p].a, states[b], states[k])
        y = fitted_value(probe, raw)
        sig = float(e.get("sigma", sigma if sigma is not None else (noise or 1e-2)))
        if noise:
            y = y + float(rng.normal(0.0, noise))
        data.append(ExperimentalDatum(pid, n, m, y, sig, e.get("loss", "L2"),
                                      float(e.get("weight", 1.0)), mode))
    return ConstraintSet(tuple(data), 0.0)
