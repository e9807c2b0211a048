"""Hamiltonian and property-operator containers plus their file formats.

Spin-orbitals are interleaved: spatial orbital ``p`` gives spin-orbital
``2p`` (alpha) and ``2p + 1`` (beta).  The two-body tensor ``g`` stores
antisymmetrized physicists' integrals ``g[p, q, r, s] = <pq||rs>`` so that

    H = e_core + sum_pq h[p, q] a+_p a_q + 1/4 sum_pqrs g[p, q, r, s] a+_p a+_q a_s a_r
"""
from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from ecw import __version__

PROPERTY_KINDS = ("dipole_x", "dipole_y", "dipole_z", "kinetic", "custom")


class FcidumpError(ValueError):
    """Malformed FCIDUMP content; ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    pass


class PropertyFileError(ValueError):
    pass


class ReportWriteError(Exception):
    """Raised when a report or trace cannot be written."""


@dataclass(frozen=True)
class Hamiltonian:
    h: np.ndarray
    g: np.ndarray
    e_core: float
    s: np.ndarray
    n_alpha: int
    n_beta: int

    @property
    def n_spin_orbitals(self) -> int:
        return self.h.shape[0]

    @property
    def n_electrons(self) -> int:
        return self.n_alpha + self.n_beta

    def validate(self, tol=1e-12):
        m = self.n_spin_orbitals
        if self.h.shape != (m, m) or self.g.shape != (m,) * 4 or self.s.shape != (m, m):
            raise ValidationError("inconsistent Hamiltonian array shapes")
        if np.abs(self.h - self.h.conj().T).max() > tol:
            raise ValidationError("one-body matrix is not Hermitian")
        if np.abs(self.s - self.s.conj().T).max() > tol:
            raise ValidationError("overlap matrix is not Hermitian")
        if np.linalg.eigvalsh(self.s).min() <= 0.0:
            raise ValidationError("overlap matrix is not positive definite")
        g = self.g
        if (np.abs(g + g.transpose(1, 0, 2, 3)).max() > tol
                or np.abs(g + g.transpose(0, 1, 3, 2)).max() > tol):
            raise ValidationError("two-body tensor is not antisymmetric")
        if np.abs(g - g.transpose(2, 3, 0, 1).conj()).max() > tol:
            raise ValidationError("two-body tensor is not Hermitian")
        if max(self.n_alpha, self.n_beta) > m // 2 or min(self.n_alpha, self.n_beta) < 0:
            raise ValidationError("electron count exceeds available orbitals")
        return self

    def with_overlap(self, s) -> "Hamiltonian":
        return Hamiltonian(self.h, self.g, self.e_core, np.asarray(s), self.n_alpha, self.n_beta)

    def with_one_body(self, h) -> "Hamiltonian":
        return Hamiltonian(np.asarray(h), self.g, self.e_core, self.s, self.n_alpha, self.n_beta)


@dataclass(frozen=True)
class PropertyOperator:
    id: str
    a: np.ndarray
    kind: str = "custom"
    hermitian: bool = True


def antisymmetrize(v):
    """Project a four-index tensor onto its part antisymmetric in (p,q) and (r,s)."""
    v = np.asarray(v)
    return 0.25 * (v - v.transpose(1, 0, 2, 3) - v.transpose(0, 1, 3, 2) + v.transpose(1, 0, 3, 2))


def spatial_to_spin(h_spatial, eri_chem):
    """Expand spatial integrals (chemists' ``(pq|rs)``) to interleaved spin-orbitals.

    Returns ``(h, g)`` with ``g`` the antisymmetrized physicists' tensor.
    """
    h_spatial = np.asarray(h_spatial)
    n = h_spatial.shape[0]
    m = 2 * n
    spin = np.arange(m) % 2
    orb = np.arange(m) // 2
    same = spin[:, None] == spin[None, :]
    h = np.where(same, h_spatial[orb[:, None], orb[None, :]], 0.0)
    phys = np.asarray(eri_chem).transpose(0, 2, 1, 3)
    v = phys[np.ix_(orb, orb, orb, orb)]
    v = v * same[:, None, :, None] * same[None, :, None, :]
    g = v - v.transpose(0, 1, 3, 2)
    return h, g


def spin_to_spatial(h, g):
    """Recover spatial integrals from a spin-adapted spin-orbital Hamiltonian."""
    h = np.asarray(h)
    n = h.shape[0] // 2
    a = np.arange(n) * 2
    b = a + 1
    h_sp = h[np.ix_(a, a)]
    # <p_a q_b | r_a s_b> = (pr|qs), exchange part vanishes for opposite spins
    phys = np.asarray(g)[np.ix_(a, b, a, b)]
    eri = phys.transpose(0, 2, 1, 3)
    h_spin, g_spin = spatial_to_spin(h_sp, eri)
    if np.abs(h_spin - h).max() > 1e-12 or np.abs(g_spin - g).max() > 1e-12:
        raise ValidationError("Hamiltonian is not spin-adapted; cannot write FCIDUMP")
    return h_sp, eri


_KEY = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=")


def _parse_namelist(text):
    body = re.sub(r"&\s*FCI", "", text, flags=re.IGNORECASE)
    body = re.sub(r"&\s*END|/", "", body, flags=re.IGNORECASE)
    keys = list(_KEY.finditer(body))
    out = {}
    for k, m in enumerate(keys):
        end = keys[k + 1].start() if k + 1 < len(keys) else len(body)
        raw = body[m.end():end].replace("\n", " ").strip().strip(",")
        vals = [x for x in (t.strip() for t in raw.split(",")) if x]
        out[m.group(1).upper()] = vals
    return out


def parse_fcidump(text) -> Hamiltonian:
    """Parse FCIDUMP text (spatial orbitals, chemists' notation, 8-fold symmetry)."""
    if not isinstance(text, str):
        text = text.read()
    lines = text.splitlines()
    header = []
    start = None
    for k, line in enumerate(lines):
        header.append(line)
        stripped = line.strip().upper()
        if stripped.startswith("&END") or stripped.endswith("/") or stripped == "/":
            start = k + 1
            break
    if start is None:
        raise FcidumpError("namelist header is not terminated by &END or /")
    nl = _parse_namelist("\n".join(header))
    try:
        norb = int(nl["NORB"][0])
        nelec = int(nl["NELEC"][0])
        ms2 = int(nl.get("MS2", ["0"])[0])
    except (KeyError, IndexError, ValueError) as exc:
        raise FcidumpError(f"header must define NORB and NELEC ({exc})") from None
    if (nelec + ms2) % 2 or abs(ms2) > nelec or nelec < 0:
        raise ValidationError(f"NELEC={nelec} is inconsistent with MS2={ms2}")
    n_alpha = (nelec + ms2) // 2
    n_beta = nelec - n_alpha
    if max(n_alpha, n_beta) > norb:
        raise ValidationError(f"NELEC={nelec}, MS2={ms2} does not fit into NORB={norb}")

    h1 = np.zeros((norb, norb))
    eri = np.zeros((norb,) * 4)
    e_core = 0.0
    for lineno in range(start + 1, len(lines) + 1):
        tokens = lines[lineno - 1].split()
        if not tokens:
            continue
        if len(tokens) != 5:
            raise FcidumpError(f"expected 'value i j k l', got {len(tokens)} fields", lineno)
        try:
            val = float(tokens[0].replace("D", "E").replace("d", "e"))
            i, j, k, l = (int(t) for t in tokens[1:])
        except ValueError:
            raise FcidumpError(f"cannot parse record {lines[lineno - 1].strip()!r}", lineno) from None
        if min(i, j, k, l) < 0 or max(i, j, k, l) > norb:
            raise FcidumpError(f"orbital index out of range 0..{norb}", lineno)
        if i == j == k == l == 0:
            e_core = val
        elif k == 0 and l == 0:
            if i == 0 or j == 0:
                raise FcidumpError("one-body record needs two nonzero indices", lineno)
            h1[i - 1, j - 1] = h1[j - 1, i - 1] = val
        elif 0 in (i, j, k, l):
            raise FcidumpError("two-body record needs four nonzero indices", lineno)
        else:
            i, j, k, l = i - 1, j - 1, k - 1, l - 1
            for a, b, c, d in ((i, j, k, l), (j, i, k, l), (i, j, l, k), (j, i, l, k)):
                eri[a, b, c, d] = eri[c, d, a, b] = val
    h, g = spatial_to_spin(h1, eri)
    ham = Hamiltonian(h, g, e_core, np.eye(2 * norb), n_alpha, n_beta)
    return ham.validate()


def read_fcidump(path) -> Hamiltonian:
    return parse_fcidump(Path(path).read_text())


def write_fcidump_spatial(h_spatial, eri_chem, e_core, norb, nelec, ms2, tol=0.0) -> str:
    out = io.StringIO()
    out.write(f"&FCI NORB={norb},NELEC={nelec},MS2={ms2},\n")
    out.write("  ORBSYM=" + "1," * norb + "\n  ISYM=1,\n&END\n")
    for i in range(norb):
        for j in range(i + 1):
            for k in range(norb):
                for l in range(k + 1):
                    if i * (i + 1) // 2 + j < k * (k + 1) // 2 + l:
                        continue
                    v = float(eri_chem[i, j, k, l])
                    if abs(v) > tol:
                        out.write(f"{v!r} {i + 1} {j + 1} {k + 1} {l + 1}\n")
    for i in range(norb):
        for j in range(i + 1):
            v = float(h_spatial[i, j])
            if abs(v) > tol:
                out.write(f"{v!r} {i + 1} {j + 1} 0 0\n")
    out.write(f"{float(e_core)!r} 0 0 0 0\n")
    return out.getvalue()


def write_fcidump(ham: Hamiltonian) -> str:
    h_sp, eri = spin_to_spatial(ham.h, ham.g)
    return write_fcidump_spatial(h_sp, eri, ham.e_core, h_sp.shape[0], ham.n_electrons,
                                 ham.n_alpha - ham.n_beta)


def _matrix(raw, n, label):
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 1:
        size = int(round(math.sqrt(arr.size)))
        if size * size != arr.size:
            raise PropertyFileError(f"{label}: flat matrix of length {arr.size} is not square")
        arr = arr.reshape(size, size)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise PropertyFileError(f"{label}: matrix must be square, got shape {arr.shape}")
    return arr


def _read_property_doc(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PropertyFileError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, list):
        doc = {"properties": doc}
    return doc


def _to_spin_basis(arr, basis):
    if basis == "spatial":
        return np.kron(arr, np.eye(2))
    return arr


def load_properties(path, n_spin_orbitals=None, tol=1e-12):
    """Read ``properties.json`` into a list of :class:`PropertyOperator`.

    Matrices are row-major nested lists (or flat lists) in the spin-orbital
    basis; a top-level ``"basis": "spatial"`` expands them as ``A (x) 1_2``.
    """
    doc = _read_property_doc(path)
    basis = doc.get("basis", "spin")
    seen = set()
    out = []
    for entry in doc.get("properties", []):
        pid = entry["id"]
        if pid in seen:
            raise PropertyFileError(f"duplicate property id {pid!r}")
        seen.add(pid)
        kind = entry.get("kind", "custom")
        if kind not in PROPERTY_KINDS:
            raise PropertyFileError(f"{pid}: unknown kind {kind!r}")
        a = _to_spin_basis(_matrix(entry["matrix"], n_spin_orbitals, pid), entry.get("basis", basis))
        if n_spin_orbitals is not None and a.shape != (n_spin_orbitals, n_spin_orbitals):
            raise PropertyFileError(
                f"{pid}: shape {a.shape} does not match {n_spin_orbitals} spin-orbitals")
        hermitian = bool(entry.get("hermitian", True))
        if hermitian and np.abs(a - a.conj().T).max() > tol:
            raise PropertyFileError(f"{pid}: matrix flagged hermitian is not Hermitian")
        out.append(PropertyOperator(pid, a, kind, hermitian))
    return out


def read_overlap(path, n_spin_orbitals=None):
    """Optional ``"overlap"`` block of a properties file (None when absent)."""
    doc = _read_property_doc(path)
    if "overlap" not in doc:
        return None
    s = _to_spin_basis(_matrix(doc["overlap"], n_spin_orbitals, "overlap"), doc.get("basis", "spin"))
    if n_spin_orbitals is not None and s.shape != (n_spin_orbitals, n_spin_orbitals):
        raise PropertyFileError(f"overlap: shape {s.shape} does not match {n_spin_orbitals}")
    return s


def dump_properties(props, path, overlap=None):
    doc: dict[str, Any] = {
        "basis": "spin",
        "properties": [
            {"id": p.id, "kind": p.kind, "hermitian": p.hermitian, "matrix": p.a.tolist()}
            for p in props
        ],
    }
    if overlap is not None:
        doc["overlap"] = np.asarray(overlap).tolist()
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


@dataclass
class SolveReport:
    method: str
    converged: bool = False
    n_iter: int = 0
    energies: list = field(default_factory=list)
    q: float = 0.0
    residuals: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    densities: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    scan: list = field(default_factory=list)

    def log(self, iteration, state, energy, q, max_residual):
        self.trace.append({"iter": int(iteration), "state": int(state), "energy": float(energy),
                           "Q": float(q), "max_residual": float(max_residual)})

    def event(self, message):
        self.events.append(str(message))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        if obj.imag == 0:
            return float(obj.real)
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def report_document(report: SolveReport) -> dict:
    return {
        "format": "ecw-report",
        "version": __version__,
        "method": report.method,
        "converged": bool(report.converged),
        "n_iter": int(report.n_iter),
        "energies": _jsonable(report.energies),
        "Q": float(report.q),
        "residuals": _jsonable(report.residuals),
        "events": list(report.events),
        "extra": _jsonable(report.extra),
        "scan": _jsonable(report.scan),
        "densities": _jsonable(report.densities),
        "trace": _jsonable(report.trace),
    }


TRACE_COLUMNS = ("iter", "state", "energy", "Q", "max_residual")


def write_report(report: SolveReport, path):
    """Write ``path`` (JSON) and the convergence trace next to it (``.csv``)."""
    path = Path(path)
    text = json.dumps(report_document(report), indent=1, sort_keys=True) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row in report.trace:
        writer.writerow([row["iter"], row["state"], repr(row["energy"]), repr(row["Q"]),
                         repr(row["max_residual"])])
    try:
        path.write_text(text, encoding="utf-8")
        path.with_suffix(".csv").write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise ReportWriteError(f"cannot write report {path}: {exc}") from exc
    return path


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
