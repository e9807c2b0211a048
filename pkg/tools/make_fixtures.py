"""Generate the small STO-3G fixtures shipped in src/ecw/data.

Only s-type Gaussians are needed for hydrogen/helium chains, so the
integrals are evaluated with the closed-form s-function expressions.
The integrals are transformed to canonical RHF orbitals and written as
FCIDUMP files plus a companion properties.json (dipole_z, kinetic).

Run from the repository root:  python3 tools/make_fixtures.py
"""
import json
import math
from pathlib import Path

import numpy as np
from scipy.special import erf

from ecw.integrals_io import write_fcidump_spatial

DATA = Path(__file__).resolve().parents[1] / "src" / "ecw" / "data"

# STO-3G expansion of a zeta=1 Slater 1s function
STO3G_ALPHA = np.array([2.227660584, 0.4057711562, 0.1098175104])
STO3G_D = np.array([0.1543289673, 0.5353281423, 0.4446345422])


def boys0(t):
    if t < 1e-12:
        return 1.0 - t / 3.0
    return 0.5 * math.sqrt(math.pi / t) * erf(math.sqrt(t))


def contracted(zeta):
    alpha = STO3G_ALPHA * zeta ** 2
    d = STO3G_D * (2.0 * alpha / math.pi) ** 0.75
    return alpha, d


def ao_integrals(centers, zetas, charges):
    nao = len(centers)
    basis = [contracted(z) for z in zetas]
    s = np.zeros((nao, nao))
    t = np.zeros((nao, nao))
    v = np.zeros((nao, nao))
    zpos = np.zeros((nao, nao))
    for i in range(nao):
        for j in range(nao):
            ai, di = basis[i]
            aj, dj = basis[j]
            A, B = centers[i], centers[j]
            ab2 = float(np.sum((A - B) ** 2))
            for a, ca in zip(ai, di):
                for b, cb in zip(aj, dj):
                    p = a + b
                    P = (a * A + b * B) / p
                    k = math.exp(-a * b / p * ab2)
                    ov = (math.pi / p) ** 1.5 * k
                    s[i, j] += ca * cb * ov
                    zpos[i, j] += ca * cb * ov * P[2]
                    t[i, j] += ca * cb * a * b / p * (3.0 - 2.0 * a * b / p * ab2) * ov
                    for C, Z in zip(centers, charges):
                        pc2 = float(np.sum((P - C) ** 2))
                        v[i, j] -= ca * cb * 2.0 * math.pi / p * Z * k * boys0(p * pc2)
    eri = np.zeros((nao,) * 4)
    for i in range(nao):
        for j in range(nao):
            for k_ in range(nao):
                for l in range(nao):
                    eri[i, j, k_, l] = _eri(basis, centers, i, j, k_, l)
    return s, t, v, zpos, eri


def _eri(basis, centers, i, j, k, l):
    A, B, C, D = centers[i], centers[j], centers[k], centers[l]
    ab2 = float(np.sum((A - B) ** 2))
    cd2 = float(np.sum((C - D) ** 2))
    val = 0.0
    for a, ca in zip(*basis[i]):
        for b, cb in zip(*basis[j]):
            p = a + b
            P = (a * A + b * B) / p
            for c, cc in zip(*basis[k]):
                for d, cd in zip(*basis[l]):
                    q = c + d
                    Q = (c * C + d * D) / q
                    pq2 = float(np.sum((P - Q) ** 2))
                    pref = 2.0 * math.pi ** 2.5 / (p * q * math.sqrt(p + q))
                    val += (ca * cb * cc * cd * pref
                            * math.exp(-a * b / p * ab2 - c * d / q * cd2)
                            * boys0(p * q / (p + q) * pq2))
    return val


def rhf(hcore, eri, s, nocc, e_nuc):
    w, u = np.linalg.eigh(s)
    x = u @ np.diag(w ** -0.5) @ u.T
    _, c = np.linalg.eigh(x.T @ hcore @ x)
    c = x @ c
    e_old = 0.0
    for _ in range(500):
        d = c[:, :nocc] @ c[:, :nocc].T
        f = hcore + 2.0 * np.einsum("pqrs,rs->pq", eri, d) - np.einsum("prqs,rs->pq", eri, d)
        e = np.sum(d * (hcore + f)) + e_nuc
        eps, cp = np.linalg.eigh(x.T @ f @ x)
        c = x @ cp
        if abs(e - e_old) < 1e-14:
            break
        e_old = e
    for k in range(c.shape[1]):
        if c[np.argmax(np.abs(c[:, k])), k] < 0:
            c[:, k] *= -1
    return e, eps, c


def build(name, centers, zetas, charges, nelec):
    centers = [np.array(cc, dtype=float) for cc in centers]
    s, t, v, zpos, eri = ao_integrals(centers, zetas, charges)
    e_nuc = 0.0
    for a in range(len(centers)):
        for b in range(a):
            e_nuc += charges[a] * charges[b] / np.linalg.norm(centers[a] - centers[b])
    hcore = t + v
    e_hf, eps, c = rhf(hcore, eri, s, nelec // 2, e_nuc)
    h_mo = c.T @ hcore @ c
    eri_mo = np.einsum("pi,qj,rk,sl,pqrs->ijkl", c, c, c, c, eri, optimize=True)
    dip_mo = -(c.T @ zpos @ c)
    kin_mo = c.T @ t @ c
    norb = len(centers)
    text = write_fcidump_spatial(h_mo, eri_mo, e_nuc, norb, nelec, 0)
    (DATA / f"{name}.fcidump").write_text(text)
    props = {
        "basis": "spatial",
        "properties": [
            {"id": "dipole_z", "kind": "dipole_z", "hermitian": True,
             "matrix": [[float(x) for x in row] for row in dip_mo]},
            {"id": "kinetic", "kind": "kinetic", "hermitian": True,
             "matrix": [[float(x) for x in row] for row in kin_mo]},
        ],
    }
    (DATA / f"{name}.properties.json").write_text(json.dumps(props, indent=1) + "\n")
    print(f"{name}: E_HF = {e_hf:.10f}  eps = {np.round(eps, 6)}")


if __name__ == "__main__":
    DATA.mkdir(parents=True, exist_ok=True)
    build("h2_sto3g", [[0, 0, 0], [0, 0, 1.4]], [1.24, 1.24], [1.0, 1.0], 2)
    build("heh_sto3g", [[0, 0, 0], [0, 0, 1.4632]], [2.0925, 1.24], [2.0, 1.0], 2)
    build("h4_sto3g", [[0, 0, 1.8 * k] for k in range(4)], [1.24] * 4, [1.0] * 4, 4)
    build("h6_sto3g", [[0, 0, 1.8 * k] for k in range(6)], [1.24] * 6, [1.0] * 6, 6)
