import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from ecw import integrals_io as io
from ecw.integrals_io import FcidumpError, PropertyFileError, ReportWriteError, SolveReport, ValidationError

ONE_ORBITAL = """&FCI NORB=1,NELEC=2,MS2=0,
 ORBSYM=1,
 ISYM=1,
&END
0.5 1 1 1 1
-1.0 1 1 0 0
0.0 0 0 0 0
"""


def test_one_orbital_dump_gives_forced_antisymmetrization():
    ham = io.parse_fcidump(ONE_ORBITAL)
    assert ham.n_spin_orbitals == 2
    assert ham.g[0, 1, 0, 1] == 0.5
    assert ham.g[0, 1, 1, 0] == -0.5
    assert ham.h[0, 0] == ham.h[1, 1] == -1.0
    assert ham.n_alpha == ham.n_beta == 1


def test_three_index_record_names_the_line():
    text = ONE_ORBITAL.replace("-1.0 1 1 0 0", "-1.0 1 1 0")
    with pytest.raises(FcidumpError) as exc:
        io.parse_fcidump(text)
    assert exc.value.lineno == 6
    assert "line 6" in str(exc.value)


def test_unparsable_value():
    with pytest.raises(FcidumpError, match="line 5"):
        io.parse_fcidump(ONE_ORBITAL.replace("0.5 1 1 1 1", "abc 1 1 1 1"))


def test_unterminated_header():
    with pytest.raises(FcidumpError):
        io.parse_fcidump("&FCI NORB=1,NELEC=2\n0.5 1 1 1 1\n")


@pytest.mark.parametrize("nelec,ms2", [(2, 1), (1, 0), (3, 5)])
def test_nelec_ms2_inconsistent(nelec, ms2):
    text = ONE_ORBITAL.replace("NELEC=2,MS2=0", f"NELEC={nelec},MS2={ms2}")
    with pytest.raises(ValidationError):
        io.parse_fcidump(text)


def test_fortran_exponent_accepted():
    ham = io.parse_fcidump(ONE_ORBITAL.replace("-1.0 1 1 0 0", "-1.0D+00 1 1 0 0"))
    assert ham.h[0, 0] == -1.0


def test_h2_fixture_fci_matches_jordan_wigner(h2):
    ham, _ = h2
    hmat, _ = oracles.sector_hamiltonian(ham)
    from ecw import detspace
    e = [x for x, _ in detspace.fci_solve(ham, (1, 1), 4)]
    assert np.allclose(e, np.linalg.eigvalsh(hmat), atol=1e-10)


def _spatial_integrals(draw_n, data):
    n = draw_n
    h = data.draw(hnp.arrays(float, (n, n), elements=st.floats(-2, 2)))
    h = 0.5 * (h + h.T)
    eri = data.draw(hnp.arrays(float, (n,) * 4, elements=st.floats(-1, 1)))
    # impose the 8-fold permutational symmetry of real chemists' integrals
    sym = sum(eri.transpose(p) for p in [(0, 1, 2, 3), (1, 0, 2, 3), (0, 1, 3, 2), (1, 0, 3, 2),
                                         (2, 3, 0, 1), (3, 2, 0, 1), (2, 3, 1, 0), (3, 2, 1, 0)]) / 8
    return h, sym


@given(n=st.integers(1, 3), data=st.data())
def test_write_parse_round_trip(n, data):
    h, eri = _spatial_integrals(n, data)
    e_core = data.draw(st.floats(-5, 5))
    text = io.write_fcidump_spatial(h, eri, e_core, n, 2, 0)
    ham = io.parse_fcidump(text)
    h_spin, g_spin = io.spatial_to_spin(h, eri)
    assert np.array_equal(ham.h, h_spin)
    assert np.allclose(ham.g, g_spin, atol=1e-15)
    assert ham.e_core == e_core
    again = io.parse_fcidump(io.write_fcidump(ham))
    assert np.array_equal(again.g, ham.g)


@given(hnp.arrays(float, (3, 3, 3, 3), elements=st.floats(-1, 1)))
def test_antisymmetrize_is_idempotent(v):
    a = io.antisymmetrize(v)
    assert np.allclose(io.antisymmetrize(a), a, atol=1e-15)
    assert np.allclose(a, -a.transpose(1, 0, 2, 3), atol=1e-15)


def _write_props(tmp_path, doc):
    path = tmp_path / "props.json"
    path.write_text(json.dumps(doc))
    return path


def test_identity_property(tmp_path):
    path = _write_props(tmp_path, {"properties": [{"id": "number", "matrix": [[1, 0], [0, 1]]}]})
    (p,) = io.load_properties(path, 2)
    assert p.id == "number"
    assert np.array_equal(p.a, np.eye(2))


def test_property_shape_mismatch(tmp_path):
    path = _write_props(tmp_path, {"properties": [{"id": "x", "matrix": np.eye(3).tolist()}]})
    with pytest.raises(PropertyFileError, match="shape"):
        io.load_properties(path, 2)


def test_duplicate_property_id(tmp_path):
    path = _write_props(tmp_path, {"properties": [{"id": "x", "matrix": [[1.0]]}, {"id": "x", "matrix": [[2.0]]}]})
    with pytest.raises(PropertyFileError, match="duplicate"):
        io.load_properties(path)


def test_non_hermitian_flagged(tmp_path):
    path = _write_props(tmp_path, {"properties": [{"id": "x", "matrix": [[0, 1], [0, 0]]}]})
    with pytest.raises(PropertyFileError, match="Hermitian"):
        io.load_properties(path, 2)
    path = _write_props(tmp_path, {"properties": [{"id": "x", "hermitian": False, "matrix": [[0, 1], [0, 0]]}]})
    assert not io.load_properties(path, 2)[0].hermitian


def test_fixture_dipole_is_hermitian(h2):
    ham, props = h2
    dip = {p.id: p for p in props}["dipole_z"]
    assert dip.a.shape == (ham.n_spin_orbitals,) * 2
    assert np.abs(dip.a - dip.a.T).max() < 1e-12


def test_property_round_trip(tmp_path, heh):
    _, props = heh
    path = tmp_path / "p.json"
    io.dump_properties(props, path, overlap=np.eye(4))
    back = io.load_properties(path, 4)
    assert [p.id for p in back] == [p.id for p in props]
    assert all(np.array_equal(a.a, b.a) for a, b in zip(back, props))
    assert np.array_equal(io.read_overlap(path, 4), np.eye(4))


def test_empty_report(tmp_path):
    rep = SolveReport(method="hf", converged=True)
    path = io.write_report(rep, tmp_path / "r.json")
    doc = io.read_report(path)
    assert doc["Q"] == 0.0
    assert doc["residuals"] == []
    assert (tmp_path / "r.csv").read_text().startswith("iter,state,energy,Q,max_residual")


def test_reports_are_byte_identical(tmp_path):
    def make():
        rep = SolveReport(method="cc", converged=True, energies=[np.float64(-1.1), -0.5])
        rep.log(1, 0, -1.1, 0.25, 1e-3)
        rep.densities["gamma_00"] = np.eye(2)
        return rep
    a = io.write_report(make(), tmp_path / "a.json")
    b = io.write_report(make(), tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_unwritable_report(tmp_path):
    with pytest.raises(ReportWriteError):
        io.write_report(SolveReport(method="hf"), tmp_path / "missing_dir" / "r.json")


def test_hamiltonian_validation_rejects_bad_tensor(h2):
    ham, _ = h2
    bad = io.Hamiltonian(ham.h, np.abs(ham.g), ham.e_core, ham.s, 1, 1)
    with pytest.raises(ValidationError):
        bad.validate()
