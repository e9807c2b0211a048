import numpy as np
import pytest
from hypothesis import given, strategies as st

from ecw import constraints as cons
from ecw import detspace
from ecw.constraints import ConstraintError, ConstraintSet, ExperimentalDatum as Datum

finite = st.floats(-5, 5, allow_nan=False)
positive = st.floats(0.01, 3.0)


def test_exact_data_give_zero():
    cs = ConstraintSet((Datum("a", 0, 0, 1.5, 0.1), Datum("b", 0, 1, 0.2, 0.1)))
    calc = {d.key: d.value for d in cs.data}
    assert cons.eval_Q(calc, cs) == 0.0


def test_one_sigma_miss_with_weight_two():
    cs = ConstraintSet((Datum("a", 0, 0, 1.0, 0.5, weight=2.0),))
    assert cons.eval_Q({("a", (0, 0)): 1.5}, cs) == pytest.approx(2.0)


def test_missing_value():
    cs = ConstraintSet((Datum("a", 0, 0, 1.0, 0.5),))
    with pytest.raises(ConstraintError, match="missing"):
        cons.eval_Q({}, cs)


@pytest.mark.parametrize("kwargs", [dict(sigma=0.0), dict(loss="L3"), dict(weight=-1.0),
                                    dict(mode="intensity"), dict(mode="bogus")])
def test_datum_validation(kwargs):
    base = dict(property_id="a", bra=0, ket=0, value=1.0, sigma=0.1)
    base.update(kwargs)
    with pytest.raises(ConstraintError):
        Datum(**base)


def test_duplicate_keys_rejected():
    with pytest.raises(ConstraintError):
        ConstraintSet((Datum("a", 0, 0, 1.0, 0.1), Datum("a", 0, 0, 2.0, 0.1)))


def test_validate_pairs_and_ids():
    cs = ConstraintSet((Datum("a", 0, 2, 1.0, 0.1),))
    with pytest.raises(ConstraintError):
        cs.validate(2, {"a"})
    with pytest.raises(ConstraintError):
        cs.validate(3, {"b"})
    assert cs.validate(3, {"a"}) is cs


def test_dq_examples():
    d = Datum("a", 0, 0, 1.0, 0.25)
    assert cons.dQ_dA(d, 1.0) == 0.0
    assert cons.dQ_dA(d, 1.25) == pytest.approx(2 / 0.25)
    l1 = Datum("a", 0, 0, 1.0, 0.25, loss="L1", weight=3.0)
    assert cons.dQ_dA(l1, 0.0) == pytest.approx(-3.0 / 0.25)


@given(value=finite, sigma=positive, weight=positive, y=finite, loss=st.sampled_from(["L1", "L2"]))
def test_derivative_matches_finite_difference(value, sigma, weight, y, loss):
    d = Datum("a", 0, 0, value, sigma, loss, weight)
    cs = ConstraintSet((d,))
    if loss == "L1" and abs(y - value) < 1e-3:
        return
    h = 1e-6
    fd = (cons.eval_Q({d.key: y + h}, cs) - cons.eval_Q({d.key: y - h}, cs)) / (2 * h)
    assert cons.dQ_dA(d, y) == pytest.approx(fd, rel=1e-5, abs=1e-5)


@given(a=st.floats(-2, 2), b=st.floats(-2, 2), value=finite, sigma=positive, weight=positive,
       mode=st.sampled_from(["intensity", "difference"]))
def test_element_derivatives_match_finite_difference(a, b, value, sigma, weight, mode):
    d = Datum("x", 0, 1, value, sigma, weight=weight, mode=mode)
    cs = ConstraintSet((d,))
    raw = {e: v for e, v in zip(d.elements(), (a, b))}
    der = cons.element_derivatives(cs, raw)
    h = 1e-6
    for e in raw:
        up, dn = dict(raw), dict(raw)
        up[e] += h
        dn[e] -= h
        fd = (cons.eval_Q(cons.fitted_values(cs, up), cs) - cons.eval_Q(cons.fitted_values(cs, dn), cs)) / (2 * h)
        assert der[e] == pytest.approx(fd, rel=1e-5, abs=1e-4)


@given(ovs=st.lists(st.floats(-1, 1), min_size=3, max_size=3), w=positive)
def test_overlap_penalty_derivative(ovs, w):
    cs = ConstraintSet((), ortho_weight=w)
    overlaps = {(0, 1): ovs[0], (0, 2): ovs[1], (1, 2): ovs[2]}
    q = cons.eval_Q({}, cs, overlaps)
    assert q == pytest.approx(2 * w * sum(x * x for x in ovs))
    der = cons.overlap_derivatives(cs, overlaps)
    assert der[(0, 1)] == pytest.approx(2 * w * ovs[0])
    assert der[(1, 0)] == pytest.approx(2 * w * ovs[0])


@given(values=st.lists(finite, min_size=1, max_size=4), ys=st.lists(finite, min_size=4, max_size=4),
       loss=st.sampled_from(["L1", "L2"]), w=st.floats(0, 3))
def test_q_is_non_negative(values, ys, loss, w):
    cs = ConstraintSet(tuple(Datum(f"p{k}", 0, 0, v, 0.3, loss) for k, v in enumerate(values)), ortho_weight=w)
    calc = {d.key: y for d, y in zip(cs.data, ys)}
    assert cons.eval_Q(calc, cs, {(0, 1): ys[0]}) >= 0.0


@given(scale=st.floats(0, 10), y=finite)
def test_q_is_linear_in_the_weights(scale, y):
    cs = ConstraintSet((Datum("a", 0, 0, 0.3, 0.2), Datum("b", 1, 1, -1.0, 0.5, "L1")), ortho_weight=0.7)
    calc = {("a", (0, 0)): y, ("b", (1, 1)): 2 * y}
    ov = {(0, 1): 0.1 * y}
    assert cons.eval_Q(calc, cs.scaled(scale), ov) == pytest.approx(scale * cons.eval_Q(calc, cs, ov), rel=1e-12, abs=1e-12)


def test_vexp_vanishes_without_weight_or_misfit():
    a = np.arange(4.0).reshape(2, 2)
    props = {"a": a + a.T}
    raw = {("a", 0, 0): 1.0}
    cs = ConstraintSet((Datum("a", 0, 0, 2.0, 0.1, weight=0.0),))
    assert np.array_equal(cons.build_vexp((0, 0), cs, raw, props).v, np.zeros((2, 2)))
    cs = ConstraintSet((Datum("a", 0, 0, 1.0, 0.1),))
    assert np.array_equal(cons.build_vexp((0, 0), cs, raw, props).v, np.zeros((2, 2)))


def test_vexp_is_scaled_operator():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    a = a + a.T
    d = Datum("a", 0, 0, 0.7, 0.2, weight=1.5)
    v = cons.build_vexp((0, 0), ConstraintSet((d,)), {("a", 0, 0): 1.1}, {"a": a}).v
    assert np.array_equal(v, cons.dQ_dA(d, 1.1) * a)


@given(seed=st.integers(0, 2 ** 32 - 1))
def test_diagonal_vexp_is_hermitian(seed):
    rng = np.random.default_rng(seed)
    mats = {}
    for k in "ab":
        x = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        mats[k] = x + x.conj().T
    cs = ConstraintSet((Datum("a", 1, 1, 0.2, 0.1), Datum("b", 1, 1, -0.4, 0.3, "L1")))
    raw = {("a", 1, 1): rng.normal(), ("b", 1, 1): rng.normal()}
    v = cons.build_vexp((1, 1), cs, raw, mats).v
    assert np.allclose(v, v.conj().T, atol=1e-14)


def test_vexp_overlap_term_needs_basis():
    cs = ConstraintSet((), ortho_weight=1.0)
    with pytest.raises(ConstraintError):
        cons.build_vexp((0, 1), cs, {}, {"a": np.eye(2)}, overlaps={(0, 1): 0.5})
    v = cons.build_vexp((0, 1), cs, {}, {"a": np.eye(2)}, overlaps={(0, 1): 0.5}, s=np.eye(2), n_electrons=2).v
    assert np.allclose(v, 2 * 1.0 * 0.5 * np.eye(2) / 2)


def test_mixed_losses_on_fixture(h2):
    ham, props = h2
    states = [v for _, v in detspace.fci_solve(ham, (1, 1), 3)]
    mats = {p.id: p.a for p in props}
    cs = ConstraintSet((
        Datum("dipole_z", 0, 0, -1.2, 0.1, "L2", 2.0),
        Datum("kinetic", 1, 1, 1.4, 0.05, "L1", 0.5),
        Datum("dipole_z", 0, 2, 0.5, 0.2, "L2", 1.0),
        Datum("kinetic", 0, 2, 0.8, 0.1, "L1", 3.0, mode="difference"),
    ))
    raw = {(pid, b, k): detspace.expectation(mats[pid], states[b], states[k]) for pid, b, k in cs.elements()}
    got = cons.eval_Q(cons.fitted_values(cs, raw), cs)

    # reference: the same sum written out by hand
    def el(pid, b, k):
        return float(states[b].coeffs @ detspace.one_body_matrix(mats[pid], states[0].space) @ states[k].coeffs)
    ref = 2.0 * ((el("dipole_z", 0, 0) + 1.2) / 0.1) ** 2
    ref += 0.5 * abs(el("kinetic", 1, 1) - 1.4) / 0.05
    ref += ((el("dipole_z", 0, 2) * el("dipole_z", 2, 0) - 0.5) / 0.2) ** 2
    ref += 3.0 * abs(el("kinetic", 2, 2) - el("kinetic", 0, 0) - 0.8) / 0.1
    assert got == pytest.approx(ref, rel=1e-12)


def test_noiseless_synthesis_is_exact(h2):
    ham, props = h2
    emit = [{"property": "dipole_z", "bra": 0, "ket": 0}, {"property": "dipole_z", "bra": 0, "ket": 2}]
    cs = cons.synthesize_experiment(ham, props, emit)
    states = [v for _, v in detspace.fci_solve(ham, (1, 1), 3)]
    a = {p.id: p.a for p in props}["dipole_z"]
    assert cs.data[0].value == detspace.expectation(a, states[0], states[0])
    t = detspace.expectation(a, states[0], states[2])
    assert cs.data[1].value == pytest.approx(t * t, rel=1e-14)
    assert cs.data[1].mode == "intensity"


def test_same_seed_same_data(h2):
    ham, props = h2
    emit = [{"property": "kinetic", "bra": 0, "ket": 1}]
    a = cons.synthesize_experiment(ham, props, emit, noise=0.05, seed=4)
    b = cons.synthesize_experiment(ham, props, emit, noise=0.05, seed=4)
    c = cons.synthesize_experiment(ham, props, emit, noise=0.05, seed=5)
    assert a == b
    assert a != c


def test_synthesis_rejects_bad_pair(h2):
    ham, props = h2
    with pytest.raises(ConstraintError):
        cons.synthesize_experiment(ham, props, [{"property": "dipole_z", "bra": 0, "ket": 9}])


def test_noise_mean(h2):
    ham, props = h2
    emit = [{"property": "dipole_z", "bra": 0, "ket": 0}]
    exact = cons.synthesize_experiment(ham, props, emit).data[0].value
    draws = np.array([cons.synthesize_experiment(ham, props, emit, noise=0.01, seed=s).data[0].value
                      for s in range(10_000)])
    assert abs(draws.mean() - exact) < 3 * 0.01 / 100


def test_experiment_round_trip(tmp_path):
    cs = ConstraintSet((Datum("a", 0, 1, 0.3, 0.1, "L1", 2.0, "difference"),), ortho_weight=4.0)
    cons.dump_experiment(cs, tmp_path / "e.json")
    assert cons.load_experiment(tmp_path / "e.json") == cs
