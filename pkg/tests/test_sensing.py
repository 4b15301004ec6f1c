import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dqs.sensing import (Hamiltonian, PauliString, TrigPoly, fit_trig, evolve, hamiltonian,
                         infer_theta, nodes, observable, qfi_mixed, qfi_pure, response_exact,
                         run_sensing, sample_response, sensitivity, simulated_channel, sum_x,
                         sum_z, xx_pairs)


def ket(bits: str) -> np.ndarray:
    v = np.zeros(2 ** len(bits), complex)
    v[int(bits, 2)] = 1
    return v


def ghz(n: int, gamma: float = 0.0) -> np.ndarray:
    """GHZ state whose |1...1> amplitude carries phase e^{i gamma}."""
    return (ket("0" * n) + np.exp(1j * gamma) * ket("1" * n)) / math.sqrt(2)


def random_vec(rng, n):
    v = rng.normal(size=2 ** n) + 1j * rng.normal(size=2 ** n)
    return v / np.linalg.norm(v)


def random_poly(rng, n):
    return TrigPoly(rng.normal(size=n), rng.normal(size=n), rng.normal())


# ---------------------------------------------------------------- hamiltonians

def test_pauli_string_matches_kron():
    X = np.array([[0, 1], [1, 0]])
    Z = np.diag([1, -1])
    p = PauliString("XZ")
    np.testing.assert_allclose(p.matrix(), np.kron(X, Z))
    assert p.commutes(PauliString("XZ"))
    assert not p.commutes(PauliString("ZZ"))
    with pytest.raises(ValueError):
        PauliString("XQ")


def test_hamiltonian_tags():
    assert len(hamiltonian("sumZ", 4).terms) == 4
    assert len(hamiltonian("sumX", 4).terms) == 4
    assert len(xx_pairs(4).terms) == 6
    assert observable("prodX", 3) == PauliString("XXX")
    with pytest.raises(ValueError):
        hamiltonian("nope", 4)


def test_noncommuting_terms_rejected():
    with pytest.raises(ValueError):
        Hamiltonian((PauliString("XI"), PauliString("ZI")))


# ---------------------------------------------------------------- evolve / qfi

def test_evolve_identity_and_dimension_check():
    rng = np.random.default_rng(0)
    v = random_vec(rng, 3)
    np.testing.assert_allclose(evolve(v, sum_z(3), 0.0), v)
    with pytest.raises(ValueError):
        evolve(v, sum_z(4), 0.1)


def test_ghz_picks_up_relative_phase():
    th = 0.37
    out = evolve(ghz(5), sum_z(5), th)
    assert out[0] / out[-1] == pytest.approx(np.exp(-5j * th))


def test_evolve_matches_matrix_exponential():
    from scipy.linalg import expm
    rng = np.random.default_rng(1)
    H = xx_pairs(3)
    v = random_vec(rng, 3)
    np.testing.assert_allclose(evolve(v, H, 0.9), expm(-0.45j * H.matrix()) @ v, atol=1e-12)


@pytest.mark.parametrize("state,H,want", [
    (ghz(8), sum_z(8), 64.0),
    (ket("0000"), sum_z(4), 0.0),
    (np.kron(ghz(4), ghz(4)), sum_z(8), 32.0),
    (np.kron(np.array([1j, 1]) / math.sqrt(2), ghz(7)), sum_z(8), 50.0),
    (np.kron(ghz(2), ghz(2)), sum_z(4), 8.0),
])
def test_qfi_pure_values(state, H, want):
    assert qfi_pure(state, H) == pytest.approx(want, abs=1e-9)


def test_qfi_mixed_cases():
    H = sum_z(3)
    assert qfi_mixed(np.eye(8) / 8, H) == pytest.approx(0, abs=1e-12)
    rho = np.zeros((8, 8))
    rho[0, 0] = rho[7, 7] = 0.5
    assert qfi_mixed(rho, H) == pytest.approx(0, abs=1e-12)
    v = ghz(3)
    assert qfi_mixed(np.outer(v, v.conj()), H) == pytest.approx(9, abs=1e-8)


def test_qfi_mixed_rejects_bad_rho():
    H = sum_z(1)
    with pytest.raises(ValueError):
        qfi_mixed(np.array([[1, 1], [0, 0]]), H)
    with pytest.raises(ValueError):
        qfi_mixed(np.eye(2), H)
    with pytest.raises(ValueError):
        qfi_mixed(np.eye(4) / 4, H)


# ---------------------------------------------------------------- responses

def test_ghz_response_is_cosine():
    g = 0.6
    for th in np.linspace(0, 2 * np.pi, 7):
        r = response_exact(ghz(4, g), sum_z(4), observable("prodX", 4), th)
        assert r == pytest.approx(math.cos(4 * th + g), abs=1e-12)


def test_rotated_ghz_response_under_sum_x():
    plus, minus = np.array([1, 1]) / math.sqrt(2), np.array([1, -1]) / math.sqrt(2)
    g = 0.4
    pp = np.kron(np.kron(plus, plus), np.kron(plus, plus))
    mm = np.kron(np.kron(minus, minus), np.kron(minus, minus))
    v = (pp + np.exp(1j * g) * mm) / math.sqrt(2)
    r = response_exact(v, sum_x(4), observable("prodZ", 4), 0.3)
    assert r == pytest.approx(math.cos(4 * 0.3 + g), abs=1e-12)


def test_sample_response_deterministic_and_extreme():
    H, O = sum_z(2), observable("prodZ", 2)
    assert sample_response(ket("00"), H, O, 0.2, 17, rng=0) == 1.0
    a = sample_response(ghz(2), H, observable("prodX", 2), 0.3, 1000, rng=5)
    assert a == sample_response(ghz(2), H, observable("prodX", 2), 0.3, 1000, rng=5)
    with pytest.raises(ValueError):
        sample_response(ghz(2), H, O, 0.1, 0)


def test_sample_response_concentration():
    H, O = sum_z(4), observable("prodX", 4)
    r = response_exact(ghz(4), H, O, 0.2)
    m = 10000
    errs = [abs(sample_response(ghz(4), H, O, 0.2, m, rng=s) - r) for s in range(200)]
    assert np.mean(np.array(errs) <= 5 / math.sqrt(m)) >= 0.99


# ---------------------------------------------------------------- interpolation

def test_fit_constant():
    p = fit_trig([0.3] * 9, 4)
    assert p.c == pytest.approx(0.3)
    assert not np.any(np.abs(p.a) > 1e-15) and not np.any(np.abs(p.b) > 1e-15)


def test_fit_cosine_coefficients():
    n, g = 8, 0.9
    p = fit_trig(np.cos(n * nodes(n) + g), n)
    want_a = np.zeros(n)
    want_b = np.zeros(n)
    want_a[-1], want_b[-1] = math.cos(g), -math.sin(g)
    np.testing.assert_allclose(p.a, want_a, atol=1e-12)
    np.testing.assert_allclose(p.b, want_b, atol=1e-12)
    assert abs(p.c) < 1e-12


def test_fit_wrong_count():
    with pytest.raises(ValueError):
        fit_trig([0.0] * 8, 4)


def test_nodes_layout():
    np.testing.assert_allclose(nodes(2), 2 * np.pi * np.arange(5) / 5)


def test_infer_theta_examples():
    cos1 = TrigPoly([1.0], [0.0], 0.0)
    (t,) = infer_theta(cos1, 1.0)
    assert min(t, 2 * np.pi - t) < 1e-6
    cos8 = TrigPoly([0] * 7 + [1.0], [0.0] * 8, 0.0)
    assert len(infer_theta(cos8, 0.0)) == 16


def test_sensitivity_examples():
    p = TrigPoly([0, 0, 0, 1.0], [0, 0, 0, 0.5], 0.0)
    amp = math.hypot(1, 0.5)
    unit = TrigPoly(p.a / amp, p.b / amp, 0.0)
    s = sensitivity(unit, np.linspace(0.01, 6, 50))
    finite = s[np.isfinite(s)]
    np.testing.assert_allclose(finite, 1 / 16, rtol=1e-6)
    assert np.isinf(sensitivity(TrigPoly([0.0], [0.0], 0.2), 1.0))


# ---------------------------------------------------------------- run_sensing

def test_run_sensing_exact_ghz8():
    ch = simulated_channel(ghz(8, 0.3), sum_z(8), observable("prodX", 8))
    rep = run_sensing(ch, 8)
    t = np.linspace(0, 2 * np.pi, 101)
    np.testing.assert_allclose(rep.poly(t), np.cos(8 * t + 0.3), atol=1e-9)
    finite = rep.sensitivity[np.isfinite(rep.sensitivity)]
    np.testing.assert_allclose(finite, 1 / 64, atol=1e-6)
    assert rep.min_sensitivity == pytest.approx(1 / 64, abs=1e-6)
    assert rep.sql == 0.125 and rep.hl == 1 / 64
    assert rep.eps < 1e-12
    assert len(rep.theta_grid) == 512


def test_run_sensing_constant_probe_all_infinite():
    ch = simulated_channel(ket("0000"), sum_z(4), observable("prodX", 4))
    rep = run_sensing(ch, 4)
    assert rep.all_infinite
    assert rep.to_dict()["min_sensitivity"] is None


def test_run_sensing_shots_reproducible():
    ch = simulated_channel(ghz(4), sum_z(4), observable("prodX", 4))
    a = run_sensing(ch, 4, shots=100, seed=3)
    b = run_sensing(ch, 4, shots=100, seed=3)
    np.testing.assert_array_equal(a.readings, b.readings)
    assert a.to_csv().startswith("theta,sensitivity\n")


def test_shot_noise_monotone_in_shots():
    ch = simulated_channel(ghz(8), sum_z(8), observable("prodX", 8))
    med = [np.median([run_sensing(ch, 8, shots=m, seed=s).mean_abs_error for s in range(15)])
           for m in (100, 1000, 10000)]
    assert med[0] >= med[1] >= med[2]


# ---------------------------------------------------------------- properties

@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 10))
def test_interpolation_exact_round_trip(seed, n):
    p = random_poly(np.random.default_rng(seed), n)
    q = fit_trig(p(nodes(n)), n)
    np.testing.assert_allclose(q.a, p.a, atol=1e-12)
    np.testing.assert_allclose(q.b, p.b, atol=1e-12)
    assert q.c == pytest.approx(p.c, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), t1=st.floats(-7, 7), t2=st.floats(-7, 7))
def test_evolve_norm_and_group(seed, t1, t2):
    rng = np.random.default_rng(seed)
    v = random_vec(rng, 4)
    H = [sum_z(4), sum_x(4), xx_pairs(4)][seed % 3]
    a = evolve(v, H, t1)
    assert np.linalg.norm(a) == pytest.approx(1, abs=1e-10)
    np.testing.assert_allclose(evolve(a, H, t2), evolve(v, H, t1 + t2), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_qfi_pure_bounds_and_mixed_agreement(seed):
    rng = np.random.default_rng(seed)
    v = random_vec(rng, 4)
    H = sum_z(4)
    f = qfi_pure(v, H)
    assert 0 <= f <= 16 + 1e-9
    assert qfi_mixed(np.outer(v, v.conj()), H) == pytest.approx(f, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_qcrb_consistency(seed):
    v = random_vec(np.random.default_rng(seed), 4)
    H = sum_z(4)
    rep = run_sensing(simulated_channel(v, H, observable("prodX", 4)), 4)
    f = qfi_pure(v, H)
    if f > 0 and not rep.all_infinite:
        assert rep.min_sensitivity >= 1 / f - 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), theta=st.floats(0, 2 * np.pi))
def test_infer_theta_noiseless_round_trip(seed, theta):
    p = random_poly(np.random.default_rng(seed), 3)
    cands = infer_theta(p, float(p(theta)))
    d = min(min(abs(c - theta), 2 * np.pi - abs(c - theta)) for c in cands)
    assert d <= 2 * np.pi / 2 ** 14 or abs(float(p(min(cands, key=lambda c: abs(c - theta)))) - float(p(theta))) < 1e-6
