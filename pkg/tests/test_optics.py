import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dqs.dataset import ToolboxConfig, sample_setup
from dqs.optics import (Device, FockState, OpticalSetup, QubitState, SetupError, apply_device,
                        embed, fidelity_up_to_phase, format_setup, parse_angle, parse_device,
                        parse_setup, postselect, run_setup)

N4 = ToolboxConfig(4)
TOOLS4 = N4.toolbox()


def occ(n_paths, *modes):
    """Occupancy tuple from (path, pol) pairs; repeats mean bunching."""
    o = [0] * (2 * n_paths)
    for p, l in modes:
        o[2 * p + l] += 1
    return tuple(o)


def single(n_paths, path, pol, amp=1.0):
    return FockState(2 * n_paths, {occ(n_paths, (path, pol)): amp})


def random_state(seed: int) -> FockState:
    """A 4-photon state reached by a random setup prefix."""
    rng = np.random.default_rng(seed)
    return run_setup(sample_setup(ToolboxConfig(4, l_min=0, l_max=6), rng))


# ---------------------------------------------------------------- devices

def test_mirror_multiplies_by_i():
    out = apply_device(single(2, 0, 0), Device("R", (0,)))
    assert out.terms == {occ(2, (0, 0)): 1j}


def test_hwp_quarter_pi_flips_polarization():
    out = apply_device(single(2, 0, 0), Device("HWP", (0,), Fraction(1, 4)))
    assert out.allclose(single(2, 0, 1))
    assert len(out) == 1


def test_pbs_routes_horizontal_to_other_path():
    out = apply_device(single(2, 0, 1), Device("PBS", (0, 1)))
    assert out.terms == {occ(2, (1, 1)): 1}
    keep = apply_device(single(2, 0, 0), Device("PBS", (0, 1)))
    assert keep.terms == {occ(2, (0, 0)): 1}


def test_beam_splitter_hom_cancellation():
    s = FockState(4, {occ(2, (0, 0), (1, 0)): 1.0})
    out = apply_device(s, Device("BS", (0, 1)))
    expected = FockState(4, {occ(2, (0, 0), (0, 0)): 0.5j, occ(2, (1, 0), (1, 0)): 0.5j})
    assert out.allclose(expected, 1e-15)
    assert len(out) == 2
    assert postselect(out).success_prob == 0


def test_qwp_matches_matrix():
    th = Fraction(1, 4)
    out = apply_device(single(1, 0, 0), Device("QWP", (0,), th))
    c, s = math.cos(math.pi / 2), math.sin(math.pi / 2)
    want = {occ(1, (0, 0)): (1 - 1j * c) / math.sqrt(2), occ(1, (0, 1)): -1j * s / math.sqrt(2)}
    assert out.allclose(FockState(2, want), 1e-15)


def test_invalid_path_and_angle_rejected():
    with pytest.raises(SetupError):
        apply_device(single(2, 0, 0), Device("R", (5,)))
    with pytest.raises(SetupError):
        apply_device(single(2, 0, 0), Device("HWP", (0,), Fraction(1, 8)), q=4)
    with pytest.raises(SetupError):
        Device("BS", (1, 1))
    with pytest.raises(SetupError):
        Device("R", (0,), Fraction(1, 4))


# ---------------------------------------------------------------- run_setup / postselect

GHZ4 = "DCBell(a,b) -> DCBell(c,d) -> R(b) -> PBS(b,c) -> R(c)"


def test_ghz4_intermediate_state_matches_printed_terms():
    state = run_setup(parse_setup(GHZ4))
    printed = {
        occ(4, (0, 0), (1, 0), (1, 1), (3, 1)): 1j,
        occ(4, (0, 0), (1, 0), (2, 0), (3, 0)): -1,
        occ(4, (0, 1), (1, 1), (2, 1), (3, 1)): -1,
        occ(4, (0, 1), (2, 0), (2, 1), (3, 0)): -1j,
    }
    assert set(state.terms) == set(printed)
    ratio = state.terms[occ(4, (0, 0), (1, 0), (2, 0), (3, 0))] / -1
    for k, v in printed.items():
        assert state.terms[k] == pytest.approx(ratio * v, abs=1e-12)


def test_ghz4_postselects_to_ghz():
    qs = postselect(run_setup(parse_setup(GHZ4)))
    ghz = np.zeros(16, complex)
    ghz[0] = ghz[15] = -1 / math.sqrt(2)
    np.testing.assert_allclose(qs.amplitudes * (ghz[0] / qs.amplitudes[0]), ghz, atol=1e-12)
    assert fidelity_up_to_phase(qs, ghz) == pytest.approx(1, abs=1e-12)
    assert qs.success_prob == pytest.approx(0.5, abs=1e-12)


def test_sources_only_product():
    state = run_setup(parse_setup("DC00(a,b) -> DC11(c,d)"))
    assert state.terms == {occ(4, (0, 0), (1, 0), (2, 1), (3, 1)): 1}


def test_bunched_only_state_has_zero_success():
    qs = postselect(FockState(4, {occ(2, (0, 0), (0, 0)): 1.0}))
    assert qs.success_prob == 0
    assert not qs.amplitudes.any()


def test_fidelity_examples():
    rng = np.random.default_rng(3)
    v = rng.normal(size=16) + 1j * rng.normal(size=16)
    v /= np.linalg.norm(v)
    assert fidelity_up_to_phase(v, v) == pytest.approx(1)
    assert fidelity_up_to_phase(v, np.exp(1j * math.pi / 3) * v) == pytest.approx(1)
    zero = np.zeros(16)
    zero[0] = 1
    ghz = np.zeros(16)
    ghz[[0, 15]] = 1 / math.sqrt(2)
    assert fidelity_up_to_phase(zero, ghz) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fidelity_up_to_phase(zero, np.ones(8))


# ---------------------------------------------------------------- text I/O

def test_parse_format_round_trip():
    text = "DCBell(a,b) -> DC00(c,d) -> BS(a,c) -> HWP(b,0.25pi) -> QWP(d,0.75pi) -> R(a) -> PBS(d,b)"
    setup = parse_setup(text)
    assert format_setup(setup) == text
    assert parse_setup(format_setup(setup)) == setup


def test_angles_reduce_modulo_pi():
    assert parse_angle("5pi") == 0
    assert parse_angle("pi") == 0
    assert parse_angle("0.75pi") == Fraction(3, 4)
    assert parse_angle(str(math.pi / 4)) == Fraction(1, 4)
    assert parse_device("HWP(h,5pi)").angle == 0


@pytest.mark.parametrize("bad", ["FOO(a)", "HWP(a)", "R(a,b)", "BS(a)", "PBS(a,1)", "HWP(a,0.1pi)"])
def test_bad_tokens(bad):
    with pytest.raises(SetupError):
        parse_setup("DCBell(a,b) -> " + bad)


def test_setup_validation():
    with pytest.raises(SetupError):
        parse_setup("R(a) -> DCBell(a,b)")
    with pytest.raises(SetupError):
        OpticalSetup(4, (Device("DCBell", (0, 1)),))
    with pytest.raises(SetupError):
        parse_setup("DCBell(a,b) -> R(a) -> R(b)", max_length=1)


# ---------------------------------------------------------------- properties

@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), k=st.integers(0, len(TOOLS4) - 1))
def test_unitary_devices_preserve_norm_and_photons(seed, k):
    state = random_state(seed)
    out = apply_device(state, TOOLS4[k])
    assert out.norm2() == pytest.approx(state.norm2(), rel=1e-10, abs=1e-10)
    assert all(sum(o) == 4 for o in out.terms)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_sources_add_two_photons(seed):
    rng = np.random.default_rng(seed)
    kinds = rng.choice(["DC00", "DC11", "DCBell"], size=2)
    s = apply_device(FockState.vacuum(4), Device(kinds[0], (0, 1)))
    assert s.photon_count == 2
    assert apply_device(s, Device(kinds[1], (2, 3))).photon_count == 4


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), i=st.integers(0, len(TOOLS4) - 1),
       j=st.integers(0, len(TOOLS4) - 1))
def test_disjoint_devices_commute(seed, i, j):
    d1, d2 = TOOLS4[i], TOOLS4[j]
    if set(d1.paths) & set(d2.paths):
        return
    state = random_state(seed)
    a = apply_device(apply_device(state, d1), d2)
    b = apply_device(apply_device(state, d2), d1)
    assert a.allclose(b, 1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_postselect_embed_identity_and_success_range(seed):
    qs = postselect(random_state(seed))
    assert 0 <= qs.success_prob <= 1
    if qs.success_prob > 0:
        again = postselect(embed(qs))
        np.testing.assert_allclose(again.amplitudes, qs.amplitudes, atol=1e-12)
        assert again.success_prob == pytest.approx(1)
        assert np.linalg.norm(qs.amplitudes) == pytest.approx(1)


def test_qubit_state_from_vector():
    qs = QubitState.from_vector([1, 1j, 0, 0])
    assert qs.n_qubits == 2
    assert np.linalg.norm(qs.amplitudes) == pytest.approx(1)
    with pytest.raises(ValueError):
        QubitState.from_vector([1, 0, 0])
