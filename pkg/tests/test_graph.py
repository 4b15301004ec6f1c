import numpy as np
from hypothesis import given, settings, strategies as st

from dqs.dataset import ToolboxConfig, sample_setup
from dqs.graph import encode_setup, feature_dims, kind_slots
from dqs.optics import parse_setup

GHZ4 = "DCBell(a,b) -> DCBell(c,d) -> R(b) -> PBS(b,c) -> R(c)"


def test_feature_dims_q4():
    assert feature_dims(4, 4) == (16, 4)
    assert len(kind_slots(4)) == 16
    g = encode_setup(parse_setup(GHZ4))
    assert g.X.shape == (7, 20)
    assert g.A.shape == (7, 7)


def test_ghz4_edges():
    g = encode_setup(parse_setup(GHZ4))
    # nodes: 0 start, 1 DC(a,b), 2 DC(c,d), 3 R(b), 4 PBS(b,c), 5 R(c), 6 end
    assert g.A[3, 4] == 1
    assert g.A[2, 4] == 1
    assert g.A[3, 5] == 0
    assert g.A[0, 1] == 1 and g.A[0, 2] == 1
    assert g.A[4, 5] == 1
    assert g.A[1, 6] == 1 and g.A[2, 6] == 1 and g.A[4, 6] == 1 and g.A[5, 6] == 1


def test_single_device_chain():
    g = encode_setup(parse_setup("DCBell(a,b) -> R(a)"))
    want = np.zeros((4, 4))
    want[0, 1] = want[1, 2] = want[2, 3] = want[1, 3] = 1
    np.testing.assert_array_equal(g.A, want)


def test_angle_slots_distinguished_and_csv():
    a = encode_setup(parse_setup("DC00(a,b) -> HWP(a,0.25pi)"))
    b = encode_setup(parse_setup("DC00(a,b) -> HWP(a,0.5pi)"))
    assert not np.array_equal(a.X, b.X)
    xs, As = a.to_csv()
    assert xs.count("\n") == a.n_nodes and As.splitlines()[0] == "0,1,0,0"


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.sampled_from([4, 6]))
def test_graph_invariants(seed, n):
    setup = sample_setup(ToolboxConfig(n), np.random.default_rng(seed))
    g = encode_setup(setup)
    d1, d2 = feature_dims(n, 4)
    assert g.X.shape == (len(setup.devices) + 2, d1 + d2)
    np.testing.assert_array_equal(g.X[:, :d1].sum(1), 1)
    bits = g.X[:, d1:].sum(1)
    assert bits[0] == 0 and bits[-1] == 0
    for row, d in zip(bits[1:-1], setup.devices):
        assert row == len(d.paths)
    assert not np.tril(g.A).any()
    M = np.eye(g.n_nodes, dtype=int)
    for _ in range(g.n_nodes):
        M = (M @ g.A.astype(int) > 0).astype(int)
    assert not M.any()
    again = encode_setup(setup)
    np.testing.assert_array_equal(again.X, g.X)
    np.testing.assert_array_equal(again.A, g.A)
