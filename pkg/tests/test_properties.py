import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from rcmlab import estimators as est
from rcmlab import graphops, spectral as sp
from rcmlab.estimators import TauField
from rcmlab.kernels import DoubleMarkKernel, FactorizedKernel, MarkSpace, PoissonBlobKernel, RadialProfile
from rcmlab.sampler import BoxGeometry, augment, build_graph, restrict, sample_ppp
from rcmlab.streams import StreamFactory

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@st.composite
def mark_operators(draw, symmetric=True):
    m = draw(st.integers(1, 6))
    w = np.asarray(draw(st.lists(st.floats(0.01, 1.0), min_size=m, max_size=m)))
    a = np.asarray(draw(st.lists(finite, min_size=m * m, max_size=m * m))).reshape(m, m)
    if symmetric:
        a = (a + a.T) / 2
    return sp.MarkOperator(np.arange(float(m)), w / w.sum(), a)


@settings(max_examples=200, deadline=None)
@given(mark_operators())
def test_norm_chain(op):
    s, n, one = abs(sp.sup_spec(op)), sp.op_norm(op), sp.one_inf(op)
    assert s <= n + 1e-12
    assert n <= one + 1e-12
    assert sp.two_inf(op) <= sp.inf_inf(op) + 1e-12


@settings(max_examples=100, deadline=None)
@given(mark_operators(symmetric=False))
def test_op_norm_below_one_inf_for_nonsymmetric(op):
    # Schur test with the column and row sums of a weighted kernel
    cols = np.max(op.weights @ np.abs(op.entries))
    rows = np.max(np.abs(op.entries) @ op.weights)
    assert sp.op_norm(op) <= np.sqrt(cols * rows) + 1e-12


@settings(max_examples=100, deadline=None)
@given(mark_operators())
def test_entrywise_domination(op):
    # |H| entrywise dominates H in operator norm
    absolute = sp.MarkOperator(op.nodes, op.weights, np.abs(op.entries))
    assert sp.op_norm(op) <= sp.op_norm(absolute) + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), finite, finite, finite)
def test_double_mark_closed_form_matches_eigensolver(p, f11, f12, f22):
    op = sp.MarkOperator([1.0, 2.0], [p, 1 - p], [[f11, f12], [f12, f22]])
    top = linalg.eigvalsh(op.symmetric_matrix())[-1]
    assert abs(float(sp.double_mark_sup_spec(p, f11, f12, f22)) - top) <= 1e-10 * max(1.0, abs(top))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 0.9), st.floats(0.2, 1.0), st.floats(0.2, 1.0), st.floats(0.1, 1.0),
       st.lists(st.floats(-4, 4), min_size=2, max_size=2))
def test_spectrum_at_k_below_spectrum_at_zero(p, r11, r22, amp, kv):
    k = DoubleMarkKernel(2, p, {"11": {"shape": "ball", "scale": r11},
                                "12": {"shape": "gaussian", "scale": 0.2, "amplitude": amp * 0.5},
                                "22": {"shape": "ball", "scale": r22, "amplitude": amp}})
    s0 = sp.normalizing_constant(k)
    assert sp.sup_spec(sp.discretize(k, np.asarray(kv))) <= s0 + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 3.0), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_rescaling_transform_law(scale, kv):
    marks = MarkSpace.finite([0.0, 1.0], [0.5, 0.5])
    k = FactorizedKernel(3, RadialProfile("gaussian", scale, 0.5), marks, [[1.0, 0.4], [0.4, 0.8]])
    r = sp.rescale(k)
    kv = np.asarray(kv)
    assert np.isclose(sp.normalizing_constant(r), 1.0, rtol=1e-12)
    assert np.isclose(r.fourier(kv, 0.0, 1.0), k.fourier(kv * r.q ** (-1 / 3), 0.0, 1.0) / r.q, rtol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.lists(st.floats(0.0, 1.0), min_size=2, max_size=5))
def test_coupling_is_monotone(seed, fractions):
    fractions = sorted(fractions)
    k = PoissonBlobKernel(2)
    box = BoxGeometry(2, 6.0)
    s = StreamFactory(seed)
    eta = sample_ppp(3.0, box, k.marks, s.generator(0))
    cfg = augment(eta, [(box.center, 0.0)], box, ids=[0])
    sizes = []
    for f in fractions:
        g = build_graph(restrict(cfg, f), k, box, s.key(0))
        sizes.append(len(graphops.component(g, 0)))
    assert sizes == sorted(sizes)


def _field(counts, trials, lo, hi):
    return TauField(0.5, 1, 4.0, 4, 1.0, np.zeros(1), np.ones(1), counts, trials, "tau", 0, [(lo, hi)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=3 * 4 * 2, max_size=3 * 4 * 2))
def test_merge_is_associative_and_commutative(raw):
    arr = np.asarray(raw, dtype=np.int64).reshape(3, 2, 1, 1, 4)
    fields = [_field(arr[i], np.array([60, 60]), 10 * i, 10 * i + 10) for i in range(3)]
    a, b, c = fields
    left, right = a.merge(b).merge(c), a.merge(b.merge(c))
    assert np.array_equal(left.successes, right.successes)
    assert np.array_equal(c.merge(a).merge(b).successes, left.successes)
    assert left.replica_ranges == right.replica_ranges == [(0, 10), (10, 20), (20, 30)]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2 ** 20), st.floats(0.1, 0.9))
def test_double_connection_equals_empty_pivotal_set(n, seed, density):
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    edges = [p for p in pairs if rng.random() < density]
    g = graphops.graph_from_edges(n, edges)
    for s_, t in pairs:
        direct = g.has_edge(s_, t)
        oracle = direct or graphops.disjoint_path_count(n, edges, s_, t) >= 2
        assert graphops.doubly_connected(g, s_, t) == oracle
        if graphops.connected(g, s_, t) and not direct:
            assert oracle == (not graphops.pivotal_vertices(g, s_, t))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=8, max_size=8))
def test_chain_convolution_is_commutative_for_single_mark(vals):
    a = np.asarray(vals[:4]).reshape(1, 1, 4)
    b = np.asarray(vals[4:]).reshape(1, 1, 4)
    w = np.ones(1)
    assert np.allclose(est.chain_convolution([a, b], w, 0.5, 1), est.chain_convolution([b, a], w, 0.5, 1))
