import itertools
import math

import numpy as np
import pytest

from rcmlab import estimators as est
from rcmlab.estimators import BinSpec
from rcmlab.kernels import GaussianKernel, PoissonBlobKernel
from rcmlab.sampler import BoxGeometry

BLOB = PoissonBlobKernel(2)
BLOB_BOX = BoxGeometry(2, 6.0)


def test_two_point_at_zero_intensity_is_phi():
    k = GaussianKernel(2)
    box = BoxGeometry(2, 20.0)
    disp = np.array([0.8, 0.3])
    phi = float(k.evaluate(disp))
    e = est.estimate_two_point(0.0, k, disp, box=box, replicates=5000, seed=1)
    assert abs(e.value - phi) <= 4 * math.sqrt(phi * (1 - phi) / 5000)


def test_two_point_of_a_point_with_itself():
    assert est.estimate_two_point(1.0, BLOB, [0.0, 0.0], box=BLOB_BOX, replicates=5).value == 1.0


def test_field_agrees_with_single_displacement_estimate():
    fld = est.estimate_tau_field(1.5, BLOB, BLOB_BOX, BinSpec(batches=8), replicates=1500, seed=4, threads=2)
    site = (6, 0)
    disp = np.array(site) * fld.h
    single = est.estimate_two_point(1.5, BLOB, disp, box=BLOB_BOX, replicates=1500, seed=9)
    idx = (0, 0) + tuple(s % fld.n for s in site)
    diff = fld.estimate()[idx] - single.value
    assert abs(diff) <= 4 * math.hypot(fld.stderr()[idx], single.stderr)


def test_coupled_fields_are_monotone_per_bin():
    lams = [0.5, 1.0, 2.0]
    flds = est.estimate_tau_fields(lams, BLOB, BLOB_BOX, BinSpec(batches=4), replicates=200, seed=2)
    counts = [f.total_successes() for f in flds]
    for lo, hi in zip(counts, counts[1:]):
        assert np.all(lo <= hi)


def test_thread_count_does_not_change_counts():
    a = est.estimate_tau_field(1.0, BLOB, BLOB_BOX, BinSpec(batches=4), replicates=120, seed=3, threads=1)
    b = est.estimate_tau_field(1.0, BLOB, BLOB_BOX, BinSpec(batches=4), replicates=120, seed=3, threads=4)
    assert np.array_equal(a.successes, b.successes)


def test_split_fields_merge_to_the_full_run():
    full = est.estimate_tau_field(1.0, BLOB, BLOB_BOX, BinSpec(batches=4), replicates=100, seed=6)
    a = est.estimate_tau_field(1.0, BLOB, BLOB_BOX, BinSpec(batches=4), replicates=60, seed=6)
    b = est.estimate_tau_field(1.0, BLOB, BLOB_BOX, BinSpec(batches=4), replicates=40, seed=6, replica_offset=60)
    ab, ba = a.merge(b), b.merge(a)
    assert np.array_equal(ab.successes, full.successes)
    assert np.array_equal(ab.trials, full.trials)
    assert np.array_equal(ab.successes, ba.successes)
    with pytest.raises(est.EstimatorError):
        a.merge(a)


def test_stderr_positive_in_empty_bins():
    fld = est.estimate_tau_field(0.0, BLOB, BLOB_BOX, BinSpec(batches=2), replicates=50, seed=1)
    assert np.all(fld.stderr() > 0)


def _direct_triple(tau, w, h):
    # sum_{u, v} sum_{c, e} w_c w_e tau(u; a, c) tau(v - u; c, e) tau(x - v; e, b) h^2, d = 1
    m, _, n = tau.shape
    out = np.zeros((m, m, n))
    for a, b, x in itertools.product(range(m), range(m), range(n)):
        s = 0.0
        for c, e in itertools.product(range(m), range(m)):
            for u in range(n):
                for v in range(n):
                    s += w[c] * w[e] * tau[a, c, u] * tau[c, e, (v - u) % n] * tau[e, b, (x - v) % n]
        out[a, b, x] = s * h * h
    return out


def test_fft_chain_matches_direct_sum():
    rng = np.random.default_rng(0)
    tau = rng.random((2, 2, 10))
    tau = (tau + np.swapaxes(tau, 0, 1)) / 2
    w = np.array([0.3, 0.7])
    fast = est.chain_convolution([tau, tau, tau], w, 0.5, 1)
    assert np.max(np.abs(fast - _direct_triple(tau, w, 0.5))) < 1e-12


def test_triangle_ordering():
    fld = est.estimate_tau_field(1.0, BLOB, BLOB_BOX, BinSpec(batches=8), replicates=200, seed=5)
    rep = est.estimate_triangle(fld)
    vals = [rep.triangle.value, rep.triangle_open.value, rep.triangle_open2.value, rep.triangle_decoupled.value]
    assert vals == sorted(vals)
    assert rep.triangle.stderr > 0


def test_displaced_bubble_vanishes_at_zero():
    fld = est.estimate_tau_field(1.0, BLOB, BLOB_BOX, BinSpec(batches=4), replicates=100, seed=5)
    out = est.estimate_w_k(fld, [[0.0, 0.0], [1.0, 0.0]])
    assert out[0][1].value == 0.0
    assert out[1][1].value > 0


def test_double_connection_field_at_zero_intensity_is_phi():
    k = GaussianKernel(2)
    box = BoxGeometry(2, 16.0)
    fld = est.estimate_pi0_field(0.0, k, box, BinSpec(batches=4), replicates=2000, seed=3)
    z = np.abs(est.pi0_values(fld, k)) / fld.stderr()
    assert z.max() < 4.5


def test_pi0_field_agrees_with_single_displacement():
    fld = est.estimate_pi0_field(1.5, BLOB, BLOB_BOX, BinSpec(batches=8), replicates=800, seed=8, threads=2)
    site = (5, 0)
    single = est.estimate_pi0(1.5, BLOB, np.array(site) * fld.h, box=BLOB_BOX, replicates=800, seed=12)
    idx = (0, 0) + tuple(s % fld.n for s in site)
    diff = est.pi0_values(fld, BLOB)[idx] - single.value
    assert abs(diff) <= 4 * math.hypot(fld.stderr()[idx], single.stderr)


def test_pi1_vanishes_without_points():
    e = est.estimate_pi1(0.0, BLOB, [0.3, 0.0], box=BLOB_BOX, replicates=10)
    assert e.value == 0.0


def test_chi_is_one_at_zero_intensity():
    e = est.estimate_chi(0.0, BLOB, box=BLOB_BOX, replicates=20)
    assert e.value == 1.0


def test_fit_knee_recovers_a_line():
    lams = np.linspace(1.0, 3.0, 6)
    inv = 0.8 * (4.0 - lams)
    root, err, used = est.fit_knee(lams, inv, np.full(6, 1e-3))
    assert root == pytest.approx(4.0)
    assert err > 0 and len(used) == 5


def test_scan_counts_merge():
    lams = [1.0, 2.0]
    full = est.scan_counts(BLOB, lams, 6.0, 40, seed=1)
    a = est.scan_counts(BLOB, lams, 6.0, 25, seed=1)
    b = est.scan_counts(BLOB, lams, 6.0, 15, seed=1, replica_offset=25)
    merged = a.merge(b)
    for name in ("sum_random", "sumsq_random", "sum_nodes", "over_cutoff", "touches"):
        assert np.array_equal(getattr(merged, name), getattr(full, name))
    again = est.ScanCounts.from_dict(merged.to_dict())
    assert np.array_equal(again.sum_random, merged.sum_random)


def test_jackknife_of_a_certain_bin_has_zero_error():
    fld = est.estimate_tau_field(0.0, BLOB, BLOB_BOX, BinSpec(batches=20), replicates=4000, seed=2)
    val, err = est.jackknife(lambda f: f.regular()[0, 0, 0, 0], fld)
    assert val == 1.0 and err == 0.0


def test_bad_inputs():
    with pytest.raises(est.EstimatorError):
        est.estimate_tau_field(-1.0, BLOB, BLOB_BOX)
    with pytest.raises(est.EstimatorError):
        est.estimate_tau_field(1.0, BLOB, BLOB_BOX, replicates=0)
    with pytest.raises(est.EstimatorError):
        est.fit_knee([1.0, 2.0], [-1.0, -2.0], [0.1, 0.1])
