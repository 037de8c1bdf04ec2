import numpy as np
import pytest

from rcmlab.kernels import GaussianKernel, MarkSpace, PoissonBlobKernel
from rcmlab.sampler import (BoxGeometry, PointConfig, SamplerError, all_pairs, augment, build_graph, cell_pairs,
                            restrict, sample_ppp, thin_mask)
from rcmlab.streams import StreamFactory, pair_uniforms


def test_torus_displacement_uses_minimal_image():
    box = BoxGeometry(2, 10.0)
    assert np.allclose(box.displacement([0.5, 0.5], [9.5, 0.5]), [-1.0, 0.0])
    free = BoxGeometry(2, 10.0, "free")
    assert np.allclose(free.displacement([0.5, 0.5], [9.5, 0.5]), [9.0, 0.0])


def test_point_count_is_poisson():
    box = BoxGeometry(2, 5.0)
    counts = [len(sample_ppp(2.0, box, MarkSpace.singleton(), np.random.default_rng(s))) for s in range(400)]
    assert np.mean(counts) == pytest.approx(50.0, abs=1.5)
    assert np.var(counts) == pytest.approx(50.0, rel=0.25)


def test_cell_list_matches_all_pairs():
    rng = np.random.default_rng(1)
    for metric in ("torus", "free"):
        for d in (1, 2, 3):
            box = BoxGeometry(d, 6.0, metric)
            pos = rng.random((300, d)) * 6.0
            a = all_pairs(pos, box, 0.9)
            b = cell_pairs(pos, box, 0.9)
            ref = sorted(zip(a[0].tolist(), a[1].tolist()))
            assert sorted(zip(b[0].tolist(), b[1].tolist())) == ref


def test_pair_uniforms_are_symmetric_and_uniform():
    key = StreamFactory(3).key(0)
    i = np.arange(10000, dtype=np.uint64)
    j = i + 12345
    u = pair_uniforms(key, i, j)
    assert np.array_equal(u, pair_uniforms(key, j, i))
    assert u.mean() == pytest.approx(0.5, abs=0.01)
    assert np.all((u >= 0) & (u < 1))


def test_edge_probability_matches_kernel():
    # two fixed points at distance 1 connect with probability phi(1)
    k = GaussianKernel(2)
    box = BoxGeometry(2, 20.0)
    p = float(k.evaluate(np.array([1.0, 0.0])))
    streams = StreamFactory(11)
    hits = 0
    n = 20000
    for r in range(n):
        cfg = augment(PointConfig.empty(2), [([5.0, 5.0], 0.0), ([6.0, 5.0], 0.0)], box, ids=[0, 1])
        hits += len(build_graph(cfg, k, box, streams.key(r)).edges)
    assert hits / n == pytest.approx(p, abs=4 * np.sqrt(p * (1 - p) / n))


def test_same_seed_same_sample():
    box = BoxGeometry(2, 8.0)
    k = PoissonBlobKernel(2)
    s = StreamFactory(5)
    g1 = build_graph(sample_ppp(1.0, box, k.marks, s.generator(3)), k, box, s.key(3))
    g2 = build_graph(sample_ppp(1.0, box, k.marks, s.generator(3)), k, box, s.key(3))
    assert np.array_equal(g1.edges, g2.edges)
    assert np.array_equal(g1.config.positions, g2.config.positions)


def test_restriction_keeps_augmented_points_and_is_nested():
    box = BoxGeometry(2, 8.0)
    eta = sample_ppp(2.0, box, MarkSpace.singleton(), np.random.default_rng(0))
    cfg = augment(eta, [(box.center, 0.0)], box, ids=[0])
    small, big = restrict(cfg, 0.3), restrict(cfg, 0.7)
    assert small.augmented_count == 1 and small.ids[0] == 0
    assert set(small.ids.tolist()) <= set(big.ids.tolist())
    assert len(restrict(cfg, 0.0)) == 1


def test_thinning_probability():
    # one point at distance 0.5 from one anchor survives with probability 1 - phi(0.5)
    k = GaussianKernel(2)
    box = BoxGeometry(2, 20.0)
    cfg = PointConfig(np.array([[5.5, 5.0]]), np.zeros(1), np.array([2 ** 32 + 7], dtype=np.uint64), np.zeros(1))
    keep = 1 - float(k.evaluate(np.array([0.5, 0.0])))
    s = StreamFactory(2)
    n = 20000
    alive = sum(bool(thin_mask(cfg, np.array([[5.0, 5.0]]), np.array([0.0]), k, box, s.key(r, "thinning"))[0])
                for r in range(n))
    assert alive / n == pytest.approx(keep, abs=4 * np.sqrt(keep * (1 - keep) / n))
    # augmented points are never thinned
    fixed = augment(cfg, [([5.0, 5.1], 0.0)], box, ids=[1])
    assert all(thin_mask(fixed, np.array([[5.0, 5.0]]), np.array([0.0]), k, box, s.key(r, "thinning"))[0]
               for r in range(200))


def test_invalid_inputs():
    with pytest.raises(SamplerError):
        BoxGeometry(2, -1.0)
    with pytest.raises(SamplerError):
        sample_ppp(-1.0, BoxGeometry(2, 1.0), MarkSpace.singleton(), np.random.default_rng(0))
    with pytest.raises(SamplerError):
        build_graph(PointConfig.empty(2), GaussianKernel(2), BoxGeometry(2, 5.0), StreamFactory(0).key(0))
