"""Acceptance suite: one PASS/FAIL line per criterion, runtime budget included."""
import itertools
import json
import math
import time

import networkx as nx
import numpy as np

from rcmlab import estimators as est
from rcmlab import graphops, spectral as sp
from rcmlab.cli import main, phi_check, pi0_bound_check
from rcmlab.kernels import BooleanDiscKernel, GaussianKernel, MarkSpace, PoissonBlobKernel
from rcmlab.sampler import BoxGeometry, augment, build_graph, sample_ppp
from rcmlab.streams import StreamFactory


def report(capsys, number, ok, started, budget, detail):
    elapsed = time.time() - started
    passed = bool(ok) and elapsed < budget
    with capsys.disabled():
        print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {detail} ({elapsed:.1f}s of {budget}s)")
    assert ok, detail
    assert elapsed < budget, f"runtime {elapsed:.1f}s over {budget}s"


def random_operator(rng):
    m = int(rng.integers(1, 9))
    a = rng.normal(size=(m, m)) * rng.choice([0.1, 1.0, 10.0])
    return sp.MarkOperator(np.sort(rng.random(m)), rng.dirichlet(np.ones(m)), (a + a.T) / 2)


def test_norm_chain_on_random_operators(capsys):
    t0 = time.time()
    rng = np.random.default_rng(101)
    bad = 0
    for _ in range(200):
        op = random_operator(rng)
        s, n, one = abs(sp.sup_spec(op)), sp.op_norm(op), sp.one_inf(op)
        bad += (s > n + 1e-12) + (n > one + 1e-12)
    report(capsys, 1, bad == 0, t0, 10, f"{bad} norm chain violations over 200 operators")


def test_double_mark_closed_form_vs_eigensolver(capsys):
    t0 = time.time()
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(100):
        p = rng.uniform(0.01, 0.99)
        f11, f12, f22 = rng.normal(size=3)
        op = sp.MarkOperator([0.0, 1.0], [p, 1 - p], [[f11, f12], [f12, f22]])
        ref = np.linalg.eigvalsh(op.symmetric_matrix())[-1]
        worst = max(worst, abs(float(sp.double_mark_sup_spec(p, f11, f12, f22)) - ref) / abs(ref))
    report(capsys, 2, worst <= 1e-10, t0, 5, f"max relative error {worst:.2e}")


def test_boolean_disc_bessel_vs_quadrature(capsys):
    t0 = time.time()
    rng = np.random.default_rng(103)
    worst = 0.0
    for d in (3, 4, 5, 6):
        for _ in range(10):
            radii = np.sort(rng.uniform(0.1, 1.0, size=2))
            k = BooleanDiscKernel(d, MarkSpace.finite([0.0, 1.0], [0.5, 0.5]), radii=radii)
            reach = radii.sum()
            for kappa in np.linspace(0.0, 20.0, 9) / reach:
                kv = np.zeros(d)
                kv[0] = kappa
                fast = float(k.fourier(kv, 0.0, 1.0))
                slow = k.fourier_quadrature(kv, 0.0, 1.0)
                worst = max(worst, abs(fast - slow) / abs(slow))
    report(capsys, 3, worst <= 1e-6, t0, 30, f"max relative error {worst:.2e} over d=3..6")


def test_two_point_field_at_zero_intensity_is_phi(capsys):
    t0 = time.time()
    checks = {}
    for name, kernel, L in (("gaussian", GaussianKernel(2), 16.0), ("blob", PoissonBlobKernel(2), 6.0)):
        fld = est.estimate_tau_field(0.0, kernel, BoxGeometry(2, L), est.BinSpec(), replicates=100000, seed=104)
        checks[name] = phi_check(fld, kernel)
        # self-mirrored bins count half their trials
        checks[name]["min_effective_trials"] = fld.total_trials() // 2
    ok = all(c["matches"] and c["min_effective_trials"] >= 100000 for c in checks.values())
    detail = ", ".join(f"{n} max|z|={c['max_abs_z']:.2f}" for n, c in checks.items())
    report(capsys, 4, ok, t0, 300, detail)


def test_coupling_is_pathwise_monotone(capsys):
    t0 = time.time()
    lams = [0.5, 1.0, 2.0, 3.0, 4.0]
    kernel, box = PoissonBlobKernel(2), BoxGeometry(2, 8.0)
    sizes = est.cluster_sizes(lams, kernel, None, box, 1000, seed=105)
    bad = int(np.count_nonzero(np.diff(sizes, axis=1) < 0))
    streams = StreamFactory(105)
    for r in range(1000):
        eta = sample_ppp(max(lams), box, kernel.marks, streams.generator(r))
        cfg = augment(eta, [(box.center, 0.0), (box.center + [1.5, 0.0], 0.0)], box, ids=[0, 1])
        g = build_graph(cfg, kernel, box, streams.key(r))
        previous = set()
        for lam in lams:
            comp = set(graphops.component(g, 0, cfg.levels <= lam / max(lams)).tolist())
            bad += not previous <= comp
            previous = comp
    report(capsys, 5, bad == 0, t0, 120, f"{bad} monotonicity violations over 1000 replicas")


def _direct_triple(tau, w, h):
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


def test_triangle_pipeline(capsys):
    t0 = time.time()
    fld = est.estimate_tau_field(1.0, PoissonBlobKernel(1), BoxGeometry(1, 8.0), est.BinSpec(spacing=0.5),
                                 replicates=400, seed=106)
    vals = est.diagram_values(fld)
    direct = fld.lam ** 2 * _direct_triple(fld.regular(), fld.weights, fld.h).max()
    gap = abs(vals[0] - direct)
    ordered = bool(vals[0] <= vals[1] <= vals[2] <= vals[3])
    g = est.estimate_tau_field(0.3, GaussianKernel(2), BoxGeometry(2, 16.0), est.BinSpec(), replicates=2000,
                               seed=107)
    tri = est.estimate_triangle(g).triangle
    floor = 0.09 / (6 * math.pi)
    ok = gap <= 1e-10 and ordered and tri.value >= floor - 4 * tri.stderr
    report(capsys, 6, ok, t0, 300, f"FFT vs direct {gap:.1e}, ordered={ordered}, "
                                   f"gaussian triangle {tri.value:.5f} vs floor {floor:.5f}")


def test_pi0_bounds(capsys):
    t0 = time.time()
    kernel, box = GaussianKernel(2), BoxGeometry(2, 16.0)
    results = {}
    for lam in (0.0, 0.2, 0.4):
        tau = est.estimate_tau_field(lam, kernel, box, est.BinSpec(), replicates=2000, seed=108)
        pi = est.estimate_pi0_field(lam, kernel, box, est.BinSpec(), replicates=2000, seed=109)
        results[lam] = pi0_bound_check(lam, tau, pi, kernel)
    ok = all(r["holds"] for r in results.values())
    detail = ", ".join(f"lam={lam} low z {r['max_below_zero_z']:.2f} high z {r['max_above_bound_z']:.2f}"
                       for lam, r in results.items())
    report(capsys, 7, ok, t0, 600, detail)


def test_double_connection_oracle(capsys):
    t0 = time.time()
    rng = np.random.default_rng(110)
    mismatches = checked = 0
    for n in range(2, 8):
        pairs = list(itertools.combinations(range(n), 2))
        for _ in range(200):
            edges = [p for p in pairs if rng.random() < rng.uniform(0.2, 0.8)]
            g = graphops.graph_from_edges(n, edges)
            ng = nx.Graph(edges)
            ng.add_nodes_from(range(n))
            for s, t in pairs:
                got = graphops.doubly_connected(g, s, t)
                if ng.has_edge(s, t):
                    paths = True
                else:
                    paths = nx.has_path(ng, s, t) and len(list(nx.node_disjoint_paths(ng, s, t))) >= 2
                    pivotal = graphops.connected(g, s, t) and not graphops.pivotal_vertices(g, s, t)
                    mismatches += got != pivotal
                mismatches += got != paths
                checked += 1
    report(capsys, 8, mismatches == 0, t0, 60, f"{mismatches} mismatches over {checked} vertex pairs")


def test_oze_truncated_residual(capsys):
    t0 = time.time()
    kernel, box, lam = GaussianKernel(2), BoxGeometry(2, 20.0), 0.2
    chi = est.estimate_chi(lam, kernel, box=box, replicates=2000, seed=111)
    subcritical = chi.value + 4 * chi.stderr < 10.0
    tau = est.estimate_tau_field(lam, kernel, box, est.BinSpec(), replicates=4000, seed=112)
    pi = est.estimate_pi0_field(lam, kernel, box, est.BinSpec(), replicates=4000, seed=113)
    res = sp.oze_residual(lam, tau, pi, kernel)
    ok = subcritical and res["bound_holds"]
    report(capsys, 9, ok, t0, 900, f"chi={chi.value:.3f}, residual {res['residual_at_zero']:.4f} "
                                   f"vs bound {res['bound']:.4f} + 4 sigma")


def test_bootstrap_at_zero_intensity(capsys):
    t0 = time.time()
    ok, parts = True, []
    for name, kernel in (("blob", PoissonBlobKernel(2)), ("gaussian", GaussianKernel(2))):
        grid = np.concatenate([[0.0], np.geomspace(0.05, 10.0, 29)])[:, None] * np.eye(2)[0]
        rep = sp.bootstrap_f(0.0, kernel, grid, grid[::2])
        c = sp.check_h1(kernel).C
        ok &= rep.f1 == 0.0 and rep.f2 <= c and rep.f3 <= 2 * c / 3 + 1e-8
        parts.append(f"{name} f2={rep.f2:.4f} f3={rep.f3:.4f} C={c:.4f}")
    report(capsys, 10, ok, t0, 60, ", ".join(parts))


def test_critical_intensity_ordering(capsys):
    t0 = time.time()
    rep = est.scan_critical(PoissonBlobKernel(2), [2.5, 3.0, 3.5, 3.8, 4.1, 4.3], [8.0, 16.0, 32.0], 300, seed=114)
    ok = all(b["ordering_holds"] for b in rep.per_box)
    detail = ", ".join(f"L={b['L']:g} one {b['lambda_T_one_proxy']['value']:.3f} "
                       f"inf {b['lambda_T_inf_proxy']['value']:.3f}" for b in rep.per_box)
    report(capsys, 11, ok, t0, 1800, detail)


def _run(tmp_path, name, out, **extra):
    raw = {"kernel": {"family": "poisson-blob", "d": 2}, "box": {"L": 6.0}, "seed": 115, "lambda": 1.5,
           "replicates": 120, "bins": {"batches": 4}}
    raw.update(extra)
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return main(["tau-field", "--config", str(path), "--out", str(tmp_path / out)])


def test_reproducibility_and_merge(capsys, tmp_path):
    t0 = time.time()
    codes = [_run(tmp_path, "full.json", "full"), _run(tmp_path, "full.json", "again", threads=2),
             _run(tmp_path, "a.json", "a", replicates=70), _run(tmp_path, "b.json", "b", replicates=50,
                                                                 replica_start=70)]
    parts = [str(tmp_path / n / "tau_field.json") for n in ("b", "a")]
    codes.append(main(["merge", *parts, "--out", str(tmp_path / "merged")]))
    names = ("tau_field.csv", "tau_field_batches.csv", "tau_field.json")
    same = all((tmp_path / "full" / n).read_bytes() == (tmp_path / "again" / n).read_bytes() for n in names)
    merged = all((tmp_path / "full" / n).read_bytes() == (tmp_path / "merged" / n).read_bytes() for n in names)
    ok = codes == [0] * 5 and same and merged
    report(capsys, 12, ok, t0, 120, f"exit codes {codes}, rerun identical={same}, merge identical={merged}")
