"""Monte-Carlo estimators: two-point fields, cluster statistics, diagrams, lace coefficients, scans.

All accumulators are integer counts indexed by a replica batch
(replica index modulo the batch count), so runs over disjoint replica
ranges merge exactly by addition and the thread count never changes a
result.  Diagram standard errors come from a delete-one-batch jackknife,
which accounts for the correlation between bins filled from one replica.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import graphops
from .kernels import Kernel, MarkSpace
from .sampler import (BoxGeometry, PointConfig, augment, build_graph, sample_ppp, thin_mask)
from .streams import StreamFactory, pair_uniforms

MAX_REPLICATES = 10 ** 9
DEFAULT_BATCHES = 16
TARGET_ID_BASE = 1


class EstimatorError(ValueError):
    pass


@dataclass
class Estimate:
    value: float
    stderr: float
    replicates: int
    seed: int

    def __post_init__(self):
        if not self.stderr >= 0:
            raise EstimatorError("stderr must be nonnegative")
        if self.replicates < 1:
            raise EstimatorError("an estimate needs at least one replicate")

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "replicates": self.replicates, "seed": self.seed}


def _check_replicates(replicates: int):
    if replicates < 1 or replicates > MAX_REPLICATES:
        raise EstimatorError(f"replicate count must lie in [1, {MAX_REPLICATES}]")


def _parallel_sum(work, start: int, count: int, threads: int = 1):
    """Run work(lo, hi) over chunks of [start, start+count) and add the results."""
    threads = max(1, int(threads))
    edges = np.linspace(start, start + count, min(threads, count) + 1).round().astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    if len(chunks) == 1:
        parts = [work(*chunks[0])]
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            parts = list(pool.map(lambda c: work(*c), chunks))
    total = parts[0]
    for p in parts[1:]:
        total = tuple(a + b for a, b in zip(total, p))
    return total


def origin_of(box: BoxGeometry) -> np.ndarray:
    return box.center


# ----------------------------------------------------------------------------
# lattice geometry for fields


@dataclass(frozen=True)
class BinSpec:
    """Displacement lattice and mark grid for field estimates.

    ``spacing`` defaults to effective_range/8 and is adjusted so that the
    lattice closes on the torus.  Interval mark spaces use a midpoint grid of
    ``mark_nodes`` nodes.
    """

    spacing: float | None = None
    mark_nodes: int = 4
    batches: int = DEFAULT_BATCHES

    def resolve(self, kernel: Kernel, box: BoxGeometry):
        h = kernel.effective_range / 8 if self.spacing is None else float(self.spacing)
        if not h > 0:
            raise EstimatorError("lattice spacing must be positive")
        n = max(1, int(round(box.L / h)))
        if kernel.marks.kind == "interval":
            grid = MarkSpace.interval(kernel.marks.lower, kernel.marks.upper, kernel.marks.density, self.mark_nodes)
            nodes, weights = grid.nodes, grid.weights
        else:
            nodes, weights = kernel.marks.nodes, kernel.marks.weights
        return n, box.L / n, np.asarray(nodes, float), np.asarray(weights, float)


def centered_indices(n: int) -> np.ndarray:
    m = np.arange(n)
    return (m + n // 2) % n - n // 2


def lattice_vectors(d: int, n: int, h: float) -> np.ndarray:
    """Centered displacement of every lattice site, shape (n,)*d + (d,)."""
    c = centered_indices(n) * h
    grids = np.meshgrid(*([c] * d), indexing="ij")
    return np.stack(grids, axis=-1)


def mirror(arr: np.ndarray, axes) -> np.ndarray:
    """arr[-m mod n] along the given axes."""
    out = arr
    for ax in axes:
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


def kernel_on_lattice(kernel: Kernel, d: int, n: int, h: float, nodes) -> np.ndarray:
    """phi sampled at lattice displacements, shape (m, m) + (n,)*d."""
    vec = lattice_vectors(d, n, h)
    nodes = np.asarray(nodes, float)
    m = len(nodes)
    out = np.empty((m, m) + (n,) * d)
    for ia in range(m):
        for ib in range(m):
            out[ia, ib] = kernel.evaluate(vec, nodes[ia], nodes[ib])
    return out


# ----------------------------------------------------------------------------
# field container


@dataclass(eq=False)
class TauField:
    """Binned connection counts on a displacement lattice times a mark grid.

    ``successes[batch, a, b, site...]`` and ``trials[batch]`` (every bin of a
    batch sees the same number of trials).  Counts are symmetrised: bin
    (x, a, b) includes the mirrored bin (-x, b, a).  Bins (0, a, a) hold
    counts for two distinct points at one location; ``estimate`` reports 1
    there because a point is connected to itself, while lattice sums use
    the measured distinct-point value (``regular``).
    ``kind`` is ``tau`` (connection) or ``pi0`` (double connection).
    """

    lam: float
    d: int
    L: float
    n: int
    h: float
    nodes: np.ndarray
    weights: np.ndarray
    successes: np.ndarray
    trials: np.ndarray
    kind: str = "tau"
    seed: int = 0
    replica_ranges: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.nodes)

    @property
    def batches(self) -> int:
        return len(self.trials)

    @property
    def site_axes(self):
        return tuple(range(2, 2 + self.d))

    def total_successes(self) -> np.ndarray:
        return self.successes.sum(axis=0)

    def total_trials(self) -> int:
        return int(self.trials.sum())

    def bin_trials(self) -> np.ndarray:
        return np.full(self.successes.shape[1:], self.total_trials(), dtype=np.int64)

    def regular(self) -> np.ndarray:
        t = self.total_trials()
        if t == 0:
            raise EstimatorError("field has empty bins (no trials)")
        return self.total_successes() / t

    def estimate(self) -> np.ndarray:
        vals = self.regular()
        if self.kind == "tau":
            zero = (0,) * self.d
            for a in range(self.m):
                vals[(a, a) + zero] = 1.0
        return vals

    def self_mirror_bins(self) -> np.ndarray:
        """Bins whose mirror (-x, b, a) is the bin itself."""
        c = centered_indices(self.n)
        on_axis = (c == 0) | (2 * c == -self.n)
        mask = np.ones((self.n,) * self.d, dtype=bool)
        for ax in range(self.d):
            shape = [1] * self.d
            shape[ax] = self.n
            mask = mask & on_axis.reshape(shape)
        diag = np.eye(self.m, dtype=bool)
        return diag.reshape((self.m, self.m) + (1,) * self.d) & mask.reshape((1, 1) + mask.shape)

    def stderr(self) -> np.ndarray:
        """Binomial standard error per bin from the Agresti-Coull adjusted proportion.

        The adjustment (s + 2) / (t + 4) keeps the error positive for bins with
        no or only successes.  The two halves of a symmetrised bin are
        independent at lam = 0 except for self-mirrored bins; otherwise they
        may be correlated, so the effective trial count is halved.
        """
        s = self.total_successes().astype(float)
        t = np.full(s.shape, float(self.total_trials()))
        if self.lam > 0:
            s, t = s / 2, t / 2
        else:
            mirrored = self.self_mirror_bins()
            s, t = np.where(mirrored, s / 2, s), np.where(mirrored, t / 2, t)
        p = (s + 2) / (t + 4)
        return np.sqrt(p * (1 - p) / (t + 4))

    def without_batch(self, b: int) -> "TauField":
        keep = np.arange(self.batches) != b
        return self._replace(self.successes[keep], self.trials[keep])

    def _replace(self, successes, trials) -> "TauField":
        return TauField(self.lam, self.d, self.L, self.n, self.h, self.nodes, self.weights,
                        successes, trials, self.kind, self.seed, list(self.replica_ranges))

    def nonempty_batches(self) -> np.ndarray:
        return np.nonzero(self.trials > 0)[0]

    def compatible(self, other: "TauField") -> bool:
        return (self.kind == other.kind and self.lam == other.lam and self.d == other.d and self.L == other.L
                and self.n == other.n and self.h == other.h and np.array_equal(self.nodes, other.nodes)
                and np.array_equal(self.weights, other.weights) and self.batches == other.batches
                and self.seed == other.seed)

    def merge(self, other: "TauField") -> "TauField":
        if not self.compatible(other):
            raise EstimatorError("fields differ in geometry, intensity, seed or kind")
        ranges = sorted(self.replica_ranges + other.replica_ranges)
        for (a0, a1), (b0, b1) in zip(ranges[:-1], ranges[1:]):
            if b0 < a1:
                raise EstimatorError("replica ranges overlap")
        out = self._replace(self.successes + other.successes, self.trials + other.trials)
        out.replica_ranges = ranges
        return out

    def sites(self):
        """Centered integer coordinates of every site in array order."""
        c = centered_indices(self.n)
        return list(itertools.product(*([c] * self.d)))


def jackknife(fn, fld: TauField):
    """Value of fn on the full field and its delete-one-batch jackknife error."""
    full = np.asarray(fn(fld), dtype=float)
    batches = fld.nonempty_batches()
    if len(batches) < 2:
        return full, np.full(full.shape, np.inf)
    loo = np.array([fn(fld.without_batch(b)) for b in batches], dtype=float)
    g = len(batches)
    err = np.sqrt((g - 1) / g * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return full, err


# ----------------------------------------------------------------------------
# two-point function


def estimate_two_point(lam: float, kernel: Kernel, displacement, a=None, b=None, box: BoxGeometry = None,
                       replicates: int = 1000, seed: int = 0, replica_offset: int = 0,
                       threads: int = 1) -> Estimate:
    """Fraction of replicas in which augmented points x and x + displacement are connected."""
    _check_replicates(replicates)
    if lam < 0:
        raise EstimatorError("intensity must be nonnegative")
    a, b = kernel._marks_or_default(a, b)
    disp = np.asarray(displacement, dtype=float)
    if np.all(disp == 0) and a == b:
        return Estimate(1.0, 0.0, replicates, seed)
    x = origin_of(box)
    y = box.wrap(x + disp)
    if not box.contains(y) or (box.metric == "torus" and np.any(np.abs(disp) > box.L / 2)):
        raise EstimatorError("displacement outside the box")
    streams = StreamFactory(seed)

    def work(lo, hi):
        hits = 0
        for r in range(lo, hi):
            eta = sample_ppp(lam, box, kernel.marks, streams.generator(r))
            cfg = augment(eta, [(x, float(a)), (y, float(b))], box, ids=[0, 1])
            g = build_graph(cfg, kernel, box, streams.key(r))
            hits += graphops.connected(g, 0, 1)
        return (np.int64(hits),)

    (hits,) = _parallel_sum(work, replica_offset, replicates, threads)
    p = hits / replicates
    return Estimate(float(p), float(math.sqrt(p * (1 - p) / replicates)), replicates, seed)


class _FieldContext:
    """Shared data for field estimation: lattice targets and stencils."""

    def __init__(self, kernel: Kernel, box: BoxGeometry, bins: BinSpec):
        if box.metric != "torus" and kernel.effective_range * 2 > box.L:
            raise EstimatorError("box too small for the kernel range")
        self.kernel, self.box = kernel, box
        self.n, self.h, self.nodes, self.weights = bins.resolve(kernel, box)
        self.batches = bins.batches
        d = box.d
        self.d = d
        self.origin = origin_of(box)
        self.offsets = lattice_vectors(d, self.n, self.h).reshape(-1, d)
        self.targets = box.wrap(self.origin + self.offsets)
        self.T = len(self.targets)
        self.site_index = np.arange(self.T).reshape((self.n,) * d)
        reach = int(math.ceil(kernel.effective_range / self.h + math.sqrt(d) / 2)) + 1
        if 2 * reach + 1 >= self.n:
            self.stencil = None
        else:
            s = np.arange(-reach, reach + 1)
            st = np.stack(np.meshgrid(*([s] * d), indexing="ij"), axis=-1).reshape(-1, d)
            self.stencil = st[np.einsum("ij,ij->i", st, st) <= (reach) ** 2]

    def target_ids(self, ib: int) -> np.ndarray:
        return (TARGET_ID_BASE + ib * self.T + np.arange(self.T)).astype(np.uint64)

    def candidate_pairs(self, positions: np.ndarray):
        """(member, target) index pairs whose distance may be within range."""
        m = len(positions)
        if self.stencil is None:
            return np.repeat(np.arange(m), self.T), np.tile(np.arange(self.T), m)
        rel = self.box.displacement(self.origin, positions)
        base = np.round(rel / self.h).astype(np.int64)
        cells = (base[:, None, :] + self.stencil[None, :, :]) % self.n
        flat = np.ravel_multi_index(tuple(np.moveaxis(cells, -1, 0)), (self.n,) * self.d)
        # array index along an axis equals the centered offset mod n
        return np.repeat(np.arange(m), len(self.stencil)), flat.reshape(-1)

    def edge_pairs(self, positions, marks, ids, ib, key):
        """Accepted edges between members and targets of mark node ib."""
        mem, tgt = self.candidate_pairs(positions)
        if len(mem) == 0:
            return mem, tgt
        disp = self.box.displacement(positions[mem], self.targets[tgt])
        phi = self.kernel.evaluate(disp, marks[mem], self.nodes[ib])
        live = phi > 0
        mem, tgt, phi = mem[live], tgt[live], phi[live]
        u = pair_uniforms(key, ids[mem], self.target_ids(ib)[tgt])
        ok = u < phi
        return mem[ok], tgt[ok]

    def empty_counts(self, lead=()):
        return np.zeros(lead + (self.batches, len(self.nodes), len(self.nodes), self.T), dtype=np.int64)


def _lattice_index_of_offsets(n: int) -> np.ndarray:
    return np.arange(n)


def _symmetrize(raw: np.ndarray, d: int, n: int) -> np.ndarray:
    """raw[..., a, b, sites] + raw[..., b, a, -sites]."""
    shaped = raw.reshape(raw.shape[:-1] + (n,) * d)
    k = shaped.ndim
    site_axes = tuple(range(k - d, k))
    swapped = np.swapaxes(shaped, k - d - 2, k - d - 1)
    return shaped + mirror(swapped, site_axes)


def _fields_from_counts(ctx: _FieldContext, lams, raw, trials, kind, seed, offset, replicates):
    out = []
    for il, lam in enumerate(lams):
        succ = _symmetrize(raw[il], ctx.d, ctx.n)
        out.append(TauField(float(lam), ctx.d, ctx.box.L, ctx.n, ctx.h, ctx.nodes.copy(), ctx.weights.copy(),
                            succ, 2 * trials.copy(), kind, seed, [(offset, offset + replicates)]))
    return out


def estimate_tau_fields(lams, kernel: Kernel, box: BoxGeometry, bins: BinSpec = BinSpec(),
                        replicates: int = 1000, seed: int = 0, replica_offset: int = 0,
                        threads: int = 1) -> list[TauField]:
    """Two-point fields at several intensities from one coupled sample.

    Each replica samples the process at the largest intensity; the field at
    lam uses points with level <= lam/lam_max.  The origin sits at the box
    centre; target y at lattice offset x connects iff it has an edge into
    the cluster of the origin in the graph without y.
    """
    _check_replicates(replicates)
    lams = [float(v) for v in lams]
    if any(v < 0 for v in lams):
        raise EstimatorError("intensities must be nonnegative")
    lam_max = max(lams)
    ctx = _FieldContext(kernel, box, bins)
    streams = StreamFactory(seed)
    m = len(ctx.nodes)

    if lam_max == 0:
        work = _tau_work_isolated(ctx, streams, len(lams))
    else:
        work = _tau_work(ctx, streams, lams, lam_max)
    raw, trials = _parallel_sum(work, replica_offset, replicates, threads)
    return _fields_from_counts(ctx, lams, raw, trials, "tau", seed, replica_offset, replicates)


def estimate_tau_field(lam: float, kernel: Kernel, box: BoxGeometry, bins: BinSpec = BinSpec(),
                       replicates: int = 1000, seed: int = 0, replica_offset: int = 0,
                       threads: int = 1) -> TauField:
    return estimate_tau_fields([lam], kernel, box, bins, replicates, seed, replica_offset, threads)[0]


def _tau_work_isolated(ctx: _FieldContext, streams: StreamFactory, n_lams: int, chunk: int = 256):
    """Intensity zero: only direct edges from the origin, vectorised over replicas."""
    m = len(ctx.nodes)
    origin_pos = ctx.origin[None, :]
    mem, tgt = ctx.candidate_pairs(origin_pos)
    per_mark = []
    for ia in range(m):
        row = []
        for ib in range(m):
            disp = ctx.box.displacement(origin_pos[mem], ctx.targets[tgt])
            phi = ctx.kernel.evaluate(disp, ctx.nodes[ia], ctx.nodes[ib])
            live = phi > 0
            row.append((tgt[live], phi[live], ctx.target_ids(ib)[tgt[live]]))
        per_mark.append(row)

    def work(lo, hi):
        raw = ctx.empty_counts((n_lams,))
        trials = np.zeros(ctx.batches, dtype=np.int64)
        for c0 in range(lo, hi, chunk):
            reps = np.arange(c0, min(hi, c0 + chunk))
            keys = np.array([streams.key(r) for r in reps], dtype=np.uint64)
            batch = reps % ctx.batches
            np.add.at(trials, batch, 1)
            for ia in range(m):
                for ib in range(m):
                    t_idx, phi, t_ids = per_mark[ia][ib]
                    if len(t_idx) == 0:
                        continue
                    u = pair_uniforms(keys[:, None], np.uint64(0), t_ids[None, :])
                    hit = (u < phi[None, :]).astype(np.int64)
                    for bt in np.unique(batch):
                        rows = hit[batch == bt].sum(axis=0)
                        acc = np.zeros(ctx.T, dtype=np.int64)
                        np.add.at(acc, t_idx, rows)
                        raw[:, bt, ia, ib] += np.minimum(acc, (batch == bt).sum())
        return raw, trials

    return work


def _tau_work(ctx: _FieldContext, streams: StreamFactory, lams, lam_max):
    m = len(ctx.nodes)
    kernel, box = ctx.kernel, ctx.box

    def work(lo, hi):
        raw = ctx.empty_counts((len(lams),))
        trials = np.zeros(ctx.batches, dtype=np.int64)
        for r in range(lo, hi):
            bt = r % ctx.batches
            trials[bt] += 1
            eta = sample_ppp(lam_max, box, kernel.marks, streams.generator(r))
            key = streams.key(r)
            for ia in range(m):
                cfg = augment(eta, [(ctx.origin, float(ctx.nodes[ia]))], box, ids=[0])
                g = build_graph(cfg, kernel, box, key)
                comp_max = graphops.component(g, 0)
                in_comp = []
                for lam in lams:
                    if lam == lam_max:
                        in_comp.append(np.ones(len(comp_max), dtype=bool))
                    else:
                        alive = cfg.levels <= lam / lam_max
                        comp = graphops.component(g, 0, alive)
                        in_comp.append(np.isin(comp_max, comp))
                pos, mk, ids = cfg.positions[comp_max], cfg.marks[comp_max], cfg.ids[comp_max]
                for ib in range(m):
                    mem, tgt = ctx.edge_pairs(pos, mk, ids, ib, key)
                    for il in range(len(lams)):
                        ok = in_comp[il][mem]
                        hit = np.zeros(ctx.T, dtype=bool)
                        hit[tgt[ok]] = True
                        raw[il, bt, ia, ib] += hit
        return raw, trials

    return work


# ----------------------------------------------------------------------------
# cluster statistics


def _cluster_work(kernel, box, lams, marks_fn, streams, size_cutoff=None, free_box=None):
    """Per replica: origin cluster sizes at each intensity (coupled) and mark."""
    lam_max = max(lams)

    def one(r):
        rng = streams.generator(r)
        eta = sample_ppp(lam_max, box, kernel.marks, rng)
        marks = marks_fn(streams.generator(r, "marks"))
        key = streams.key(r)
        sizes = np.zeros((len(marks), len(lams)), dtype=np.int64)
        touch = np.zeros((len(marks), len(lams)), dtype=np.int64)
        for ia, a in enumerate(marks):
            cfg = augment(eta, [(origin_of(box), float(a))], box, ids=[0])
            g = build_graph(cfg, kernel, box, key)
            gf = build_graph(cfg, kernel, free_box, key) if free_box is not None else None
            for il, lam in enumerate(lams):
                alive = cfg.levels <= (lam / lam_max if lam_max > 0 else 0.0)
                sizes[ia, il] = len(graphops.component(g, 0, alive))
                if gf is not None:
                    comp = graphops.component(gf, 0, alive)
                    pos = cfg.positions[comp]
                    margin = np.minimum(pos, box.L - pos).min()
                    touch[ia, il] = int(margin < kernel.effective_range)
        return sizes, touch

    return one


def cluster_sizes(lams, kernel: Kernel, a, box: BoxGeometry, replicates: int, seed: int = 0,
                  replica_offset: int = 0) -> np.ndarray:
    """Origin cluster size per replica and intensity under the level coupling, shape (R, len(lams))."""
    _check_replicates(replicates)
    a, _ = kernel._marks_or_default(a, None)
    one = _cluster_work(kernel, box, [float(v) for v in lams], lambda rng: [float(a)], StreamFactory(seed))
    return np.array([one(r)[0][0] for r in range(replica_offset, replica_offset + replicates)])


def _moments_estimate(total, total_sq, n, seed):
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    return Estimate(float(mean), float(math.sqrt(var / n)) if n > 1 else math.inf, int(n), seed)


def estimate_chi(lam: float, kernel: Kernel, a=None, box: BoxGeometry = None, replicates: int = 1000,
                 seed: int = 0, replica_offset: int = 0, threads: int = 1) -> Estimate:
    """Mean size of the cluster of an augmented origin with mark a (finite-box proxy)."""
    _check_replicates(replicates)
    if lam < 0:
        raise EstimatorError("intensity must be nonnegative")
    a, _ = kernel._marks_or_default(a, None)
    one = _cluster_work(kernel, box, [float(lam)], lambda rng: [float(a)], StreamFactory(seed))

    def work(lo, hi):
        s = np.zeros(2, dtype=np.int64)
        for r in range(lo, hi):
            size = int(one(r)[0][0, 0])
            s += (size, size * size)
        return (s,)

    (s,) = _parallel_sum(work, replica_offset, replicates, threads)
    return _moments_estimate(int(s[0]), int(s[1]), replicates, seed)


@dataclass
class ThetaEstimate:
    size_proxy: Estimate
    boundary_proxy: Estimate
    size_cutoff: int

    def to_dict(self):
        return {"size_cutoff": self.size_cutoff, "size_proxy": self.size_proxy.to_dict(),
                "boundary_proxy": self.boundary_proxy.to_dict()}


def estimate_theta(lam: float, kernel: Kernel, a=None, box: BoxGeometry = None, replicates: int = 1000,
                   size_cutoff: int = 100, seed: int = 0, replica_offset: int = 0,
                   threads: int = 1) -> ThetaEstimate:
    """Two finite-volume proxies for the percolation probability of an origin with mark a.

    ``size_proxy`` is P(|C| >= size_cutoff) on the given box; ``boundary_proxy``
    is P(C comes within one effective range of the boundary of the window)
    with the free metric.
    """
    _check_replicates(replicates)
    if size_cutoff < 1:
        raise EstimatorError("size cutoff must be >= 1")
    a, _ = kernel._marks_or_default(a, None)
    free = BoxGeometry(box.d, box.L, "free")
    one = _cluster_work(kernel, box, [float(lam)], lambda rng: [float(a)], StreamFactory(seed), free_box=free)

    def work(lo, hi):
        s = np.zeros(2, dtype=np.int64)
        for r in range(lo, hi):
            sizes, touch = one(r)
            s += (int(sizes[0, 0] >= size_cutoff), int(touch[0, 0]))
        return (s,)

    (s,) = _parallel_sum(work, replica_offset, replicates, threads)
    ests = []
    for k in s:
        p = k / replicates
        ests.append(Estimate(float(p), float(math.sqrt(p * (1 - p) / replicates)), replicates, seed))
    return ThetaEstimate(ests[0], ests[1], size_cutoff)


# ----------------------------------------------------------------------------
# diagrams


def _fft_sites(arr, d):
    return np.fft.fftn(arr, axes=tuple(range(arr.ndim - d, arr.ndim)))


def _ifft_sites(arr, d):
    return np.fft.ifftn(arr, axes=tuple(range(arr.ndim - d, arr.ndim))).real


def chain_convolution(fields, weights, h: float, d: int) -> np.ndarray:
    """X-convolution of a chain of mark-pair lattice functions.

    fields: list of arrays (m, m, sites...); result[a, b, x] =
    sum over intermediate marks (weighted) and lattice sites (times h^d) of
    f1(u1; a, c1) f2(u2 - u1; c1, c2) ... fn(x - u_{n-1}; c_{n-1}, b).
    """
    ffts = [_fft_sites(f, d) for f in fields]
    w = np.asarray(weights, float)
    acc = ffts[0]
    for nxt in ffts[1:]:
        acc = np.einsum("ac...,c,cb...->ab...", acc, w, nxt)
    return _ifft_sites(acc, d) * h ** (d * (len(fields) - 1))


def decoupled_sup(fields, h: float, d: int) -> float:
    """Max over sites and over independent mark pairs of each factor of the chain convolution."""
    m = fields[0].shape[0]
    pairs = [(a, b) for a in range(m) for b in range(a, m)]
    ffts = [_fft_sites(f, d) for f in fields]
    best = -np.inf
    for combo in itertools.product(pairs, repeat=len(fields)):
        prod = ffts[0][combo[0]]
        for f, (a, b) in zip(ffts[1:], combo[1:]):
            prod = prod * f[a, b]
        best = max(best, float(_ifft_sites(prod, d).max()) * h ** (d * (len(fields) - 1)))
    return best


@dataclass
class DiagramReport:
    lam: float
    triangle: Estimate
    triangle_open: Estimate
    triangle_open2: Estimate
    triangle_decoupled: Estimate
    two_chain: float
    argmax_site: tuple
    w_k: list = field(default_factory=list)
    method: str = "grid-sup over lattice sites and mark grid; FFT lattice convolution"

    def to_dict(self):
        return {"lambda": self.lam, "triangle": self.triangle.to_dict(), "triangle_open": self.triangle_open.to_dict(),
                "triangle_open2": self.triangle_open2.to_dict(),
                "triangle_decoupled": self.triangle_decoupled.to_dict(), "two_chain_sup": self.two_chain,
                "argmax_site": list(self.argmax_site), "w_k": [dict(k=list(k), **e.to_dict()) for k, e in self.w_k],
                "method": self.method}


def _check_coverage(fld: TauField):
    if fld.total_trials() == 0:
        raise EstimatorError("field has empty bins: every bin has zero trials")


def diagram_values(fld: TauField) -> np.ndarray:
    """[triangle, open triangle, doubly open triangle, decoupled, T^3 sup, T^2 sup] for one field."""
    tau = fld.regular()
    lam, h, d = fld.lam, fld.h, fld.d
    t3 = chain_convolution([tau, tau, tau], fld.weights, h, d)
    t2 = chain_convolution([tau, tau], fld.weights, h, d)
    s3, s2 = float(t3.max()), float(t2.max())
    tri = lam * lam * s3
    open1 = tri + lam * s2
    open2 = open1 + 1.0
    d3 = max(decoupled_sup([tau, tau, tau], h, d), s3)
    d2 = max(decoupled_sup([tau, tau], h, d), s2)
    # the coupled sums are convex combinations of decoupled terms; max() guards last-ulp rounding
    dec = lam * lam * d3 + lam * d2 + 1.0
    return np.array([tri, open1, open2, dec, s3, s2])


def estimate_triangle(fld: TauField) -> DiagramReport:
    """Triangle diagrams of a two-point field (grid-sup approximation)."""
    _check_coverage(fld)
    vals, errs = jackknife(diagram_values, fld)
    n_rep = max(1, fld.total_trials() // 2)
    est = [Estimate(float(v), float(e), n_rep, fld.seed) for v, e in zip(vals[:4], errs[:4])]
    tau = fld.regular()
    t3 = chain_convolution([tau, tau, tau], fld.weights, fld.h, fld.d)
    idx = np.unravel_index(int(np.argmax(t3)), t3.shape)
    site = tuple(int(centered_indices(fld.n)[i]) for i in idx[2:])
    return DiagramReport(fld.lam, est[0], est[1], est[2], est[3], float(vals[5]), (int(idx[0]), int(idx[1])) + site)


def displaced_field(tau: np.ndarray, k, n: int, h: float, d: int) -> np.ndarray:
    """(1 - cos(k.x)) tau(x) on the centered lattice."""
    vec = lattice_vectors(d, n, h)
    weight = 1.0 - np.cos(vec @ np.asarray(k, float))
    return tau * weight[None, None]


def w_k_value(fld: TauField, k) -> float:
    tau = fld.regular()
    conv = chain_convolution([displaced_field(tau, k, fld.n, fld.h, fld.d), tau], fld.weights, fld.h, fld.d)
    return fld.lam * float(conv.max())


def estimate_w_k(fld: TauField, k_grid) -> list:
    """Displaced bubble lam sup int tau_k(x, u) tau(u, y) for each k, with jackknife errors."""
    _check_coverage(fld)
    out = []
    n_rep = max(1, fld.total_trials() // 2)
    for k in k_grid:
        k = np.asarray(k, float).reshape(fld.d)
        if np.all(k == 0):
            out.append((tuple(k.tolist()), Estimate(0.0, 0.0, n_rep, fld.seed)))
            continue
        v, e = jackknife(lambda f: w_k_value(f, k), fld)
        out.append((tuple(k.tolist()), Estimate(max(float(v), 0.0), float(e), n_rep, fld.seed)))
    return out


def kernel_convolution(fld: TauField, kernel: Kernel) -> np.ndarray:
    """(tau * phi)(x; a, b) = sum_c w_c int tau(u; a, c) phi(x - u; c, b) du on the lattice."""
    phi = kernel_on_lattice(kernel, fld.d, fld.n, fld.h, fld.nodes)
    return chain_convolution([fld.regular(), phi], fld.weights, fld.h, fld.d)


# ----------------------------------------------------------------------------
# lace coefficients


def estimate_pi0(lam: float, kernel: Kernel, displacement, a=None, b=None, box: BoxGeometry = None,
                 replicates: int = 1000, seed: int = 0, replica_offset: int = 0, threads: int = 1) -> Estimate:
    """P(x and y doubly connected) - phi(y - x; a, b) for augmented x, y."""
    _check_replicates(replicates)
    a, b = kernel._marks_or_default(a, b)
    disp = np.asarray(displacement, dtype=float)
    if np.all(disp == 0) and a == b:
        raise EstimatorError("double connection needs two distinct augmented points")
    x = origin_of(box)
    y = box.wrap(x + disp)
    streams = StreamFactory(seed)

    def work(lo, hi):
        hits = 0
        for r in range(lo, hi):
            eta = sample_ppp(lam, box, kernel.marks, streams.generator(r))
            cfg = augment(eta, [(x, float(a)), (y, float(b))], box, ids=[0, 1])
            g = build_graph(cfg, kernel, box, streams.key(r))
            hits += graphops.doubly_connected(g, 0, 1)
        return (np.int64(hits),)

    (hits,) = _parallel_sum(work, replica_offset, replicates, threads)
    p = hits / replicates
    phi = float(kernel.evaluate(box.displacement(x, y), a, b))
    return Estimate(float(p - phi), float(math.sqrt(p * (1 - p) / replicates)), replicates, seed)


def estimate_pi0_field(lam: float, kernel: Kernel, box: BoxGeometry, bins: BinSpec = BinSpec(),
                       replicates: int = 1000, seed: int = 0, replica_offset: int = 0,
                       threads: int = 1) -> TauField:
    """Double-connection counts on the lattice; ``pi0_values`` subtracts phi.

    Target y is doubly connected to the origin x iff it has an edge to x, or
    its neighbours N in the cluster of x (graph without y) have no common
    separator: no vertex other than x lies on every x-v path for all v in N
    or equals every v in N.
    """
    _check_replicates(replicates)
    if lam < 0:
        raise EstimatorError("intensity must be nonnegative")
    ctx = _FieldContext(kernel, box, bins)
    streams = StreamFactory(seed)
    m = len(ctx.nodes)
    full_words = np.uint64(0xFFFFFFFFFFFFFFFF)

    def work(lo, hi):
        raw = ctx.empty_counts((1,))
        trials = np.zeros(ctx.batches, dtype=np.int64)
        for r in range(lo, hi):
            bt = r % ctx.batches
            trials[bt] += 1
            eta = sample_ppp(lam, box, kernel.marks, streams.generator(r))
            key = streams.key(r)
            for ia in range(m):
                cfg = augment(eta, [(ctx.origin, float(ctx.nodes[ia]))], box, ids=[0])
                g = build_graph(cfg, kernel, box, key)
                members, words = graphops.separator_table(g, 0)
                n_words = words.shape[1]
                own = words.copy()
                pos = np.arange(len(members))
                own[pos, pos // 64] |= (np.uint64(1) << (pos % 64).astype(np.uint64))
                own[0] = 0
                for ib in range(m):
                    mem, tgt = ctx.edge_pairs(cfg.positions[members], cfg.marks[members], cfg.ids[members], ib, key)
                    acc = np.full((ctx.T, n_words), full_words, dtype=np.uint64)
                    has = np.zeros(ctx.T, dtype=bool)
                    direct = np.zeros(ctx.T, dtype=bool)
                    if len(mem):
                        np.bitwise_and.at(acc, tgt, own[mem])
                        has[tgt] = True
                        direct[tgt[mem == 0]] = True
                    dc = has & (direct | np.all(acc == 0, axis=1))
                    raw[0, bt, ia, ib] += dc
        return raw, trials

    raw, trials = _parallel_sum(work, replica_offset, replicates, threads)
    return _fields_from_counts(ctx, [lam], raw, trials, "pi0", seed, replica_offset, replicates)[0]


def pi0_values(fld: TauField, kernel: Kernel) -> np.ndarray:
    if fld.kind != "pi0":
        raise EstimatorError("not a double-connection field")
    return fld.regular() - kernel_on_lattice(kernel, fld.d, fld.n, fld.h, fld.nodes)


def _broken_by_thinning(cfg: PointConfig, g, start: int, end: int, survive) -> bool:
    """start connected to end in g but not once points outside ``survive`` are removed."""
    comp = graphops.component(g, start)
    if not np.any(comp == end):
        return False
    return not np.any(graphops.component(g, start, survive) == end)


def _e_event(cfg: PointConfig, g, u0: int, x: int, survive) -> bool:
    """u0 connected to x only through thinned points, and to no pivotal point through survivors only."""
    if not _broken_by_thinning(cfg, g, u0, x, survive):
        return False
    for w in graphops.pivotal_vertices(g, u0, x):
        if _broken_by_thinning(cfg, g, u0, w, survive):
            return False
    return True


def _pi1_indicator(kernel, box, eta0, eta1, y, b, x, a, u0, c, key0, key1, key_thin) -> bool:
    """One evaluation of {y double-connected to u0 in graph 0} and E(u0, x; C0, graph 1)."""
    cfg0 = augment(eta0, [(y, b), (u0, c)], box, ids=[0, 2])
    g0 = build_graph(cfg0, kernel, box, key0)
    if not graphops.doubly_connected(g0, 0, 1):
        return False
    cfg0y = augment(eta0, [(y, b)], box, ids=[0])
    g0y = build_graph(cfg0y, kernel, box, key0)
    c0 = graphops.component(g0y, 0)
    cfg1 = augment(eta1, [(u0, c), (x, a)], box, ids=[2, 1])
    g1 = build_graph(cfg1, kernel, box, key1)
    survive = thin_mask(cfg1, cfg0y.positions[c0], cfg0y.marks[c0], kernel, box, key_thin)
    # the start point u0 is never thinned, every other vertex including x may be
    survive[1] = _survives(cfg1, 1, cfg0y.positions[c0], cfg0y.marks[c0], kernel, box, key_thin)
    survive[0] = True
    return _e_event(cfg1, g1, 0, 1, survive)


def _survives(cfg, i, anchor_pos, anchor_marks, kernel, box, key) -> bool:
    from .streams import point_uniforms
    delta = box.displacement(cfg.positions[i][None, :], anchor_pos)
    keep = float(np.prod(1.0 - kernel.evaluate(delta, cfg.marks[i], anchor_marks)))
    return bool(point_uniforms(key, cfg.ids[i:i + 1])[0] < keep)


def estimate_pi1(lam: float, kernel: Kernel, displacement, a=None, b=None, box: BoxGeometry = None,
                 replicates: int = 1000, seed: int = 0, replica_offset: int = 0, threads: int = 1) -> Estimate:
    """First lace coefficient at displacement x - y by one uniform intermediate point.

    Each replica draws u0 uniformly in the box with a random mark and two
    independent processes; the indicator is weighted by lam * volume.  Biased
    at finite volume (torus proxy).
    """
    _check_replicates(replicates)
    a, b = kernel._marks_or_default(a, b)
    y = origin_of(box)
    x = box.wrap(y + np.asarray(displacement, dtype=float))
    streams = StreamFactory(seed)
    weight = lam * box.volume

    def work(lo, hi):
        hits = 0
        for r in range(lo, hi):
            if lam == 0:
                continue
            rng = streams.generator(r, "mecke")
            u0 = rng.random(box.d) * box.L
            c = float(kernel.marks.sample(rng))
            eta0 = sample_ppp(lam, box, kernel.marks, streams.generator(r))
            eta1 = sample_ppp(lam, box, kernel.marks, streams.generator(r, "second"))
            hits += _pi1_indicator(kernel, box, eta0, eta1, y, float(b), x, float(a), u0, c,
                                   streams.key(r), streams.key(r, "second"), streams.key(r, "thinning"))
        return (np.int64(hits),)

    (hits,) = _parallel_sum(work, replica_offset, replicates, threads)
    p = hits / replicates
    return Estimate(float(weight * p), float(weight * math.sqrt(p * (1 - p) / replicates)), replicates, seed)


# ----------------------------------------------------------------------------
# critical scan


def fit_knee(lams, inv_chi, inv_err, points: int = 5):
    """Zero of the least-squares line through the points with the smallest positive 1/chi.

    Returns (lambda_T, stderr, used indices); stderr propagates the Monte-Carlo
    errors of 1/chi through the fit by the delta method.
    """
    lams = np.asarray(lams, float)
    inv_chi = np.asarray(inv_chi, float)
    inv_err = np.asarray(inv_err, float)
    pos = np.nonzero(inv_chi > 0)[0]
    if len(pos) < 2:
        raise EstimatorError("need at least two positive 1/chi values to fit")
    order = sorted(pos, key=lambda i: (inv_chi[i], lams[i]))[:points]
    idx = np.sort(np.asarray(order))
    X = np.stack([np.ones(len(idx)), lams[idx]], axis=1)
    y = inv_chi[idx]
    xtx_inv = np.linalg.inv(X.T @ X)
    coef = xtx_inv @ X.T @ y
    alpha, beta = coef
    if beta >= 0:
        return math.inf, math.inf, idx.tolist()
    root = -alpha / beta
    cov = xtx_inv @ X.T @ np.diag(inv_err[idx] ** 2) @ X @ xtx_inv
    grad = np.array([-1 / beta, alpha / beta ** 2])
    return float(root), float(math.sqrt(max(grad @ cov @ grad, 0.0))), idx.tolist()


@dataclass
class ScanCounts:
    """Integer accumulators of a scan at one box size."""

    L: float
    replicates: int
    sum_random: np.ndarray
    sumsq_random: np.ndarray
    sum_nodes: np.ndarray
    sumsq_nodes: np.ndarray
    over_cutoff: np.ndarray
    touches: np.ndarray

    def merge(self, other: "ScanCounts") -> "ScanCounts":
        if self.L != other.L:
            raise EstimatorError("scan counts from different boxes")
        return ScanCounts(self.L, self.replicates + other.replicates, self.sum_random + other.sum_random,
                          self.sumsq_random + other.sumsq_random, self.sum_nodes + other.sum_nodes,
                          self.sumsq_nodes + other.sumsq_nodes, self.over_cutoff + other.over_cutoff,
                          self.touches + other.touches)

    def to_dict(self) -> dict:
        return {"L": self.L, "replicates": self.replicates,
                **{k: getattr(self, k).tolist() for k in ("sum_random", "sumsq_random", "sum_nodes",
                                                            "sumsq_nodes", "over_cutoff", "touches")}}

    @classmethod
    def from_dict(cls, dct) -> "ScanCounts":
        arrays = {k: np.asarray(dct[k], dtype=np.int64) for k in ("sum_random", "sumsq_random", "sum_nodes",
                                                                   "sumsq_nodes", "over_cutoff", "touches")}
        return cls(float(dct["L"]), int(dct["replicates"]), **arrays)


def scan_counts(kernel: Kernel, lam_grid, L: float, replicates: int, seed: int = 0, replica_offset: int = 0,
                threads: int = 1, mark_nodes: int = 4, size_cutoff: int = 100, metric: str = "torus") -> ScanCounts:
    lams = [float(v) for v in lam_grid]
    if lams != sorted(lams):
        raise EstimatorError("intensity grid must be sorted ascending")
    _check_replicates(replicates)
    box = BoxGeometry(kernel.d, L, metric)
    free = BoxGeometry(kernel.d, L, "free")
    _, _, nodes, _ = BinSpec(mark_nodes=mark_nodes).resolve(kernel, box)
    single = kernel.marks.kind == "singleton"

    def marks_fn(rng):
        drawn = float(kernel.marks.sample(rng))
        return [drawn] if single else [drawn] + list(nodes)

    one = _cluster_work(kernel, box, lams, marks_fn, StreamFactory(seed), free_box=free)
    n_l, n_m = len(lams), len(nodes)

    def work(lo, hi):
        acc = [np.zeros(n_l, np.int64), np.zeros(n_l, np.int64), np.zeros((n_m, n_l), np.int64),
               np.zeros((n_m, n_l), np.int64), np.zeros(n_l, np.int64), np.zeros(n_l, np.int64)]
        for r in range(lo, hi):
            sizes, touch = one(r)
            node_sizes = sizes[:1].repeat(n_m, axis=0) if single else sizes[1:]
            acc[0] += sizes[0]
            acc[1] += sizes[0] ** 2
            acc[2] += node_sizes
            acc[3] += node_sizes ** 2
            acc[4] += sizes[0] >= size_cutoff
            acc[5] += touch[0]
        return tuple(acc)

    res = _parallel_sum(work, replica_offset, replicates, threads)
    return ScanCounts(float(L), replicates, *res)


@dataclass
class ScanReport:
    lams: list
    per_box: list

    def to_dict(self):
        return {"lambda_grid": self.lams, "boxes": self.per_box}


def summarize_scan(lams, counts: ScanCounts, seed: int = 0) -> dict:
    n = counts.replicates
    chi1 = [_moments_estimate(int(s), int(q), n, seed) for s, q in zip(counts.sum_random, counts.sumsq_random)]
    node_chi = [[_moments_estimate(int(s), int(q), n, seed) for s, q in zip(row_s, row_q)]
                for row_s, row_q in zip(counts.sum_nodes, counts.sumsq_nodes)]
    chi_inf = []
    for il in range(len(lams)):
        best = max(range(len(node_chi)), key=lambda i: node_chi[i][il].value)
        chi_inf.append(node_chi[best][il])

    def knee(ests):
        inv = [1 / e.value for e in ests]
        err = [e.stderr / e.value ** 2 if np.isfinite(e.stderr) else 0.0 for e in ests]
        try:
            return fit_knee(lams, inv, err)
        except EstimatorError:
            return math.nan, math.nan, []

    lt1, e1, used1 = knee(chi1)
    lti, ei, usedi = knee(chi_inf)
    ci = 1.96 * math.sqrt(e1 ** 2 + ei ** 2) if np.isfinite(e1) and np.isfinite(ei) else math.inf
    warnings = []
    for name, ests in (("one", chi1), ("inf", chi_inf)):
        for i in range(1, len(ests)):
            drop = ests[i - 1].value - ests[i].value
            if drop > 4 * math.hypot(ests[i - 1].stderr, ests[i].stderr):
                warnings.append(f"{name}-proxy chi decreases between lambda={lams[i - 1]} and {lams[i]}")
    theta_size = [k / n for k in counts.over_cutoff]
    theta_touch = [k / n for k in counts.touches]
    return {
        "L": counts.L, "replicates": n,
        "chi_one_proxy": [e.to_dict() for e in chi1],
        "chi_inf_proxy": [e.to_dict() for e in chi_inf],
        "theta_size_proxy": theta_size, "theta_boundary_proxy": theta_touch,
        "lambda_T_one_proxy": {"value": lt1, "stderr": e1, "fit_points": used1},
        "lambda_T_inf_proxy": {"value": lti, "stderr": ei, "fit_points": usedi},
        "ordering_ci": ci,
        "ordering_holds": bool(lti <= lt1 + ci) if np.isfinite(lti) and np.isfinite(lt1) else None,
        "warnings": warnings,
    }


def scan_critical(kernel: Kernel, lam_grid, box_sizes, replicates: int, seed: int = 0, threads: int = 1,
                  mark_nodes: int = 4, size_cutoff: int = 100, metric: str = "torus") -> ScanReport:
    """Cluster-size scan over intensities and box sizes with knee estimates of the critical intensity."""
    lams = [float(v) for v in lam_grid]
    per_box = []
    for L in box_sizes:
        counts = scan_counts(kernel, lams, L, replicates, seed, 0, threads, mark_nodes, size_cutoff, metric)
        per_box.append(summarize_scan(lams, counts, seed))
    return ScanReport(lams, per_box)
