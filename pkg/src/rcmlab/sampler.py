"""Marked Poisson point processes and their random connection graphs.

Points carry a 64-bit identity.  Edge (i, j) is present when the keyed hash
uniform U(id_i, id_j) is below phi(x_i - x_j; a_i, a_j), so the same pair of
points always sees the same uniform.  Together with the level coupling in
``sample_ppp``/``restrict`` this makes connectivity pathwise monotone in the
intensity.
"""
from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .kernels import Kernel, MarkSpace
from .streams import pair_uniforms, point_uniforms

POINT_ID_BASE = np.uint64(1 << 32)
DEFAULT_POINT_CAP = 10_000_000


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class BoxGeometry:
    """The window [0, L)^d, periodic (``torus``) or not (``free``)."""

    d: int
    L: float
    metric: str = "torus"

    def __post_init__(self):
        if self.d < 1 or not self.L > 0:
            raise SamplerError("box needs d >= 1 and L > 0")
        if self.metric not in ("torus", "free"):
            raise SamplerError(f"unknown metric {self.metric!r}")

    @property
    def volume(self) -> float:
        return float(self.L) ** self.d

    @property
    def center(self) -> np.ndarray:
        return np.full(self.d, self.L / 2)

    def displacement(self, x, y) -> np.ndarray:
        """y - x, reduced to the minimal image on the torus."""
        delta = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        if self.metric == "torus":
            delta = delta - self.L * np.round(delta / self.L)
        return delta

    def distance(self, x, y) -> np.ndarray:
        delta = self.displacement(x, y)
        return np.sqrt(np.einsum("...i,...i->...", delta, delta))

    def wrap(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.metric == "torus":
            x = np.mod(x, self.L)
            x[x >= self.L] = 0.0
        return x

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= 0) & (x < self.L), axis=-1)


@dataclass(eq=False)
class PointConfig:
    """Marked points; the first ``augmented_count`` are deterministic.

    ``levels`` are the coupling uniforms (0 for augmented points): the
    configuration at intensity lam out of lam_max keeps level <= lam/lam_max.
    """

    positions: np.ndarray
    marks: np.ndarray
    ids: np.ndarray
    levels: np.ndarray
    augmented_count: int = 0

    def __post_init__(self):
        n = len(self.positions)
        if not (len(self.marks) == len(self.ids) == len(self.levels) == n):
            raise SamplerError("point arrays must have equal length")

    def __len__(self):
        return len(self.positions)

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @classmethod
    def empty(cls, d: int) -> "PointConfig":
        return cls(np.zeros((0, d)), np.zeros(0), np.zeros(0, dtype=np.uint64), np.zeros(0))

    def select(self, mask) -> "PointConfig":
        mask = np.asarray(mask, dtype=bool)
        keep_aug = int(np.count_nonzero(mask[: self.augmented_count]))
        if keep_aug != self.augmented_count:
            raise SamplerError("augmented points can not be removed")
        return PointConfig(self.positions[mask], self.marks[mask], self.ids[mask], self.levels[mask], keep_aug)


def sample_ppp(lam: float, box: BoxGeometry, space: MarkSpace, rng: np.random.Generator,
               cap: int = DEFAULT_POINT_CAP) -> PointConfig:
    """Poisson process of intensity lam on the box with i.i.d. marks and coupling levels."""
    if lam < 0:
        raise SamplerError("intensity must be nonnegative")
    mean = lam * box.volume
    if mean > cap:
        raise SamplerError(f"expected point count {mean:.3g} exceeds the cap {cap}")
    n = int(rng.poisson(mean)) if mean > 0 else 0
    positions = rng.random((n, box.d)) * box.L
    marks = np.asarray(space.sample(rng, n), dtype=float).reshape(n)
    levels = rng.random(n)
    ids = POINT_ID_BASE + np.arange(n, dtype=np.uint64)
    return PointConfig(positions, marks, ids, levels, 0)


def restrict(config: PointConfig, fraction: float) -> PointConfig:
    """Keep augmented points and random points with level <= fraction."""
    mask = config.levels <= fraction
    mask[: config.augmented_count] = True
    return config.select(mask)


def augment(config: PointConfig, fixed, box: BoxGeometry | None = None, ids=None) -> PointConfig:
    """Prepend deterministic points given as (position, mark) pairs.

    Default ids continue after the largest augmented id already present, so
    augmenting twice matches augmenting once up to ordering.
    """
    fixed = list(fixed)
    if not fixed:
        return config
    pos = np.array([np.asarray(p, dtype=float) for p, _ in fixed], dtype=float).reshape(len(fixed), -1)
    if len(config) and pos.shape[1] != config.d:
        raise SamplerError("fixed point dimension mismatch")
    if box is not None and not np.all(box.contains(pos)):
        raise SamplerError("fixed point outside box")
    marks = np.array([float(m) for _, m in fixed])
    if ids is None:
        start = int(config.ids[: config.augmented_count].max()) + 1 if config.augmented_count else 0
        ids = np.arange(start, start + len(fixed), dtype=np.uint64)
    ids = np.asarray(ids, dtype=np.uint64)
    if np.any(ids >= POINT_ID_BASE):
        raise SamplerError("augmented ids must be below 2**32")
    d = pos.shape[1]
    return PointConfig(
        np.concatenate([pos, config.positions.reshape(-1, d)]),
        np.concatenate([marks, config.marks]),
        np.concatenate([ids, config.ids]),
        np.concatenate([np.zeros(len(fixed)), config.levels]),
        config.augmented_count + len(fixed),
    )


# ----------------------------------------------------------------------------
# neighbour search


def all_pairs(positions: np.ndarray, box: BoxGeometry, cutoff: float):
    """Every pair i < j within ``cutoff``; the quadratic reference method."""
    n = len(positions)
    i, j = np.triu_indices(n, 1)
    delta = box.displacement(positions[i], positions[j])
    keep = np.einsum("ij,ij->i", delta, delta) <= cutoff * cutoff
    return i[keep], j[keep], delta[keep]


def cell_pairs(positions: np.ndarray, box: BoxGeometry, cutoff: float):
    """Pairs i < j within ``cutoff`` found with a cell list of side >= cutoff."""
    n, d = positions.shape
    per_axis = max(1, int(math.floor(box.L / cutoff))) if cutoff > 0 else 1
    if n < 2 or (box.metric == "torus" and per_axis < 3) or per_axis == 1:
        return all_pairs(positions, box, cutoff)
    side = box.L / per_axis
    cell = np.minimum((positions // side).astype(np.int64), per_axis - 1)
    strides = per_axis ** np.arange(d, dtype=np.int64)
    cell_id = cell @ strides
    order = np.argsort(cell_id, kind="stable")
    counts = np.bincount(cell_id, minlength=per_axis ** d)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    idx_i, idx_j = [], []
    for offset in itertools.product((-1, 0, 1), repeat=d):
        nb = cell + np.asarray(offset)
        if box.metric == "torus":
            nb %= per_axis
            src = np.arange(n)
        else:
            ok = np.all((nb >= 0) & (nb < per_axis), axis=1)
            src = np.nonzero(ok)[0]
            nb = nb[ok]
        nb_id = nb @ strides
        cnt = counts[nb_id]
        total = int(cnt.sum())
        if total == 0:
            continue
        rep_i = np.repeat(src, cnt)
        within = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        rep_j = order[np.repeat(starts[nb_id], cnt) + within]
        keep = rep_i < rep_j
        idx_i.append(rep_i[keep])
        idx_j.append(rep_j[keep])
    i = np.concatenate(idx_i) if idx_i else np.zeros(0, dtype=np.int64)
    j = np.concatenate(idx_j) if idx_j else np.zeros(0, dtype=np.int64)
    delta = box.displacement(positions[i], positions[j])
    keep = np.einsum("ij,ij->i", delta, delta) <= cutoff * cutoff
    i, j, delta = i[keep], j[keep], delta[keep]
    srt = np.lexsort((j, i))
    return i[srt], j[srt], delta[srt]


# ----------------------------------------------------------------------------
# graphs


@dataclass(eq=False)
class RcmGraph:
    """A realised random connection graph: points plus undirected edges (i < j)."""

    config: PointConfig
    edges: np.ndarray
    indptr: np.ndarray = field(init=False)
    indices: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.config)
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(e) and (np.any(e[:, 0] >= e[:, 1]) or e.max() >= n):
            raise SamplerError("edges must be index pairs i < j < n")
        self.edges = e
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((dst, src))
        self.indices = dst[order]
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n))]).astype(np.int64)

    @property
    def n(self) -> int:
        return len(self.config)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]: self.indptr[i + 1]]

    def has_edge(self, i: int, j: int) -> bool:
        return bool(np.any(self.neighbors(i) == j))

    def subgraph(self, mask) -> "RcmGraph":
        """Induced graph on the kept vertices, reindexed in order."""
        mask = np.asarray(mask, dtype=bool)
        new_index = np.cumsum(mask) - 1
        keep = mask[self.edges[:, 0]] & mask[self.edges[:, 1]]
        e = new_index[self.edges[keep]]
        return RcmGraph(self.config.select(mask), e)

    def without_point(self, i: int) -> "RcmGraph":
        """The graph with point i and all its edges removed (augmented points allowed)."""
        mask = np.ones(self.n, dtype=bool)
        mask[i] = False
        cfg = self.config
        aug = cfg.augmented_count - (1 if i < cfg.augmented_count else 0)
        new_index = np.cumsum(mask) - 1
        keep = mask[self.edges[:, 0]] & mask[self.edges[:, 1]]
        sub = PointConfig(cfg.positions[mask], cfg.marks[mask], cfg.ids[mask], cfg.levels[mask], aug)
        return RcmGraph(sub, new_index[self.edges[keep]])


def candidate_pairs(config: PointConfig, kernel: Kernel, box: BoxGeometry, method: str = "cells"):
    if kernel.d != box.d:
        raise SamplerError("kernel dimension does not match the box")
    cutoff = kernel.effective_range
    if box.metric == "torus" and cutoff > box.L / 2:
        raise SamplerError("effective range exceeds half the torus side")
    finder = cell_pairs if method == "cells" else all_pairs
    return finder(config.positions, box, cutoff)


def build_graph(config: PointConfig, kernel: Kernel, box: BoxGeometry, key, method: str = "cells") -> RcmGraph:
    """Independent edge marking: pair (i, j) is an edge iff U(id_i, id_j) < phi."""
    i, j, delta = candidate_pairs(config, kernel, box, method)
    if len(i) == 0:
        return RcmGraph(config, np.zeros((0, 2), dtype=np.int64))
    prob = kernel.evaluate(delta, config.marks[i], config.marks[j])
    u = pair_uniforms(key, config.ids[i], config.ids[j])
    accept = u < prob
    return RcmGraph(config, np.stack([i[accept], j[accept]], axis=1))


def thin_mask(config: PointConfig, anchor_positions, anchor_marks, kernel: Kernel, box: BoxGeometry,
              key) -> np.ndarray:
    """Survival mask of the anchor-set thinning; augmented points always survive.

    Point w survives with probability prod over anchors y of (1 - phi(w - y)).
    """
    anchor_positions = np.asarray(anchor_positions, dtype=float).reshape(-1, box.d)
    anchor_marks = np.asarray(anchor_marks, dtype=float).reshape(-1)
    n = len(config)
    survive = np.ones(n, dtype=bool)
    free = np.arange(config.augmented_count, n)
    if len(anchor_positions) == 0 or len(free) == 0:
        return survive
    delta = box.displacement(config.positions[free][:, None, :], anchor_positions[None, :, :])
    phi = kernel.evaluate(delta, config.marks[free][:, None], anchor_marks[None, :])
    keep_prob = np.prod(1.0 - phi, axis=1)
    u = point_uniforms(key, config.ids[free])
    survive[free] = u < keep_prob
    return survive


def thin(config: PointConfig, anchor_set, kernel: Kernel, box: BoxGeometry, key) -> PointConfig:
    anchors = list(anchor_set)
    pos = np.array([p for p, _ in anchors], dtype=float).reshape(-1, box.d)
    marks = np.array([m for _, m in anchors], dtype=float)
    return config.select(thin_mask(config, pos, marks, kernel, box, key))


def dump_graph(graph: RcmGraph, directory: str, stem: str) -> None:
    """Write points and edges as CSV (debugging aid)."""
    os.makedirs(directory, exist_ok=True)
    cfg = graph.config
    with open(os.path.join(directory, f"{stem}_points.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "id", "augmented"] + [f"x{i}" for i in range(cfg.d)] + ["mark", "level"])
        for i in range(len(cfg)):
            w.writerow([i, int(cfg.ids[i]), int(i < cfg.augmented_count)]
                       + [repr(float(v)) for v in cfg.positions[i]]
                       + [repr(float(cfg.marks[i])), repr(float(cfg.levels[i]))])
    with open(os.path.join(directory, f"{stem}_edges.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j"])
        w.writerows(graph.edges.tolist())
