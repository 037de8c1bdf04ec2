"""Mark operators: discretisation, spectra, norms, assumption checks, bootstrap and OZE diagnostics.

A mark operator acts on functions of the mark by f_i -> sum_j M[i, j] w_j f_j
with quadrature weights w.  It is self-adjoint in L^2(w), so its spectrum is
that of the symmetric matrix D^{1/2} M D^{1/2}, D = diag(w).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, optimize, special, stats

from .estimators import (TauField, centered_indices, jackknife, kernel_on_lattice, lattice_vectors, pi0_values)
from .kernels import (FactorizedKernel, Kernel, MarkSpace, MultivariateGaussianKernel, RadialProfile, _RadialKernel,
                      displaced_fourier, sphere_area)

SCHEMA_VERSION = "rcmlab.report/1"
ASYMMETRY_TOLERANCE = 1e-10
DECAY_RATIO_WINDOW = 0.9
TRIPLE_MARK_NODES = 6


class SpectralError(ValueError):
    pass


class InvariantError(RuntimeError):
    """A computed quantity broke a mathematical identity it must satisfy."""


class AssumptionError(SpectralError):
    def __init__(self, message, k=None):
        super().__init__(message if k is None else f"{message} at k={list(np.ravel(k))}")
        self.k = k


class BootstrapError(SpectralError):
    pass


# ----------------------------------------------------------------------------
# operators


@dataclass(eq=False)
class MarkOperator:
    nodes: np.ndarray
    weights: np.ndarray
    entries: np.ndarray
    k: tuple | None = None
    errors: np.ndarray | None = None

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.entries = np.asarray(self.entries, dtype=float)
        m = len(self.nodes)
        if self.entries.shape != (m, m) or self.weights.shape != (m,):
            raise SpectralError("operator entries must be square over the mark nodes")
        if np.any(self.weights < 0):
            raise SpectralError("mark weights must be nonnegative")

    @property
    def size(self) -> int:
        return len(self.nodes)

    def symmetric_matrix(self) -> np.ndarray:
        s = np.sqrt(self.weights)
        return s[:, None] * self.entries * s[None, :]

    def apply(self, f) -> np.ndarray:
        return self.entries @ (self.weights * np.asarray(f, dtype=float))

    def compose(self, other: "MarkOperator") -> "MarkOperator":
        """Operator product (self other) on the shared mark grid."""
        self._check_grid(other)
        return MarkOperator(self.nodes, self.weights, self.entries @ (self.weights[:, None] * other.entries), self.k)

    def __add__(self, other):
        self._check_grid(other)
        return MarkOperator(self.nodes, self.weights, self.entries + other.entries, self.k)

    def __sub__(self, other):
        self._check_grid(other)
        return MarkOperator(self.nodes, self.weights, self.entries - other.entries, self.k)

    def scaled(self, c: float) -> "MarkOperator":
        err = None if self.errors is None else abs(c) * self.errors
        return MarkOperator(self.nodes, self.weights, c * self.entries, self.k, err)

    def _check_grid(self, other):
        if not (np.array_equal(self.nodes, other.nodes) and np.array_equal(self.weights, other.weights)):
            raise SpectralError("operators live on different mark grids")

    def to_dict(self) -> dict:
        out = {"nodes": self.nodes.tolist(), "weights": self.weights.tolist(), "entries": self.entries.tolist(),
               "k": None if self.k is None else list(self.k)}
        if self.errors is not None:
            out["errors"] = self.errors.tolist()
        return out

    def to_csv(self, path: str):
        m = self.size
        with open(path, "w") as fh:
            fh.write("i,j,node_i,node_j,weight_i,weight_j,entry\n")
            for i in range(m):
                for j in range(m):
                    fh.write(f"{i},{j},{self.nodes[i]!r},{self.nodes[j]!r},{self.weights[i]!r},"
                             f"{self.weights[j]!r},{self.entries[i, j]!r}\n")


def _symmetrize(entries: np.ndarray, what: str = "operator") -> np.ndarray:
    asym = float(np.max(np.abs(entries - entries.T))) if entries.size else 0.0
    if asym > ASYMMETRY_TOLERANCE:
        raise SpectralError(f"{what} is not symmetric (max asymmetry {asym:.3e})")
    return (entries + entries.T) / 2


def mark_grid(kernel: Kernel, nodes=None, weights=None):
    if nodes is None:
        return kernel.marks.nodes, kernel.marks.weights
    return np.asarray(nodes, float), np.asarray(weights, float)


def discretize(kernel: Kernel, k, nodes=None, weights=None) -> MarkOperator:
    """Matrix of phihat(k; a_i, a_j) on the kernel's mark quadrature (or a given grid)."""
    nodes, weights = mark_grid(kernel, nodes, weights)
    k = np.asarray(k, dtype=float).reshape(kernel.d)
    a, b = np.meshgrid(nodes, nodes, indexing="ij")
    entries = kernel.fourier(np.broadcast_to(k, a.shape + (kernel.d,)), a, b)
    return MarkOperator(nodes, weights, _symmetrize(np.asarray(entries, float), "kernel transform"), tuple(k))


def _eigvalsh(op: MarkOperator) -> np.ndarray:
    try:
        return linalg.eigvalsh(op.symmetric_matrix())
    except linalg.LinAlgError as exc:
        raise SpectralError(f"eigensolver failed: {exc}") from exc


def sup_spec(op: MarkOperator) -> float:
    """Top of the spectrum, sup <f, H f> / <f, f> in L^2(w)."""
    if np.any(np.abs(op.entries - op.entries.T) > ASYMMETRY_TOLERANCE):
        raise SpectralError("sup_spec needs a self-adjoint operator")
    return float(_eigvalsh(op)[-1])


def op_norm(op: MarkOperator) -> float:
    """L^2(w) operator norm: largest singular value of D^{1/2} M D^{1/2}."""
    mat = op.symmetric_matrix()
    if np.allclose(mat, mat.T, atol=ASYMMETRY_TOLERANCE, rtol=0):
        return float(np.max(np.abs(linalg.eigvalsh((mat + mat.T) / 2))))
    return float(linalg.svdvals(mat)[0])


def one_inf(op: MarkOperator) -> float:
    return float(np.max(op.weights @ np.abs(op.entries)))


def two_inf(op: MarkOperator) -> float:
    return float(np.sqrt(np.max(op.weights @ op.entries ** 2)))


def inf_inf(op: MarkOperator) -> float:
    return float(np.max(np.abs(op.entries)))


def size_measures(op: MarkOperator) -> dict:
    return {"sup_spec": sup_spec(op), "op_norm": op_norm(op), "one_inf": one_inf(op),
            "two_inf": two_inf(op), "inf_inf": inf_inf(op)}


def double_mark_sup_spec(p: float, f11, f12, f22):
    """Top eigenvalue of the double-mark transform operator.

    Uses the symmetrised matrix [[p f11, sqrt(pq) f12], [sqrt(pq) f12, q f22]].
    """
    q = 1 - p
    f11, f12, f22 = (np.asarray(v, float) for v in (f11, f12, f22))
    half_diff = (p * f11 - q * f22) / 2
    return (p * f11 + q * f22) / 2 + np.sqrt(half_diff ** 2 + p * q * f12 ** 2)


def double_mark_sup_spec_unweighted(p: float, f11, f12, f22):
    """Top eigenvalue of D M D = [[p^2 f11, pq f12], [pq f12, q^2 f22]].

    This is the quadratic form <f, H f> with respect to the plain Euclidean
    norm rather than L^2(P); it differs from the weighted spectrum unless
    p = q = 1 (one mark).
    """
    q = 1 - p
    f11, f12, f22 = (np.asarray(v, float) for v in (f11, f12, f22))
    half_diff = (p * p * f11 - q * q * f22) / 2
    return (p * p * f11 + q * q * f22) / 2 + np.sqrt(half_diff ** 2 + (p * q * f12) ** 2)


def power_iteration(op: MarkOperator, tol: float = 1e-14, max_iter: int = 200000, seed: int = 0) -> float:
    """Top eigenvalue by shifted power iteration on D^{1/2} M D^{1/2}."""
    mat = op.symmetric_matrix()
    shift = float(np.max(np.sum(np.abs(mat), axis=1)))
    shifted = mat + shift * np.eye(len(mat))
    v = np.random.default_rng(seed).random(len(mat)) + 0.5
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = shifted @ v
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return -shift
        w /= nrm
        if abs(new - lam) <= tol * max(1.0, abs(new)) and np.linalg.norm(w - v) < 1e-9:
            lam = new
            break
        v, lam = w, new
    return lam - shift


# ----------------------------------------------------------------------------
# rescaling


class RescaledKernel(Kernel):
    """phi*(x; a, b) = phi(q^{1/d} x; a, b), so phihat*(k) = phihat(q^{-1/d} k) / q."""

    def __init__(self, base: Kernel, q: float):
        if not q > 0:
            raise SpectralError("rescaling constant must be positive")
        super().__init__(base.d, base.marks)
        self.base, self.q = base, float(q)
        self.stretch = self.q ** (1 / self.d)
        self.family = base.family

    def _value(self, x, a, b):
        return self.base._value(x * self.stretch, a, b)

    def _fourier(self, k, a, b):
        return self.base._fourier(k / self.stretch, a, b) / self.q

    def _fourier_quadrature(self, k, a, b):
        return self.base._fourier_quadrature(k / self.stretch, a, b) / self.q

    @property
    def effective_range(self) -> float:
        return self.base.effective_range / self.stretch

    def truncated_mass(self) -> float:
        return self.base.truncated_mass() / self.q

    def to_spec(self):
        return {"rescaled": self.base.to_spec(), "q": self.q}


def normalizing_constant(kernel: Kernel, nodes=None, weights=None) -> float:
    return sup_spec(discretize(kernel, np.zeros(kernel.d), nodes, weights))


def rescale(kernel: Kernel, nodes=None, weights=None) -> RescaledKernel:
    """Rescaled kernel with S(Phihat*(0)) = 1 and its constant q."""
    return RescaledKernel(kernel, normalizing_constant(kernel, nodes, weights))


# ----------------------------------------------------------------------------
# k grids


def _directions(kernel: Kernel):
    d = kernel.d
    eye = np.eye(d)
    if isinstance(kernel, MultivariateGaussianKernel) or (
            isinstance(kernel, RescaledKernel) and isinstance(kernel.base, MultivariateGaussianKernel)):
        dirs = list(eye)
        if d > 1:
            dirs.append(np.ones(d) / math.sqrt(d))
        return np.array(dirs)
    return eye[:1]


def half_width(kernel: Kernel, nodes=None, weights=None) -> float:
    """|k| along the first axis where S(Phihat(k)) first falls to half of S(Phihat(0))."""
    s0 = normalizing_constant(kernel, nodes, weights)
    e = np.eye(kernel.d)[0]
    ratio = lambda t: sup_spec(discretize(kernel, t * e, nodes, weights)) / s0 - 0.5
    hi = 1e-6
    while ratio(hi) > 0:
        hi *= 2
        if hi > 1e8:
            raise SpectralError("transform does not decay")
    lo = hi / 2 if hi > 1e-6 else 0.0
    return float(optimize.brentq(ratio, lo, hi, xtol=1e-12 * hi))


def radial_k_grid(kernel: Kernel, points: int = 80, span=(1e-2, 30.0), include_zero: bool = True,
                  nodes=None, weights=None) -> np.ndarray:
    """Log-spaced magnitudes (in units of the half-width) along a few directions."""
    scale = half_width(kernel, nodes, weights)
    mags = np.geomspace(span[0], span[1], points) * scale
    grid = [mags[:, None] * u[None, :] for u in _directions(kernel)]
    out = np.concatenate(grid)
    if include_zero:
        out = np.concatenate([np.zeros((1, kernel.d)), out])
    return out


def lattice_k_grid(fld: TauField, max_per_axis: int | None = None) -> np.ndarray:
    """Wave vectors 2 pi j / L of the field lattice (per-axis Nyquist grid)."""
    c = centered_indices(fld.n)
    if max_per_axis is not None:
        c = c[np.abs(c) <= max_per_axis]
    grid = np.stack(np.meshgrid(*([c] * fld.d), indexing="ij"), axis=-1).reshape(-1, fld.d)
    return 2 * np.pi * grid / fld.L


# ----------------------------------------------------------------------------
# assumption checks


@dataclass
class AssumptionReport:
    family: str
    d: int
    C: float | None = None
    C_value_clause: float | None = None
    C_displacement_clause: float | None = None
    C1: float | None = None
    C2: float | None = None
    C2_least_squares: float | None = None
    fit_window: float | None = None
    g: float | None = None
    g_triple: float | None = None
    g_two_step: float | None = None
    g_rule: str | None = None
    triple_sup: float | None = None
    triple_lattice: float | None = None
    b_set_measure: float | None = None
    beta: dict | None = None
    beta_branch: str | None = None
    dimension_scan: dict | None = None
    passes: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def check_invariants(self):
        if self.C is not None and self.C < 1 - 1e-12:
            raise InvariantError("value-ratio constant below 1")
        if self.C1 is not None and not 0 < self.C1 < 1:
            raise InvariantError("C1 must lie in (0, 1)")
        if self.C2 is not None and not self.C2 > 0:
            raise InvariantError("C2 must be positive")
        if self.beta:
            if not all(v > 0 for v in self.beta.values()):
                raise InvariantError("beta must be positive")

    def merge(self, other: "AssumptionReport") -> "AssumptionReport":
        out = AssumptionReport(self.family, self.d)
        for name in self.__dataclass_fields__:
            mine, theirs = getattr(self, name), getattr(other, name)
            if name == "passes":
                setattr(out, name, {**mine, **theirs})
            elif name == "notes":
                setattr(out, name, mine + theirs)
            else:
                setattr(out, name, mine if mine is not None else theirs)
        return out

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA_VERSION}
        for name in self.__dataclass_fields__:
            out[name] = getattr(self, name)
        return out


def _spec_values(kernel, k_grid, nodes, weights):
    ops = [discretize(kernel, k, nodes, weights) for k in k_grid]
    return ops, np.array([sup_spec(o) for o in ops])


def check_h1(kernel: Kernel, k_grid=None, nodes=None, weights=None, tolerance: float = 1e-9) -> AssumptionReport:
    """Smallest C with |||Phihat(0)|||_inf <= C S(0) and |||Phihat(0) - Phihat(k)|||_inf <= C (S(0) - S(k)) on the grid."""
    nodes, weights = mark_grid(kernel, nodes, weights)
    if k_grid is None:
        k_grid = radial_k_grid(kernel, nodes=nodes, weights=weights)
    zero = discretize(kernel, np.zeros(kernel.d), nodes, weights)
    s0 = sup_spec(zero)
    if not s0 > 0:
        raise AssumptionError("S(Phihat(0)) must be positive")
    value_clause = inf_inf(zero) / s0
    disp = 0.0
    ops, specs = _spec_values(kernel, k_grid, nodes, weights)
    for k, op, s in zip(k_grid, ops, specs):
        gap = s0 - s
        diff = inf_inf(zero - op)
        if gap <= tolerance * s0:
            if diff > tolerance * max(1.0, inf_inf(zero)):
                raise AssumptionError("displacement clause fails: transform changes while S does not", k)
            continue
        disp = max(disp, diff / gap)
    rep = AssumptionReport(kernel.family, kernel.d, C=max(value_clause, disp), C_value_clause=value_clause,
                           C_displacement_clause=disp)
    rep.passes["value_ratio_finite"] = bool(np.isfinite(rep.C))
    return rep


def h1_dimension_scan(factory, dims, growth_tolerance: float = 0.2, **kwargs) -> dict:
    """Value-ratio constant across dimensions; flags growth by more than growth_tolerance relative."""
    values = {int(d): check_h1(factory(d), **kwargs).C for d in dims}
    cs = np.array(list(values.values()))
    grows = bool(cs.max() > (1 + growth_tolerance) * cs[0]) if len(cs) else False
    return {"C": values, "grows_with_d": grows, "stable": bool(cs.max() <= (1 + growth_tolerance) * cs.min())}


def check_h2(kernel: Kernel, k_grid=None, window: float | None = None, ratio_window: float = DECAY_RATIO_WINDOW,
             nodes=None, weights=None) -> AssumptionReport:
    """Constants C1 and C2 with S(k)/S(0) <= C1 v (1 - C2 |k|^2) on the grid.

    The fit window is |k| <= window (its edge is added to the grid along
    each direction), or by default the ball on which the ratio stays >=
    ratio_window.  C2 is fitted by least squares to 1 - ratio = C2 |k|^2 and
    then lowered, if needed, to the largest value for which the quadratic
    bound holds at every grid point inside the window; C1 is the largest
    ratio outside it.
    """
    nodes, weights = mark_grid(kernel, nodes, weights)
    if k_grid is None:
        k_grid = radial_k_grid(kernel, nodes=nodes, weights=weights)
    k_grid = np.asarray(k_grid, float)
    if window is not None:
        # the window edge along each direction, where the quadratic fit is tightest
        edge = np.array([window * u for u in _directions(kernel)])
        k_grid = np.concatenate([k_grid, edge])
    s0 = normalizing_constant(kernel, nodes, weights)
    _, specs = _spec_values(kernel, k_grid, nodes, weights)
    ratio = specs / s0
    mags = np.linalg.norm(k_grid, axis=1)
    if window is None:
        order = np.argsort(mags, kind="stable")
        below = np.nonzero(ratio[order] < ratio_window)[0]
        window = float(mags[order][below[0] - 1]) if len(below) and below[0] > 0 else (
            float(mags.max()) if not len(below) else 0.0)
    inside = (mags <= window) & (mags > 0)
    outside = mags > window
    if not np.any(inside):
        raise AssumptionError("no nonzero wave vectors inside the fit window")
    x2 = mags[inside] ** 2
    lsq = float(np.sum((1 - ratio[inside]) * x2) / np.sum(x2 * x2))
    certified = float(np.min((1 - ratio[inside]) / x2))
    c2 = min(lsq, certified)
    c1 = float(ratio[outside].max()) if np.any(outside) else float(max(1 - c2 * window ** 2, 0.0))
    rep = AssumptionReport(kernel.family, kernel.d, C1=c1, C2=c2, C2_least_squares=lsq, fit_window=window)
    if c2 <= 0:
        bad = k_grid[inside][np.argmin((1 - ratio[inside]) / x2)]
        raise AssumptionError("ratio does not fall below 1 quadratically", bad)
    bound = np.maximum(c1, 1 - c2 * mags ** 2)
    viol = ratio > bound + 1e-12
    if np.any(viol):
        raise AssumptionError("decay bound violated", k_grid[np.argmax(ratio - bound)])
    if not c1 < 1:
        raise AssumptionError("ratio returns to 1 outside the fit window", k_grid[outside][np.argmax(ratio[outside])])
    rep.passes["decay_bound"] = True
    if lsq > certified:
        rep.notes.append("least-squares C2 lowered to the largest value valid inside the window")
    return rep


# triple convolution ---------------------------------------------------------


def _triple_marks(kernel: Kernel, mark_nodes: int):
    if kernel.marks.kind == "interval":
        grid = MarkSpace.interval(kernel.marks.lower, kernel.marks.upper, kernel.marks.density, mark_nodes)
        return grid.nodes, grid.weights
    return kernel.marks.nodes, kernel.marks.weights


def _base_and_scaling(kernel: Kernel):
    if isinstance(kernel, RescaledKernel):
        return kernel.base, kernel.stretch, kernel.q
    return kernel, 1.0, 1.0


def pair_profile(kernel: Kernel, a: float, b: float) -> RadialProfile:
    """Radial profile of phi(.; a, b) for radial families (rescaling included)."""
    base, stretch, q = _base_and_scaling(kernel)
    if isinstance(base, FactorizedKernel):
        prof = base.base
        amp = prof.amplitude * float(base.mark_values(a, b))
    elif isinstance(base, _RadialKernel):
        prof = base._profile(min(a, b), max(a, b))
        amp = prof.amplitude
    else:
        raise SpectralError(f"{base.family} kernels are not radial")
    if prof.shape == "ball":
        return RadialProfile("ball", prof.scale / stretch, amp)
    return RadialProfile("gaussian", prof.scale / stretch ** 2, amp / q)


def _cap_volume(radius: float, c: float, d: int) -> float:
    """Volume of the part of a d-ball beyond a hyperplane at signed distance c from its centre."""
    full = math.pi ** (d / 2) / math.gamma(d / 2 + 1) * radius ** d
    if c >= radius:
        return 0.0
    if c <= -radius:
        return full
    half_cap = 0.5 * full * special.betainc((d + 1) / 2, 0.5, 1 - (c / radius) ** 2)
    return half_cap if c >= 0 else full - half_cap


def lens_volume(r: float, r1: float, r2: float, d: int) -> float:
    """Volume of the intersection of balls of radii r1, r2 whose centres are r apart."""
    if r >= r1 + r2:
        return 0.0
    if r <= abs(r1 - r2):
        return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * min(r1, r2) ** d
    c1 = (r * r + r1 * r1 - r2 * r2) / (2 * r)
    return _cap_volume(r1, c1, d) + _cap_volume(r2, r - c1, d)


def pair_convolution(p: RadialProfile, q: RadialProfile, r, d: int) -> np.ndarray:
    """(p * q)(x) at |x| = r in closed form."""
    r = np.atleast_1d(np.asarray(r, float))
    if p.shape == "gaussian" and q.shape == "gaussian":
        s = p.scale + q.scale
        return p.amplitude * q.amplitude * (2 * np.pi * s) ** (-d / 2) * np.exp(-r * r / (2 * s))
    if p.shape == "ball" and q.shape == "ball":
        return p.amplitude * q.amplitude * np.array([lens_volume(v, p.scale, q.scale, d) for v in r])
    ball, gauss = (p, q) if p.shape == "ball" else (q, p)
    # mass of a Gaussian centred at distance r inside the ball: noncentral chi-square law
    x = ball.scale ** 2 / gauss.scale
    nc = r * r / gauss.scale
    mass = np.where(nc > 0, stats.ncx2.cdf(x, d, np.maximum(nc, 1e-300)), stats.chi2.cdf(x, d))
    return ball.amplitude * gauss.amplitude * mass


def _breaks(*profiles):
    out = set()
    for p in profiles:
        if p.shape == "ball":
            out.add(p.scale)
    rs = [p.scale for p in profiles if p.shape == "ball"]
    for i in range(len(rs)):
        for j in range(len(rs)):
            out.update({abs(rs[i] - rs[j]), rs[i] + rs[j]})
    return sorted(v for v in out if v > 0)


def triple_at_origin(p1: RadialProfile, p2: RadialProfile, p3: RadialProfile, d: int) -> float:
    """(p1 * p2 * p3)(0) = int p1(|u|) (p2 * p3)(|u|) du."""
    profs = sorted([p1, p2, p3], key=lambda p: p.shape != "ball")
    outer, inner = profs[0], profs[1:]
    if outer.shape == "gaussian":
        s = sum(p.scale for p in profs)
        return float(np.prod([p.amplitude for p in profs]) * (2 * math.pi * s) ** (-d / 2))
    f = lambda rho: rho ** (d - 1) * float(pair_convolution(inner[0], inner[1], rho, d)[0])
    pts = [b for b in _breaks(*profs) if b < outer.scale] or None
    val, err = integrate.quad(f, 0.0, outer.scale, points=pts, limit=400, epsabs=1e-15, epsrel=1e-12)
    return float(outer.amplitude * sphere_area(d) * val)


def triple_convolution_peak(kernel: Kernel, mark_nodes: int = TRIPLE_MARK_NODES):
    """sup over mark pairs of (phi_1 * phi_2 * phi_3)(0) and the maximising pairs.

    Every supported kernel is a symmetric decreasing function of x (or a
    centred Gaussian), so each triple convolution peaks at the origin.
    """
    nodes, _ = _triple_marks(kernel, mark_nodes)
    m, d = len(nodes), kernel.d
    pairs = [(i, j) for i in range(m) for j in range(i, m)]
    base, stretch, q = _base_and_scaling(kernel)
    best, arg = -np.inf, None
    if isinstance(base, MultivariateGaussianKernel):
        cov = {p: base.covariance_diagonal(nodes[p[0]], nodes[p[1]]) / stretch ** 2 for p in pairs}
        amp = base.amplitude / q
        value = lambda combo: amp ** 3 * (2 * math.pi) ** (-d / 2) / math.sqrt(float(np.prod(sum(cov[p] for p in combo))))
    else:
        prof = {p: pair_profile(kernel, nodes[p[0]], nodes[p[1]]) for p in pairs}
        cache = {}

        def value(combo):
            key = tuple(sorted((prof[p].shape, prof[p].scale, prof[p].amplitude) for p in combo))
            if key not in cache:
                cache[key] = triple_at_origin(*(prof[p] for p in combo), d)
            return cache[key]
    for combo in itertools.combinations_with_replacement(pairs, 3):
        val = value(combo)
        if val > best:
            best, arg = val, combo
    return float(best), [[float(nodes[i]), float(nodes[j])] for i, j in arg]


def _kappa_quadrature(kernel: Kernel, order: int = 8, max_points: int = 400000):
    """Composite Gauss-Legendre nodes on [0, K] resolving the oscillation of every radial transform."""
    nodes = kernel.marks.nodes
    profiles = [pair_profile(kernel, a, b) for a in nodes for b in nodes]
    lengths, cut = [], []
    for p in profiles:
        if p.shape == "ball":
            lengths.append(p.scale)
            cut.append(600 / p.scale)
        else:
            s = math.sqrt(p.scale)
            lengths.append(s)
            cut.append(math.sqrt(2 * 80) / s)
    K = max(cut)
    width = min(0.25 * math.pi / max(lengths), K / 64)
    panels = min(int(math.ceil(K / width)), max_points // order)
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0, K, panels + 1)
    mid, half = (edges[1:] + edges[:-1]) / 2, (edges[1:] - edges[:-1]) / 2
    kap = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    return kap, wts


def triple_convolution_fourier(kernel: Kernel, pairs) -> float:
    """(2 pi)^{-d} int phihat_1 phihat_2 phihat_3 dk by a radial k-space quadrature (cross-check)."""
    d = kernel.d
    kap, wts = _kappa_quadrature(kernel)
    kv = np.zeros((len(kap), d))
    kv[:, 0] = kap
    prod = np.ones(len(kap))
    for a, b in pairs:
        prod = prod * kernel.fourier(kv, a, b)
    return float(np.sum(wts * kap ** (d - 1) * prod) * sphere_area(d) / (2 * math.pi) ** d)


def triple_convolution_lattice(kernel: Kernel, pairs, n: int = 64, h: float | None = None) -> float:
    """max_x of a triple convolution by FFT on an n^d lattice (independent route, d <= 3)."""
    d = kernel.d
    if d > 3:
        raise SpectralError("lattice cross-check limited to d <= 3")
    if h is None:
        h = 3 * kernel.effective_range / n
    vec = lattice_vectors(d, n, h)
    fft = [np.fft.fftn(kernel.evaluate(vec, a, b)) for a, b in pairs]
    conv = np.fft.ifftn(fft[0] * fft[1] * fft[2]).real * h ** (2 * d)
    return float(conv.max())


LATTICE_CAP = {1: 4096, 2: 768, 3: 112}


def _lattice_for(kernel: Kernel, pairs):
    """(n, h) resolving the finest profile feature and covering the combined range."""
    base, _, _ = _base_and_scaling(kernel)
    if isinstance(base, MultivariateGaussianKernel):
        return 128 if kernel.d < 3 else 48, None
    profs = [pair_profile(kernel, a, b) for a, b in pairs]
    finest = min(p.scale if p.shape == "ball" else math.sqrt(p.scale) for p in profs)
    span = 1.5 * sum(p.support(kernel.d) for p in profs)
    h = finest / {1: 96, 2: 32, 3: 12}[kernel.d]
    n = int(min(math.ceil(span / h), LATTICE_CAP[kernel.d]))
    return n, max(h, span / n)


def _two_step_profiles(kernel: Kernel, mark_nodes: int):
    """psi(r; a, b) = sum_c w_c (phi_ac * phi_cb)(r) as callables on radii."""
    nodes, weights = _triple_marks(kernel, mark_nodes)
    m, d = len(nodes), kernel.d
    base, stretch, q = _base_and_scaling(kernel)
    if isinstance(base, MultivariateGaussianKernel):
        if not np.allclose(base.axis_scales, base.axis_scales[0]):
            return None, nodes, weights
        amp = base.amplitude / q

        def make(i, j):
            var = np.array([(nodes[i] + 2 * nodes[c] + nodes[j]) * base.axis_scales[0] / stretch ** 2
                            for c in range(m)])
            return lambda r: np.sum(weights[:, None] * amp ** 2 * (2 * np.pi * var[:, None]) ** (-d / 2)
                                    * np.exp(-np.atleast_1d(np.asarray(r, float))[None, :] ** 2
                                             / (2 * var[:, None])), axis=0)
        return {(i, j): make(i, j) for i in range(m) for j in range(m)}, nodes, weights
    prof = {(i, j): pair_profile(kernel, nodes[i], nodes[j]) for i in range(m) for j in range(m)}

    def make(i, j):
        return lambda r: sum(weights[c] * pair_convolution(prof[(i, c)], prof[(c, j)], r, d) for c in range(m))
    return {(i, j): make(i, j) for i in range(m) for j in range(m)}, nodes, weights


def _level_radius(psi, level: float, r_hi: float) -> float:
    """Radius of the ball {psi > level} for a radially decreasing psi."""
    f = lambda r: float(psi(r)[0]) - level
    if f(0.0) <= 0:
        return 0.0
    hi = r_hi
    while f(hi) > 0:
        hi *= 2
        if hi > 1e6 * r_hi:
            return math.inf
    return float(optimize.brentq(f, 0.0, hi, xtol=1e-10 * hi))


def b_set_measure(profiles, nodes, weights, level: float, r_hi: float, d: int) -> float:
    """sup_a sum_b w_b vol{y : psi(y; a, b) > level}."""
    m = len(nodes)
    best = 0.0
    for i in range(m):
        total = 0.0
        for j in range(m):
            r = _level_radius(profiles[(i, j)], level, r_hi)
            total += weights[j] * (math.pi ** (d / 2) / math.gamma(d / 2 + 1)) * r ** d
        best = max(best, total)
    return best


def check_h3(kernel: Kernel, rule: str = "fixed-point", mark_nodes: int = TRIPLE_MARK_NODES,
             lattice_check: bool | None = None) -> AssumptionReport:
    """g(d) from the triple convolution bound and the B-set measure.

    ``rule`` chooses g: ``fixed-point`` is the smallest g >= g_triple with
    nu(B_g) <= g; ``two-step`` takes g = max(g_triple, sup psi / S^2), so the
    B-sets are empty.
    """
    if rule not in ("fixed-point", "two-step"):
        raise SpectralError(f"unknown g rule {rule!r}")
    s0 = normalizing_constant(kernel)
    peak, arg = triple_convolution_peak(kernel, mark_nodes)
    g3 = peak / s0 ** 3
    rep = AssumptionReport(kernel.family, kernel.d, triple_sup=peak, g_triple=g3, g_rule=rule)
    if lattice_check is None:
        lattice_check = kernel.d <= 2
    if lattice_check and kernel.d <= 3:
        rep.triple_lattice = triple_convolution_lattice(kernel, [tuple(p) for p in arg], *_lattice_for(kernel, arg))
    profiles, nodes, weights = _two_step_profiles(kernel, mark_nodes)
    if profiles is None:
        rep.notes.append("anisotropic kernel: B-set measure not computed, two-step rule used")
        rule = rep.g_rule = "two-step"
        rep.g_two_step = g2 = _anisotropic_two_step_peak(kernel, nodes, weights) / s0 ** 2
        rep.g = max(g3, g2)
        rep.b_set_measure = 0.0
    else:
        psi_peak = max(float(p(0.0)[0]) for p in profiles.values())
        g2 = psi_peak / s0 ** 2
        rep.g_two_step = g2
        r_hi = 2 * kernel.effective_range
        measure = lambda g: b_set_measure(profiles, nodes, weights, g * s0 ** 2, r_hi, kernel.d)
        if rule == "two-step" or g2 <= g3:
            rep.g = max(g3, g2)
            rep.b_set_measure = 0.0
        else:
            if measure(g3) <= g3:
                rep.g = g3
            else:
                lo, hi = g3, g2
                for _ in range(80):
                    mid = math.sqrt(lo * hi)
                    if measure(mid) <= mid:
                        hi = mid
                    else:
                        lo = mid
                    if hi / lo - 1 < 1e-10:
                        break
                rep.g = hi
            rep.b_set_measure = measure(rep.g)
    rep.passes["b_set_bound"] = bool(rep.b_set_measure <= rep.g * (1 + 1e-9))
    if kernel.d == 1:
        rep.notes.append("d = 1: report only")
    return rep


def _anisotropic_two_step_peak(kernel, nodes, weights) -> float:
    base = kernel.base if isinstance(kernel, RescaledKernel) else kernel
    scale = 1.0 / (kernel.stretch ** 2) if isinstance(kernel, RescaledKernel) else 1.0
    amp = base.amplitude / (kernel.q if isinstance(kernel, RescaledKernel) else 1.0)
    best = 0.0
    for i in range(len(nodes)):
        for j in range(len(nodes)):
            tot = 0.0
            for c in range(len(nodes)):
                diag = (base.covariance_diagonal(nodes[i], nodes[c]) + base.covariance_diagonal(nodes[c], nodes[j]))
                tot += weights[c] * amp ** 2 * (2 * math.pi) ** (-kernel.d / 2) / math.sqrt(float(np.prod(diag * scale)))
            best = max(best, tot)
    return best


BETA_RHOS = (0.5, 1.0, 2.0)


def beta_from_g(g_by_d: dict, rhos=BETA_RHOS) -> tuple[dict, str]:
    """beta(d) with the branch chosen by a finite-range slope test.

    The fast branch needs g(d) rho^{-d} Gamma(d/2+1)^2 -> 0 for every rho; we
    accept it when log g - d log rho + 2 log Gamma(d/2+1) has a negative
    least-squares slope over the upper half of the d range for each rho.
    """
    dims = np.array(sorted(g_by_d))
    gs = np.array([g_by_d[d] for d in dims])
    if np.any(gs <= 0):
        raise SpectralError("g(d) must be positive")
    upper = dims >= np.median(dims)
    fast = len(dims) >= 3
    for rho in rhos:
        seq = np.log(gs) - dims * math.log(rho) + 2 * special.gammaln(dims / 2 + 1)
        slope = np.polyfit(dims[upper], seq[upper], 1)[0] if upper.sum() >= 2 else 0.0
        fast = fast and slope < 0
    if fast:
        beta = {int(d): float(g ** (0.25 - 1.5 / d) * d ** -1.5) for d, g in zip(dims, gs)}
        return beta, "fast-decay"
    return {int(d): float(g ** 0.25) for d, g in zip(dims, gs)}, "default"


def h3_dimension_scan(factory, dims, rule: str = "fixed-point", **kwargs) -> AssumptionReport:
    g = {}
    reports = {}
    for d in dims:
        r = check_h3(factory(d), rule=rule, lattice_check=False, **kwargs)
        g[int(d)] = r.g
        reports[int(d)] = {"g": r.g, "g_triple": r.g_triple, "b_set_measure": r.b_set_measure}
    beta, branch = beta_from_g(g)
    last = factory(max(dims))
    rep = AssumptionReport(last.family, last.d, beta=beta, beta_branch=branch,
                           dimension_scan={"g": g, "per_d": reports})
    vals = np.array([g[int(d)] for d in sorted(dims)])
    rep.passes["g_decreasing"] = bool(np.all(np.diff(vals) <= 0))
    return rep


def check_assumptions(kernel: Kernel, k_grid=None, rule: str = "fixed-point", factory=None, dims=None,
                      mark_nodes: int = TRIPLE_MARK_NODES) -> AssumptionReport:
    rep = check_h1(kernel, k_grid).merge(check_h2(kernel, k_grid))
    rep = rep.merge(check_h3(kernel, rule, mark_nodes))
    if factory is not None and dims:
        scan = h3_dimension_scan(factory, dims, rule, mark_nodes=mark_nodes)
        rep.beta, rep.beta_branch = scan.beta, scan.beta_branch
        rep.dimension_scan = {"triple": scan.dimension_scan, "value_ratio": h1_dimension_scan(factory, dims)}
    rep.check_invariants()
    return rep


# ----------------------------------------------------------------------------
# operators from estimated fields


def _dft_entries(values: np.ndarray, fld: TauField, k, displacement=None) -> np.ndarray:
    vec = lattice_vectors(fld.d, fld.n, fld.h)
    phase = np.cos(vec @ np.asarray(k, float))
    if displacement is not None:
        phase = phase * (1 - np.cos(vec @ np.asarray(displacement, float)))
    axes = tuple(range(2, 2 + fld.d))
    return np.sum(values * phase[None, None], axis=axes) * fld.h ** fld.d


def field_operator(fld: TauField, k, values_fn=None, displacement=None, with_errors: bool = True) -> MarkOperator:
    """sum_x cos(k.x) f(x; a, b) h^d over the lattice, optionally (1 - cos(kd.x)) weighted.

    ``values_fn`` maps a field to lattice values (default: the distinct-point
    connection probabilities).  Entry errors come from the batch jackknife.
    """
    if fld.total_trials() == 0:
        raise SpectralError("field has empty bins")
    fn = values_fn or (lambda f: f.regular())
    k = np.asarray(k, float).reshape(fld.d)
    entries = _dft_entries(fn(fld), fld, k, displacement)
    errors = None
    if with_errors:
        _, errors = jackknife(lambda f: _dft_entries(fn(f), f, k, displacement), fld)
    return MarkOperator(fld.nodes, fld.weights, _symmetrize(entries, "estimated operator"), tuple(k), errors)


def estimated_T_operator(fld: TauField, k) -> MarkOperator:
    if fld.kind != "tau":
        raise SpectralError("not a connection field")
    return field_operator(fld, k)


def lattice_kernel_operator(kernel: Kernel, fld: TauField, k, displacement=None) -> MarkOperator:
    """Kernel transform by the same lattice sum used for estimated fields."""
    phi = kernel_on_lattice(kernel, fld.d, fld.n, fld.h, fld.nodes)
    entries = _dft_entries(phi, fld, np.asarray(k, float).reshape(fld.d), displacement)
    return MarkOperator(fld.nodes, fld.weights, _symmetrize(entries), tuple(np.ravel(k)))


def pi0_operator(pi_fld: TauField, kernel: Kernel, k) -> MarkOperator:
    return field_operator(pi_fld, k, values_fn=lambda f: pi0_values(f, kernel))


# ----------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapReport:
    lam: float
    lam_rescaled: float
    q: float
    mu: float
    f1: float
    f2: float
    f3: float
    k_grid: list
    l_grid: list
    G: list
    J: list
    f2_argmax: list
    f3_argmax: list
    phi_source: str
    oze_residual: dict | None = None

    @property
    def f(self) -> float:
        return max(self.f1, self.f2, self.f3)

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA_VERSION, "f": self.f}
        for name in self.__dataclass_fields__:
            out[name] = getattr(self, name)
        return out


def _clamped_mu(s_t0: float, tol: float = 1e-12) -> float:
    if not np.isfinite(s_t0):
        raise BootstrapError("S(T(0)) is not finite")
    if s_t0 < 1 - tol:
        raise BootstrapError(f"S(T(0)) = {s_t0:.6g} < 1 after rescaling")
    return max(0.0, 1 - 1 / s_t0)


def bootstrap_f(lam: float, kernel: Kernel, k_grid, l_grid, tau_field: TauField | None = None,
                phi_source: str | None = None) -> BootstrapReport:
    """Bootstrap function pieces f1, f2, f3 on grids of rescaled wave vectors.

    The kernel is rescaled so that S(Phihat(0)) = 1 (q = S(Phihat(0)),
    lam* = lam q, Ahat*(k) = Ahat(q^{-1/d} k) / q for every operator).  With
    no field the two-point operator is the kernel operator itself (exact at
    lam = 0).  ``phi_source`` picks analytic transforms or the lattice sums
    used for the field (default: lattice when a field is given).
    """
    if lam < 0:
        raise BootstrapError("intensity must be nonnegative")
    if tau_field is None:
        if lam != 0:
            raise BootstrapError("a two-point field is required for lam > 0")
        phi_source = phi_source or "analytic"
        nodes, weights = kernel.marks.nodes, kernel.marks.weights
    else:
        if tau_field.lam != lam:
            raise BootstrapError("field intensity differs from lam")
        phi_source = phi_source or "lattice"
        nodes, weights = tau_field.nodes, tau_field.weights
    d = kernel.d

    def phi_op(k, disp=None):
        if phi_source == "lattice":
            return lattice_kernel_operator(kernel, tau_field, k, disp)
        if disp is None:
            return discretize(kernel, k, nodes, weights)
        a, b = np.meshgrid(nodes, nodes, indexing="ij")
        kk = np.broadcast_to(np.asarray(disp, float), a.shape + (d,))
        ll = np.broadcast_to(np.asarray(k, float), a.shape + (d,))
        return MarkOperator(nodes, weights, _symmetrize(displaced_fourier(kernel, kk, ll, a, b)), tuple(k))

    def tau_op(k, disp=None):
        if tau_field is None:
            return phi_op(k, disp)
        return field_operator(tau_field, k, displacement=disp, with_errors=False)

    q = sup_spec(phi_op(np.zeros(d)))
    shrink = q ** (-1 / d)
    k_grid = np.asarray(k_grid, float).reshape(-1, d)
    l_grid = np.asarray(l_grid, float).reshape(-1, d)
    lam_star = lam * q
    mu = _clamped_mu(sup_spec(tau_op(np.zeros(d))) / q)

    spec_cache = {}

    def s_phi(kstar):
        key = tuple(np.round(kstar, 14))
        if key not in spec_cache:
            spec_cache[key] = sup_spec(phi_op(kstar * shrink)) / q
        return spec_cache[key]

    G = lambda kstar: 1.0 / (1.0 - mu * s_phi(kstar))
    g_floor = 1.0 / (1.0 + op_norm(phi_op(np.zeros(d))) / q)
    f2, f2_arg, g_vals = -np.inf, None, []
    for ks in k_grid:
        gk = G(ks)
        if gk < g_floor - 1e-12:
            raise InvariantError("Green's function below its lower bound")
        g_vals.append(gk)
        val = op_norm(tau_op(ks * shrink)) / q / gk
        if val > f2:
            f2, f2_arg = val, ks.tolist()
    f3, f3_arg, j_vals = 0.0, None, []
    for ks in k_grid:
        if np.all(ks == 0):
            continue
        one_minus = 1.0 - s_phi(ks)
        for ls in l_grid:
            jv = one_minus * (G(ls - ks) * G(ls) + G(ls) * G(ls + ks) + G(ls - ks) * G(ls + ks))
            j_vals.append(jv)
            val = op_norm(tau_op(ls * shrink, ks * shrink)) / q / jv
            if val > f3:
                f3, f3_arg = val, [ks.tolist(), ls.tolist()]
    return BootstrapReport(lam, lam_star, q, mu, lam_star, float(f2), float(f3), k_grid.tolist(), l_grid.tolist(),
                           g_vals, j_vals, f2_arg, f3_arg, phi_source)


# ----------------------------------------------------------------------------
# OZE residual and infrared diagnostics


def _residual_norm(lam, tau_fld, pi_fld, kernel, k):
    t = field_operator(tau_fld, k, with_errors=False)
    direct = lattice_kernel_operator(kernel, tau_fld, k)
    if pi_fld is not None:
        direct = direct + field_operator(pi_fld, k, values_fn=lambda f: pi0_values(f, kernel), with_errors=False)
    resid = t - direct - t.compose(direct).scaled(lam)
    return resid


def oze_residual(lam: float, tau_fld: TauField, pi_fld: TauField | None, kernel: Kernel, k_grid=None,
                 sigmas: float = 4.0) -> dict:
    """Truncated OZE residual R0(k) = T - (Phi + Pi0) - lam T (Phi + Pi0) and its bound.

    The bound is lam ||T(0)|| ||Pi0(0)||.  Error bands are delete-one-batch
    jackknife errors from the two fields combined in quadrature.
    """
    if tau_fld.lam != lam or (pi_fld is not None and pi_fld.lam != lam):
        raise SpectralError("fields must be estimated at lam")
    d = tau_fld.d
    if k_grid is None:
        k_grid = lattice_k_grid(tau_fld, max_per_axis=2)
    k_grid = np.asarray(k_grid, float).reshape(-1, d)
    zero = np.zeros(d)

    def norms(tf, pf, k):
        return op_norm(_residual_norm(lam, tf, pf, kernel, k))

    def bound(tf, pf):
        if pf is None:
            return 0.0
        t0 = op_norm(field_operator(tf, zero, with_errors=False))
        p0 = op_norm(field_operator(pf, zero, values_fn=lambda f: pi0_values(f, kernel), with_errors=False))
        return lam * t0 * p0

    def band(fn):
        _, e_tau = jackknife(lambda f: fn(f, pi_fld), tau_fld)
        e_pi = 0.0
        if pi_fld is not None:
            _, e_pi = jackknife(lambda f: fn(tau_fld, f), pi_fld)
        return float(np.sqrt(e_tau ** 2 + e_pi ** 2))

    rows = []
    for k in k_grid:
        val = norms(tau_fld, pi_fld, k)
        err = band(lambda tf, pf, k=k: norms(tf, pf, k))
        rows.append({"k": k.tolist(), "residual_norm": val, "stderr": err})
    b = bound(tau_fld, pi_fld)
    b_err = band(bound)
    r0 = next(r for r in rows if np.all(np.asarray(r["k"]) == 0)) if any(
        np.all(np.asarray(r["k"]) == 0) for r in rows) else {"residual_norm": norms(tau_fld, pi_fld, zero),
                                                               "stderr": band(lambda tf, pf: norms(tf, pf, zero))}
    combined = math.sqrt(r0["stderr"] ** 2 + b_err ** 2)
    holds = r0["residual_norm"] <= b + sigmas * combined
    decays = all(r["residual_norm"] <= r0["residual_norm"] + sigmas * math.hypot(r["stderr"], r0["stderr"])
                 for r in rows)
    return {"schema": SCHEMA_VERSION, "lambda": lam, "rows": rows, "residual_at_zero": r0["residual_norm"],
            "residual_at_zero_stderr": r0["stderr"], "bound": b, "bound_stderr": b_err, "sigmas": sigmas,
            "bound_holds": bool(holds), "residual_max_at_zero": bool(decays)}


def infrared_report(lam: float, tau_fld: TauField, kernel: Kernel, beta: float, C: float, k_grid=None) -> dict:
    """Diagnostic table of lam ||T(k)|| against (S(k) + C beta) / (S(0) - S(k)) v 1.

    The inequality is proven only in large dimension; nothing here is a
    pass/fail gate.
    """
    d = tau_fld.d
    if k_grid is None:
        k_grid = lattice_k_grid(tau_fld, max_per_axis=4)
    s0 = sup_spec(lattice_kernel_operator(kernel, tau_fld, np.zeros(d)))
    rows = []
    for k in np.asarray(k_grid, float).reshape(-1, d):
        lhs = lam * op_norm(field_operator(tau_fld, k, with_errors=False))
        sk = sup_spec(lattice_kernel_operator(kernel, tau_fld, k))
        gap = s0 - sk
        rhs = math.inf if gap <= 1e-14 * s0 else max((sk + C * beta) / gap, 1.0)
        rows.append({"k": k.tolist(), "lhs": lhs, "rhs": rhs, "satisfied": bool(lhs <= rhs)})
    return {"schema": SCHEMA_VERSION, "diagnostic_only": True, "lambda": lam, "beta": beta, "C": C, "rows": rows}


def spectrum_union_check(kernel: Kernel, k_grid) -> dict:
    """sup_k ||Phihat(k)|| on the grid against the independently computed operator norm."""
    k_grid = np.asarray(k_grid, float).reshape(-1, kernel.d)
    grid_sup = max(op_norm(discretize(kernel, k)) for k in k_grid)
    if isinstance(kernel, FactorizedKernel):
        profile_sup = float(kernel.base.fourier(0.0, kernel.d))
        table = kernel.mark_values(kernel.marks.nodes[:, None], kernel.marks.nodes[None, :])
        mark_norm = op_norm(MarkOperator(kernel.marks.nodes, kernel.marks.weights, table))
        full = profile_sup * mark_norm
    elif kernel.marks.kind == "singleton":
        full = abs(kernel.integral())
    else:
        raise SpectralError("full-operator norm available only for factorized or single-mark kernels")
    return {"schema": SCHEMA_VERSION, "grid_sup": grid_sup, "full_norm": full, "gap": full - grid_sup}
