"""Mark spaces and connection kernels with exact and numeric Fourier transforms.

A kernel is a function phi(x; a, b) in [0, 1] of a displacement x in R^d and
two marks.  Fourier transforms use the convention ghat(k) = int e^{ik.x} g(x) dx.
All supported families are reflection symmetric, so transforms are real.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import integrate, special

EDGE_EPSILON = 1e-12
BESSEL_SERIES_SWITCH = 8.0
DEFAULT_MARK_NODES = 64
BOOLEAN_C1_LIMIT = 1.0 / math.sqrt(8.0 * math.pi * math.e)


class KernelError(ValueError):
    pass


class QuadratureError(RuntimeError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved error estimate {achieved:.3e})")
        self.achieved = achieved


def unit_volume_radius(d: int) -> float:
    """Radius of the d-ball of volume one."""
    if d < 1:
        raise KernelError("dimension must be >= 1")
    return math.exp((special.gammaln(d / 2 + 1) - (d / 2) * math.log(math.pi)) / d)


def ball_volume(radius, d: int):
    return np.pi ** (d / 2) / special.gamma(d / 2 + 1) * np.asarray(radius, dtype=float) ** d


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


# ----------------------------------------------------------------------------
# mark spaces


@dataclass(eq=False)
class MarkSpace:
    """Probability space of marks together with a quadrature rule.

    Marks are real numbers.  ``nodes``/``weights`` give the quadrature used
    for operator work; sampling always uses the exact law.
    """

    kind: str
    labels: np.ndarray = field(default_factory=lambda: np.zeros(1))
    probabilities: np.ndarray = field(default_factory=lambda: np.ones(1))
    lower: float = 0.0
    upper: float = 1.0
    density: str = "uniform"
    n_nodes: int = DEFAULT_MARK_NODES

    def __post_init__(self):
        if self.kind == "singleton":
            self.labels = np.asarray(self.labels, dtype=float).reshape(1)
            self.probabilities = np.ones(1)
            self.nodes, self.weights = self.labels.copy(), np.ones(1)
        elif self.kind == "finite":
            self.labels = np.asarray(self.labels, dtype=float)
            p = np.asarray(self.probabilities, dtype=float)
            if p.shape != self.labels.shape or p.ndim != 1 or len(p) == 0:
                raise KernelError("finite mark space needs one probability per label")
            if np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
                raise KernelError("mark probabilities must be nonnegative and sum to 1")
            if len(np.unique(self.labels)) != len(self.labels):
                raise KernelError("mark labels must be distinct")
            self.probabilities = p
            self.nodes, self.weights = self.labels.copy(), p.copy()
        elif self.kind == "interval":
            if not self.lower < self.upper:
                raise KernelError("interval mark space needs lower < upper")
            if self.n_nodes < 1:
                raise KernelError("quadrature needs at least one node")
            width = (self.upper - self.lower) / self.n_nodes
            self.nodes = self.lower + width * (np.arange(self.n_nodes) + 0.5)
            w = self._density(self.nodes)
            self.weights = w / w.sum()
        else:
            raise KernelError(f"unknown mark space kind {self.kind!r}")

    @classmethod
    def singleton(cls, mark: float = 0.0) -> "MarkSpace":
        return cls("singleton", labels=np.array([mark]))

    @classmethod
    def finite(cls, labels: Sequence[float], probabilities: Sequence[float]) -> "MarkSpace":
        return cls("finite", labels=np.asarray(labels, float), probabilities=np.asarray(probabilities, float))

    @classmethod
    def interval(cls, lower: float, upper: float, density: str = "uniform",
                 n_nodes: int = DEFAULT_MARK_NODES) -> "MarkSpace":
        return cls("interval", lower=float(lower), upper=float(upper), density=density, n_nodes=int(n_nodes))

    def _power(self) -> float:
        if self.density == "uniform":
            return 0.0
        if self.density.startswith("power:"):
            alpha = float(self.density.split(":", 1)[1])
            if alpha <= -1:
                raise KernelError("power density exponent must exceed -1")
            if self.lower < 0:
                raise KernelError("power density needs a nonnegative interval")
            return alpha
        raise KernelError(f"unknown density {self.density!r}")

    def _density(self, a):
        return np.asarray(a, dtype=float) ** self._power()

    @property
    def size(self) -> int:
        return len(self.nodes)

    def index_of(self, a) -> np.ndarray:
        """Positions of labels in ``labels`` (finite and singleton spaces)."""
        order = np.argsort(self.labels)
        pos = np.searchsorted(self.labels, np.asarray(a, dtype=float), sorter=order)
        return order[np.clip(pos, 0, len(order) - 1)]

    def contains(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.kind == "interval":
            return (a >= self.lower) & (a <= self.upper)
        return np.isin(a, self.labels)

    def check(self, a) -> None:
        if not np.all(self.contains(a)):
            raise KernelError("mark outside mark space")

    def sample(self, rng: np.random.Generator, size=None):
        """Draw marks from the exact law."""
        if self.kind == "singleton":
            return np.full(size, self.labels[0]) if size is not None else float(self.labels[0])
        if self.kind == "finite":
            idx = rng.choice(len(self.labels), size=size, p=self.probabilities)
            return self.labels[idx]
        u = rng.random(size)
        alpha = self._power()
        lo, hi = self.lower ** (alpha + 1), self.upper ** (alpha + 1)
        if alpha == 0.0:
            return self.lower + (self.upper - self.lower) * u
        return (lo + (hi - lo) * u) ** (1.0 / (alpha + 1))

    def mean(self) -> float:
        if self.kind != "interval":
            return float(np.dot(self.labels, self.probabilities))
        alpha = self._power()
        lo, hi = self.lower, self.upper
        return ((alpha + 1) / (alpha + 2)) * (hi ** (alpha + 2) - lo ** (alpha + 2)) / (hi ** (alpha + 1) - lo ** (alpha + 1))

    def to_spec(self) -> dict:
        if self.kind == "singleton":
            return {"kind": "singleton", "mark": float(self.labels[0])}
        if self.kind == "finite":
            return {"kind": "finite", "labels": self.labels.tolist(), "probabilities": self.probabilities.tolist()}
        return {"kind": "interval", "lower": self.lower, "upper": self.upper,
                "density": self.density, "nodes": self.n_nodes}

    @classmethod
    def from_spec(cls, spec: dict) -> "MarkSpace":
        kind = spec.get("kind", "singleton")
        if kind == "singleton":
            return cls.singleton(float(spec.get("mark", 0.0)))
        if kind == "finite":
            return cls.finite(spec["labels"], spec["probabilities"])
        if kind == "interval":
            return cls.interval(spec["lower"], spec["upper"], spec.get("density", "uniform"),
                                spec.get("nodes", DEFAULT_MARK_NODES))
        raise KernelError(f"unknown mark space kind {kind!r}")


def sample_mark(space: MarkSpace, rng: np.random.Generator, size=None):
    return space.sample(rng, size)


# ----------------------------------------------------------------------------
# radial building blocks


def ball_fourier(kappa, radius, d: int):
    """Fourier transform of the indicator of a d-ball, (2 pi R/k)^{d/2} J_{d/2}(R k).

    Uses the power series for R k <= BESSEL_SERIES_SWITCH, which is regular at
    k = 0, and scipy's Bessel routine beyond it.
    """
    kappa = np.asarray(kappa, dtype=float)
    radius = np.asarray(radius, dtype=float)
    kappa, radius = np.broadcast_arrays(kappa, radius)
    x = kappa * radius
    nu = d / 2
    out = np.empty(x.shape)
    small = x <= BESSEL_SERIES_SWITCH
    if np.any(small):
        xs = x[small]
        rs = radius[small]
        z = -(xs / 2) ** 2
        term = np.full(xs.shape, 1.0 / math.gamma(nu + 1))
        total = term.copy()
        for m in range(1, 200):
            term = term * z / (m * (nu + m))
            total += term
            if np.all(np.abs(term) <= 1e-17 * np.abs(total)):
                break
        out[small] = (math.pi * rs ** 2) ** nu * total
    big = ~small
    if np.any(big):
        xb = x[big]
        out[big] = (2 * math.pi * radius[big] / kappa[big]) ** nu * special.jv(nu, xb)
    return out


@dataclass(frozen=True)
class RadialProfile:
    """A radial bump used as a building block: scaled ball or Gaussian.

    ``ball``: amplitude * 1{|x| <= scale}.
    ``gaussian``: amplitude * (2 pi s)^{-d/2} exp(-|x|^2 / (2 s)) with s = scale.
    """

    shape: str
    scale: float
    amplitude: float = 1.0

    def __post_init__(self):
        if self.shape not in ("ball", "gaussian"):
            raise KernelError(f"unknown profile shape {self.shape!r}")
        if self.scale <= 0 or self.amplitude < 0:
            raise KernelError("profile needs positive scale and nonnegative amplitude")

    def peak(self, d: int) -> float:
        if self.shape == "ball":
            return self.amplitude
        return self.amplitude * (2 * math.pi * self.scale) ** (-d / 2)

    def value(self, r2, d: int):
        r2 = np.asarray(r2, dtype=float)
        if self.shape == "ball":
            return np.where(r2 <= self.scale ** 2, self.amplitude, 0.0)
        return self.peak(d) * np.exp(-r2 / (2 * self.scale))

    def fourier(self, kappa, d: int):
        kappa = np.asarray(kappa, dtype=float)
        if self.shape == "ball":
            return self.amplitude * ball_fourier(kappa, self.scale, d)
        return self.amplitude * np.exp(-self.scale * kappa ** 2 / 2)

    def support(self, d: int) -> float:
        if self.shape == "ball":
            return self.scale
        return gaussian_cutoff(self.peak(d), self.scale)

    def truncated_mass(self, d: int) -> float:
        if self.shape == "ball":
            return 0.0
        r = self.support(d)
        return float(self.amplitude * special.gammaincc(d / 2, r * r / (2 * self.scale)))

    def to_spec(self) -> dict:
        return {"shape": self.shape, "scale": self.scale, "amplitude": self.amplitude}


def gaussian_cutoff(peak: float, variance: float, eps: float = EDGE_EPSILON) -> float:
    """Radius beyond which peak * exp(-r^2/(2 variance)) < eps."""
    if peak <= eps:
        return 0.0
    return math.sqrt(2 * variance * math.log(peak / eps))


def radial_quadrature(profile_fn, kappa: float, d: int, support: float, breaks=()) -> float:
    """d-dimensional Fourier transform of a radial function by a 1-d integral.

    fhat(k) = (2 pi)^{d/2} k^{1-d/2} int_0^R f(r) J_{d/2-1}(k r) r^{d/2} dr, and
    |S^{d-1}| int_0^R f(r) r^{d-1} dr at k = 0.
    """
    if kappa == 0.0:
        integrand = lambda r: profile_fn(r) * r ** (d - 1)
        scale = sphere_area(d)
    else:
        nu = d / 2 - 1
        integrand = lambda r: profile_fn(r) * special.jv(nu, kappa * r) * r ** (d / 2)
        scale = (2 * math.pi) ** (d / 2) * kappa ** (1 - d / 2)
    points = [p for p in breaks if 0 < p < support] or None
    with warnings.catch_warnings():
        # the error estimate is checked below
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(integrand, 0.0, support, points=points, limit=500,
                                  epsabs=1e-15, epsrel=1e-13)
    if not np.isfinite(val) or err > 1e-9 * max(abs(val), 1e-300) + 1e-13:
        raise QuadratureError("radial quadrature did not converge", err)
    return scale * val


# ----------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class FourierValue:
    k: tuple
    value: float
    method: str


class Kernel:
    """Connection function phi(x; a, b) on R^d x E x E.

    Subclasses provide ``_value`` (vectorised over displacements and marks)
    and ``_fourier`` (vectorised over wave vectors, scalar marks allowed to
    broadcast).  ``effective_range`` is the support radius, or the cutoff
    where phi drops below EDGE_EPSILON.
    """

    family = "abstract"

    def __init__(self, d: int, marks: MarkSpace):
        if int(d) != d or d < 1:
            raise KernelError("dimension must be a positive integer")
        self.d = int(d)
        self.marks = marks

    # public API -----------------------------------------------------------
    def evaluate(self, displacement, a=None, b=None):
        x = np.asarray(displacement, dtype=float)
        if x.shape[-1:] != (self.d,):
            raise KernelError(f"displacement must have trailing dimension {self.d}")
        a, b = self._marks_or_default(a, b)
        return self._value(x, a, b)

    def fourier(self, k, a=None, b=None):
        k = np.asarray(k, dtype=float)
        if k.shape[-1:] != (self.d,):
            raise KernelError(f"wave vector must have trailing dimension {self.d}")
        a, b = self._marks_or_default(a, b)
        return self._fourier(k, a, b)

    def fourier_quadrature(self, k, a=None, b=None) -> float:
        """Independent numeric transform at a single wave vector."""
        k = np.asarray(k, dtype=float)
        if k.shape != (self.d,):
            raise KernelError(f"wave vector must have shape ({self.d},)")
        a, b = self._marks_or_default(a, b)
        return self._fourier_quadrature(k, float(a), float(b))

    def integral(self, a=None, b=None) -> float:
        """int phi(x; a, b) dx by numeric quadrature."""
        return self.fourier_quadrature(np.zeros(self.d), a, b)

    @property
    def effective_range(self) -> float:
        raise NotImplementedError

    def truncated_mass(self) -> float:
        """Largest mass of phi(.; a, b) lying beyond the effective range."""
        return 0.0

    def to_spec(self) -> dict:
        raise NotImplementedError

    # helpers --------------------------------------------------------------
    def _marks_or_default(self, a, b):
        if a is None:
            a = self.marks.nodes[0]
        if b is None:
            b = self.marks.nodes[0]
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        self.marks.check(a)
        self.marks.check(b)
        return a, b

    @staticmethod
    def _r2(x):
        return np.einsum("...i,...i->...", x, x)

    def _fourier_quadrature(self, k, a, b):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(d={self.d}, {self.to_spec()})"


class _RadialKernel(Kernel):
    """Kernels built from radial profiles selected by the mark pair."""

    def _profile(self, a: float, b: float) -> RadialProfile:
        raise NotImplementedError

    def _pair_values(self, fn, a, b, arg):
        a, b = np.broadcast_arrays(a, b)
        if a.ndim == 0:
            return fn(self._profile(float(a), float(b)), arg)
        out = np.empty(np.broadcast_shapes(a.shape, np.shape(arg)))
        arg = np.broadcast_to(arg, out.shape)
        aa = np.broadcast_to(a, out.shape)
        bb = np.broadcast_to(b, out.shape)
        lo, hi = np.minimum(aa, bb), np.maximum(aa, bb)
        pairs = np.stack([lo.ravel(), hi.ravel()], axis=1)
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        flat_arg = arg.ravel()
        flat = np.empty(flat_arg.shape)
        inv = inv.ravel()
        for idx, (p, q) in enumerate(uniq):
            sel = inv == idx
            flat[sel] = fn(self._profile(p, q), flat_arg[sel])
        return flat.reshape(out.shape)

    def _value(self, x, a, b):
        r2 = self._r2(x)
        return self._pair_values(lambda prof, r: prof.value(r, self.d), a, b, r2)

    def _fourier(self, k, a, b):
        kappa = np.sqrt(self._r2(k))
        return self._pair_values(lambda prof, q: prof.fourier(q, self.d), a, b, kappa)

    def _fourier_quadrature(self, k, a, b):
        prof = self._profile(min(a, b), max(a, b))
        kappa = float(np.sqrt(k @ k))
        if prof.shape == "ball":
            return prof.amplitude * radial_quadrature(lambda r: np.ones_like(r), kappa, self.d, prof.scale)
        # integrate far past the edge cutoff so the oracle has no truncation bias
        far = gaussian_cutoff(prof.peak(self.d), prof.scale, eps=1e-300 * max(prof.peak(self.d), 1e-300))
        far = max(far, 40 * math.sqrt(prof.scale))
        return radial_quadrature(lambda r: prof.value(r * r, self.d), kappa, self.d, far,
                                 breaks=np.sqrt(prof.scale) * np.arange(1, 40))

    def profiles(self):
        nodes = self.marks.nodes
        return [self._profile(a, b) for a in nodes for b in nodes]

    @property
    def effective_range(self) -> float:
        return max(p.support(self.d) for p in self.profiles())

    def truncated_mass(self) -> float:
        return max(p.truncated_mass(self.d) for p in self.profiles())


class PoissonBlobKernel(_RadialKernel):
    """phi(x) = 1{|x| <= r_d}, r_d the radius of the unit-volume ball."""

    family = "poisson-blob"

    def __init__(self, d: int):
        super().__init__(d, MarkSpace.singleton())
        self.radius = unit_volume_radius(self.d)
        self._prof = RadialProfile("ball", self.radius)

    def _profile(self, a, b):
        return self._prof

    def to_spec(self):
        return {"family": self.family, "d": self.d}


class GaussianKernel(_RadialKernel):
    """phi(x) = (2 pi)^{-d/2} exp(-|x|^2/2), with transform exp(-|k|^2/2)."""

    family = "gaussian"

    def __init__(self, d: int):
        super().__init__(d, MarkSpace.singleton())
        if (2 * math.pi) ** (-self.d / 2) <= EDGE_EPSILON:
            raise KernelError("dimension too large for the edge cutoff")
        self._prof = RadialProfile("gaussian", 1.0)

    def _profile(self, a, b):
        return self._prof

    def to_spec(self):
        return {"family": self.family, "d": self.d}


class DoubleMarkKernel(_RadialKernel):
    """Two mark types 1 and 2 with probabilities p and 1 - p.

    Each of the pairs (1,1), (1,2), (2,2) carries its own radial profile.
    """

    family = "double-mark"

    def __init__(self, d: int, p: float, profiles: dict):
        if not 0 < p < 1:
            raise KernelError("double-mark probability must lie in (0, 1)")
        super().__init__(d, MarkSpace.finite([1.0, 2.0], [p, 1.0 - p]))
        self.p = float(p)
        self.pair_profiles = {}
        for key in ("11", "12", "22"):
            prof = profiles[key]
            if not isinstance(prof, RadialProfile):
                prof = RadialProfile(**prof)
            if prof.peak(self.d) > 1 + 1e-15:
                raise KernelError(f"profile {key} exceeds probability 1")
            self.pair_profiles[key] = prof

    def _profile(self, a, b):
        lo, hi = sorted((int(a), int(b)))
        return self.pair_profiles[f"{lo}{hi}"]

    def to_spec(self):
        return {"family": self.family, "d": self.d, "p": self.p,
                "profiles": {k: v.to_spec() for k, v in self.pair_profiles.items()}}


MARK_FUNCTIONS = {
    "product": lambda a, b: a * b,
    "min": np.minimum,
    "max": np.maximum,
    "geometric": lambda a, b: np.sqrt(a * b),
}


class FactorizedKernel(_RadialKernel):
    """phi(x; a, b) = phibar(x) K(a, b).

    ``mark_kernel`` is either a symmetric table over a finite mark space or
    the name of a symmetric function on an interval mark space.
    """

    family = "factorized"

    def __init__(self, d: int, profile: RadialProfile | dict, marks: MarkSpace, mark_kernel):
        super().__init__(d, marks)
        self.base = profile if isinstance(profile, RadialProfile) else RadialProfile(**profile)
        if self.base.peak(self.d) > 1 + 1e-15:
            raise KernelError("spatial profile exceeds probability 1")
        if isinstance(mark_kernel, str):
            if marks.kind != "interval" or mark_kernel not in MARK_FUNCTIONS:
                raise KernelError("named mark kernels need an interval mark space")
            self._table = None
        else:
            table = np.asarray(mark_kernel, dtype=float)
            n = len(marks.labels)
            if table.shape != (n, n):
                raise KernelError("mark kernel table must be square over the labels")
            if not np.array_equal(table, table.T):
                raise KernelError("mark kernel table must be symmetric")
            self._table = table
        self.mark_kernel = mark_kernel
        k = self.mark_values(marks.nodes[:, None], marks.nodes[None, :])
        if np.any(k < 0) or np.any(k > 1):
            raise KernelError("mark kernel values must lie in [0, 1]")

    def mark_values(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self._table is None:
            return MARK_FUNCTIONS[self.mark_kernel](a, b)
        return self._table[self.marks.index_of(a), self.marks.index_of(b)]

    def _value(self, x, a, b):
        return self.base.value(self._r2(x), self.d) * self.mark_values(a, b)

    def _fourier(self, k, a, b):
        return self.base.fourier(np.sqrt(self._r2(k)), self.d) * self.mark_values(a, b)

    def _fourier_quadrature(self, k, a, b):
        scalar = _SingleProfile(self.d, self.base)
        return scalar._fourier_quadrature(k, 0.0, 0.0) * float(self.mark_values(a, b))

    def profiles(self):
        return [self.base]

    def to_spec(self):
        mk = self.mark_kernel if isinstance(self.mark_kernel, str) else np.asarray(self.mark_kernel).tolist()
        return {"family": self.family, "d": self.d, "profile": self.base.to_spec(),
                "marks": self.marks.to_spec(), "mark_kernel": mk}


class _SingleProfile(_RadialKernel):
    def __init__(self, d, profile):
        super().__init__(d, MarkSpace.singleton())
        self._prof = profile

    def _profile(self, a, b):
        return self._prof


class BooleanDiscKernel(_RadialKernel):
    """phi(x; a, b) = 1{|x| <= R(a) + R(b)} with mark-dependent radii.

    Radii come either from an explicit table over a finite mark space or from
    a profile on an interval: ``linear`` interpolates between r_min and r_max,
    ``saturating`` reaches r_max at the interval midpoint.  When ``c1`` and
    ``v_max`` are given the bounds c1 sqrt(d) <= R <= V^{1/d} Gamma(d/2+1)^{1/d}
    / (2 sqrt(pi)) are enforced.
    """

    family = "boolean-disc"

    def __init__(self, d: int, marks: MarkSpace, radii=None, r_min=None, r_max=None,
                 profile: str = "linear", c1=None, v_max=None):
        super().__init__(d, marks)
        self.c1, self.v_max, self.profile_name = c1, v_max, profile
        lo_bound, hi_bound = 0.0, math.inf
        if c1 is not None:
            if not 0 < c1 < BOOLEAN_C1_LIMIT:
                raise KernelError("c1 must lie in (0, 1/sqrt(8 pi e))")
            lo_bound = c1 * math.sqrt(self.d)
        if v_max is not None:
            hi_bound = 0.5 / math.sqrt(math.pi) * v_max ** (1 / self.d) * math.gamma(self.d / 2 + 1) ** (1 / self.d)
        self.bounds = (lo_bound, hi_bound)
        if radii is not None:
            if marks.kind == "interval":
                raise KernelError("explicit radii need a finite mark space")
            self.radii_table = np.asarray(radii, dtype=float)
            if self.radii_table.shape != marks.labels.shape:
                raise KernelError("one radius per mark label is required")
            self.r_min, self.r_max = float(self.radii_table.min()), float(self.radii_table.max())
        else:
            self.radii_table = None
            self.r_min = lo_bound if r_min is None else float(r_min)
            self.r_max = hi_bound if r_max is None else float(r_max)
            if marks.kind != "interval":
                raise KernelError("radius profiles need an interval mark space")
            if profile not in ("linear", "saturating"):
                raise KernelError(f"unknown radius profile {profile!r}")
        if not (0 < self.r_min <= self.r_max < math.inf):
            raise KernelError("radii must satisfy 0 < r_min <= r_max < inf")
        if self.r_min < lo_bound - 1e-15 or self.r_max > hi_bound + 1e-15:
            raise KernelError("radii violate the configured radius bounds")

    def radius(self, a):
        a = np.asarray(a, dtype=float)
        if self.radii_table is not None:
            return self.radii_table[self.marks.index_of(a)]
        t = (a - self.marks.lower) / (self.marks.upper - self.marks.lower)
        if self.profile_name == "saturating":
            t = np.minimum(1.0, 2 * t)
        return self.r_min + (self.r_max - self.r_min) * t

    def _value(self, x, a, b):
        reach = self.radius(a) + self.radius(b)
        return np.where(self._r2(x) <= reach ** 2, 1.0, 0.0)

    def _fourier(self, k, a, b):
        reach = self.radius(a) + self.radius(b)
        return ball_fourier(np.sqrt(self._r2(k)), reach, self.d)

    def _profile(self, a, b):
        return RadialProfile("ball", float(self.radius(a) + self.radius(b)))

    @property
    def effective_range(self) -> float:
        return 2 * self.r_max

    def truncated_mass(self) -> float:
        return 0.0

    def to_spec(self):
        spec = {"family": self.family, "d": self.d, "marks": self.marks.to_spec(),
                "profile": self.profile_name}
        if self.radii_table is not None:
            spec["radii"] = self.radii_table.tolist()
        else:
            spec["r_min"], spec["r_max"] = self.r_min, self.r_max
        if self.c1 is not None:
            spec["c1"] = self.c1
        if self.v_max is not None:
            spec["v_max"] = self.v_max
        return spec


class MultivariateGaussianKernel(Kernel):
    """phi(x; a, b) = A (2 pi)^{-d/2} det(S)^{-1/2} exp(-x^T S^{-1} x / 2).

    S = S(a, b) = (a + b) diag(axis_scales).  The transform is
    A exp(-k^T S k / 2).
    """

    family = "multivariate-gaussian"

    def __init__(self, d: int, marks: MarkSpace | None = None, amplitude: float = 1.0, axis_scales=None):
        if marks is None:
            marks = MarkSpace.interval(1 / (4 * math.pi), 1.0)
        super().__init__(d, marks)
        self.amplitude = float(amplitude)
        self.axis_scales = np.ones(self.d) if axis_scales is None else np.asarray(axis_scales, dtype=float)
        if self.axis_scales.shape != (self.d,) or np.any(self.axis_scales <= 0):
            raise KernelError("axis scales must be positive, one per axis")
        self.lowest_mark = marks.lower if marks.kind == "interval" else float(marks.labels.min())
        highest = marks.upper if marks.kind == "interval" else float(marks.labels.max())
        if self.lowest_mark <= 0:
            raise KernelError("marks must be positive so that covariances are positive definite")
        self.sigma_min = 2 * self.lowest_mark * self.axis_scales.min()
        self.sigma_max = 2 * highest * self.axis_scales.max()
        if self.peak_value(self.lowest_mark, self.lowest_mark) > 1 + 1e-15:
            raise KernelError("amplitude too large: phi would exceed 1")

    def covariance_diagonal(self, a, b):
        s = np.asarray(a, dtype=float) + np.asarray(b, dtype=float)
        return s[..., None] * self.axis_scales

    def peak_value(self, a, b):
        diag = self.covariance_diagonal(a, b)
        return self.amplitude * (2 * math.pi) ** (-self.d / 2) / np.sqrt(np.prod(diag, axis=-1))

    def _value(self, x, a, b):
        diag = self.covariance_diagonal(a, b)
        q = np.sum(x * x / diag, axis=-1)
        return self.peak_value(a, b) * np.exp(-q / 2)

    def _fourier(self, k, a, b):
        diag = self.covariance_diagonal(a, b)
        return self.amplitude * np.exp(-np.sum(k * k * diag, axis=-1) / 2)

    def _fourier_quadrature(self, k, a, b):
        diag = self.covariance_diagonal(a, b)
        total = self.amplitude
        for ki, s in zip(k, diag):
            half = 40 * math.sqrt(s)
            g = lambda t, s=s, ki=ki: math.cos(ki * t) * math.exp(-t * t / (2 * s)) / math.sqrt(2 * math.pi * s)
            val, err = integrate.quad(g, -half, half, limit=500, epsabs=1e-15, epsrel=1e-13)
            if err > 1e-9 * max(abs(val), 1e-300) + 1e-13:
                raise QuadratureError("axis quadrature did not converge", err)
            total *= val
        return total

    @property
    def effective_range(self) -> float:
        peak = float(self.peak_value(self.lowest_mark, self.lowest_mark))
        return gaussian_cutoff(peak, self.sigma_max)

    def truncated_mass(self) -> float:
        r = self.effective_range
        return float(self.amplitude * special.gammaincc(self.d / 2, r * r / (2 * self.sigma_max)))

    def to_spec(self):
        return {"family": self.family, "d": self.d, "marks": self.marks.to_spec(),
                "amplitude": self.amplitude, "axis_scales": self.axis_scales.tolist()}


FAMILIES = ("poisson-blob", "gaussian", "double-mark", "factorized", "multivariate-gaussian", "boolean-disc")


def make_kernel(spec: dict[str, Any]) -> Kernel:
    """Build a kernel from a plain dictionary (the run-config format)."""
    spec = dict(spec)
    family = spec.pop("family", None)
    if family not in FAMILIES:
        raise KernelError(f"unknown kernel family {family!r}")
    d = spec.pop("d", None)
    if d is None:
        raise KernelError("kernel spec needs a dimension 'd'")
    if family == "poisson-blob":
        return PoissonBlobKernel(d)
    if family == "gaussian":
        return GaussianKernel(d)
    if family == "double-mark":
        return DoubleMarkKernel(d, spec["p"], spec["profiles"])
    marks = MarkSpace.from_spec(spec.pop("marks")) if "marks" in spec else None
    if family == "factorized":
        return FactorizedKernel(d, spec["profile"], marks, spec["mark_kernel"])
    if family == "multivariate-gaussian":
        return MultivariateGaussianKernel(d, marks, spec.get("amplitude", 1.0), spec.get("axis_scales"))
    return BooleanDiscKernel(d, marks, radii=spec.get("radii"), r_min=spec.get("r_min"),
                             r_max=spec.get("r_max"), profile=spec.get("profile", "linear"),
                             c1=spec.get("c1"), v_max=spec.get("v_max"))


# ----------------------------------------------------------------------------
# module-level operations


def evaluate(kernel: Kernel, displacement, a=None, b=None):
    return kernel.evaluate(displacement, a, b)


def fourier(kernel: Kernel, k, a=None, b=None, method: str = "analytic") -> FourierValue:
    """Fourier transform at a single wave vector.

    ``method='analytic'`` uses the closed form each family provides;
    ``method='radial-quadrature'`` integrates numerically.
    """
    k = np.asarray(k, dtype=float)
    if method == "analytic":
        value = float(kernel.fourier(k, a, b))
    elif method == "radial-quadrature":
        value = kernel.fourier_quadrature(k, a, b)
    else:
        raise KernelError(f"unknown Fourier method {method!r}")
    return FourierValue(tuple(k.tolist()), value, method)


def fourier_displacement(kernel: Kernel, k, l, a=None, b=None):
    """phi_hat(l + k) - phi_hat(l).

    This equals -int cos(l.x)(1 - cos(k.x)) phi - int sin(l.x) sin(k.x) phi;
    see ``displaced_fourier`` for the (1 - cos)-weighted transform.
    """
    k = np.asarray(k, dtype=float)
    l = np.asarray(l, dtype=float)
    return kernel.fourier(l + k, a, b) - kernel.fourier(l, a, b)


def displaced_fourier(kernel: Kernel, k, l, a=None, b=None):
    """Transform at l of (1 - cos(k.x)) phi(x), i.e. phi_hat(l) - (phi_hat(l+k) + phi_hat(l-k))/2.

    At l = 0 this is -fourier_displacement(kernel, k, 0); in general the two
    differ by the odd part sin(l.x) sin(k.x), which integrates to zero only
    at l = 0.
    """
    k = np.asarray(k, dtype=float)
    l = np.asarray(l, dtype=float)
    return kernel.fourier(l, a, b) - 0.5 * (kernel.fourier(l + k, a, b) + kernel.fourier(l - k, a, b))
