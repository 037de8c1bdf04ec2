"""Command line runner: JSON run configs, one subcommand per diagnostic, manifests and mergeable outputs.

Usage: ``rcmlab SUBCOMMAND --config run.json [--seed N] [--threads N] [--out DIR]``
and ``rcmlab merge FILE.json FILE.json ... --out DIR``.

Exit codes: 0 success, 2 unreadable or invalid config, 3 precondition
violation, 4 internal invariant breach.  Every failure prints one JSON
object to stderr.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, estimators, graphops, spectral
from .estimators import BinSpec, TauField
from .kernels import make_kernel
from .sampler import BoxGeometry, augment, build_graph, dump_graph, sample_ppp
from .streams import StreamFactory

SUBCOMMANDS = ("sample", "tau-field", "triangle", "pi0", "spectrum", "assumptions", "bootstrap", "oze-check",
               "infrared", "scan-critical", "selftest")
THREADS_ENV = "RCMLAB_THREADS"

EXIT_OK, EXIT_PARSE, EXIT_PRECONDITION, EXIT_INVARIANT = 0, 2, 3, 4

TOP_KEYS = {"kernel", "box", "lambda", "lambda_grid", "replicates", "replica_start", "bins", "seed", "out",
            "threads", "features", "options"}
BOX_KEYS = {"L", "metric"}
BIN_KEYS = {"spacing", "mark_nodes", "batches"}
FEATURE_KEYS = {"pi1", "free_boundary", "dump_replicas"}
OPTION_KEYS = {"displacement", "size_cutoff", "box_sizes", "rule", "dims", "k_points", "l_points", "w_k",
               "pi0_replicates", "chi_replicates", "chi_limit", "beta", "graphs_per_size", "max_vertices",
               "operators", "k_per_axis"}
HASH_EXCLUDED = ("replicates", "replica_start", "out", "threads")


class ConfigError(ValueError):
    pass


class InvariantBreach(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# run config


@dataclass
class RunConfig:
    kernel: dict | None
    box: dict
    seed: int
    lam: float | None = None
    lam_grid: list | None = None
    replicates: int = 1000
    replica_start: int = 0
    bins: dict = field(default_factory=dict)
    out: str = "rcmlab-out"
    threads: int | None = None
    features: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"kernel": self.kernel, "box": self.box, "seed": self.seed, "replicates": self.replicates,
               "replica_start": self.replica_start, "bins": self.bins, "out": self.out,
               "features": self.features, "options": self.options}
        if self.lam is not None:
            out["lambda"] = self.lam
        if self.lam_grid is not None:
            out["lambda_grid"] = self.lam_grid
        if self.threads is not None:
            out["threads"] = self.threads
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        _known(raw, TOP_KEYS, "config")
        if "seed" not in raw:
            raise ConfigError("config needs a seed")
        seed = raw["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        box = dict(raw.get("box", {}))
        _known(box, BOX_KEYS, "box")
        bins = dict(raw.get("bins", {}))
        _known(bins, BIN_KEYS, "bins")
        features = dict(raw.get("features", {}))
        _known(features, FEATURE_KEYS, "features")
        options = dict(raw.get("options", {}))
        _known(options, OPTION_KEYS, "options")
        cfg = cls(kernel=raw.get("kernel"), box=box, seed=seed, lam=raw.get("lambda"),
                  lam_grid=raw.get("lambda_grid"), replicates=raw.get("replicates", 1000),
                  replica_start=raw.get("replica_start", 0), bins=bins, out=raw.get("out", "rcmlab-out"),
                  threads=raw.get("threads"), features=features, options=options)
        cfg.validate()
        return cfg

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def validate(self):
        for name in ("replicates", "replica_start"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an integer")
        if self.replicates < 1:
            raise ConfigError("replicates must be positive")
        if self.replica_start < 0:
            raise ConfigError("replica_start must be nonnegative")
        if self.threads is not None and (not isinstance(self.threads, int) or self.threads < 1):
            raise ConfigError("threads must be a positive integer")
        if self.lam is not None and not (_number(self.lam) and self.lam >= 0):
            raise ConfigError("lambda must be a nonnegative number")
        if self.lam_grid is not None:
            if not isinstance(self.lam_grid, list) or not self.lam_grid or not all(
                    _number(v) and v >= 0 for v in self.lam_grid):
                raise ConfigError("lambda_grid must be a nonempty list of nonnegative numbers")
        if "L" in self.box and not (_number(self.box["L"]) and self.box["L"] > 0):
            raise ConfigError("box.L must be positive")
        if self.box.get("metric", "torus") not in ("torus", "free"):
            raise ConfigError("box.metric must be 'torus' or 'free'")
        for name in ("mark_nodes", "batches"):
            if name in self.bins and (not isinstance(self.bins[name], int) or self.bins[name] < 1):
                raise ConfigError(f"bins.{name} must be a positive integer")
        if self.bins.get("spacing") is not None and not (_number(self.bins["spacing"]) and self.bins["spacing"] > 0):
            raise ConfigError("bins.spacing must be positive")
        for name, v in self.options.items():
            if name.endswith("replicates") or name in ("k_points", "l_points", "size_cutoff", "graphs_per_size",
                                                       "max_vertices", "operators", "k_per_axis"):
                if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                    raise ConfigError(f"options.{name} must be a positive integer")
        for name, v in self.features.items():
            if not isinstance(v, bool):
                raise ConfigError(f"features.{name} must be true or false")
        if self.kernel is not None:
            try:
                make_kernel(self.kernel)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid kernel: {exc}") from None

    def config_hash(self) -> str:
        """sha256 of the canonical config without the replica range, output path and thread count."""
        dct = {k: v for k, v in self.to_dict().items() if k not in HASH_EXCLUDED}
        return hashlib.sha256(json.dumps(dct, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    # accessors ---------------------------------------------------------------
    def make_kernel(self):
        if self.kernel is None:
            raise estimators.EstimatorError("this subcommand needs a kernel")
        return make_kernel(self.kernel)

    def make_box(self, kernel):
        if "L" not in self.box:
            raise estimators.EstimatorError("this subcommand needs box.L")
        metric = "free" if self.features.get("free_boundary") else self.box.get("metric", "torus")
        return BoxGeometry(kernel.d, float(self.box["L"]), metric)

    def bin_spec(self) -> BinSpec:
        return BinSpec(self.bins.get("spacing"), self.bins.get("mark_nodes", 4),
                       self.bins.get("batches", estimators.DEFAULT_BATCHES))

    def intensity(self) -> float:
        if self.lam is None:
            raise estimators.EstimatorError("this subcommand needs lambda")
        return float(self.lam)


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _known(dct, allowed, where):
    unknown = sorted(set(dct) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")


def derive_seed(seed: int, tag: str) -> int:
    """Independent sub-seed for a second estimate in the same run."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:7], "little")


# ----------------------------------------------------------------------------
# output helpers


def clean(obj):
    """JSON-safe copy: numpy scalars and arrays to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def write_json(path: str, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(clean(obj), sort_keys=True, indent=2))
        fh.write("\n")


def coalesce(ranges) -> list:
    out = []
    for lo, hi in sorted((int(a), int(b)) for a, b in ranges):
        if out and out[-1][1] == lo:
            out[-1][1] = hi
        else:
            out.append([lo, hi])
    return out


def _site_header(d):
    return [f"site_{i}" for i in range(d)] + [f"x_{i}" for i in range(d)]


def write_field(directory: str, fld: TauField, config_hash: str) -> dict:
    """<kind>_field.csv (totals and estimates), <kind>_field_batches.csv (nonzero batch counts), <kind>_field.json."""
    stem = f"{fld.kind}_field"
    est, err, succ = fld.estimate(), fld.stderr(), fld.total_successes()
    trials = fld.total_trials()
    sites = fld.sites()
    with open(os.path.join(directory, f"{stem}.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a_index", "b_index", "a_mark", "b_mark"] + _site_header(fld.d)
                   + ["trials", "successes", "estimate", "stderr"])
        for a in range(fld.m):
            for b in range(fld.m):
                for s in sites:
                    idx = (a, b) + tuple(int(c) % fld.n for c in s)
                    w.writerow([a, b, repr(float(fld.nodes[a])), repr(float(fld.nodes[b]))] + list(s)
                               + [repr(float(c * fld.h)) for c in s]
                               + [trials, int(succ[idx]), repr(float(est[idx])), repr(float(err[idx]))])
    with open(os.path.join(directory, f"{stem}_batches.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch", "a_index", "b_index"] + [f"site_{i}" for i in range(fld.d)] + ["successes"])
        cidx = estimators.centered_indices(fld.n)
        for idx in zip(*np.nonzero(fld.successes)):
            w.writerow([int(idx[0]), int(idx[1]), int(idx[2])] + [int(cidx[i]) for i in idx[3:]]
                       + [int(fld.successes[idx])])
    meta = {"schema": spectral.SCHEMA_VERSION, "kind": fld.kind, "lambda": fld.lam, "d": fld.d, "L": fld.L,
            "n": fld.n, "h": fld.h, "nodes": fld.nodes, "weights": fld.weights, "batches": fld.batches,
            "trials": fld.trials, "seed": fld.seed, "replica_ranges": coalesce(fld.replica_ranges),
            "config_hash": config_hash, "files": [f"{stem}.csv", f"{stem}_batches.csv"]}
    write_json(os.path.join(directory, f"{stem}.json"), meta)
    return meta


def read_field(json_path: str) -> tuple[TauField, dict]:
    with open(json_path) as fh:
        meta = json.load(fh)
    d, n, m = meta["d"], meta["n"], len(meta["nodes"])
    succ = np.zeros((meta["batches"], m, m) + (n,) * d, dtype=np.int64)
    batches = os.path.join(os.path.dirname(json_path), f"{meta['kind']}_field_batches.csv")
    with open(batches) as fh:
        for row in csv.DictReader(fh):
            idx = (int(row["batch"]), int(row["a_index"]), int(row["b_index"])) + tuple(
                int(row[f"site_{i}"]) % n for i in range(d))
            succ[idx] = int(row["successes"])
    fld = TauField(float(meta["lambda"]), d, float(meta["L"]), n, float(meta["h"]),
                   np.asarray(meta["nodes"], float), np.asarray(meta["weights"], float), succ,
                   np.asarray(meta["trials"], dtype=np.int64), meta["kind"], int(meta["seed"]),
                   [tuple(r) for r in meta["replica_ranges"]])
    return fld, meta


# ----------------------------------------------------------------------------
# subcommands; each returns a summary dict for the manifest


def _threads(cfg):
    return cfg.threads or 1


def _tau(cfg, kernel, box, lam=None, seed=None, replicates=None):
    lam = cfg.intensity() if lam is None else lam
    return estimators.estimate_tau_field(lam, kernel, box, cfg.bin_spec(), replicates or cfg.replicates,
                                         cfg.seed if seed is None else seed, cfg.replica_start, _threads(cfg))


def _pi0(cfg, kernel, box):
    reps = cfg.options.get("pi0_replicates", cfg.replicates)
    return estimators.estimate_pi0_field(cfg.intensity(), kernel, box, cfg.bin_spec(), reps,
                                         derive_seed(cfg.seed, "pi0"), cfg.replica_start, _threads(cfg))


def phi_check(fld: TauField, kernel, sigmas: float = 4.0) -> dict:
    """Per-bin z scores of the field against phi on the lattice (the identity at intensity zero)."""
    phi = estimators.kernel_on_lattice(kernel, fld.d, fld.n, fld.h, fld.nodes)
    z = np.abs(fld.regular() - phi) / fld.stderr()
    return {"bins": int(z.size), "max_abs_z": float(z.max()), "bins_beyond": int(np.count_nonzero(z > sigmas)),
            "sigmas": sigmas, "min_trials": fld.total_trials(), "matches": bool(np.all(z <= sigmas))}


def cmd_sample(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    box = cfg.make_box(kernel)
    lam = cfg.intensity()
    streams = StreamFactory(cfg.seed)
    rows = []
    last = cfg.replica_start + (cfg.replicates if cfg.features.get("dump_replicas") else 1)
    for r in range(cfg.replica_start, last):
        eta = sample_ppp(lam, box, kernel.marks, streams.generator(r))
        cfg_pts = augment(eta, [(box.center, float(kernel.marks.nodes[0]))], box, ids=[0])
        g = build_graph(cfg_pts, kernel, box, streams.key(r))
        part = graphops.clusters(g)
        rows.append({"replica": r, "points": g.n, "edges": int(len(g.edges)), "clusters": part.count,
                     "largest_cluster": int(part.size.max()) if g.n else 0,
                     "origin_cluster": part.cluster_size(0)})
        if r == cfg.replica_start:
            dump_graph(g, out, "sample")
        if cfg.features.get("dump_replicas"):
            dump_graph(g, os.path.join(out, "replicas"), f"replica_{r}")
    write_json(os.path.join(out, "sample.json"), {"schema": spectral.SCHEMA_VERSION, "lambda": lam,
                                                  "config_hash": cfg_hash, "replicas": rows,
                                                  "note": "augmented origin at the box centre is point 0"})
    return {"sample": rows[0]}


def cmd_tau_field(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    box = cfg.make_box(kernel)
    fld = _tau(cfg, kernel, box)
    write_field(out, fld, cfg_hash)
    summary = {"trials": fld.total_trials(), "bins": int(fld.successes[0].size)}
    if fld.lam == 0:
        check = phi_check(fld, kernel)
        write_json(os.path.join(out, "tau_check.json"), {"schema": spectral.SCHEMA_VERSION,
                                                         "config_hash": cfg_hash, "phi_check": check})
        summary["phi_check"] = check
        if not check["matches"]:
            raise InvariantBreach(f"intensity-zero field departs from phi: {check}")
    return summary


def cmd_triangle(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    box = cfg.make_box(kernel)
    fld = _tau(cfg, kernel, box)
    write_field(out, fld, cfg_hash)
    rep = estimators.estimate_triangle(fld)
    if "w_k" in cfg.options:
        rep.w_k = estimators.estimate_w_k(fld, cfg.options["w_k"])
    vals = [rep.triangle.value, rep.triangle_open.value, rep.triangle_open2.value, rep.triangle_decoupled.value]
    ordered = all(x <= y for x, y in zip(vals, vals[1:]))
    dct = rep.to_dict()
    dct.update(schema=spectral.SCHEMA_VERSION, config_hash=cfg_hash, ordering_holds=ordered)
    write_json(os.path.join(out, "triangle.json"), dct)
    if not ordered:
        raise InvariantBreach(f"diagram ordering violated: {vals}")
    return {"triangle": rep.triangle.to_dict(), "ordering_holds": ordered}


def pi0_bound_check(lam, tau_fld, pi_fld, kernel, sigmas: float = 4.0) -> dict:
    """Per bin: -4 sigma <= pi0 <= lam^2/2 (tau * phi)^2 + 4 sigma."""
    pi = estimators.pi0_values(pi_fld, kernel)
    pi_err = pi_fld.stderr()
    upper_fn = lambda f: 0.5 * lam * lam * estimators.kernel_convolution(f, kernel) ** 2
    upper, upper_err = estimators.jackknife(upper_fn, tau_fld)
    if not np.all(np.isfinite(upper_err)):
        upper_err = np.zeros_like(upper)
    low_z = (-pi) / pi_err
    high_z = (pi - upper) / np.sqrt(pi_err ** 2 + upper_err ** 2)
    return {"bins": int(pi.size), "sigmas": sigmas, "max_below_zero_z": float(low_z.max()),
            "max_above_bound_z": float(high_z.max()), "lower_violations": int(np.count_nonzero(low_z > sigmas)),
            "upper_violations": int(np.count_nonzero(high_z > sigmas)), "pi0_max": float(pi.max()),
            "pi0_min": float(pi.min()), "bound_max": float(upper.max()),
            "holds": bool(np.all(low_z <= sigmas) and np.all(high_z <= sigmas))}


def cmd_pi0(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    box = cfg.make_box(kernel)
    lam = cfg.intensity()
    tau_fld = _tau(cfg, kernel, box)
    pi_fld = _pi0(cfg, kernel, box)
    write_field(out, tau_fld, cfg_hash)
    check = pi0_bound_check(lam, tau_fld, pi_fld, kernel)
    write_field(out, pi_fld, cfg_hash)
    report = {"schema": spectral.SCHEMA_VERSION, "lambda": lam, "config_hash": cfg_hash, "bound_check": check}
    if cfg.features.get("pi1"):
        disp = cfg.options.get("displacement", [kernel.effective_range / 4] + [0.0] * (kernel.d - 1))
        report["pi1"] = {"displacement": disp, **estimators.estimate_pi1(
            lam, kernel, disp, box=box, replicates=cfg.replicates, seed=derive_seed(cfg.seed, "pi1"),
            replica_offset=cfg.replica_start, threads=_threads(cfg)).to_dict()}
    write_json(os.path.join(out, "pi0.json"), report)
    return {"bound_check": check}


def _k_grid(cfg, kernel, default_points):
    return spectral.radial_k_grid(kernel, points=cfg.options.get("k_points", default_points))


def cmd_spectrum(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    grid = _k_grid(cfg, kernel, 40)
    rows = []
    for k in grid:
        op = spectral.discretize(kernel, k)
        sizes = spectral.size_measures(op)
        rows.append({"k": k.tolist(), **sizes})
        chain = sizes["sup_spec"] <= sizes["op_norm"] + 1e-12 and sizes["op_norm"] <= sizes["one_inf"] + 1e-12
        if not chain:
            raise InvariantBreach(f"norm chain violated at k={k.tolist()}: {sizes}")
    with open(os.path.join(out, "spectrum.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        names = sorted(rows[0].keys() - {"k"})
        w.writerow([f"k_{i}" for i in range(kernel.d)] + names)
        for r in rows:
            w.writerow([repr(float(v)) for v in r["k"]] + [repr(float(r[n])) for n in names])
    spectral.discretize(kernel, np.zeros(kernel.d)).to_csv(os.path.join(out, "operator_k0.csv"))
    report = {"schema": spectral.SCHEMA_VERSION, "config_hash": cfg_hash, "rows": rows,
              "normalizing_constant": spectral.normalizing_constant(kernel)}
    try:
        report["union_check"] = spectral.spectrum_union_check(kernel, grid)
    except spectral.SpectralError as exc:
        report["union_check"] = {"skipped": str(exc)}
    write_json(os.path.join(out, "spectrum.json"), report)
    return {"points": len(rows), "normalizing_constant": report["normalizing_constant"]}


def _factory(cfg):
    base = dict(cfg.kernel)

    def build(d):
        spec = copy.deepcopy(base)
        spec["d"] = int(d)
        return make_kernel(spec)
    return build


def cmd_assumptions(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    dims = cfg.options.get("dims")
    k_grid = _k_grid(cfg, kernel, 40) if "k_points" in cfg.options else None
    rep = spectral.check_assumptions(kernel, k_grid, cfg.options.get("rule", "fixed-point"),
                                     _factory(cfg) if dims else None, dims)
    dct = rep.to_dict()
    dct["config_hash"] = cfg_hash
    write_json(os.path.join(out, "assumptions.json"), dct)
    return {"C": rep.C, "C1": rep.C1, "C2": rep.C2, "g": rep.g, "beta_branch": rep.beta_branch,
            "passes": rep.passes}


def _axis_grid(d, points, span):
    mags = np.concatenate([[0.0], np.geomspace(span[0], span[1], points - 1)])
    return mags[:, None] * np.eye(d)[0][None, :]


def cmd_bootstrap(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    lam = cfg.intensity()
    fld = None
    if lam > 0:
        fld = _tau(cfg, kernel, cfg.make_box(kernel))
        write_field(out, fld, cfg_hash)
        k_grid = spectral.lattice_k_grid(fld, cfg.options.get("k_per_axis", 2))
        l_grid = k_grid
    else:
        k_grid = _axis_grid(kernel.d, cfg.options.get("k_points", 30), (0.05, 10.0))
        l_grid = _axis_grid(kernel.d, cfg.options.get("l_points", 12), (0.05, 10.0))
    rep = spectral.bootstrap_f(lam, kernel, k_grid, l_grid, fld)
    ratio = spectral.check_h1(kernel)
    dct = rep.to_dict()
    dct.update(config_hash=cfg_hash, C=ratio.C, f2_within_C=bool(rep.f2 <= ratio.C + 1e-8),
               f3_within_two_thirds_C=bool(rep.f3 <= 2 * ratio.C / 3 + 1e-8))
    write_json(os.path.join(out, "bootstrap.json"), dct)
    return {"f1": rep.f1, "f2": rep.f2, "f3": rep.f3, "C": ratio.C}


def cmd_oze_check(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    box = cfg.make_box(kernel)
    lam = cfg.intensity()
    chi = estimators.estimate_chi(lam, kernel, box=box, replicates=cfg.options.get("chi_replicates", 2000),
                                  seed=derive_seed(cfg.seed, "chi"), threads=_threads(cfg))
    limit = cfg.options.get("chi_limit", 10.0)
    subcritical = bool(np.isfinite(chi.value) and chi.value + 4 * chi.stderr < limit)
    tau_fld = _tau(cfg, kernel, box)
    pi_fld = _pi0(cfg, kernel, box)
    write_field(out, tau_fld, cfg_hash)
    write_field(out, pi_fld, cfg_hash)
    res = spectral.oze_residual(lam, tau_fld, pi_fld, kernel)
    res.update(config_hash=cfg_hash, chi=chi.to_dict(), chi_limit=limit, subcritical=subcritical)
    write_json(os.path.join(out, "oze.json"), res)
    return {"bound_holds": res["bound_holds"], "residual_at_zero": res["residual_at_zero"], "bound": res["bound"],
            "subcritical": subcritical}


def cmd_infrared(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    box = cfg.make_box(kernel)
    lam = cfg.intensity()
    fld = _tau(cfg, kernel, box)
    write_field(out, fld, cfg_hash)
    C = spectral.check_h1(kernel).C
    if "beta" in cfg.options:
        beta, source = float(cfg.options["beta"]), "config"
    else:
        triple = spectral.check_h3(kernel, lattice_check=False)
        beta, source = float(triple.g ** 0.25), "g^(1/4) at the kernel dimension"
    rep = spectral.infrared_report(lam, fld, kernel, beta, C, spectral.lattice_k_grid(
        fld, cfg.options.get("k_per_axis", 4)))
    rep.update(config_hash=cfg_hash, beta_source=source)
    write_json(os.path.join(out, "infrared.json"), rep)
    return {"diagnostic_only": True, "rows": len(rep["rows"]),
            "satisfied": sum(r["satisfied"] for r in rep["rows"])}


def _scan_grid(cfg):
    if cfg.lam_grid is None:
        raise estimators.EstimatorError("scan-critical needs lambda_grid")
    return [float(v) for v in cfg.lam_grid]


def write_scan(out, lams, counts_by_L, cfg_hash, seed, ranges):
    write_json(os.path.join(out, "scan_counts.json"), {
        "schema": spectral.SCHEMA_VERSION, "kind": "scan", "config_hash": cfg_hash, "seed": seed,
        "lambda_grid": lams, "replica_ranges": coalesce(ranges), "boxes": [c.to_dict() for c in counts_by_L]})
    boxes = [estimators.summarize_scan(lams, c, seed) for c in counts_by_L]
    write_json(os.path.join(out, "scan.json"), {"schema": spectral.SCHEMA_VERSION, "config_hash": cfg_hash,
                                                "lambda_grid": lams, "boxes": boxes})
    return boxes


def cmd_scan_critical(cfg, out, cfg_hash):
    kernel = cfg.make_kernel()
    lams = _scan_grid(cfg)
    sizes = cfg.options.get("box_sizes") or [cfg.box["L"]]
    metric = cfg.make_box(kernel).metric if "L" in cfg.box else cfg.box.get("metric", "torus")
    counts = [estimators.scan_counts(kernel, lams, float(L), cfg.replicates, cfg.seed, cfg.replica_start,
                                     _threads(cfg), cfg.bins.get("mark_nodes", 4),
                                     cfg.options.get("size_cutoff", 100), metric) for L in sizes]
    boxes = write_scan(out, lams, counts, cfg_hash, cfg.seed,
                       [(cfg.replica_start, cfg.replica_start + cfg.replicates)])
    return {"boxes": [{"L": b["L"], "lambda_T_one_proxy": b["lambda_T_one_proxy"]["value"],
                       "lambda_T_inf_proxy": b["lambda_T_inf_proxy"]["value"],
                       "ordering_holds": b["ordering_holds"]} for b in boxes]}


def double_connection_audit(max_vertices: int = 7, graphs_per_size: int = 200, seed: int = 0) -> dict:
    """doubly_connected against the disjoint-path oracle and the empty-pivotal-set characterisation."""
    rng = np.random.default_rng(seed)
    checked = mismatches = 0
    for n in range(2, max_vertices + 1):
        pairs = list(itertools.combinations(range(n), 2))
        for _ in range(graphs_per_size):
            keep = rng.random(len(pairs)) < rng.random()
            edges = [p for p, k in zip(pairs, keep) if k]
            g = graphops.graph_from_edges(n, edges)
            for s, t in pairs:
                fast = graphops.doubly_connected(g, s, t)
                paths = graphops.disjoint_path_count(n, edges, s, t)
                direct = g.has_edge(s, t)
                oracle = direct or paths >= 2
                if graphops.connected(g, s, t):
                    pivot = direct or not graphops.pivotal_vertices(g, s, t)
                else:
                    pivot = False
                checked += 1
                mismatches += not (fast == oracle == pivot)
    return {"pairs_checked": checked, "mismatches": mismatches, "max_vertices": max_vertices,
            "graphs_per_size": graphs_per_size}


def norm_chain_audit(count: int = 200, seed: int = 0, tol: float = 1e-12) -> dict:
    """|S(H)| <= ||H|| <= |||H|||_{1,inf} on random symmetric mark operators with random weights."""
    rng = np.random.default_rng(seed)
    violations = 0
    worst = -np.inf
    for _ in range(count):
        m = int(rng.integers(1, 9))
        w = rng.dirichlet(np.ones(m))
        a = rng.normal(size=(m, m))
        op = spectral.MarkOperator(rng.normal(size=m), w, (a + a.T) / 2)
        s, nrm, one = abs(spectral.sup_spec(op)), spectral.op_norm(op), spectral.one_inf(op)
        gap = max(s - nrm, nrm - one)
        worst = max(worst, gap)
        violations += gap > tol
    return {"operators": count, "violations": violations, "worst_gap": float(worst), "tolerance": tol}


def cmd_selftest(cfg, out, cfg_hash):
    seed = cfg.seed if cfg else 0
    opts = cfg.options if cfg else {}
    graphs = double_connection_audit(opts.get("max_vertices", 7), opts.get("graphs_per_size", 200), seed)
    norms = norm_chain_audit(opts.get("operators", 200), seed)
    passed = graphs["mismatches"] == 0 and norms["violations"] == 0
    write_json(os.path.join(out, "selftest.json"), {"schema": spectral.SCHEMA_VERSION, "double_connection": graphs,
                                                    "norm_chain": norms, "passed": passed})
    if not passed:
        raise InvariantBreach(f"selftest failed: {graphs}, {norms}")
    return {"double_connection": graphs, "norm_chain": norms}


COMMANDS = {"sample": cmd_sample, "tau-field": cmd_tau_field, "triangle": cmd_triangle, "pi0": cmd_pi0,
            "spectrum": cmd_spectrum, "assumptions": cmd_assumptions, "bootstrap": cmd_bootstrap,
            "oze-check": cmd_oze_check, "infrared": cmd_infrared, "scan-critical": cmd_scan_critical,
            "selftest": cmd_selftest}


# ----------------------------------------------------------------------------
# merge


def _load_result(path):
    with open(path) as fh:
        meta = json.load(fh)
    if "config_hash" not in meta or "kind" not in meta:
        raise estimators.EstimatorError(f"{path} is not a mergeable result file")
    return meta


def merge_files(paths, out) -> dict:
    """Sum integer accumulators of result files sharing a config hash over disjoint replica ranges."""
    if len(paths) < 2:
        raise estimators.EstimatorError("merge needs at least two files")
    real = [os.path.realpath(p) for p in paths]
    if len(set(real)) != len(real):
        raise estimators.EstimatorError("a file can not be merged with itself")
    metas = [_load_result(p) for p in paths]
    hashes = {m["config_hash"] for m in metas}
    if len(hashes) != 1:
        raise estimators.EstimatorError(f"config hashes differ: {sorted(hashes)}")
    kinds = {m["kind"] for m in metas}
    if len(kinds) != 1:
        raise estimators.EstimatorError(f"result kinds differ: {sorted(kinds)}")
    ranges = sorted(tuple(r) for m in metas for r in m["replica_ranges"])
    for (a0, a1), (b0, b1) in zip(ranges[:-1], ranges[1:]):
        if b0 < a1:
            raise estimators.EstimatorError("replica ranges overlap")
    cfg_hash, kind = hashes.pop(), kinds.pop()
    os.makedirs(out, exist_ok=True)
    order = sorted(range(len(paths)), key=lambda i: sorted(tuple(r) for r in metas[i]["replica_ranges"]))
    if kind == "scan":
        grids = {json.dumps(m["lambda_grid"]) for m in metas}
        if len(grids) != 1:
            raise estimators.EstimatorError("intensity grids differ")
        per_file = [[estimators.ScanCounts.from_dict(b) for b in metas[i]["boxes"]] for i in order]
        merged = per_file[0]
        for other in per_file[1:]:
            if len(other) != len(merged):
                raise estimators.EstimatorError("box lists differ")
            merged = [x.merge(y) for x, y in zip(merged, other)]
        write_scan(out, metas[0]["lambda_grid"], merged, cfg_hash, metas[0]["seed"], ranges)
        return {"kind": kind, "files": len(paths), "replica_ranges": coalesce(ranges)}
    fields = [read_field(paths[i])[0] for i in order]
    merged = fields[0]
    for other in fields[1:]:
        merged = merged.merge(other)
    write_field(out, merged, cfg_hash)
    return {"kind": kind, "files": len(paths), "replica_ranges": coalesce(merged.replica_ranges),
            "trials": merged.total_trials()}


# ----------------------------------------------------------------------------
# entry point


def _fail(code, exc, out=None, manifest=None):
    err = {"exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    if out is not None and manifest is not None:
        write_json(os.path.join(out, "error.json"), err)
        manifest.update(status="failed", exit_code=code, error=err)
        write_json(os.path.join(out, "manifest.json"), manifest)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcmlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "selftest")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out")
    p = sub.add_parser("merge")
    p.add_argument("files", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def parse_config(args) -> RunConfig | None:
    if args.command == "selftest" and not args.config:
        return None
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"can not read config: {exc}") from None
    cfg = RunConfig.loads(text)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be nonnegative")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def resolve_threads(flag, cfg) -> int:
    if flag is not None:
        if flag < 1:
            raise ConfigError("threads must be positive")
        return flag
    if cfg is not None and cfg.threads is not None:
        return cfg.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            v = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
        if v < 1:
            raise ConfigError(f"{THREADS_ENV} must be positive")
        return v
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            return 0
        return _fail(EXIT_PARSE, ConfigError("invalid command line"))
    if args.command == "merge":
        started = time.time()
        manifest = {"schema": spectral.SCHEMA_VERSION, "tool_version": __version__, "subcommand": "merge",
                    "inputs": sorted(args.files)}
        try:
            summary = merge_files(args.files, args.out)
        except (ValueError, OSError, KeyError) as exc:
            out = args.out if os.path.isdir(args.out) else None
            return _fail(EXIT_PRECONDITION, exc, out, manifest)
        manifest.update(status="ok", exit_code=0, summaries=summary, wall_clock_seconds=time.time() - started)
        write_json(os.path.join(args.out, "manifest.json"), manifest)
        return EXIT_OK

    try:
        cfg = parse_config(args)
        threads = resolve_threads(args.threads, cfg)
    except ConfigError as exc:
        return _fail(EXIT_PARSE, exc)
    out = args.out or (cfg.out if cfg else "rcmlab-selftest")
    cfg_hash = cfg.config_hash() if cfg else None
    started = time.time()
    manifest = {"schema": spectral.SCHEMA_VERSION, "tool_version": __version__, "subcommand": args.command,
                "config_hash": cfg_hash, "seed": cfg.seed if cfg else 0, "threads": threads,
                "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started))}
    if cfg is not None:
        manifest["replica_range"] = [cfg.replica_start, cfg.replica_start + cfg.replicates]
        if cfg.kernel is not None:
            kernel = make_kernel(cfg.kernel)
            manifest["kernel_truncated_mass"] = kernel.truncated_mass()
            manifest["kernel_effective_range"] = kernel.effective_range
    os.makedirs(out, exist_ok=True)
    if cfg is not None:
        with open(os.path.join(out, "config.json"), "w") as fh:
            fh.write(cfg.dumps() + "\n")
        cfg.threads = threads
    try:
        summary = COMMANDS[args.command](cfg, out, cfg_hash)
    except (InvariantBreach, spectral.InvariantError, AssertionError) as exc:
        manifest["wall_clock_seconds"] = time.time() - started
        return _fail(EXIT_INVARIANT, exc, out, manifest)
    except ValueError as exc:
        manifest["wall_clock_seconds"] = time.time() - started
        return _fail(EXIT_PRECONDITION, exc, out, manifest)
    except Exception as exc:  # anything unexpected is an internal failure
        manifest["wall_clock_seconds"] = time.time() - started
        return _fail(EXIT_INVARIANT, exc, out, manifest)
    manifest.update(status="ok", exit_code=0, summaries=summary, wall_clock_seconds=time.time() - started)
    write_json(os.path.join(out, "manifest.json"), manifest)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
