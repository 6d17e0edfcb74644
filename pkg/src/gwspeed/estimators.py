"""Speed, block covariance, derivative of the speed and the oracles that check them.

Point estimates come from :class:`BlockStats`, exact sufficient statistics
of the i.i.d. blocks.  Their float sums are accumulated exactly (as
rationals), so merging per-replica statistics in any order reproduces the
pooled estimate bit for bit.  Confidence intervals come from a percentile
bootstrap over blocks (or over equal batches of consecutive blocks when
there are very many of them).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import rng
from .offspring import OffspringLaw, lambda_c
from .regeneration import (DEFAULT_BUFFER, BlockTable, Simulation, simulate)
from .tree import GW, TreeArena, TreeSpec, spine_generation_sizes, trap_generation_sizes
from .walk import RegimeError, run_short_paths


class InsufficientBlocksError(ValueError):
    pass


MIN_BLOCKS = 100


def exact_sum(x) -> Fraction:
    """Exact sum of a float64 array as a :class:`~fractions.Fraction`.

    Every double is ``M * 2**(e - 53)`` with integer ``|M| < 2**53``.  The
    mantissas are split into 26/27-bit halves and summed per exponent with
    ``bincount``; those partial sums are integers below ``2**53`` and hence
    exact, for up to ``2**26`` terms.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        return Fraction(0)
    if not np.all(np.isfinite(x)):
        raise ValueError("exact_sum needs finite values")
    m, e = np.frexp(x)
    M = (m * 9007199254740992.0).astype(np.int64)
    hi = M >> 26
    lo = M - (hi << 26)
    exps, inv = np.unique(e, return_inverse=True)
    hs = np.bincount(inv, weights=hi.astype(np.float64), minlength=exps.size)
    ls = np.bincount(inv, weights=lo.astype(np.float64), minlength=exps.size)
    emin = int(exps[0])
    num = 0
    for ex, a, b in zip(exps.tolist(), hs.tolist(), ls.tolist()):
        num += ((int(a) << 26) + int(b)) << (ex - emin)
    shift = emin - 53
    return Fraction(num * 2**shift) if shift >= 0 else Fraction(num, 2 ** (-shift))


_FEATURES = ("dur", "disp", "b", "b2", "dur2", "disp2", "dispdur", "dispb", "durb", "bb")


def _features(dur, disp, b, b2) -> np.ndarray:
    dur = np.asarray(dur, dtype=float)
    disp = np.asarray(disp, dtype=float)
    b = np.asarray(b, dtype=float)
    b2 = np.asarray(b2, dtype=float)
    return np.column_stack([dur, disp, b, b2, dur * dur, disp * disp, disp * dur,
                            disp * b, dur * b, b * b])


def _stats_from_sums(n, s):
    """All block estimators from feature sums (works on floats or Fractions)."""
    dur, disp, b, b2, dur2, disp2, dispdur, dispb, durb, _ = s
    v = disp / dur
    return {
        "speed": v,
        "sigma00_centered": (disp2 - 2 * v * dispdur + v * v * dur2) / dur,
        "sigma00_literal": (disp2 - disp * disp / n) / dur,
        "sigma11": b2 / dur,
        "sigma01_centered": (dispb - v * durb) / dur,
        "sigma01_literal": dispb / dur,
        "b_mean": b / n,
    }


@dataclass(frozen=True)
class BlockStats:
    """Exact, mergeable sufficient statistics of a set of blocks."""

    n: int
    sums: tuple[Fraction, ...]

    @classmethod
    def from_blocks(cls, blocks) -> "BlockStats":
        X = _as_block_array(blocks)
        F = _features(X[:, 0], X[:, 1], X[:, 2], X[:, 3])
        return cls(X.shape[0], tuple(exact_sum(F[:, j]) for j in range(F.shape[1])))

    @classmethod
    def zero(cls) -> "BlockStats":
        return cls(0, tuple(Fraction(0) for _ in _FEATURES))

    def merge(self, other: "BlockStats") -> "BlockStats":
        return BlockStats(self.n + other.n, tuple(a + b for a, b in zip(self.sums, other.sums)))

    __add__ = merge

    def estimates(self) -> dict[str, float]:
        if self.n == 0:
            raise InsufficientBlocksError("no blocks")
        return {k: float(v) for k, v in _stats_from_sums(self.n, self.sums).items()}


def _as_block_array(blocks) -> np.ndarray:
    if isinstance(blocks, BlockTable):
        return blocks.to_array()
    X = check_array(blocks, dtype=np.float64, ensure_2d=True, ensure_min_samples=1)
    if X.shape[1] < 4:
        raise ValueError("block arrays need columns duration, displacement, b_sum, b2_sum")
    if np.any(X[:, 0] < 1):
        raise ValueError("block durations must be >= 1")
    return X[:, :4]


@dataclass(frozen=True)
class Estimate:
    value: float
    lo: float
    hi: float

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    def overlaps(self, other: "Estimate") -> bool:
        return self.lo <= other.hi and other.lo <= self.hi

    @property
    def half_width(self) -> float:
        return 0.5 * (self.hi - self.lo)


def _percentile_ci(point, samples, confidence) -> Estimate:
    a = 100 * (1 - confidence) / 2
    lo, hi = np.percentile(samples, [a, 100 - a])
    return Estimate(float(point), float(min(lo, point)), float(max(hi, point)))


def _bootstrap_units(F: np.ndarray, max_units: int) -> np.ndarray:
    """Group consecutive blocks into at most ``max_units`` batches of feature sums."""
    n = F.shape[0]
    if n <= max_units:
        return F
    edges = np.linspace(0, n, max_units + 1).astype(np.int64)
    return np.add.reduceat(F, edges[:-1], axis=0)


def bootstrap_stats(F: np.ndarray, n_blocks: np.ndarray, n_boot: int, gen: np.random.Generator,
                    chunk: int = 64) -> dict[str, np.ndarray]:
    """Bootstrap replicates of every block statistic.

    ``F`` holds one row of feature sums per resampling unit and ``n_blocks``
    the number of blocks in each unit.
    """
    u = F.shape[0]
    out = {k: np.empty(n_boot) for k in _stats_from_sums(1.0, np.ones(len(_FEATURES)))}
    done = 0
    while done < n_boot:
        m = min(chunk, n_boot - done)
        idx = gen.integers(0, u, size=(m, u))
        S = F[idx].sum(axis=1)
        N = n_blocks[idx].sum(axis=1)
        st = _stats_from_sums(N, S.T)
        for k, v in st.items():
            out[k][done:done + m] = v
        done += m
    return out


@dataclass
class EstimateReport:
    """Speed, block covariance (both conventions) and derivative at one bias."""

    lam: float
    speed: Estimate
    sigma00_centered: Estimate
    sigma00_literal: Estimate
    sigma11: Estimate
    sigma01_centered: Estimate
    sigma01_literal: Estimate
    derivative: Estimate
    block_count: int
    total_steps: int
    diagnostics: dict[str, float | bool | str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in list(d.items()):
            if isinstance(v, dict) and set(v) == {"value", "lo", "hi"}:
                d[k] = {"value": v["value"], "lo": v["lo"], "hi": v["hi"]}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class RegenerationBlockEstimator(BaseEstimator):
    """Estimate speed and the block covariance matrix from i.i.d. blocks.

    ``fit`` takes a :class:`~gwspeed.regeneration.BlockTable` or an array
    with columns ``duration, displacement, b_sum, b2_sum``.  The derivative
    of the speed is the off-diagonal entry ``sigma01``; it is reported in
    the centred convention (displacement minus speed times duration) and in
    the literal one (raw displacement).
    """

    def __init__(self, n_bootstrap: int = 2000, confidence: float = 0.95, max_units: int = 20000,
                 min_blocks: int = MIN_BLOCKS, random_state: int = 0):
        self.n_bootstrap = n_bootstrap
        self.confidence = confidence
        self.max_units = max_units
        self.min_blocks = min_blocks
        self.random_state = random_state

    def fit(self, X, y=None):
        A = _as_block_array(X)
        if A.shape[0] < self.min_blocks:
            raise InsufficientBlocksError(
                f"{A.shape[0]} blocks; at least {self.min_blocks} are needed")
        self.stats_ = BlockStats.from_blocks(A)
        self.point_ = self.stats_.estimates()
        F = _features(A[:, 0], A[:, 1], A[:, 2], A[:, 3])
        units = _bootstrap_units(F, self.max_units)
        counts = _bootstrap_units(np.ones((A.shape[0], 1)), self.max_units)[:, 0]
        gen = rng.Stream(rng.stream_key(self.random_state, rng.AUX)).numpy_generator()
        self.boot_ = bootstrap_stats(units, counts, self.n_bootstrap, gen)
        self.intervals_ = {k: _percentile_ci(self.point_[k], self.boot_[k], self.confidence)
                           for k in self.point_}
        self.n_blocks_ = A.shape[0]
        self.speed_ = self.intervals_["speed"]
        self.derivative_ = self.intervals_["sigma01_centered"]
        b = A[:, 2]
        self.b_mean_ = float(b.mean())
        self.b_se_ = float(b.std(ddof=1) / np.sqrt(b.size))
        return self

    def report(self, lam: float, total_steps: int = 0, spec: TreeSpec | None = None) -> EstimateReport:
        check_is_fitted(self, "stats_")
        iv = self.intervals_
        diag: dict = {
            "b_sum_mean": self.b_mean_,
            "b_sum_se": self.b_se_,
            "b_sum_zero_within_3se": abs(self.b_mean_) <= 3 * self.b_se_,
            "cauchy_schwarz_ok": bool(iv["sigma01_centered"].value ** 2
                                      <= iv["sigma00_centered"].hi * iv["sigma11"].hi),
        }
        if spec is not None:
            diag.update(window_flags(spec, lam))
        return EstimateReport(
            lam=float(lam), speed=iv["speed"],
            sigma00_centered=iv["sigma00_centered"], sigma00_literal=iv["sigma00_literal"],
            sigma11=iv["sigma11"], sigma01_centered=iv["sigma01_centered"],
            sigma01_literal=iv["sigma01_literal"], derivative=iv["sigma01_centered"],
            block_count=int(self.n_blocks_), total_steps=int(total_steps), diagnostics=diag)


def window_flags(spec: TreeSpec, lam: float) -> dict:
    """Where ``lam`` sits relative to (lambda_c, mu) and (sqrt(lambda_c), mu)."""
    lc = lambda_c(spec.law) if spec.mode == GW else 0.0
    mu = spec.law.mean
    return {"lambda_c": lc, "mu": mu,
            "in_ballistic_window": bool(lc < lam < mu),
            "in_derivative_window": bool(np.sqrt(lc) < lam < mu)}


def speed_estimate(blocks, **kw) -> Estimate:
    """Ratio of mean block displacement to mean block duration."""
    return RegenerationBlockEstimator(**kw).fit(blocks).speed_


def covariance_matrix(blocks, speed: float | None = None, **kw) -> dict[str, Estimate]:
    """Entries of the block covariance matrix in both conventions.

    If ``speed`` is given it replaces the blocks' own ratio in the centred
    point estimates; bootstrap replicates always re-estimate it.
    """
    est = RegenerationBlockEstimator(**kw).fit(blocks)
    out = {k: v for k, v in est.intervals_.items() if k.startswith("sigma")}
    if speed is not None:
        s = est.stats_.sums
        dur, dispdur, dur2, disp2, dispb, durb = (float(s[0]), float(s[6]), float(s[4]),
                                                  float(s[5]), float(s[7]), float(s[8]))
        v = float(speed)
        c00 = (disp2 - 2 * v * dispdur + v * v * dur2) / dur
        c01 = (dispb - v * durb) / dur
        out["sigma00_centered"] = _recentre(out["sigma00_centered"], c00)
        out["sigma01_centered"] = _recentre(out["sigma01_centered"], c01)
    return out


def _recentre(e: Estimate, value: float) -> Estimate:
    return Estimate(value, min(e.lo, value), max(e.hi, value))


def derivative_estimate(blocks, speed: float | None = None, spec: TreeSpec | None = None,
                        lam: float | None = None, **kw) -> dict[str, object]:
    """``sigma01`` in both conventions; the centred one is the headline."""
    cov = covariance_matrix(blocks, speed, **kw)
    out = {"derivative": cov["sigma01_centered"], "centered": cov["sigma01_centered"],
           "literal": cov["sigma01_literal"]}
    if spec is not None and lam is not None:
        out.update(window_flags(spec, lam))
    return out


def estimate_at(spec: TreeSpec, lam: float, steps: int, replicas: int, seed: int,
                censor_buffer: int = DEFAULT_BUFFER, n_bootstrap: int = 2000,
                workers: int = 1) -> tuple[EstimateReport, Simulation]:
    """Simulate and fit; the report also carries the endpoint-speed check."""
    sim = simulate(spec, lam, steps, replicas, seed, censor_buffer, workers=workers)
    est = RegenerationBlockEstimator(n_bootstrap=n_bootstrap, random_state=seed).fit(sim.blocks)
    rep = est.report(lam, sim.total_steps, spec)
    ends = sim.final_depths / np.array([r.steps for r in sim.replicas])
    rep.diagnostics["endpoint_speed"] = float(ends.mean())
    if len(ends) > 1:
        rep.diagnostics["endpoint_speed_se"] = float(ends.std(ddof=1) / np.sqrt(len(ends)))
    rep.diagnostics["q_rate"] = float(sum(r.B2 for r in sim.replicas) / (2 * sim.total_steps))
    return rep, sim


# --- finite differences with common random numbers ----------------------------

@dataclass
class FiniteDifference:
    estimate: Estimate
    h: float
    richardson: float | None = None
    half_step: Estimate | None = None
    bias_flag: bool = False


def _per_replica_sums(sim: Simulation) -> np.ndarray:
    return np.array([[r.blocks.displacement.sum(), r.blocks.duration.sum()] for r in sim.replicas],
                    dtype=float)


def _check_fd_window(spec: TreeSpec, lam: float, h: float) -> None:
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    lc = lambda_c(spec.law) if spec.mode == GW else 0.0
    mu = spec.law.mean
    if spec.mode != GW and spec.fan == 1:
        lo_ok = lam - h >= 0.0
        mu = 1.0
    else:
        lo_ok = lam - h > lc
    if not (lo_ok and lam + h < mu):
        raise RegimeError(f"lambda +/- h = ({lam - h:g}, {lam + h:g}) leaves the transient window "
                          f"({lc:g}, {mu:g})")


def _central_difference(spec, lam, h, steps, replicas, seed, censor_buffer, n_boot, gen, workers):
    plus = simulate(spec, lam + h, steps, replicas, seed, censor_buffer, workers=workers)
    minus = simulate(spec, lam - h, steps, replicas, seed, censor_buffer, workers=workers)
    a, b = _per_replica_sums(plus), _per_replica_sums(minus)

    def fd(ia, ib):
        return (ia[..., 0] / ia[..., 1] - ib[..., 0] / ib[..., 1]) / (2 * h)

    point = fd(a.sum(0), b.sum(0))
    idx = gen.integers(0, replicas, size=(n_boot, replicas))
    boot = fd(a[idx].sum(1), b[idx].sum(1))
    return _percentile_ci(float(point), boot, 0.95)


def finite_difference_derivative(spec: TreeSpec, lam: float, h_fd: float, steps: int, replicas: int,
                                 seed: int, censor_buffer: int = DEFAULT_BUFFER,
                                 n_bootstrap: int = 2000, richardson: bool = True,
                                 workers: int = 1) -> FiniteDifference:
    """Central difference of block-ratio speeds at ``lam +/- h_fd``.

    Both sides reuse the same replica seeds, hence the same trees and the
    same walk uniforms.  With ``richardson`` the step is halved too and
    ``(4 D(h/2) - D(h)) / 3`` reported; ``bias_flag`` is set when the two
    differences disagree beyond their combined interval half-widths.
    """
    _check_fd_window(spec, lam, h_fd)
    gen = rng.Stream(rng.stream_key(seed, rng.AUX, 1)).numpy_generator()
    full = _central_difference(spec, lam, h_fd, steps, replicas, seed, censor_buffer,
                               n_bootstrap, gen, workers)
    if not richardson:
        return FiniteDifference(full, h_fd)
    half = _central_difference(spec, lam, h_fd / 2, steps, replicas, seed, censor_buffer,
                               n_bootstrap, gen, workers)
    rich = (4 * half.value - full.value) / 3
    flag = abs(full.value - half.value) > full.half_width + half.half_width
    return FiniteDifference(full, h_fd, rich, half, bool(flag))


# --- change of measure -------------------------------------------------------

def functional_from_name(name: str) -> Callable[[np.ndarray], np.ndarray]:
    """``one``, ``depth:T`` or ``depth_at_least:T:K`` on a depth-path matrix."""
    parts = name.split(":")
    if parts[0] == "one" and len(parts) == 1:
        return lambda D: np.ones(D.shape[0])
    if parts[0] == "depth" and len(parts) == 2:
        t = int(parts[1])
        return lambda D: D[:, t].astype(float)
    if parts[0] == "depth_at_least" and len(parts) == 3:
        t, k = int(parts[1]), int(parts[2])
        return lambda D: (D[:, t] >= k).astype(float)
    raise ValueError(f"unknown functional {name!r}")


@dataclass
class Transfer:
    reweighted: float
    reweighted_se: float
    direct: float
    direct_se: float

    @property
    def z(self) -> float:
        se = np.hypot(self.reweighted_se, self.direct_se)
        return float((self.reweighted - self.direct) / se) if se > 0 else 0.0


def girsanov_transfer_estimate(spec: TreeSpec, lam: float, h: float, functional, steps: int,
                               replicas: int, seed: int, paths_per_tree: int = 1) -> Transfer:
    """``E_lam[F * weight]`` against ``E_{lam+h}[F]`` on the same trees.

    ``functional`` maps an ``(n_paths, steps + 1)`` depth matrix to values;
    a string is resolved by :func:`functional_from_name`.  Errors are
    computed from per-tree averages, so they account for tree randomness.
    """
    if isinstance(functional, str):
        functional = functional_from_name(functional)
    rw = np.empty(replicas)
    dr = np.empty(replicas)
    for r in range(replicas):
        key = rng.stream_key(seed, r, rng.TREE)
        a = TreeArena(spec, key)
        sp = run_short_paths(a, lam, steps, paths_per_tree, rng.stream_key(seed, r, rng.WALK), hs=(h,))
        rw[r] = np.mean(functional(sp.depths) * sp.weights(0))
        b = TreeArena(spec, key)
        sd = run_short_paths(b, lam + h, steps, paths_per_tree, rng.stream_key(seed, r, rng.AUX))
        dr[r] = np.mean(functional(sd.depths))
    se = lambda x: float(x.std(ddof=1) / np.sqrt(x.size))
    return Transfer(float(rw.mean()), se(rw), float(dr.mean()), se(dr))


def girsanov_transfer_fixed_tree(arena: TreeArena, lam: float, h: float, functional, steps: int,
                                 n_paths: int, seed: int) -> Transfer:
    """Quenched version of :func:`girsanov_transfer_estimate` on one tree."""
    if isinstance(functional, str):
        functional = functional_from_name(functional)
    sp = run_short_paths(arena, lam, steps, n_paths, rng.stream_key(seed, rng.WALK), hs=(h,))
    x = functional(sp.depths) * sp.weights(0)
    sd = run_short_paths(arena, lam + h, steps, n_paths, rng.stream_key(seed, rng.AUX))
    y = functional(sd.depths)
    return Transfer(float(x.mean()), float(x.std(ddof=1) / np.sqrt(n_paths)),
                    float(y.mean()), float(y.std(ddof=1) / np.sqrt(n_paths)))


# --- moment diagnostics --------------------------------------------------------

def uniform_moment_diagnostics(spec: TreeSpec, lam_grid, alphas, blocks_per_lam: int, seed: int,
                               steps: int = 10**6, censor_buffer: int = DEFAULT_BUFFER) -> list[dict]:
    """Empirical alpha-moments of block durations with a half-sample stability ratio.

    The ratio is (moment of the first half of the blocks) / (moment of all
    blocks); values far from 1 suggest an infinite moment.  ``kappa`` is the
    log-log slope of the running maximum of durations against block count.
    """
    rows = []
    lc = lambda_c(spec.law) if spec.mode == GW else 0.0
    for lam in lam_grid:
        sims, n_rep = [], 0
        blocks = BlockTable.empty()
        while len(blocks) < blocks_per_lam:
            sims.append(simulate(spec, lam, steps, 1, seed, censor_buffer, replica_offset=n_rep))
            n_rep += 1
            blocks = BlockTable.concat([s.blocks for s in sims])
        dur = blocks.duration[:blocks_per_lam].astype(float)
        half = dur[: dur.size // 2]
        runmax = np.maximum.accumulate(dur)
        ns = np.unique(np.geomspace(10, dur.size, 20).astype(int))
        kappa = float(np.polyfit(np.log(ns), np.log(runmax[ns - 1]), 1)[0]) if ns.size > 1 else float("nan")
        for a in alphas:
            full_m = float(np.mean(dur**a))
            half_m = float(np.mean(half**a))
            ratio = half_m / full_m
            rows.append({"lambda": float(lam), "alpha": float(a), "moment": full_m,
                         "stability_ratio": ratio, "stable": bool(0.5 <= ratio <= 2.0),
                         "kappa": kappa, "blocks": int(dur.size),
                         "alpha_bound": float(np.log(lc) / np.log(lam)) if 0 < lc and lam < 1 else float("inf")})
    return rows


def trap_moment_diagnostics(law: OffspringLaw, n_max: int, m_max: int, replicas: int, seed: int,
                            pairs=((3, 7),), method: str = "spine") -> dict:
    """``E[W_n^m] / lambda_c^n`` for trap trees, plus mixed pair moments.

    ``method="direct"`` averages ``W_n^m`` over plain trap trees; deep
    generations are then almost always empty and the estimate collapses to
    0.  ``method="spine"`` uses size-biased trees instead, where the ratio
    is the plain average of ``W_n^(m-1)``; it is exact (1) for ``m = 1``.
    Pair moments ``E[W_a W_b] / lambda_c^max(a, b)`` use the same device.
    """
    lc = lambda_c(law)
    depth = max([n_max] + [max(p) for p in pairs])
    rows, sup = [], {}
    if method == "direct":
        W = trap_generation_sizes(law, depth, replicas, seed).astype(float)
        ratio = lambda n, m: float(np.mean(W[n] ** m)) / lc**n
        pair = lambda a, b: float(np.mean(W[a] * W[b])) / lc ** max(a, b)
    elif method == "spine":
        W = spine_generation_sizes(law, depth, replicas, seed).astype(float)
        ratio = lambda n, m: float(np.mean(W[n] ** (m - 1)))
        pair = lambda a, b: float(np.mean(W[min(a, b)]))
    else:
        raise ValueError(f"unknown method {method!r}")
    for m in range(1, m_max + 1):
        for n in range(n_max + 1):
            r = ratio(n, m)
            rows.append({"n": n, "m": m, "moment": r * lc**n, "ratio": r})
            sup[m] = max(sup.get(m, 0.0), r)
    pair_rows = [{"n1": a, "n2": b, "ratio": pair(a, b)} for a, b in pairs]
    return {"rows": rows, "sup": sup, "pairs": pair_rows, "lambda_c": lc, "replicas": replicas,
            "method": method}
