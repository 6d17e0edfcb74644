"""Escape probabilities from effective conductances on depth-truncated trees.

With conductance ``lam**-(k-1)`` on the edge whose deeper end sits at depth
``k``, the walk's parent:child weights are ``lam:1`` as required.  Instead
of carrying these conductances (which under- or overflow for large depth)
the recursion carries the scale-free quantity

    beta(v) = C(v) / (C(v) + c(parent edge of v)),

the probability that the walk started at ``v`` reaches the depth-``N``
boundary before the parent of ``v``.  Series-parallel reduction becomes
``beta(v) = S / (lam + S)`` with ``S`` the sum of ``beta`` over children,
``beta = 1`` on the boundary and ``0`` on dead ends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import rng
from .offspring import LawError, OffspringLaw, lambda_c, pgf_eval
from .tree import AUGMENTED, GW, TreeArena, TreeCapacityError, TreeSpec
from .walk import RegimeError

MAX_TRUNCATION = 2**14
CONVENTIONS = ("T*", "T")


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, gap: float):
        super().__init__(msg)
        self.gap = gap


@njit(cache=True)
def _beta_tree(lams, N, root, depth, kind, first, nchild, size):
    n = size[0]
    L = lams.shape[0]
    beta = np.zeros((L, n))
    for v in range(n - 1, root - 1, -1):
        if kind[v] == AUGMENTED or depth[v] > N:
            continue
        if depth[v] == N:
            for j in range(L):
                beta[j, v] = 1.0
            continue
        c0 = first[v]
        for j in range(L):
            s = 0.0
            for c in range(c0, c0 + nchild[v]):
                s += beta[j, c]
            beta[j, v] = s / (lams[j] + s)
    return beta


def _level_betas(fan: int, lam: float, N: int) -> np.ndarray:
    """``beta`` by level on a regular tree: ``b[k]`` for a vertex at depth ``k``."""
    b = np.empty(N + 1)
    b[N] = 1.0
    for k in range(N - 1, -1, -1):
        s = fan * b[k + 1]
        b[k] = s / (lam + s)
    return b


def _check_args(lam: float, N: int, convention: str) -> None:
    if not lam > 0:
        raise RegimeError(f"escape probabilities need lambda > 0, got {lam}")
    if int(N) != N or N < 1:
        raise ValueError(f"truncation depth must be a positive integer, got {N}")
    if N > MAX_TRUNCATION:
        raise ValueError(f"truncation depth {N} exceeds the cap {MAX_TRUNCATION}")
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")


def escape_profile(arena: TreeArena, lams, N: int, convention: str = "T*") -> np.ndarray:
    """Escape probabilities from ``e`` at several biases on one truncated tree.

    ``"T*"``: the walk starts at ``e`` whose parent ``e*`` absorbs.
    ``"T"``: the walk starts at the reflecting root and must never come back;
    this is the average of ``beta`` over the root's children.
    """
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    for lam in lams:
        _check_args(float(lam), N, convention)
    spec = arena.spec
    if spec.mode != GW:
        out = np.empty(lams.size)
        for j, lam in enumerate(lams):
            b = _level_betas(spec.fan, lam, N)
            out[j] = b[0] if convention == "T*" else b[1] if N > 1 else 1.0
        return out
    arena.materialize_to_depth(N)
    root = arena.root
    beta = _beta_tree(lams, int(N) + arena.depth[root], root, arena.depth, arena.kind,
                      arena.first, arena.nchild, arena.size)
    if convention == "T*":
        return beta[:, root].copy()
    kids = arena.children(root)
    return beta[:, kids.start:kids.stop].mean(axis=1)


def escape_probability_truncated(arena: TreeArena, lam: float, N: int, convention: str = "T*") -> float:
    """Probability of reaching depth ``N`` before ``e*`` (or before returning, for ``"T"``)."""
    return float(escape_profile(arena, [lam], N, convention)[0])


@dataclass(frozen=True)
class EscapeEstimate:
    lam: float
    N: int
    escape: float
    lo: float
    hi: float
    gap: float


def rayleigh_monotonicity_check(spec: TreeSpec, lam_grid, trees: int, N: int, seed: int,
                                tol: float = 1e-12) -> list[dict]:
    """Escape along an increasing bias grid must not increase, tree by tree."""
    grid = np.asarray(lam_grid, dtype=float)
    if grid.size > 1 and not np.all(np.diff(grid) > 0):
        raise ValueError("bias grid must be strictly increasing")
    rows = []
    for i in range(trees):
        arena = TreeArena(spec, rng.stream_key(seed, i, rng.TREE))
        esc = escape_profile(arena, grid, N)
        worst = float(np.max(np.diff(esc))) if esc.size > 1 else 0.0
        rows.append({"tree": i, "escape": esc, "max_increase": worst, "passed": worst <= tol})
    return rows


def _mean_ci(x: np.ndarray) -> tuple[float, float, float]:
    m = float(np.mean(x))
    if x.size < 2:
        return m, m, m
    half = 1.959963984540054 * float(np.std(x, ddof=1)) / np.sqrt(x.size)
    return m, float(m - half), float(m + half)


def _check_window(spec: TreeSpec, lam: float) -> None:
    # escape is positive throughout the transient range, not only the ballistic one
    lc = lambda_c(spec.law) if spec.mode == GW else 0.0
    if not 0 < lam < spec.law.mean:
        raise RegimeError(f"bias {lam} outside the transient range (0, {spec.law.mean:g}); "
                          f"ballistic window ({lc:g}, {spec.law.mean:g})")


def annealed_escape(spec: TreeSpec, lam: float, trees: int, N: int, seed: int, tol: float = 1e-3,
                    n_cap: int = MAX_TRUNCATION, max_vertices: int = 2 * 10**7) -> EscapeEstimate:
    """Tree-averaged escape probability with truncation doubling.

    ``N`` is doubled until the averages at ``N`` and ``2N`` (same trees)
    differ by less than ``tol``; the estimate at ``2N`` is returned.
    """
    _check_window(spec, lam)

    def pair(n):
        # fresh trees each round: the keys pin them down, memory stays bounded
        out = np.empty((trees, 2))
        for i in range(trees):
            a = TreeArena(spec, rng.stream_key(seed, i, rng.TREE), max_vertices=max_vertices)
            try:
                out[i] = [escape_probability_truncated(a, lam, n),
                          escape_probability_truncated(a, lam, 2 * n)]
            except TreeCapacityError:
                raise ConvergenceError(f"tree {i} outgrew {max_vertices} vertices at N={2 * n}; "
                                       f"last gap {gap:.3g}", gap) from None
        return out

    gap = float("inf")
    while 2 * N <= n_cap:
        e = pair(N)
        gap = float(e[:, 0].mean() - e[:, 1].mean())
        N *= 2
        if gap < tol:
            m, lo, hi = _mean_ci(e[:, 1])
            return EscapeEstimate(float(lam), N, m, lo, hi, gap)
    raise ConvergenceError(f"truncation gap {gap:.3g} still above {tol} at N={N}", gap)


@dataclass(frozen=True)
class AidekonEstimate:
    lam: float
    speed: float
    lo: float
    hi: float
    N: int
    trees: int


def aidekon_speed(spec: TreeSpec, lam: float, trees: int, N: int = 20, seed: int = 0,
                  convention: str = "T*", n_bootstrap: int = 2000) -> AidekonEstimate:
    """Speed on a leafless tree from independent quenched escape probabilities.

    Each sample draws ``xi`` from the offspring law and ``xi + 1`` escape
    probabilities from independent trees; the speed is the ratio of the
    means of ``(xi - lam) p0 / (lam - 1 + sum p)`` and
    ``(xi + lam) p0 / (lam - 1 + sum p)``.
    """
    if spec.law.probs[0] > 0:
        raise LawError("the explicit speed formula needs a leafless law (p0 = 0)")
    if not 0 < lam < spec.law.mean:
        raise RegimeError(f"bias {lam} outside (0, {spec.law.mean:g})")
    cdf = spec.law.cdf()
    num = np.empty(trees)
    den = np.empty(trees)
    for i in range(trees):
        xi = int(np.searchsorted(cdf, rng.Stream(rng.stream_key(seed, i, rng.AUX)).uniform(), side="right"))
        p = np.array([escape_probability_truncated(
            TreeArena(spec, rng.stream_key(seed, i, j, rng.TREE)), lam, N, convention)
            for j in range(xi + 1)])
        z = lam - 1 + p.sum()
        num[i] = (xi - lam) * p[0] / z
        den[i] = (xi + lam) * p[0] / z
    point = num.mean() / den.mean()
    gen = rng.Stream(rng.stream_key(seed, rng.AUX, 2)).numpy_generator()
    boot = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        idx = gen.integers(0, trees, trees)
        boot[b] = num[idx].mean() / den[idx].mean()
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return AidekonEstimate(float(lam), float(point), float(min(lo, point)), float(max(hi, point)),
                           int(N), int(trees))


def lpp3_fixed_point(law: OffspringLaw, lam: float, tol: float = 1e-14, maxiter: int = 10**6) -> float:
    """Smallest non-negative solution of ``f(1 - (1 - q)/lam) = q``."""
    if not lam > 1:
        raise LawError(f"the lower bound needs lambda > 1, got {lam}")
    q = 0.0
    for _ in range(maxiter):
        nxt = pgf_eval(law, 1 - (1 - q) / lam)
        if abs(nxt - q) < tol:
            return nxt
        q = nxt
    raise ConvergenceError("fixed-point iteration did not converge", abs(nxt - q))


def lower_bound_lpp3(law: OffspringLaw, lam: float) -> float:
    """Lower bound ``(1 - 1/lam)^3 (1 - q_lam)^2 / 12`` on the speed, ``lam > 1``."""
    q = lpp3_fixed_point(law, lam)
    return (1 - 1 / lam) ** 3 * (1 - q) ** 2 / 12
