"""The lambda-biased walk: transition law, derivative functions, Girsanov weights.

Two engines share one transition rule.  :class:`WalkTrace` steps in Python
and keeps a full log; it is meant for short traces and brute-force checks.
:func:`run_walk` and :func:`run_short_paths` drive jitted kernels for
production runs and only keep running sums plus the regeneration candidates.

Each step consumes two uniforms at counters ``2t`` and ``2t + 1`` of the walk
stream: the first decides parent versus child, the second picks the child.
Feeding the same stream to walks with different biases therefore couples
them (common random numbers): they take the same child whenever both step
down.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import log1p

import numpy as np
from numba import njit

from . import rng
from .rng import unit
from .tree import AUGMENTED, CAPACITY, OK, REJECTION, TRAP, TreeArena, materialize

LAMBDA_FLOOR = 1e-6
EPS_MIN = 1e-6

RUNNING = 0
ABSORBED = 1
NB_CONFIRMED = 2
FAILED = 3


class AbsorbedError(RuntimeError):
    """The walk sits at the absorbing extra root ``e*``."""


class RegimeError(ValueError):
    """Bias or perturbation outside the allowed range."""


def check_lambda(lam: float, half_line: bool = False) -> None:
    if lam == 0.0 and half_line:
        return
    if not lam >= LAMBDA_FLOOR:
        raise RegimeError(f"bias {lam!r} below the floor {LAMBDA_FLOOR}")


# --- case tables -----------------------------------------------------------

def transition_probabilities(nu: int, lam: float, true_root: bool) -> tuple[float, float]:
    """``(to_parent, to_each_child)`` for a vertex with ``nu`` children."""
    if true_root:
        if nu == 0:
            raise ValueError("the root of a tree without e* must have a child")
        return 0.0, 1.0 / nu
    if nu == 0:
        return 1.0, 0.0
    return lam / (lam + nu), 1.0 / (lam + nu)


def b_case(nu: int, lam: float, to_parent: bool, true_root: bool = False) -> float:
    """d/dlam log A_lam."""
    if true_root:
        return 0.0
    if to_parent:
        return 1.0 / lam - 1.0 / (lam + nu)
    return -1.0 / (lam + nu)


def c_case(nu: int, lam: float, to_parent: bool, true_root: bool = False) -> float:
    if true_root:
        return 0.0
    if to_parent:
        return -1.0 / lam**2 + 1.0 / (lam + nu) ** 2
    return 1.0 / (lam + nu) ** 2


def d_case(nu: int, lam: float, to_parent: bool, true_root: bool = False) -> float:
    if true_root:
        return 0.0
    if to_parent:
        return 2.0 / lam**3 - 2.0 / (lam + nu) ** 3
    return -2.0 / (lam + nu) ** 3


def log_ratio_case(nu: int, lam: float, h: float, to_parent: bool, true_root: bool = False) -> float:
    """log(A_{lam+h} / A_lam) for one move."""
    if true_root:
        return 0.0
    r = -log1p(h / (lam + nu))
    if to_parent:
        r += log1p(h / lam)
    return r


def transition_distribution(arena: TreeArena, v: int, lam: float) -> dict[int, float]:
    """Neighbour -> probability for the walk at ``v``."""
    if arena.kind[v] == AUGMENTED:
        raise AbsorbedError("e* is absorbing")
    kids = arena.children(v)
    up, down = transition_probabilities(len(kids), lam, arena.is_true_root(v))
    out = {}
    if up > 0:
        out[arena.parent_of(v)] = up
    for c in kids:
        out[c] = down
    return out


def _edge(arena: TreeArena, v_from: int, v_to: int) -> tuple[int, bool, bool]:
    kids = arena.children(v_from)
    if v_to in kids:
        to_parent = False
    elif arena.parent_of(v_from) == v_to and v_to >= 0:
        to_parent = True
    else:
        raise ValueError(f"vertices {v_from} and {v_to} are not adjacent")
    return len(kids), to_parent, arena.is_true_root(v_from)


def b_value(arena: TreeArena, v_from: int, v_to: int, lam: float) -> float:
    nu, up, root = _edge(arena, v_from, v_to)
    return b_case(nu, lam, up, root)


def c_value(arena: TreeArena, v_from: int, v_to: int, lam: float) -> float:
    nu, up, root = _edge(arena, v_from, v_to)
    return c_case(nu, lam, up, root)


def d_value(arena: TreeArena, v_from: int, v_to: int, lam: float) -> float:
    nu, up, root = _edge(arena, v_from, v_to)
    return d_case(nu, lam, up, root)


def remainder_bound(n: int, lam: float, h: float) -> float:
    """Deterministic bound on |R_{n,h}| after ``n`` steps.

    For negative ``h`` the third-order term is evaluated at ``lam + h``,
    where the third derivative is largest.
    """
    low = min(lam, lam + h)
    second = 1.0 / lam + 1.0 + 0.5 * (1.0 / lam**2 + 1.0)
    third = 2.0 / low**3 + 2.0
    return n * h * h * second + n * abs(h) ** 3 * third / 6.0


def remainder_slack(n: int, lam: float, h: float) -> float:
    """Floating-point allowance for a computed remainder.

    R is a difference of sums of ``n`` terms of size up to ``|h| / lam``, so
    rounding alone can exceed the bound when ``h`` is tiny.  For subnormal
    ``h`` rounding is absolute, hence the per-step floor.
    """
    fi = np.finfo(float)
    low = min(lam, lam + h)
    return 16 * fi.eps * n * (abs(h) / low + h * h / low**2 + abs(h)) + 4 * n * fi.smallest_subnormal


# --- Python-level trace ----------------------------------------------------

@dataclass
class WalkTrace:
    """A retained-log walk on one arena.

    ``hs`` are the perturbations whose log Girsanov weights accumulate
    online; they must be fixed before the first step.
    """

    arena: TreeArena
    lam: float
    stream: rng.Stream
    hs: tuple[float, ...] = ()
    vertices: list[int] = field(default_factory=list)
    depths: list[int] = field(default_factory=list)
    b: list[float] = field(default_factory=list)
    ups: list[bool] = field(default_factory=list)
    P: float = 0.0
    Q: float = 0.0
    log_weight: dict[float, float] = field(default_factory=dict)

    def __post_init__(self):
        check_lambda(self.lam, half_line=self.arena.spec.fan == 1 and self.arena.spec.mode != 0)
        for h in self.hs:
            if h < -self.lam + EPS_MIN:
                raise RegimeError(f"perturbation {h} takes the bias below {EPS_MIN}")
        start = self.arena.root
        self.vertices = [start]
        self.depths = [self.arena.depth_of(start)]
        self.log_weight = {float(h): 0.0 for h in self.hs}
        self.log_weight.setdefault(0.0, 0.0)

    @property
    def n(self) -> int:
        return len(self.vertices) - 1

    @property
    def current(self) -> int:
        return self.vertices[-1]

    @property
    def absorbed(self) -> bool:
        return self.arena.kind[self.current] == AUGMENTED


def step(trace: WalkTrace) -> WalkTrace:
    """Advance ``trace`` by one move, materialising children on demand."""
    arena = trace.arena
    v = trace.current
    if arena.kind[v] == AUGMENTED:
        raise AbsorbedError("the walk has been absorbed at e*")
    t = trace.n
    u1 = unit(trace.stream.key, 2 * t)
    u2 = unit(trace.stream.key, 2 * t + 1)
    trace.stream.counter = 2 * t + 2
    kids = arena.children(v)
    nu = len(kids)
    root = arena.is_true_root(v)
    if root:
        up = False
    else:
        up = nu == 0 or u1 * (trace.lam + nu) < trace.lam
    nxt = arena.parent_of(v) if up else kids.start + min(int(u2 * nu), nu - 1)
    b = b_case(nu, trace.lam, up, root) if trace.lam > 0 else 0.0
    trace.P += b
    trace.Q += 0.5 * b * b
    for h in trace.log_weight:
        if h != 0.0:
            trace.log_weight[h] += log_ratio_case(nu, trace.lam, h, up, root)
    trace.vertices.append(nxt)
    trace.depths.append(arena.depth_of(nxt))
    trace.b.append(b)
    trace.ups.append(up)
    return trace


def walk(trace: WalkTrace, n: int) -> WalkTrace:
    for _ in range(n):
        if trace.absorbed:
            break
        step(trace)
    return trace


def girsanov_weight(trace: WalkTrace, h: float) -> float:
    """prod A_{lam+h}/A_lam along the trace."""
    if h == 0.0:
        return 1.0
    if float(h) not in trace.log_weight:
        raise KeyError(f"perturbation {h} was not registered before the walk started")
    return float(np.exp(trace.log_weight[float(h)]))


def girsanov_decomposition(trace: WalkTrace, h: float) -> dict[str, float]:
    """``log_weight = h P - h^2 Q + R`` with R obtained by exact subtraction."""
    if h != 0.0 and float(h) not in trace.log_weight:
        raise KeyError(f"perturbation {h} was not registered before the walk started")
    lw = trace.log_weight.get(float(h), 0.0)
    return {"log_weight": lw, "P": trace.P, "Q": trace.Q,
            "R": lw - h * trace.P + h * h * trace.Q}


@dataclass
class BackboneProjection:
    """Backbone skeleton of a trace: positions ``Y_k`` and the times between them."""

    Y: list[int]
    S: list[int]
    chi: list[int]
    N: list[int]
    gamma: list[list[int]]
    tail: int


def backbone_projection(trace: WalkTrace) -> BackboneProjection:
    """Split the trace at backbone-to-backbone moves.

    ``S`` lists the times ``k`` with both ``Z_{k-1}`` and ``Z_k`` on the
    backbone (``S[0] = 0``); ``chi[k] = S[k+1] - S[k]`` is one plus the total
    length of the ``N[k]`` trap excursions made from ``Y_k`` in between, and
    ``tail`` is the time after the last such move.
    """
    kind = trace.arena.kind
    zs = trace.vertices
    on_bb = [kind[z] != TRAP and kind[z] != AUGMENTED for z in zs]
    S = [0] + [k for k in range(1, len(zs)) if on_bb[k] and on_bb[k - 1]]
    Y = [zs[s] for s in S]
    chi, N, gamma = [], [], []
    for a, b_ in zip(S[:-1], S[1:]):
        chi.append(b_ - a)
        visits = [m for m in range(a + 1, b_ + 1) if zs[m] == zs[a]]
        marks = [a] + visits
        gamma.append([y - x for x, y in zip(marks[:-1], marks[1:])])
        N.append(len(visits))
    return BackboneProjection(Y, S, chi, N, gamma, trace.n - S[-1])


# --- jitted engines --------------------------------------------------------

def step_tables(lam: float, hs, kmax: int):
    """Per-child-count lookup tables of B and of the log weight increments."""
    nus = np.arange(kmax + 1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        b_up = np.float64(1.0) / lam - 1.0 / (lam + nus)
        b_down = -1.0 / (lam + nus)
        hs = np.asarray(hs, dtype=float).reshape(-1)
        lw_down = -np.log1p(hs[:, None] / (lam + nus)[None, :])
        lw_up = lw_down + np.log1p(hs / lam)[:, None]
    if lam == 0.0:
        b_up[:] = 0.0
        b_down[:] = 0.0
    return b_up, b_down, np.ascontiguousarray(lw_up), np.ascontiguousarray(lw_down)


@njit(cache=True, inline="always")
def _advance(v, lam, u1, u2, parent, first, nchild):
    nu = nchild[v]
    p = parent[v]
    if p < 0:
        c = int(u2 * nu)
        if c >= nu:
            c = nu - 1
        return first[v] + c, False, nu
    if nu == 0 or u1 * (lam + nu) < lam:
        return p, True, nu
    c = int(u2 * nu)
    if c >= nu:
        c = nu - 1
    return first[v] + c, False, nu


# integer state slots
I_T, I_V, I_D, I_MAXD, I_STATUS, I_NSTACK, I_TRAP, I_EXC, I_MIND = range(9)
# float state slots
F_P, F_B2 = range(2)


@njit(cache=True)
def walk_chunk(n_target, istate, fstate, logw,
               parent, depth, kind, first, nchild, vkey, size,
               tree_key, mode, fan, cdf_p, cdf_h, surv, kbuf,
               walk_key, lam, b_up, b_down, lw_up, lw_down,
               c_time, c_level, c_P, c_B2, c_trap, c_exc,
               dlog, nb_buffer):
    """Advance the walk until ``istate[I_T] == n_target`` or it stops.

    Regeneration candidates (times of new depth records) are kept on a stack
    together with the running sums at that time; a candidate at level L is
    popped as soon as the walk comes back to depth L - 1.  With
    ``nb_buffer >= 0`` the run stops once the depth record exceeds the
    bottom candidate's level by the buffer.
    """
    t = istate[I_T]
    v = istate[I_V]
    d = istate[I_D]
    maxd = istate[I_MAXD]
    mind = istate[I_MIND]
    ns = istate[I_NSTACK]
    trap_t = istate[I_TRAP]
    exc = istate[I_EXC]
    P = fstate[F_P]
    B2 = fstate[F_B2]
    H = logw.shape[0]
    keep = dlog.shape[0] > 0
    status = RUNNING
    while t < n_target:
        if first[v] < 0:
            st = materialize(v, parent, depth, kind, first, nchild, vkey, size,
                             tree_key, mode, fan, cdf_p, cdf_h, surv, kbuf)
            if st != OK:
                status = FAILED
                break
        u1 = unit(walk_key, 2 * t)
        u2 = unit(walk_key, 2 * t + 1)
        nxt, up, nu = _advance(v, lam, u1, u2, parent, first, nchild)
        if parent[v] >= 0:
            if up:
                b = b_up[nu]
                for j in range(H):
                    logw[j] += lw_up[j, nu]
            else:
                b = b_down[nu]
                for j in range(H):
                    logw[j] += lw_down[j, nu]
            P += b
            B2 += b * b
        if kind[v] == TRAP:
            trap_t += 1
        elif kind[nxt] == TRAP:
            exc += 1
        t += 1
        v = nxt
        if up:
            d -= 1
        else:
            d += 1
        if keep:
            dlog[t] = d
        if d < mind:
            mind = d
        if kind[v] == AUGMENTED:
            status = ABSORBED
            break
        while ns > 0 and c_level[ns - 1] > d:
            ns -= 1
        if d > maxd:
            maxd = d
            c_time[ns] = t
            c_level[ns] = d
            c_P[ns] = P
            c_B2[ns] = B2
            c_trap[ns] = trap_t
            c_exc[ns] = exc
            ns += 1
        if nb_buffer >= 0 and ns > 0 and maxd >= c_level[0] + nb_buffer:
            status = NB_CONFIRMED
            break
    istate[I_T] = t
    istate[I_V] = v
    istate[I_D] = d
    istate[I_MAXD] = maxd
    istate[I_MIND] = mind
    istate[I_NSTACK] = ns
    istate[I_TRAP] = trap_t
    istate[I_EXC] = exc
    istate[I_STATUS] = status
    fstate[F_P] = P
    fstate[F_B2] = B2
    return status


@dataclass
class WalkRun:
    """Summary of one kernel-driven walk.

    ``cand`` holds the regeneration candidates still alive at the horizon
    (times, levels and running sums at those times).
    """

    lam: float
    hs: tuple[float, ...]
    steps: int
    final_depth: int
    max_depth: int
    min_depth: int
    status: int
    P: float
    B2: float
    trap_time: int
    excursions: int
    log_weight: np.ndarray
    cand: dict[str, np.ndarray]
    depths: np.ndarray | None = None

    @property
    def Q(self) -> float:
        return 0.5 * self.B2

    @property
    def absorbed(self) -> bool:
        return self.status == ABSORBED

    def remainder(self, j: int) -> float:
        h = self.hs[j]
        return float(self.log_weight[j] - h * self.P + h * h * self.Q)


_CHUNK = 1 << 16


def run_walk(arena: TreeArena, lam: float, steps: int, walk_key, hs=(),
             retain: bool = False, nb_buffer: int = -1, chunk: int = _CHUNK) -> WalkRun:
    """Run ``steps`` moves of the walk from the root of ``arena``.

    Stops early if the walk is absorbed at ``e*`` or, with ``nb_buffer >= 0``,
    once its first regeneration candidate is buffered.
    """
    half = arena.spec.mode != 0 and arena.spec.fan == 1
    check_lambda(lam, half_line=half)
    hs = tuple(float(h) for h in hs)
    for h in hs:
        if h < -lam + EPS_MIN:
            raise RegimeError(f"perturbation {h} takes the bias below {EPS_MIN}")
    kmax = arena.spec.max_children
    b_up, b_down, lw_up, lw_down = step_tables(lam, hs, kmax)
    istate = np.zeros(9, np.int64)
    istate[I_V] = arena.root
    d0 = arena.depth_of(arena.root)
    istate[I_D] = istate[I_MAXD] = istate[I_MIND] = d0
    fstate = np.zeros(2)
    logw = np.zeros(len(hs))
    cap = 1024
    cand = {"time": np.empty(cap, np.int64), "level": np.empty(cap, np.int64),
            "P": np.empty(cap), "B2": np.empty(cap),
            "trap": np.empty(cap, np.int64), "exc": np.empty(cap, np.int64)}
    dlog = np.empty(steps + 1 if retain else 0, np.int64)
    if retain:
        dlog[0] = d0
    walk_key = np.uint64(walk_key)
    while istate[I_T] < steps:
        target = min(steps, int(istate[I_T]) + chunk)
        todo = target - int(istate[I_T])
        arena.reserve(todo * kmax)
        need = int(istate[I_NSTACK]) + todo
        if need > cand["time"].shape[0]:
            cap = max(need, 2 * cand["time"].shape[0])
            for k, a in cand.items():
                b = np.empty(cap, a.dtype)
                b[: a.shape[0]] = a
                cand[k] = b
        st = walk_chunk(target, istate, fstate, logw, *arena.kernel_args(),
                        walk_key, float(lam), b_up, b_down, lw_up, lw_down,
                        cand["time"], cand["level"], cand["P"], cand["B2"],
                        cand["trap"], cand["exc"], dlog, int(nb_buffer))
        if st == FAILED:
            raise RuntimeError("tree growth failed inside the walk kernel")
        if st != RUNNING:
            break
    ns = int(istate[I_NSTACK])
    t = int(istate[I_T])
    return WalkRun(
        lam=float(lam), hs=hs, steps=t, final_depth=int(istate[I_D]),
        max_depth=int(istate[I_MAXD]), min_depth=int(istate[I_MIND]),
        status=int(istate[I_STATUS]), P=float(fstate[F_P]), B2=float(fstate[F_B2]),
        trap_time=int(istate[I_TRAP]), excursions=int(istate[I_EXC]), log_weight=logw,
        cand={k: a[:ns].copy() for k, a in cand.items()},
        depths=dlog[: t + 1] if retain else None,
    )


@njit(cache=True)
def _short_paths(start, n_paths, horizon, out_depth, out_logw, out_P, out_B2,
                 parent, depth, kind, first, nchild, vkey, size,
                 tree_key, mode, fan, cdf_p, cdf_h, surv, kbuf,
                 walk_key, lam, b_up, b_down, lw_up, lw_down, root, reserve):
    """Independent ``horizon``-step walks from the root of one fixed tree.

    Path ``i`` uses counters ``[2 i horizon, 2 (i+1) horizon)`` of the walk
    stream.  Returns the index of the first path not simulated (capacity) or
    ``n_paths``.  Absorbed paths stay at ``e*`` with depth -1.
    """
    H = out_logw.shape[1]
    for i in range(start, n_paths):
        if size[0] + reserve > parent.shape[0]:
            return i
        v = root
        d = depth[root]
        out_depth[i, 0] = d
        P = 0.0
        B2 = 0.0
        for j in range(H):
            out_logw[i, j] = 0.0
        base = 2 * i * horizon
        for t in range(horizon):
            if kind[v] == AUGMENTED:
                out_depth[i, t + 1] = d
                continue
            if first[v] < 0:
                st = materialize(v, parent, depth, kind, first, nchild, vkey, size,
                                 tree_key, mode, fan, cdf_p, cdf_h, surv, kbuf)
                if st != OK:
                    return -1
            u1 = unit(walk_key, base + 2 * t)
            u2 = unit(walk_key, base + 2 * t + 1)
            nxt, up, nu = _advance(v, lam, u1, u2, parent, first, nchild)
            if parent[v] >= 0:
                if up:
                    b = b_up[nu]
                    for j in range(H):
                        out_logw[i, j] += lw_up[j, nu]
                else:
                    b = b_down[nu]
                    for j in range(H):
                        out_logw[i, j] += lw_down[j, nu]
                P += b
                B2 += b * b
            v = nxt
            if up:
                d -= 1
            else:
                d += 1
            out_depth[i, t + 1] = d
        out_P[i] = P
        out_B2[i] = B2
    return n_paths


@dataclass
class ShortPaths:
    """Depth paths and Girsanov sums of many short walks on one tree."""

    depths: np.ndarray
    log_weight: np.ndarray
    P: np.ndarray
    B2: np.ndarray
    hs: tuple[float, ...]

    def weights(self, j: int = 0) -> np.ndarray:
        return np.exp(self.log_weight[:, j])

    def remainder(self, j: int) -> np.ndarray:
        h = self.hs[j]
        return self.log_weight[:, j] - h * self.P + 0.5 * h * h * self.B2


def run_short_paths(arena: TreeArena, lam: float, horizon: int, n_paths: int, walk_key,
                    hs=()) -> ShortPaths:
    check_lambda(lam)
    hs = tuple(float(h) for h in hs)
    for h in hs:
        if h < -lam + EPS_MIN:
            raise RegimeError(f"perturbation {h} takes the bias below {EPS_MIN}")
    kmax = arena.spec.max_children
    b_up, b_down, lw_up, lw_down = step_tables(lam, hs, kmax)
    out_depth = np.empty((n_paths, horizon + 1), np.int32)
    out_logw = np.empty((n_paths, len(hs)))
    out_P = np.empty(n_paths)
    out_B2 = np.empty(n_paths)
    reserve = horizon * max(kmax, 1)
    i = 0
    while i < n_paths:
        arena.reserve(max(64 * reserve, arena.n_vertices))
        i = _short_paths(i, n_paths, horizon, out_depth, out_logw, out_P, out_B2,
                         *arena.kernel_args(), np.uint64(walk_key), float(lam),
                         b_up, b_down, lw_up, lw_down, arena.root, reserve)
        if i < 0:
            raise RuntimeError("tree growth failed inside the walk kernel")
    return ShortPaths(out_depth, out_logw, out_P, out_B2, hs)
