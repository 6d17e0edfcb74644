"""Level-regeneration times, i.i.d. blocks and the non-backtracking law.

A time ``n >= 1`` regenerates when ``d(Z_n)`` is a strict depth record and
the walk never again visits depth ``d(Z_{n-1})``.  The second condition
needs the whole future, so at a finite horizon a surviving candidate at
level ``L`` is only confirmed when the depth record has since climbed to at
least ``L + censor_buffer``; the rest are reported as censored.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import rng
from .offspring import OffspringLaw
from .tree import TreeArena, TreeSpec
from .walk import ABSORBED, NB_CONFIRMED, RegimeError, WalkRun, WalkTrace, run_walk

DEFAULT_BUFFER = 50


class NBRejectionError(RuntimeError):
    """Too many consecutive non-backtracking rejections."""


@njit(cache=True)
def _candidates(depths):
    n = depths.shape[0]
    times = np.empty(n, np.int64)
    levels = np.empty(n, np.int64)
    ns = 0
    maxd = depths[0]
    for t in range(1, n):
        d = depths[t]
        if abs(d - depths[t - 1]) != 1:
            return times[:0], levels[:0], t
        while ns > 0 and levels[ns - 1] > d:
            ns -= 1
        if d > maxd:
            maxd = d
            times[ns] = t
            levels[ns] = d
            ns += 1
    return times[:ns], levels[:ns], -1


@dataclass
class Regenerations:
    confirmed: np.ndarray
    censored: np.ndarray
    max_depth: int


def detect_regenerations(depths, censor_buffer: int = DEFAULT_BUFFER) -> Regenerations:
    """Single-pass regeneration detection on a nearest-neighbour depth path.

    Candidates are depth records; one at level L dies when the path later
    returns to L - 1.  Survivors with level above ``max depth - censor_buffer``
    are censored.
    """
    d = np.ascontiguousarray(depths, dtype=np.int64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("need a non-empty 1-d depth sequence")
    times, levels, bad = _candidates(d)
    if bad >= 0:
        raise ValueError(f"depth path is not nearest-neighbour at index {bad}")
    maxd = int(d.max())
    ok = levels <= maxd - censor_buffer
    return Regenerations(times[ok].copy(), times[~ok].copy(), maxd)


@dataclass(frozen=True)
class RegenBlock:
    index: int
    duration: int
    displacement: int
    b_sum: float
    b2_sum: float
    excursions: int
    trap_time: int


BLOCK_FIELDS = ("duration", "displacement", "b_sum", "b2_sum", "excursions", "trap_time")


@dataclass
class BlockTable:
    """Column store of i.i.d. regeneration blocks (block 0 never included)."""

    duration: np.ndarray
    displacement: np.ndarray
    b_sum: np.ndarray
    b2_sum: np.ndarray
    excursions: np.ndarray
    trap_time: np.ndarray
    replica: np.ndarray
    index: np.ndarray

    @classmethod
    def empty(cls) -> "BlockTable":
        i = np.zeros(0, np.int64)
        f = np.zeros(0)
        return cls(i, i, f, f, i, i, i, i)

    @classmethod
    def concat(cls, tables) -> "BlockTable":
        tables = list(tables)
        if not tables:
            return cls.empty()
        return cls(*(np.concatenate([getattr(t, name) for t in tables])
                     for name in (*BLOCK_FIELDS, "replica", "index")))

    def __len__(self):
        return int(self.duration.shape[0])

    def __getitem__(self, i) -> RegenBlock:
        return RegenBlock(int(self.index[i]), int(self.duration[i]), int(self.displacement[i]),
                          float(self.b_sum[i]), float(self.b2_sum[i]),
                          int(self.excursions[i]), int(self.trap_time[i]))

    def to_array(self) -> np.ndarray:
        """``(n, 4)`` float array: duration, displacement, b_sum, b2_sum."""
        return np.column_stack([self.duration, self.displacement, self.b_sum, self.b2_sum]).astype(float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replica", "index", "duration", "displacement", "b_sum", "excursions", "trap_time"])
            for i in range(len(self)):
                w.writerow([int(self.replica[i]), int(self.index[i]), int(self.duration[i]),
                            int(self.displacement[i]), repr(float(self.b_sum[i])),
                            int(self.excursions[i]), int(self.trap_time[i])])


@dataclass
class Extraction:
    blocks: BlockTable
    block0: RegenBlock | None
    tail_steps: int
    total_steps: int
    notes: list[str] = field(default_factory=list)


def _cumulative(trace):
    """Running sums at every time for a retained-log :class:`WalkTrace`."""
    kind = trace.arena.kind
    zs = np.asarray(trace.vertices)
    b = np.asarray(trace.b, dtype=float)
    in_trap = kind[zs[:-1]] == 1
    enter = (~in_trap) & (kind[zs[1:]] == 1)
    z = np.zeros(1)
    zi = np.zeros(1, np.int64)
    return {"time": np.arange(len(zs)), "level": np.asarray(trace.depths),
            "P": np.concatenate([z, np.cumsum(b)]), "B2": np.concatenate([z, np.cumsum(b * b)]),
            "trap": np.concatenate([zi, np.cumsum(in_trap)]), "exc": np.concatenate([zi, np.cumsum(enter)])}


def extract_blocks(trace, times, replica: int = 0) -> Extraction:
    """Cut a trace at confirmed regeneration ``times``.

    ``trace`` is either a kernel :class:`WalkRun` (running sums are known at
    its candidate times) or a retained-log :class:`WalkTrace`.  The segment
    before the first time is returned separately as ``block0``.
    """
    times = np.asarray(times, dtype=np.int64)
    if isinstance(trace, WalkRun):
        cum = trace.cand
        pos = np.searchsorted(cum["time"], times)
        if np.any(pos >= len(cum["time"])) or np.any(cum["time"][pos] != times):
            raise ValueError("regeneration times must be candidates of this run")
        total = trace.steps
        d0 = None
    else:
        cum = _cumulative(trace)
        pos = times
        total = trace.n
        d0 = trace.depths[0]
    notes = []
    if len(times) < 3:
        notes.append(f"only {len(times)} confirmed regeneration times; no blocks extracted")
        return Extraction(BlockTable.empty(), None, 0 if not len(times) else total - int(times[-1]),
                          total, notes)
    sel = {k: np.asarray(a)[pos] for k, a in cum.items()}
    blocks = BlockTable(
        duration=np.diff(sel["time"]).astype(np.int64),
        displacement=np.diff(sel["level"]).astype(np.int64),
        b_sum=np.diff(sel["P"]),
        b2_sum=np.diff(sel["B2"]),
        excursions=np.diff(sel["exc"]).astype(np.int64),
        trap_time=np.diff(sel["trap"]).astype(np.int64),
        replica=np.full(len(times) - 1, replica, np.int64),
        index=np.arange(1, len(times), dtype=np.int64),
    )
    if d0 is None:
        d0 = 0
    block0 = RegenBlock(0, int(sel["time"][0]), int(sel["level"][0] - d0), float(sel["P"][0]),
                        float(sel["B2"][0]), int(sel["exc"][0]), int(sel["trap"][0]))
    return Extraction(blocks, block0, total - int(times[-1]), total, notes)


def confirmed_times(run: WalkRun, censor_buffer: int = DEFAULT_BUFFER) -> np.ndarray:
    ok = run.cand["level"] <= run.max_depth - censor_buffer
    return run.cand["time"][ok]


# --- multi-replica driver ----------------------------------------------------

@dataclass
class ReplicaResult:
    replica: int
    lam: float
    blocks: BlockTable
    block0: RegenBlock | None
    tail_steps: int
    steps: int
    final_depth: int
    P: float
    B2: float
    log_weight: np.ndarray
    remainder_ok: bool
    n_vertices: int


def _run_replica(spec: TreeSpec, lam: float, steps: int, seed: int, replica: int,
                 censor_buffer: int, hs: tuple, max_vertices: int, tree_replica=None) -> ReplicaResult:
    from .walk import remainder_bound, remainder_slack

    tr = replica if tree_replica is None else tree_replica
    arena = TreeArena(spec, rng.stream_key(seed, tr, rng.TREE), capacity=4 * steps + 16,
                      max_vertices=max_vertices)
    run = run_walk(arena, lam, steps, rng.stream_key(seed, tr, rng.WALK), hs=hs)
    ex = extract_blocks(run, confirmed_times(run, censor_buffer), replica=replica)
    r_ok = all(abs(run.remainder(j)) <= remainder_bound(run.steps, lam, h) + remainder_slack(run.steps, lam, h)
               for j, h in enumerate(hs))
    return ReplicaResult(replica, lam, ex.blocks, ex.block0, ex.tail_steps, run.steps,
                         run.final_depth, run.P, run.B2, run.log_weight, r_ok, arena.n_vertices)


@dataclass
class Simulation:
    """Pooled output of independent replicas at one bias."""

    lam: float
    replicas: list[ReplicaResult]

    @property
    def blocks(self) -> BlockTable:
        return BlockTable.concat(r.blocks for r in self.replicas)

    @property
    def total_steps(self) -> int:
        return sum(r.steps for r in self.replicas)

    @property
    def final_depths(self) -> np.ndarray:
        return np.array([r.final_depth for r in self.replicas])

    @property
    def remainder_ok(self) -> bool:
        return all(r.remainder_ok for r in self.replicas)


def simulate(spec: TreeSpec, lam: float, steps: int, replicas: int, seed: int,
             censor_buffer: int = DEFAULT_BUFFER, hs=(), workers: int = 1,
             max_vertices: int = 10**8, replica_offset: int = 0) -> Simulation:
    """Run ``replicas`` independent (tree, walk) pairs of ``steps`` moves each.

    Replica ``i`` draws its tree from ``stream_key(seed, i, TREE)`` and its
    walk from ``stream_key(seed, i, WALK)``, so the output is a function of
    the arguments alone and walks at different biases with the same seed
    share trees and uniforms.
    """
    ids = range(replica_offset, replica_offset + replicas)
    args = [(spec, lam, steps, seed, i, censor_buffer, tuple(hs), max_vertices) for i in ids]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_run_replica_star, args))
    else:
        out = [_run_replica(*a) for a in args]
    return Simulation(float(lam), out)


def _run_replica_star(a):
    return _run_replica(*a)


# --- non-backtracking episodes -----------------------------------------------

@dataclass
class NBSample:
    """First regeneration block of accepted non-backtracking episodes."""

    tau1: np.ndarray
    displacement: np.ndarray
    b_sum: np.ndarray
    attempts: int

    @property
    def acceptance(self) -> float:
        return len(self.tau1) / self.attempts


def sample_nb_episode(spec: TreeSpec, lam: float, horizon: int, seed: int, episode: int = 0,
                      censor_buffer: int = DEFAULT_BUFFER, max_rejections: int = 10**4,
                      start_attempt: int = 0):
    """One episode from e on a fresh tree with ``e*`` attached, conditioned
    on never hitting ``e*``.

    Episodes that hit ``e*`` before the first candidate is buffered are
    thrown away together with their tree.  Returns ``(run, attempts)``
    where ``run`` is the accepted :class:`WalkRun`.
    """
    _check_transient(spec, lam)
    for k in range(max_rejections):
        a = start_attempt + k
        arena = TreeArena(spec, rng.stream_key(seed, episode, a, rng.TREE), augmented=True)
        run = run_walk(arena, lam, horizon, rng.stream_key(seed, episode, a, rng.WALK),
                       nb_buffer=censor_buffer)
        if run.status == NB_CONFIRMED:
            return run, k + 1
        if run.status != ABSORBED:
            raise RuntimeError(f"episode did not confirm a regeneration within {horizon} steps")
    raise NBRejectionError(
        f"{max_rejections} consecutive episodes returned to e*; bias {lam} is probably too close "
        f"to the edge of the transient window")


def sample_nb_blocks(spec: TreeSpec, lam: float, n: int, seed: int, horizon: int = 10**7,
                     censor_buffer: int = DEFAULT_BUFFER, max_rejections: int = 10**4) -> NBSample:
    tau, disp, bs = np.empty(n, np.int64), np.empty(n, np.int64), np.empty(n)
    attempts = 0
    for i in range(n):
        run, a = sample_nb_episode(spec, lam, horizon, seed, i, censor_buffer, max_rejections)
        attempts += a
        tau[i] = run.cand["time"][0]
        disp[i] = run.cand["level"][0]
        bs[i] = run.cand["P"][0]
    return NBSample(tau, disp, bs, attempts)


def _check_transient(spec: TreeSpec, lam: float) -> None:
    mu = spec.law.mean
    if lam >= mu:
        raise RegimeError(f"bias {lam} is not below the mean offspring {mu:g}: the walk is recurrent")
