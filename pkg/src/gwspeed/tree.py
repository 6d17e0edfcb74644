"""Lazily grown rooted trees: conditioned Galton-Watson trees and oracle trees.

Vertices live in flat, append-only arrays; a vertex's children are attached
exactly once, the first time anything asks for them.  What those children
are is a pure function of ``(tree key, vertex key)`` where the vertex key is
a hash of the path from the root.  Two arenas built from the same key
therefore grow the same tree no matter in which order it is explored.

Conditioning on survival uses survival tags: a backbone vertex draws a child
count ``k ~ p`` together with ``k`` independent survival bits
``Bernoulli(1 - q)`` and the pair is redrawn until at least one bit is set.
Surviving children are backbone vertices, the others are buds of traps and
reproduce with the trap law.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import rng
from .offspring import LawError, OffspringLaw, extinction_probability, trap_law
from .rng import mix64, unit

BACKBONE = 0
TRAP = 1
AUGMENTED = 2
KIND_NAMES = {BACKBONE: "backbone", TRAP: "trap", AUGMENTED: "augmented-root"}

GW = 0
DARY = 1
HALFLINE = 2
MODE_NAMES = {"conditioned-GW": GW, "d-ary": DARY, "half-line": HALFLINE}

ROOT_KEY = np.uint64(0x243F6A8885A308D3)
_CHILD_SALT = np.uint64(0xD1B54A32D192ED03)
_MAX_REJECTIONS = 10**6

OK = 0
CAPACITY = 1
REJECTION = 2


class TreeCapacityError(RuntimeError):
    """The materialised tree would exceed the configured vertex cap."""


@njit(cache=True, inline="always")
def child_key(vkey, i):
    return mix64(mix64(vkey) ^ ((np.uint64(i) + np.uint64(1)) * _CHILD_SALT))


@njit(cache=True, inline="always")
def _inv_cdf(cdf, u):
    k = 0
    while k < cdf.shape[0] - 1 and u >= cdf[k]:
        k += 1
    return k


@njit(cache=True)
def draw_children(tree_key, vkey, vkind, mode, fan, cdf_p, cdf_h, surv, out_kinds):
    """Child count of one vertex; child kinds are written to ``out_kinds``.

    Returns -1 if the survival-tag rejection loop gave up.
    """
    if mode != GW:
        for i in range(fan):
            out_kinds[i] = BACKBONE
        return fan
    base = mix64(tree_key ^ vkey)
    if vkind == TRAP:
        k = _inv_cdf(cdf_h, unit(base, 0))
        for i in range(k):
            out_kinds[i] = TRAP
        return k
    ctr = 0
    for _ in range(_MAX_REJECTIONS):
        k = _inv_cdf(cdf_p, unit(base, ctr))
        ctr += 1
        alive = False
        for i in range(k):
            if unit(base, ctr) < surv:
                out_kinds[i] = BACKBONE
                alive = True
            else:
                out_kinds[i] = TRAP
            ctr += 1
        if alive:
            return k
    return -1


@njit(cache=True)
def materialize(v, parent, depth, kind, first, nchild, vkey, size,
                tree_key, mode, fan, cdf_p, cdf_h, surv, kbuf):
    """Attach the children of ``v`` if that has not happened yet."""
    if first[v] >= 0:
        return OK
    k = draw_children(tree_key, vkey[v], kind[v], mode, fan, cdf_p, cdf_h, surv, kbuf)
    if k < 0:
        return REJECTION
    n = size[0]
    if n + k > parent.shape[0]:
        return CAPACITY
    for i in range(k):
        c = n + i
        parent[c] = v
        depth[c] = depth[v] + 1
        kind[c] = kbuf[i]
        first[c] = -1
        nchild[c] = 0
        vkey[c] = child_key(vkey[v], i)
    first[v] = n
    nchild[v] = k
    size[0] = n + k
    return OK


@njit(cache=True)
def _materialize_to_depth(max_depth, start, parent, depth, kind, first, nchild, vkey, size,
                          tree_key, mode, fan, cdf_p, cdf_h, surv, kbuf):
    i = start
    while i < size[0]:
        if depth[i] < max_depth and kind[i] != AUGMENTED:
            st = materialize(i, parent, depth, kind, first, nchild, vkey, size,
                             tree_key, mode, fan, cdf_p, cdf_h, surv, kbuf)
            if st != OK:
                return i, st
        i += 1
    return i, OK


@dataclass(frozen=True)
class TreeSpec:
    """Everything a kernel needs to grow a tree of a given kind."""

    law: OffspringLaw
    mode: int
    fan: int
    cdf_p: np.ndarray
    cdf_h: np.ndarray
    surv: float

    @classmethod
    def for_law(cls, law: OffspringLaw, mode: str = "conditioned-GW") -> "TreeSpec":
        try:
            m = MODE_NAMES[mode]
        except KeyError:
            raise LawError(f"unknown tree mode {mode!r}; expected one of {sorted(MODE_NAMES)}") from None
        if m == GW:
            if law.mean <= 1.0:
                raise LawError(
                    f"conditioned trees need a supercritical law; {law!r} has mean {law.mean:g}")
            q = extinction_probability(law)
            return cls(law, m, 0, law.cdf(), trap_law(law).cdf(), 1.0 - q)
        if m == DARY:
            if not law.is_deterministic or law.kmax < 1:
                raise LawError(f"d-ary mode needs a point-mass law, got {law!r}")
            return cls(law, m, law.kmax, law.cdf(), np.ones(1), 1.0)
        return cls(OffspringLaw.deterministic(1), m, 1, np.array([0.0, 1.0]), np.ones(1), 1.0)

    @property
    def max_children(self) -> int:
        return self.fan if self.mode != GW else self.law.kmax


class TreeArena:
    """Append-only vertex store for one lazily generated tree.

    With ``augmented=True`` vertex 0 is the extra root ``e*`` (absorbing for
    walks) and the tree root ``e`` is vertex 1; otherwise ``e`` is vertex 0
    and has no parent.
    """

    def __init__(self, spec: TreeSpec, key, augmented: bool = False,
                 capacity: int = 1024, max_vertices: int = 10**8):
        self.spec = spec
        self.key = np.uint64(key)
        self.augmented = bool(augmented)
        self.max_vertices = int(max_vertices)
        cap = max(int(capacity), 4)
        self.parent = np.empty(cap, np.int32)
        self.depth = np.empty(cap, np.int32)
        self.kind = np.empty(cap, np.int8)
        self.first = np.empty(cap, np.int32)
        self.nchild = np.empty(cap, np.int32)
        self.vkey = np.empty(cap, np.uint64)
        self.size = np.zeros(1, np.int64)
        self._kbuf = np.empty(max(spec.max_children, 1), np.int8)
        if self.augmented:
            self._put(0, -1, -1, AUGMENTED, np.uint64(0))
            self.first[0] = 1
            self.nchild[0] = 1
            self._put(1, 0, 0, BACKBONE, ROOT_KEY)
            self.size[0] = 2
        else:
            self._put(0, -1, 0, BACKBONE, ROOT_KEY)
            self.size[0] = 1

    def _put(self, i, parent, depth, kind, key):
        self.parent[i] = parent
        self.depth[i] = depth
        self.kind[i] = kind
        self.first[i] = -1
        self.nchild[i] = 0
        self.vkey[i] = key

    @property
    def root(self) -> int:
        return 1 if self.augmented else 0

    @property
    def n_vertices(self) -> int:
        return int(self.size[0])

    @property
    def capacity(self) -> int:
        return self.parent.shape[0]

    def kernel_args(self):
        s = self.spec
        return (self.parent, self.depth, self.kind, self.first, self.nchild, self.vkey, self.size,
                self.key, s.mode, s.fan, s.cdf_p, s.cdf_h, s.surv, self._kbuf)

    def reserve(self, extra: int) -> None:
        """Make room for ``extra`` more vertices, growing geometrically."""
        need = self.n_vertices + int(extra)
        if need <= self.capacity:
            return
        if need > self.max_vertices:
            raise TreeCapacityError(
                f"tree would need {need} vertices, above the cap of {self.max_vertices}")
        cap = min(max(need, 2 * self.capacity), max(self.max_vertices, need))
        for name in ("parent", "depth", "kind", "first", "nchild", "vkey"):
            old = getattr(self, name)
            new = np.empty(cap, old.dtype)
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def children(self, v: int) -> range:
        if self.kind[v] == AUGMENTED:
            return range(self.root, self.root + 1)
        self.reserve(self.spec.max_children)
        st = materialize(v, *self.kernel_args())
        if st == REJECTION:
            raise RuntimeError("survival-tag sampling did not terminate")
        f = int(self.first[v])
        return range(f, f + int(self.nchild[v]))

    def nu(self, v: int) -> int:
        return len(self.children(v))

    def parent_of(self, v: int) -> int:
        return int(self.parent[v])

    def depth_of(self, v: int) -> int:
        return int(self.depth[v])

    def kind_of(self, v: int) -> str:
        return KIND_NAMES[int(self.kind[v])]

    def is_true_root(self, v: int) -> bool:
        """Root of a tree without ``e*``: its moves ignore the bias."""
        return self.parent[v] < 0 and self.kind[v] != AUGMENTED

    def materialize_to_depth(self, max_depth: int) -> None:
        """Attach children of every vertex above ``max_depth``."""
        start = 0
        while True:
            start, st = _materialize_to_depth(max_depth, start, *self.kernel_args())
            if st == OK:
                return
            if st == REJECTION:
                raise RuntimeError("survival-tag sampling did not terminate")
            self.reserve(max(self.n_vertices, self.spec.max_children))

    def dump(self, fh) -> None:
        """Debug dump, one ``id parent depth kind`` record per vertex."""
        for i in range(self.n_vertices):
            fh.write(f"{i} {self.parent[i]} {self.depth[i]} {KIND_NAMES[int(self.kind[i])]}\n")


def tree_key(seed: int, replica: int = 0) -> np.uint64:
    return rng.stream_key(seed, replica, rng.TREE)


def new_conditioned_tree(law: OffspringLaw, seed: int, with_augmented_root: bool = False,
                         **kwargs) -> TreeArena:
    """Galton-Watson tree with law ``law`` conditioned on non-extinction."""
    return TreeArena(TreeSpec.for_law(law, "conditioned-GW"), tree_key(seed),
                     augmented=with_augmented_root, **kwargs)


def new_dary_tree(d: int, with_augmented_root: bool = False, **kwargs) -> TreeArena:
    return TreeArena(TreeSpec.for_law(OffspringLaw.deterministic(d), "d-ary"), np.uint64(0),
                     augmented=with_augmented_root, **kwargs)


def new_half_line(with_augmented_root: bool = False, **kwargs) -> TreeArena:
    return TreeArena(TreeSpec.for_law(OffspringLaw.deterministic(1), "half-line"), np.uint64(0),
                     augmented=with_augmented_root, **kwargs)


def _trap_setup(law: OffspringLaw):
    if law.probs[0] == 0.0:
        raise LawError("the law has p0 = 0, so there are no traps")
    h = trap_law(law).p
    # conditional probabilities of value k given value >= k
    tail = np.cumsum(h[::-1])[::-1]
    cond = np.divide(h, tail, out=np.ones_like(h), where=tail > 0)
    return h, cond


def _next_generation(w, cond, gen):
    """Sum of ``w`` i.i.d. offspring counts per replica, as a multinomial split."""
    remaining = w.copy()
    nxt = np.zeros(w.shape[0], np.int64)
    K = len(cond) - 1
    for k in range(K):
        if cond[k] >= 1.0:
            nxt += k * remaining
            remaining[:] = 0
            break
        nk = gen.binomial(remaining, cond[k])
        nxt += k * nk
        remaining -= nk
    return nxt + K * remaining


def trap_generation_sizes(law: OffspringLaw, n_max: int, replicas: int, seed: int) -> np.ndarray:
    """Generation sizes ``W_0..W_n_max`` of independent trap trees.

    Returns an ``(n_max + 1, replicas)`` integer array with ``W_0 = 1``.
    Each generation is a multinomial split of the previous one over the trap
    offspring values, drawn as successive conditional binomials.
    """
    h, cond = _trap_setup(law)
    gen = rng.Stream.from_seed(seed, rng.AUX).numpy_generator()
    out = np.zeros((n_max + 1, replicas), np.int64)
    w = np.ones(replicas, np.int64)
    out[0] = w
    for n in range(1, n_max + 1):
        w = _next_generation(w, cond, gen)
        out[n] = w
    return out


def spine_generation_sizes(law: OffspringLaw, n_max: int, replicas: int, seed: int) -> np.ndarray:
    """Generation sizes of size-biased trap trees (one distinguished line of descent).

    The spine vertex has ``k`` children with probability ``k h_k / m`` (``m``
    the trap mean); one of them carries the spine on, the others start
    ordinary trap trees.  For any ``g``, ``E[W_n g(W_n)] = m^n E[g(W'_n)]``
    with ``W'`` these sizes, so moments divided by ``m^n`` are estimated
    without waiting for rare survivals.
    """
    h, cond = _trap_setup(law)
    k = np.arange(len(h))
    sb = k * h
    if sb.sum() == 0:
        raise LawError("trap law has mean 0; there is no size-biased tree")
    sb = sb / sb.sum()
    gen = rng.Stream.from_seed(seed, rng.AUX, 1).numpy_generator()
    out = np.zeros((n_max + 1, replicas), np.int64)
    off = np.zeros(replicas, np.int64)  # vertices off the spine
    out[0] = 1
    for n in range(1, n_max + 1):
        ks = gen.choice(k, size=replicas, p=sb)
        off = _next_generation(off, cond, gen) + ks - 1
        out[n] = off + 1
    return out
