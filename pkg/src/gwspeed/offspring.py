"""Offspring laws with finite support and their generating-function algebra."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Mapping

import numpy as np

_FIXED_POINT_TOL = 1e-14
_FIXED_POINT_MAXITER = 10**6


class LawError(ValueError):
    """Invalid offspring table or a law outside an operation's domain."""


@dataclass(frozen=True)
class OffspringLaw:
    """Finite-support offspring distribution ``k -> p_k``.

    ``probs[k]`` is the probability of ``k`` children, ``k = 0..kmax``.
    Point masses are admitted (d-ary and half-line oracles) and reported by
    :attr:`is_deterministic`.  ``empty`` marks the degenerate trap law of a
    leafless tree.
    """

    probs: tuple[float, ...]
    empty: bool = field(default=False, compare=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise LawError("offspring table is empty")
        for k, pk in enumerate(p):
            if not np.isfinite(pk) or pk < 0:
                raise LawError(f"offspring key {k}: probability {pk!r} is not a non-negative number")
        if abs(p.sum() - 1.0) > 1e-12:
            raise LawError(f"offspring probabilities sum to {p.sum()!r}, not 1")
        # trailing zeros carry no information
        kmax = int(np.flatnonzero(p)[-1])
        object.__setattr__(self, "probs", tuple(float(x) for x in p[: kmax + 1]))

    @classmethod
    def from_mapping(cls, table: Mapping[int, float]) -> "OffspringLaw":
        if not table:
            raise LawError("offspring table is empty")
        for k in table:
            if not isinstance(k, (int, np.integer)) or k < 0:
                raise LawError(f"offspring key {k!r} is not a non-negative integer")
        kmax = max(table)
        p = [0.0] * (kmax + 1)
        for k, v in table.items():
            try:
                v = float(v)
            except (TypeError, ValueError):
                raise LawError(f"offspring key {k}: probability {v!r} is not a number") from None
            if not np.isfinite(v) or v < 0:
                raise LawError(f"offspring key {k}: probability {v!r} is not a non-negative number")
            p[k] = v
        return cls(tuple(p))

    @classmethod
    def deterministic(cls, d: int) -> "OffspringLaw":
        return cls.from_mapping({d: 1.0})

    @property
    def kmax(self) -> int:
        return len(self.probs) - 1

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.probs)

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(self.kmax + 1), self.p))

    @property
    def is_deterministic(self) -> bool:
        return max(self.probs) == 1.0

    def as_dict(self) -> dict[int, float]:
        return {k: pk for k, pk in enumerate(self.probs) if pk > 0}

    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.p)
        c[-1] = 1.0
        return c

    def __repr__(self):
        return f"OffspringLaw({self.as_dict()})"


def _check_unit(s: float) -> None:
    if not 0.0 <= s <= 1.0:
        raise LawError(f"generating function argument {s!r} outside [0, 1]")


def pgf_eval(law: OffspringLaw, s: float) -> float:
    _check_unit(s)
    return float(np.polynomial.polynomial.polyval(s, law.p))


def pgf_derivative(law: OffspringLaw, s: float) -> float:
    _check_unit(s)
    if law.kmax == 0:
        return 0.0
    dp = np.arange(1, law.kmax + 1) * law.p[1:]
    return float(np.polynomial.polynomial.polyval(s, dp))


def extinction_probability(law: OffspringLaw) -> float:
    """Smallest fixed point of the pgf, by monotone iteration from 0."""
    if law.probs[0] == 0.0:
        return 0.0
    if law.mean <= 1.0:
        # (sub)critical with p0 > 0 dies out; iteration would crawl like 1/n
        return 1.0
    s = 0.0
    for _ in range(_FIXED_POINT_MAXITER):
        nxt = pgf_eval(law, s)
        # relative once q is tiny, so a small p0 still gets accurate traps
        if abs(nxt - s) < _FIXED_POINT_TOL * min(1.0, nxt):
            return nxt
        s = nxt
    raise LawError(f"extinction iteration did not converge for {law!r}")


def lambda_c(law: OffspringLaw) -> float:
    """Critical bias ``f'(q)``: the mean of the trap law."""
    return pgf_derivative(law, extinction_probability(law))


def _require_supercritical(law: OffspringLaw) -> float:
    q = extinction_probability(law)
    if law.mean <= 1.0 or q >= 1.0:
        raise LawError(f"law {law!r} is not supercritical (mean {law.mean:g})")
    return q


def backbone_law(law: OffspringLaw) -> OffspringLaw:
    """Offspring law of the surviving skeleton, ``g(s) = (f((1-q)s+q) - q)/(1-q)``."""
    q = _require_supercritical(law)
    out = np.zeros(law.kmax + 1)
    for k in range(1, law.kmax + 1):
        tail = sum(law.probs[j] * comb(j, k) * q ** (j - k) for j in range(k, law.kmax + 1))
        out[k] = (1 - q) ** (k - 1) * tail
    out /= out.sum()  # only rounding is removed here
    return OffspringLaw(tuple(out))


def trap_law(law: OffspringLaw) -> OffspringLaw:
    """Offspring law of the finite bushes, ``h(s) = f(qs)/q``, i.e. ``p_k q^(k-1)``.

    A leafless law has no bushes; the point mass at 0 is returned with
    ``empty=True``.
    """
    q = extinction_probability(law)
    if law.probs[0] == 0.0 or q == 0.0:
        return OffspringLaw((1.0,), empty=True)
    # p_k q^k / q; the 1/q goes into the normalisation to avoid overflow
    out = np.array([law.probs[k] * q**k for k in range(law.kmax + 1)])
    out /= out.sum()
    return OffspringLaw(tuple(out))


def conditioned_root_law(law: OffspringLaw) -> OffspringLaw:
    """Child count of a vertex conditioned to have an infinite line of descent."""
    q = _require_supercritical(law)
    out = np.array([law.probs[k] * (1 - q**k) / (1 - q) for k in range(law.kmax + 1)])
    out /= out.sum()
    return OffspringLaw(tuple(out))


def sample(law: OffspringLaw, stream) -> int:
    """One draw by inverse CDF from a :class:`~gwspeed.rng.Stream`."""
    u = stream.uniform()
    return int(np.searchsorted(law.cdf(), u, side="right"))
