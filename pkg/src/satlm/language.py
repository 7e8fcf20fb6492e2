"""Exact weighted languages built from satisfiable formulas.

A member is ``enc(φ)·a`` where ``a`` satisfies ``φ``; it weighs
``(1/3)**(|x|+1)``.  The full-support variant adds ``ε·(1/9)**(|x|+1)`` to
every string.  All quantities here are :class:`fractions.Fraction`.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Protocol, Union

import numpy as np

from . import formula as fm
from .errors import CapacityError, DecodeError, IncompleteCode, UndefinedConditional

THIRD = Fraction(1, 3)
NINTH = Fraction(1, 9)
END = "$"
SYMBOLS = ("0", "1", END)
TRIE_CAP = 20
FULL_SUPPORT_TRIE_CAP = 14

MEMBERS_ONLY = "members_only"
FULL_SUPPORT = "full_support"


@dataclass(frozen=True)
class PrefixMass:
    z1: Fraction
    z2: Fraction
    total: Fraction


@dataclass(frozen=True)
class SatWeightedLanguage:
    """``max_len`` restricts the language to strings of at most that length.

    Prefixes that stop inside a formula code have infinitely many member
    continuations, so their mass is only computed for restricted languages.
    ``cnf3_only`` keeps just the formulas whose tree is a right-folded 3-CNF
    (the shape :func:`satlm.formula.cnf3_to_formula` builds).
    """

    variant: str = MEMBERS_ONLY
    epsilon: Fraction = Fraction(1)
    max_len: Optional[int] = None
    cnf3_only: bool = False
    cap: int = fm.ENUMERATION_CAP

    def __post_init__(self):
        if self.variant not in (MEMBERS_ONLY, FULL_SUPPORT):
            raise ValueError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "epsilon", Fraction(self.epsilon))
        if self.variant == FULL_SUPPORT and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def restrict(self, max_len: int) -> "SatWeightedLanguage":
        return SatWeightedLanguage(self.variant, self.epsilon, max_len, self.cnf3_only, self.cap)

    # -- membership ----------------------------------------------------

    def _admits(self, f: fm.Formula) -> bool:
        return not self.cnf3_only or fm.formula_to_cnf3(f) is not None

    def member_weight(self, x: str) -> Fraction:
        if self.max_len is not None and len(x) > self.max_len:
            return Fraction(0)
        try:
            f, used = fm.dec(x)
        except DecodeError:
            return Fraction(0)
        rest = x[used:]
        if len(rest) != f.var_count or not self._admits(f):
            return Fraction(0)
        return THIRD ** (len(x) + 1) if fm.evaluate(f, rest) else Fraction(0)

    def tail_weight(self, x: str) -> Fraction:
        if self.variant != FULL_SUPPORT:
            return Fraction(0)
        if self.max_len is not None and len(x) > self.max_len:
            return Fraction(0)
        return self.epsilon * NINTH ** (len(x) + 1)

    def weight(self, x: str) -> Fraction:
        return self.member_weight(x) + self.tail_weight(x)

    # -- prefix masses --------------------------------------------------

    def _z1(self, prefix: str) -> Fraction:
        try:
            f, used = fm.dec(prefix)
        except IncompleteCode:
            return self._z1_inside_code(prefix)
        except DecodeError:
            return Fraction(0)
        partial = prefix[used:]
        j = f.var_count
        if len(partial) > j or not self._admits(f):
            return Fraction(0)
        length = used + j
        if self.max_len is not None and length > self.max_len:
            return Fraction(0)
        hits = fm.count_with_prefix(_table(f, self.cap), j, partial)
        return hits * THIRD ** (length + 1)

    def _z1_inside_code(self, prefix: str) -> Fraction:
        if self.max_len is None:
            raise CapacityError(
                "prefix ends inside a formula code; its mass is an infinite sum "
                "(restrict the language with max_len)")
        if self.max_len > TRIE_CAP:
            raise CapacityError(f"max_len {self.max_len} exceeds the cap of {TRIE_CAP}")
        total = Fraction(0)
        for f, code in _formulas(self.max_len):
            if code.startswith(prefix) and self._admits(f):
                total += int(_table(f, self.cap).sum()) * THIRD ** (len(code) + f.var_count + 1)
        return total

    def tail_mass(self, prefix: str) -> Fraction:
        """Unscaled tail mass; closed form ``(1/9)**(|x̂|+1) · 9/7`` when unrestricted."""
        if self.variant != FULL_SUPPORT:
            return Fraction(0)
        n = len(prefix)
        if self.max_len is None:
            return NINTH ** (n + 1) * Fraction(9, 7)
        if n > self.max_len:
            return Fraction(0)
        return sum((2 ** m * NINTH ** (n + m + 1) for m in range(self.max_len - n + 1)),
                   Fraction(0))

    def prefix_mass(self, prefix: str) -> PrefixMass:
        z1 = self._z1(prefix)
        z2 = self.tail_mass(prefix)
        return PrefixMass(z1, z2, z1 + self.epsilon * z2)

    def local_prob(self, prefix: str, symbol: str) -> Fraction:
        return self.local_distribution(prefix)[symbol]

    def local_distribution(self, prefix: str) -> dict[str, Fraction]:
        z = self.prefix_mass(prefix).total
        if z == 0:
            raise UndefinedConditional(f"prefix {prefix!r} has zero mass")
        return {
            "0": self.prefix_mass(prefix + "0").total / z,
            "1": self.prefix_mass(prefix + "1").total / z,
            END: self.weight(prefix) / z,
        }


@lru_cache(maxsize=256)
def _table(f: fm.Formula, cap: int) -> np.ndarray:
    return fm.truth_table(f, cap)


@lru_cache(maxsize=32)
def _formulas(max_len: int) -> tuple[tuple[fm.Formula, str], ...]:
    return tuple(fm.enumerate_formulas(max_len))


def members(L: SatWeightedLanguage, n: int) -> dict[str, Fraction]:
    """Every member string of length at most ``n`` with its member weight."""
    if n > TRIE_CAP:
        raise CapacityError(f"n={n} exceeds the cap of {TRIE_CAP}")
    out = {}
    for f, code in _formulas(n):
        if not L._admits(f):
            continue
        w = THIRD ** (len(code) + f.var_count + 1)
        for a in fm.satisfying_assignments(f, L.cap):
            out[code + a] = w
    return out


# ---------------------------------------------------------------- local models


class LocalModel(Protocol):
    max_len: Optional[int]

    def conditional(self, prefix: str) -> Optional[dict[str, Fraction]]:
        """Distribution over ``0``, ``1``, ``$`` after ``prefix``; None off support."""


@dataclass(frozen=True)
class UniformLocalModel:
    max_len: Optional[int] = None

    def conditional(self, prefix: str) -> dict[str, Fraction]:
        return {s: THIRD for s in SYMBOLS}


@dataclass
class TrieModel:
    """Exact local conditionals of a language restricted to length ``max_len``.

    Only prefixes with positive mass are stored.
    """

    max_len: int
    table: dict[str, dict[str, Fraction]] = field(default_factory=dict)
    mass: dict[str, Fraction] = field(default_factory=dict)

    def conditional(self, prefix: str) -> Optional[dict[str, Fraction]]:
        return self.table.get(prefix)

    def __len__(self) -> int:
        return len(self.table)


def build_trie_model(L: SatWeightedLanguage, n: int, cap: int = TRIE_CAP) -> TrieModel:
    if n > cap:
        raise CapacityError(f"trie depth {n} exceeds the cap of {cap}")
    weights: dict[str, Fraction] = dict(members(L, n))
    if L.variant == FULL_SUPPORT:
        if n > FULL_SUPPORT_TRIE_CAP:
            raise CapacityError(f"full-support trie depth {n} exceeds {FULL_SUPPORT_TRIE_CAP}")
        for length in range(n + 1):
            tail = L.epsilon * NINTH ** (length + 1)
            for i in range(1 << length):
                x = format(i, f"0{length}b") if length else ""
                weights[x] = weights.get(x, Fraction(0)) + tail
    mass: dict[str, Fraction] = {}
    for x, w in weights.items():
        for t in range(len(x) + 1):
            mass[x[:t]] = mass.get(x[:t], Fraction(0)) + w
    table = {}
    for prefix, z in mass.items():
        if z == 0:
            continue
        table[prefix] = {
            "0": mass.get(prefix + "0", Fraction(0)) / z,
            "1": mass.get(prefix + "1", Fraction(0)) / z,
            END: weights.get(prefix, Fraction(0)) / z,
        }
    return TrieModel(n, table, mass)


def chain_rule_score(q: LocalModel, x: str) -> Fraction:
    """``∏ q(x_t | x_<t) · q($ | x)``; zero once the prefix leaves the support."""
    if q.max_len is not None and len(x) > q.max_len:
        raise ValueError(f"string of length {len(x)} exceeds model max_len {q.max_len}")
    score = Fraction(1)
    for t in range(len(x) + 1):
        cond = q.conditional(x[:t])
        if cond is None:
            return Fraction(0)
        score *= cond[x[t]] if t < len(x) else cond[END]
        if score == 0:
            return score
    return score


@dataclass(frozen=True)
class Sample:
    bits: str
    truncated: bool


def sample(q: LocalModel, seed: int, max_len: int) -> Sample:
    """Ancestral sampling until ``$`` or ``max_len`` symbols."""
    rng = random.Random(seed)
    x = ""
    while len(x) < max_len:
        cond = q.conditional(x)
        if cond is None:
            raise ValueError(f"prefix {x!r} is off the model support")
        u = Fraction(rng.getrandbits(53), 1 << 53)
        acc = Fraction(0)
        for s in SYMBOLS:
            acc += cond[s]
            if u < acc:
                break
        if s == END:
            return Sample(x, False)
        x += s
    cond = q.conditional(x)
    if cond is not None and cond[END] == 1:
        return Sample(x, False)
    return Sample(x, True)


# ---------------------------------------------------------------- separation


@dataclass(frozen=True)
class SeparationProbe:
    """Approximation factor given by its square, so ``lambda_sq=2`` is λ=√2."""

    lambda_sq: Fraction
    k: int
    epsilon: Fraction = Fraction(1)

    @classmethod
    def for_lambda(cls, lam: Union[int, Fraction, str], epsilon=1, squared: bool = False,
                   full_support: bool = False) -> "SeparationProbe":
        lam_sq = Fraction(lam) if squared else Fraction(lam) ** 2
        k = fm.choose_k(lam_sq, epsilon if full_support else None, squared=True)
        return cls(lam_sq, k, Fraction(epsilon))

    def __post_init__(self):
        object.__setattr__(self, "lambda_sq", Fraction(self.lambda_sq))
        object.__setattr__(self, "epsilon", Fraction(self.epsilon))
        if self.k < fm.choose_k(self.lambda_sq, squared=True):
            raise ValueError(f"k={self.k} is too small for lambda^2={self.lambda_sq}")


@dataclass(frozen=True)
class SeparationResult:
    p0: Fraction
    """Exact ``p(0 | enc(φ′))``."""
    p0_if_unsat: Fraction
    """The same conditional had φ no satisfiers (same code length and variables)."""
    bound: Fraction
    """Members-only: the satisfiable-case ceiling ``1/(1+2**(k-1))``.
    Full-support: the guaranteed ratio ``(1+2**(k-1))/(1+2ε/7)``."""
    decided_sat: bool
    formula: fm.Formula
    k: int

    @property
    def ratio(self) -> Fraction:
        return self.p0_if_unsat / self.p0


def separation_gap(L: SatWeightedLanguage, phi: fm.Formula,
                   probe: SeparationProbe) -> SeparationResult:
    """Exact ``p(0 | enc(AddOneAndBlowUp(φ, k)))`` and the λ-robust decision.

    ``decided_sat`` holds iff no value within factor λ of ``p0`` is also
    within factor λ of the unsatisfiable-case value, read on the sat side:
    ``λ²·p0 < p0_if_unsat``.
    """
    k = probe.k
    prime = fm.add_one_and_blow_up(phi, k)
    code = fm.enc(prime)
    z0 = L.prefix_mass(code + "0").total
    z1 = L.prefix_mass(code + "1")
    end = L.weight(code)
    p0 = z0 / (z0 + z1.total + end)
    p0_unsat = z0 / (z0 + L.epsilon * z1.z2 + end)
    if L.variant == FULL_SUPPORT:
        bound = (1 + Fraction(2) ** (k - 1)) / (1 + 2 * L.epsilon / 7)
    else:
        bound = Fraction(1, 1 + 2 ** (k - 1))
    decided = probe.lambda_sq * p0 < p0_unsat
    return SeparationResult(p0, p0_unsat, bound, decided, prime, k)
