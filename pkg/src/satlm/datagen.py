"""Random 3-SAT corpora at the phase-transition clause density.

Each corpus line is ``dimacs<TAB>target`` where ``target`` is a satisfying
assignment of the add-one formula (indicator bit first), drawn uniformly
among all of its satisfiers, or the literal ``UNSAT`` when the formula has
no satisfier (the only add-one satisfier is then all zeros).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .formula import Cnf3Formula, dimacs_decode, dimacs_encode, random_cnf3

ALPHA = Fraction(42667, 10000)
SPLITS = ("train", "dev", "test")
UNSAT = "UNSAT"


def clause_count(vars: int, alpha: Fraction = ALPHA) -> int:
    return math.floor(Fraction(alpha) * vars)


def canonicalize(f: Cnf3Formula) -> Cnf3Formula:
    """Relabel variables so use counts are non-increasing in the index.

    Ties keep the original order, so the relabeling is deterministic.
    """
    counts = f.use_counts()
    order = sorted(range(1, f.var_count + 1), key=lambda v: (-counts[v - 1], v))
    new = {old: i + 1 for i, old in enumerate(order)}
    clauses = tuple(tuple(new[abs(v)] * (1 if v > 0 else -1) for v in c) for c in f.clauses)
    return Cnf3Formula(f.var_count, clauses)


def gen_hard3sat(vars: int, seed, alpha: Fraction = ALPHA) -> Cnf3Formula:
    """``floor(alpha * vars)`` uniform 3-clauses, canonicalized by use count.

    ``seed`` is anything :func:`numpy.random.default_rng` accepts, or a
    generator that is then consumed.
    """
    if vars < 3:
        raise ValueError(f"3-SAT needs at least 3 variables, got {vars}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return canonicalize(random_cnf3(rng, vars, clause_count(vars, alpha)))


def _assignment_bits(j: int) -> np.ndarray:
    """All ``2**j`` assignments as rows, big-endian (row ``i`` spells ``i``)."""
    idx = np.arange(1 << j, dtype=np.int64)[:, None]
    return ((idx >> np.arange(j - 1, -1, -1)) & 1).astype(bool)


def satisfier_mask(f: Cnf3Formula) -> np.ndarray:
    """Boolean vector over all assignments, by brute force."""
    bits = _assignment_bits(f.var_count)
    ok = np.ones(len(bits), dtype=bool)
    for clause in f.clauses:
        sat = np.zeros(len(bits), dtype=bool)
        for v in clause:
            col = bits[:, abs(v) - 1]
            sat |= col if v > 0 else ~col
        ok &= sat
    return ok


def is_satisfiable(f: Cnf3Formula) -> bool:
    """DPLL with unit propagation; independent of the brute-force path."""

    def solve(clauses: list[frozenset]) -> bool:
        while True:
            if not clauses:
                return True
            unit = next((c for c in clauses if len(c) == 1), None)
            if unit is None:
                break
            (lit,) = unit
            clauses = _assign(clauses, lit)
            if clauses is None:
                return False
        lit = next(iter(clauses[0]))
        for choice in (lit, -lit):
            rest = _assign(clauses, choice)
            if rest is not None and solve(rest):
                return True
        return False

    return solve([frozenset(c) for c in f.clauses])


def _assign(clauses: list[frozenset], lit: int) -> Optional[list[frozenset]]:
    out = []
    for c in clauses:
        if lit in c:
            continue
        if -lit in c:
            c = c - {-lit}
            if not c:
                return None
        out.append(c)
    return out


def sample_target(f: Cnf3Formula, rng: np.random.Generator) -> str:
    """One add-one satisfier drawn uniformly, or :data:`UNSAT`."""
    sats = np.flatnonzero(satisfier_mask(f))
    if len(sats) == 0:
        return UNSAT
    # index 0 stands for the extra all-zeros satisfier
    pick = int(rng.integers(0, len(sats) + 1))
    if pick == 0:
        return "0" * (f.var_count + 1)
    return "1" + format(int(sats[pick - 1]), f"0{f.var_count}b")


@dataclass(frozen=True)
class Example:
    formula: Cnf3Formula
    target: str

    @property
    def satisfiable(self) -> bool:
        return self.target != UNSAT

    @property
    def bits(self) -> str:
        """The add-one assignment actually used as output sequence."""
        return "0" * (self.formula.var_count + 1) if self.target == UNSAT else self.target

    @cached_property
    def count(self) -> int:
        return int(satisfier_mask(self.formula).sum())

    def to_line(self) -> str:
        return f"{dimacs_encode(self.formula)}\t{self.target}"

    @classmethod
    def from_line(cls, line: str, var_count: Optional[int] = None) -> "Example":
        text, target = line.rstrip("\n").split("\t")
        f = dimacs_decode(text, var_count=var_count)
        return cls(f, target)


@dataclass
class CorpusSpec:
    var_counts: list[int] = field(default_factory=lambda: list(range(6, 15)))
    formulas_per_count: int = 1020
    split_ratio: tuple[int, int, int] = (100, 1, 1)
    seed: int = 0
    alpha: Fraction = ALPHA

    def __post_init__(self):
        if any(r <= 0 for r in self.split_ratio):
            raise ValueError("split ratio parts must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        self.split_ratio = tuple(self.split_ratio)

    def split_sizes(self) -> dict[str, int]:
        total = sum(self.split_ratio)
        unit = self.formulas_per_count // total
        train, dev = self.split_ratio[0] * unit, self.split_ratio[1] * unit
        return {"train": train, "dev": dev, "test": self.formulas_per_count - train - dev}


def example_seed(master: int, vars: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master, vars, index])


def make_example(master: int, vars: int, index: int, alpha: Fraction = ALPHA) -> Example:
    rng = np.random.default_rng(example_seed(master, vars, index))
    f = gen_hard3sat(vars, rng, alpha)
    return Example(f, sample_target(f, rng))


def _write_count(args) -> dict:
    spec, vars, out = args
    folder = Path(out) / f"vars{vars:02d}"
    folder.mkdir(parents=True, exist_ok=True)
    index, summary = 0, {}
    for split, size in spec.split_sizes().items():
        lines = []
        for _ in range(size):
            lines.append(make_example(spec.seed, vars, index, spec.alpha).to_line())
            index += 1
        path = folder / f"{split}.tsv"
        try:
            path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        except OSError as exc:
            raise OSError(f"could not write {path}: {exc}") from exc
        summary[split] = {
            "examples": size,
            "unsat": sum(line.endswith(UNSAT) for line in lines),
            "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        }
    return {"vars": vars, "clauses": clause_count(vars, spec.alpha), "splits": summary}


def build_corpus(spec: CorpusSpec, out: os.PathLike, threads: int = 1) -> dict:
    """Write ``out/varsNN/{train,dev,test}.tsv`` plus ``manifest.json``.

    Output does not depend on ``threads``: every example draws from its own
    seed derived from ``(spec.seed, vars, index)``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, v, str(out)) for v in spec.var_counts]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            counts = list(pool.map(_write_count, jobs))
    else:
        counts = [_write_count(job) for job in jobs]
    manifest = {
        "alpha": str(spec.alpha),
        "seed": spec.seed,
        "formulas_per_count": spec.formulas_per_count,
        "split_ratio": list(spec.split_ratio),
        "seed_derivation": "SeedSequence([seed, vars, index])",
        "counts": counts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return manifest


def load_split(corpus: os.PathLike, vars: int, split: str) -> list[Example]:
    path = Path(corpus) / f"vars{vars:02d}" / f"{split}.tsv"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"could not read {path}: {exc}") from exc
    return [Example.from_line(line, var_count=vars) for line in text.splitlines() if line]


def corpus_var_counts(corpus: os.PathLike) -> list[int]:
    return sorted(int(p.name[4:]) for p in Path(corpus).glob("vars*") if p.is_dir())


def satisfiable_fraction(vars: int, samples: int, seed: int = 0,
                         alpha: Fraction = ALPHA) -> float:
    hits = 0
    for i in range(samples):
        hits += is_satisfiable(gen_hard3sat(vars, np.random.SeedSequence([seed, vars, i]), alpha))
    return hits / samples
