"""A ramp-activation recurrent network that computes the 3-CNF weighted
language on strings of one fixed length ``n``.

Every weight is an integer derived from ``n`` alone, except the output
scale ``(1/3)**(n+1)``; the parameter description is just ``n``.  Each input
symbol drives one pass through a fixed-depth circuit of ramp units
(``max(0, w·h + u·x + b)``), so the work per symbol is bounded.

Unit groups:

* a scanner for the binary formula code: phase one-hots, an Elias-gamma
  reader (zero counter, value accumulator, remaining-bits counter), the
  expected-opcode grammar for right-folded 3-CNF, and registers for the
  decoded variable count, node count and the literals of the current clause;
* one unit per possible clause over ``A1..A_jmax``.  A unit switches on when
  its clause is read and switches off when the assignment phase reads a
  literal that satisfies it;
* the output unit, which fires only if parsing succeeded, the assignment has
  exactly ``j`` bits and no clause unit is still on.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations, product
from typing import Optional, Union

import numpy as np
from scipy import sparse

from .bitcodes import gamma_decode, gamma_encode, gamma_length
from .errors import CapacityError

WITNESS_VAR_CAP = 12


class Lin:
    """Integer affine form over circuit nodes."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: Optional[dict[int, int]] = None, const: int = 0):
        self.terms = terms or {}
        self.const = const

    def __add__(self, other: Union["Lin", int]) -> "Lin":
        if isinstance(other, int):
            return Lin(dict(self.terms), self.const + other)
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms.get(k, 0) + v
        return Lin(terms, self.const + other.const)

    __radd__ = __add__

    def __neg__(self) -> "Lin":
        return Lin({k: -v for k, v in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, c: int) -> "Lin":
        return Lin({k: v * c for k, v in self.terms.items()}, self.const * c)

    __rmul__ = __mul__


def _total(items) -> Lin:
    out = Lin()
    for it in items:
        out = out + it
    return out


class _Circuit:
    """Collects ramp units; node ids below ``n_inputs`` are the step inputs."""

    def __init__(self, input_names: list[str]):
        self.input_names = input_names
        self.inputs = {name: Lin({i: 1}) for i, name in enumerate(input_names)}
        self.units: list[tuple[dict[int, int], int]] = []

    def ramp(self, lin: Lin) -> Lin:
        terms = {k: v for k, v in lin.terms.items() if v}
        self.units.append((terms, lin.const))
        return Lin({len(self.input_names) + len(self.units) - 1: 1})

    # digital helpers; arguments are bits unless noted

    def both(self, *bits: Lin) -> Lin:
        return self.ramp(_total(bits) - (len(bits) - 1))

    def neg(self, bit: Lin) -> Lin:
        return self.ramp(1 - bit)

    def either(self, *bits: Lin) -> Lin:
        return self.ramp(1 - self.ramp(1 - _total(bits)))

    def gate(self, value: Lin, bit: Lin, bound: int) -> Lin:
        """``value`` if ``bit`` else 0, for ``0 <= value <= bound``."""
        return self.ramp(value + bit * bound - bound)

    def is_zero(self, count: Lin) -> Lin:
        """Integer ``count >= 0``."""
        return self.ramp(1 - count)

    def at_least(self, a: Lin, k: Union[Lin, int]) -> Lin:
        """Integers: 1 iff ``a >= k``."""
        return self.ramp(self.ramp(a - k + 1) - self.ramp(a - k))

    def equal(self, a: Lin, b: Union[Lin, int]) -> Lin:
        return self.ramp(1 - self.ramp(a - b) - self.ramp(b - a))


@dataclass(frozen=True)
class ClauseUniverse:
    """All 3-literal clauses over distinct variables of ``A1..A_j``.

    Clauses are ordered by sorted variable triple, then by sign pattern
    (``-`` before ``+``) of the sorted literals.
    """

    j: int
    clauses: tuple[tuple[int, int, int], ...] = field(init=False)

    def __post_init__(self):
        out = []
        for vs in combinations(range(1, self.j + 1), 3):
            for signs in product((-1, 1), repeat=3):
                out.append(tuple(s * v for s, v in zip(signs, vs)))
        object.__setattr__(self, "clauses", tuple(out))

    def index(self, clause) -> int:
        key = tuple(sorted(clause, key=abs))
        return self.clauses.index(key)

    def __len__(self) -> int:
        return len(self.clauses)


_PHASES = ("read_j", "read_count", "tree", "assign", "fail")
_EXPECT = ("top", "clause", "or2", "lit1", "lit2", "lit3", "var1", "var2", "var3")
_INDEX = ("idx1", "idx2", "idx3")


@dataclass
class WitnessRnn:
    n: int
    jmax: int
    universe: ClauseUniverse
    state_names: list[str]
    initial: dict[str, int]
    layers: list[tuple[np.ndarray, sparse.csr_matrix, np.ndarray]]
    next_state: list[int]
    accept: int
    clause_slots: list[int]
    unit_count: int

    @property
    def scale(self) -> Fraction:
        return Fraction(1, 3) ** (self.n + 1)

    def serialize(self) -> bytes:
        """The whole parameter description: ``n`` and ``jmax`` as gamma codes, byte padded."""
        bits = gamma_encode(self.n + 1) + gamma_encode(self.jmax + 1)
        bits += "0" * (-len(bits) % 8)
        return int(bits, 2).to_bytes(len(bits) // 8, "big")

    @staticmethod
    def deserialize(blob: bytes) -> "WitnessRnn":
        bits = format(int.from_bytes(blob, "big"), f"0{8 * len(blob)}b")
        n1, pos = gamma_decode(bits)
        j1, _ = gamma_decode(bits, pos)
        return build_witness(n1 - 1, max_vars=j1 - 1, cap=max(j1 - 1, WITNESS_VAR_CAP))


def max_member_vars(n: int) -> int:
    """Largest variable count a member of length ``n`` can declare.

    Each variable needs a VAR node (two opcode bits plus its gamma index)
    and one assignment bit; the header costs at least two more bits.
    """
    j, used = 0, 2
    while used + 3 + gamma_length(j + 1) <= n:
        j += 1
        used += 3 + gamma_length(j)
    return j


def build_witness(n: int, max_vars: Optional[int] = None,
                  cap: int = WITNESS_VAR_CAP) -> WitnessRnn:
    """Network scoring strings of length ``n``.

    With ``max_vars`` below :func:`max_member_vars` the clause universe
    shrinks and the network computes the language restricted to formulas
    over at most ``max_vars`` variables.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    jmax = max_member_vars(n)
    if max_vars is not None:
        jmax = min(jmax, max_vars)
    if jmax > cap:
        raise CapacityError(f"n={n} admits {jmax} variables, above the witness cap of {cap}")
    universe = ClauseUniverse(jmax)
    zmax = max((n + 1).bit_length() - 1, 0)
    vbound = 1 << (zmax + 2)
    big = 4 * (n + vbound + 4)

    regs = ["gz", "gv", "gr", "gmode", "J", "C", "NC", "half", "b1", "more", "neg",
            "V1", "S1", "V2", "S2", "pos"]
    mention = [f"m{i}" for i in range(1, jmax + 1)]
    clause_names = [f"c{t}" for t in range(len(universe))]
    state_names = list(_PHASES) + list(_EXPECT) + list(_INDEX) + regs + mention + clause_names
    c = _Circuit(state_names + ["x"])
    s = c.inputs
    x = s["x"]
    x0 = 1 - x

    alive = c.neg(s["fail"])
    live = {name: c.both(s[name], alive)
            for name in _PHASES[:-1] + _EXPECT + _INDEX}
    idx_live = [live[name] for name in _INDEX]
    fails: list[Lin] = []

    # ---- Elias-gamma reader, active in the header phases and index reads
    gact = live["read_j"] + live["read_count"] + _total(idx_live)
    zero_mode = c.ramp(gact - s["gmode"])
    pay = c.both(s["gmode"], gact)
    z0 = c.both(zero_mode, x0)
    z1 = c.both(zero_mode, x)
    fails.append(c.both(z0, c.at_least(s["gz"], zmax)))
    value = c.ramp(s["gv"] + c.gate(s["gv"] + x, pay, vbound) + z1)
    done_pay = c.ramp(pay - c.ramp(s["gr"] - 1))
    done_zero = c.ramp(z1 - s["gz"])
    done = c.ramp(done_pay + done_zero)
    next_gmode = c.ramp(s["gmode"] + z1 - done)
    next_gz = c.ramp(s["gz"] + z0 - c.gate(s["gz"], z1, big))
    next_gv = c.ramp(value - c.gate(value, done, vbound))
    next_gr = c.ramp(s["gr"] + c.gate(s["gz"], z1, big) - pay)

    # ---- header: j then node count
    got_j = c.both(done, live["read_j"])
    got_count = c.both(done, live["read_count"])
    fails.append(c.both(got_j, c.at_least(value, jmax + 2)))
    next_J = c.ramp(s["J"] + c.gate(value - 1, got_j, big))
    next_C = c.ramp(s["C"] + c.gate(value - 1, got_count, big))
    empty_body = c.both(got_count, c.equal(value, 1))
    tree_start = c.ramp(got_count - empty_body)

    # ---- opcodes: two bits, only read in an expecting state
    expect = _total(live[name] for name in _EXPECT)
    first = c.ramp(expect - s["half"])
    second = c.both(s["half"], expect)
    b1 = s["b1"]
    op = {
        "and": c.ramp(second - b1 - x),
        "or": c.ramp(second - b1 + x - 1),
        "not": c.ramp(second + b1 - x - 1),
        "var": c.ramp(second + b1 + x - 2),
    }
    next_half = first
    next_b1 = c.both(first, x)
    next_NC = c.ramp(s["NC"] + second)
    fails.append(c.both(second, c.at_least(next_NC, s["C"] + 1)))

    moves = {
        ("top", "and"): "clause", ("top", "or"): "lit1",
        ("clause", "or"): "lit1", ("or2", "or"): "lit2",
        ("lit1", "not"): "var1", ("lit2", "not"): "var2", ("lit3", "not"): "var3",
        ("lit1", "var"): "idx1", ("lit2", "var"): "idx2", ("lit3", "var"): "idx3",
        ("var1", "var"): "idx1", ("var2", "var"): "idx2", ("var3", "var"): "idx3",
    }
    fired = {key: c.both(live[key[0]], op[key[1]]) for key in moves}
    fails.append(c.ramp(second - _total(fired.values())))
    leave = {name: c.both(live[name], second) for name in _EXPECT}
    next_more = c.ramp(s["more"] - c.both(s["more"], leave["top"]) + fired[("top", "and")])
    set_neg = _total(fired[(f"lit{k}", "not")] for k in (1, 2, 3))

    # ---- literal indices
    got_idx = [c.both(done, idx_live[k]) for k in range(3)]
    any_idx = _total(got_idx)
    fails.append(c.both(any_idx, c.at_least(value, s["J"] + 1)))
    sign_now = c.neg(s["neg"])
    next_neg = c.ramp(s["neg"] + set_neg - c.both(s["neg"], any_idx))
    next_V1 = c.ramp(s["V1"] - c.gate(s["V1"], got_idx[0], big) + c.gate(value, got_idx[0], big))
    next_S1 = c.ramp(s["S1"] - c.both(s["S1"], got_idx[0]) + c.both(sign_now, got_idx[0]))
    next_V2 = c.ramp(s["V2"] - c.gate(s["V2"], got_idx[1], big) + c.gate(value, got_idx[1], big))
    next_S2 = c.ramp(s["S2"] - c.both(s["S2"], got_idx[1]) + c.both(sign_now, got_idx[1]))

    value_is = {i: c.equal(value, i) for i in range(1, jmax + 1)}
    next_mention = {}
    for i in range(1, jmax + 1):
        next_mention[i] = c.either(s[f"m{i}"], c.both(any_idx, value_is[i]))

    # ---- clause completion
    closed = got_idx[2]
    fails.append(c.both(closed, c.either(c.equal(s["V1"], s["V2"]), c.equal(s["V1"], value),
                                         c.equal(s["V2"], value))))
    slot_hits: dict[int, Lin] = {}
    for i in range(1, jmax + 1):
        r1, r2 = c.equal(s["V1"], i), c.equal(s["V2"], i)
        slot_hits[i] = c.both(r1, s["S1"]) + c.both(r2, s["S2"]) + c.both(value_is[i], sign_now)
        slot_hits[-i] = (c.both(r1, c.neg(s["S1"])) + c.both(r2, c.neg(s["S2"]))
                         + c.both(value_is[i], s["neg"]))
    more_after = c.both(closed, s["more"])
    last_clause = c.ramp(closed - s["more"])
    finished = last_clause + empty_body

    # node count and mentions are checked when the formula ends
    need = {i: c.at_least(next_J, i) for i in range(1, jmax + 1)}
    missing = _total(c.ramp(need[i] - next_mention[i]) for i in range(1, jmax + 1))
    fails.append(c.both(finished, c.at_least(missing, 1)))
    fails.append(c.both(finished, c.at_least(next_C - next_NC, 1)))

    # ---- assignment phase
    assign = live["assign"]
    fails.append(c.both(assign, c.at_least(s["pos"], s["J"])))
    at = {i: c.both(assign, c.equal(s["pos"], i - 1)) for i in range(1, jmax + 1)}
    true_lit = {}
    for i in range(1, jmax + 1):
        true_lit[i] = c.both(at[i], x)
        true_lit[-i] = c.both(at[i], x0)
    next_pos = c.ramp(s["pos"] + assign)

    next_clause = []
    for t, clause in enumerate(universe.clauses):
        on = s[f"c{t}"]
        hit = c.ramp(closed + _total(slot_hits[v] for v in clause) - 3)
        off = _total(true_lit[v] for v in clause)
        next_clause.append(c.ramp(1 - c.ramp(1 - on - hit) - off))

    next_fail = c.either(s["fail"], *fails)

    # ---- phase and grammar transitions
    nxt: dict[str, Lin] = {
        "read_j": c.ramp(live["read_j"] - got_j),
        "read_count": c.ramp(live["read_count"] + got_j - got_count),
        "tree": c.ramp(live["tree"] + tree_start - last_clause),
        "assign": c.ramp(assign + finished),
        "fail": next_fail,
    }
    enter = {name: Lin() for name in _EXPECT + _INDEX}
    for (src, _), dst in moves.items():
        enter[dst] = enter[dst] + fired[(src, _)]
    enter["top"] = enter["top"] + tree_start + more_after
    enter["or2"] = enter["or2"] + got_idx[0]
    enter["lit3"] = enter["lit3"] + got_idx[1]
    for name in _EXPECT:
        nxt[name] = c.ramp(live[name] - leave[name] + enter[name])
    for k, name in enumerate(_INDEX):
        nxt[name] = c.ramp(live[name] - got_idx[k] + enter[name])
    nxt.update({
        "gz": next_gz, "gv": next_gv, "gr": next_gr, "gmode": next_gmode,
        "J": next_J, "C": next_C, "NC": next_NC, "half": next_half, "b1": next_b1,
        "more": next_more, "neg": next_neg, "V1": next_V1, "S1": next_S1,
        "V2": next_V2, "S2": next_S2, "pos": next_pos,
    })
    for i in range(1, jmax + 1):
        nxt[f"m{i}"] = next_mention[i]
    for t in range(len(universe)):
        nxt[f"c{t}"] = next_clause[t]

    # output reads the state after the last symbol (a separate, final pass)
    next_ids = [_single(nxt[name]) for name in state_names]
    layers = _compile(c)
    accept_state = _output_circuit(state_names, len(universe))
    initial = {name: 0 for name in state_names}
    initial["read_j"] = 1
    return WitnessRnn(
        n=n, jmax=jmax, universe=universe, state_names=state_names, initial=initial,
        layers=layers, next_state=next_ids, accept=accept_state,
        clause_slots=[state_names.index(f"c{t}") for t in range(len(universe))],
        unit_count=len(c.units),
    )


def _single(lin: Lin) -> int:
    if lin.const or len(lin.terms) != 1 or next(iter(lin.terms.values())) != 1:
        raise AssertionError("state must be carried by a single unit")
    return next(iter(lin.terms))


def _output_circuit(state_names: list[str], clauses: int):
    """Accept iff in the assignment phase, not failed, ``pos == J`` and no
    clause unit is on.  Returned as a tiny closure-free description."""
    return {
        "assign": state_names.index("assign"),
        "fail": state_names.index("fail"),
        "pos": state_names.index("pos"),
        "J": state_names.index("J"),
        "clauses": [state_names.index(f"c{t}") for t in range(clauses)],
    }


def _compile(c: _Circuit):
    """Group units into dependency layers with sparse integer weights."""
    n_in = len(c.input_names)
    depth = [0] * (n_in + len(c.units))
    for u, (terms, _) in enumerate(c.units):
        depth[n_in + u] = 1 + max((depth[k] for k in terms), default=0)
    total = n_in + len(c.units)
    by_depth: dict[int, list[int]] = {}
    for u in range(len(c.units)):
        by_depth.setdefault(depth[n_in + u], []).append(n_in + u)
    layers = []
    for d in sorted(by_depth):
        ids = np.array(by_depth[d])
        rows, cols, vals = [], [], []
        bias = np.zeros(len(ids), dtype=np.int64)
        for r, node in enumerate(ids):
            terms, const = c.units[node - n_in]
            bias[r] = const
            for k, v in terms.items():
                rows.append(r)
                cols.append(k)
                vals.append(v)
        w = sparse.csr_matrix((np.array(vals, dtype=np.int64), (rows, cols)),
                              shape=(len(ids), total), dtype=np.int64)
        layers.append((ids, w, bias))
    return layers


def _as_matrix(strings: list[str], n: int) -> np.ndarray:
    if any(len(s) != n for s in strings):
        raise ValueError(f"all strings must have length {n}")
    if n == 0:
        return np.zeros((len(strings), 0), dtype=np.int64)
    return np.frombuffer("".join(strings).encode(), dtype=np.uint8).reshape(len(strings), n) - 48


def run_witness(r: WitnessRnn, strings: list[str], trace: bool = False):
    """Evaluate a batch; returns ``(accept bits, per-step states or None)``."""
    bits = _as_matrix(strings, r.n).astype(np.int64)
    batch = len(strings)
    n_state = len(r.state_names)
    total = n_state + 1 + r.unit_count
    state = np.zeros((n_state, batch), dtype=np.int64)
    for name, v in r.initial.items():
        state[r.state_names.index(name)] = v
    history = [state.copy()] if trace else None
    for t in range(r.n):
        vals = np.zeros((total, batch), dtype=np.int64)
        vals[:n_state] = state
        vals[n_state] = bits[:, t]
        for ids, w, bias in r.layers:
            vals[ids] = np.maximum(0, w @ vals + bias[:, None])
        state = vals[r.next_state]
        if trace:
            history.append(state.copy())
    o = r.accept
    clauses_on = state[o["clauses"]].sum(axis=0) if o["clauses"] else 0
    eq = np.maximum(0, 1 - np.maximum(0, state[o["pos"]] - state[o["J"]])
                    - np.maximum(0, state[o["J"]] - state[o["pos"]]))
    accept = np.maximum(0, state[o["assign"]] + eq - state[o["fail"]] - 1 - clauses_on)
    return accept, history


def eval_witness(r: WitnessRnn, x: str) -> Fraction:
    if len(x) != r.n:
        raise ValueError(f"witness for n={r.n} got a string of length {len(x)}")
    accept, _ = run_witness(r, [x])
    return r.scale * int(accept[0])


def eval_witness_batch(r: WitnessRnn, strings: list[str]) -> list[Fraction]:
    accept, _ = run_witness(r, strings)
    return [r.scale * int(a) for a in accept]


@dataclass(frozen=True)
class WitnessCheck:
    n: int
    strings: int
    mismatches: int
    members: int
    seconds: float


def witness_check(n: int, batch: int = 1 << 14) -> WitnessCheck:
    """Compare the network with the exact 3-CNF language on all of ``B^n``."""
    from .language import SatWeightedLanguage

    start = time.perf_counter()
    r = build_witness(n)
    lang = SatWeightedLanguage(cnf3_only=True)
    mismatches = members = 0
    for lo in range(0, 1 << n, batch):
        hi = min(1 << n, lo + batch)
        xs = [format(i, f"0{n}b") if n else "" for i in range(lo, hi)]
        got, _ = run_witness(r, xs)
        for s, a in zip(xs, got):
            w = lang.weight(s)
            members += w > 0
            mismatches += (r.scale * int(a)) != w
    return WitnessCheck(n, 1 << n, mismatches, members, time.perf_counter() - start)
