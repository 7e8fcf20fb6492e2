"""Boolean formulas over A1..Aj: evaluation, exhaustive #SAT, the
AddOne family of transformations, and two codecs (a prefix-free binary
code and the modified-DIMACS text format).

Assignments are ASCII bit strings; bit ``t`` (1-based) is the value of
``A_t``.  Truth tables index assignments as big-endian integers, so the
table position of ``"0110"`` is ``0b0110``.  This keeps every block of
assignments that share a prefix contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .bitcodes import gamma_decode, gamma_encode, gamma_length
from .errors import CapacityError, DecodeError, DimacsParseError, IncompleteCode

ENUMERATION_CAP = 24


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Not:
    child: "Node"


@dataclass(frozen=True)
class And:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Or:
    left: "Node"
    right: "Node"


Node = Union[Var, Not, And, Or]


def conj(*items: Node) -> Optional[Node]:
    """Right-folded conjunction.  The empty conjunction is ``None`` (true)."""
    if not items:
        return None
    out = items[-1]
    for item in reversed(items[:-1]):
        out = And(item, out)
    return out


def disj(*items: Node) -> Node:
    if not items:
        raise ValueError("empty disjunction has no tree form")
    out = items[-1]
    for item in reversed(items[:-1]):
        out = Or(item, out)
    return out


def literal(lit: int) -> Node:
    """DIMACS-style signed index to a tree literal."""
    return Var(lit) if lit > 0 else Not(Var(-lit))


def mentioned(node: Optional[Node]) -> set[int]:
    out: set[int] = set()
    stack = [node] if node is not None else []
    while stack:
        n = stack.pop()
        if isinstance(n, Var):
            out.add(n.index)
        elif isinstance(n, Not):
            stack.append(n.child)
        else:
            stack.append(n.left)
            stack.append(n.right)
    return out


def node_count(node: Optional[Node]) -> int:
    count = 0
    stack = [node] if node is not None else []
    while stack:
        n = stack.pop()
        count += 1
        if isinstance(n, Not):
            stack.append(n.child)
        elif isinstance(n, (And, Or)):
            stack.append(n.left)
            stack.append(n.right)
    return count


@dataclass(frozen=True)
class Formula:
    """A formula over ``A1..A_var_count``.

    A ``None`` body is the empty conjunction.  Every variable in range must
    occur in the body unless ``allow_unused`` is set; that escape hatch exists
    for intermediate results such as :func:`shift`.
    """

    var_count: int
    body: Optional[Node]
    allow_unused: bool = field(default=False, compare=False, repr=False)

    def __post_init__(self):
        if self.var_count < 0:
            raise ValueError("var_count must be nonnegative")
        seen = mentioned(self.body)
        bad = [i for i in seen if not 1 <= i <= self.var_count]
        if bad:
            raise ValueError(f"variable indices {sorted(bad)} outside 1..{self.var_count}")
        if not self.allow_unused and len(seen) != self.var_count:
            missing = sorted(set(range(1, self.var_count + 1)) - seen)
            raise ValueError(f"variables {missing} are never mentioned")

    @property
    def is_canonical(self) -> bool:
        return len(mentioned(self.body)) == self.var_count

    def __str__(self) -> str:
        return "⊤" if self.body is None else _show(self.body)


def _show(node: Node) -> str:
    if isinstance(node, Var):
        return f"A{node.index}"
    if isinstance(node, Not):
        return "¬" + _show(node.child)
    op = "∧" if isinstance(node, And) else "∨"
    parts = []
    stack = [node]
    while stack:
        n = stack.pop()
        if type(n) is type(node):
            stack.append(n.right)
            stack.append(n.left)
        else:
            s = _show(n)
            parts.append(f"({s})" if isinstance(n, (And, Or)) else s)
    return op.join(parts)


def _as_bits(a: Union[str, Sequence[int]]) -> str:
    if isinstance(a, str):
        return a
    return "".join("1" if v else "0" for v in a)


def _eval_node(node: Optional[Node], bits: str) -> bool:
    if node is None:
        return True
    if isinstance(node, Var):
        return bits[node.index - 1] == "1"
    if isinstance(node, Not):
        return not _eval_node(node.child, bits)
    if isinstance(node, And):
        return _eval_node(node.left, bits) and _eval_node(node.right, bits)
    return _eval_node(node.left, bits) or _eval_node(node.right, bits)


def evaluate(f: Formula, a: Union[str, Sequence[int]]) -> bool:
    bits = _as_bits(a)
    if len(bits) != f.var_count:
        raise ValueError(f"assignment has {len(bits)} bits, formula has {f.var_count} variables")
    return _eval_node(f.body, bits)


def truth_table(f: Formula, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """Boolean vector over all ``2**j`` assignments (big-endian indexing)."""
    j = f.var_count
    if j > cap:
        raise CapacityError(f"{j} variables exceeds the enumeration cap of {cap}")
    idx = np.arange(1 << j, dtype=np.uint32)
    columns: dict[int, np.ndarray] = {}

    def column(i: int) -> np.ndarray:
        if i not in columns:
            columns[i] = ((idx >> np.uint32(j - i)) & np.uint32(1)).astype(bool)
        return columns[i]

    def walk(node: Node) -> np.ndarray:
        if isinstance(node, Var):
            return column(node.index)
        if isinstance(node, Not):
            return ~walk(node.child)
        if isinstance(node, And):
            return walk(node.left) & walk(node.right)
        return walk(node.left) | walk(node.right)

    if f.body is None:
        return np.ones(1 << j, dtype=bool)
    return np.broadcast_to(walk(f.body), (1 << j,)).copy()


def count_satisfying(f: Formula, cap: int = ENUMERATION_CAP) -> int:
    return int(np.count_nonzero(truth_table(f, cap)))


def satisfying_assignments(f: Formula, cap: int = ENUMERATION_CAP) -> list[str]:
    j = f.var_count
    hits = np.flatnonzero(truth_table(f, cap))
    return [format(int(i), f"0{j}b") if j else "" for i in hits]


def count_with_prefix(table: np.ndarray, var_count: int, prefix: str) -> int:
    """Satisfiers in ``table`` whose first bits equal ``prefix``."""
    r = var_count - len(prefix)
    if r < 0:
        raise ValueError("prefix longer than the assignment")
    start = int(prefix, 2) << r if prefix else 0
    return int(np.count_nonzero(table[start:start + (1 << r)]))


# ---------------------------------------------------------------- transforms


def _rename(node: Optional[Node], offset: int) -> Optional[Node]:
    if node is None:
        return None
    if isinstance(node, Var):
        return Var(node.index + offset)
    if isinstance(node, Not):
        return Not(_rename(node.child, offset))
    return type(node)(_rename(node.left, offset), _rename(node.right, offset))


def shift(f: Formula) -> Formula:
    """Rename every ``A_i`` to ``A_{i+1}``; ``A1`` is left unused."""
    return Formula(f.var_count + 1, _rename(f.body, 1), allow_unused=True)


def add_one_and_blow_up(f: Formula, k: int) -> Formula:
    """Formula over ``j+k`` variables satisfied by ``0^{j+k}`` and by every
    ``1·a·b`` with ``a`` satisfying ``f`` and ``b`` arbitrary in ``B^{k-1}``.

    The free tail variables are mentioned through tautologies
    ``(A_i ∨ ¬A_i)`` so the output stays canonical.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    n = f.var_count + k
    zeros = conj(*(Not(Var(i)) for i in range(1, n + 1)))
    shifted = _rename(f.body, 1)
    tail = [Or(Var(i), Not(Var(i))) for i in range(f.var_count + 2, n + 1)]
    parts = [Var(1)] + ([shifted] if shifted is not None else []) + tail
    return Formula(n, Or(zeros, conj(*parts)))


def add_one(f: Formula) -> Formula:
    """``(¬A1 ∧ … ∧ ¬A_{j+1}) ∨ (A1 ∧ Shift(f))``: one extra satisfier."""
    return add_one_and_blow_up(f, 1)


def choose_k(lam: Union[int, Fraction, float], epsilon=None, *, squared: bool = False) -> int:
    """Smallest ``k >= 1`` with ``1 + 2**(k-1) > lam**2``.

    With ``epsilon`` the full-support condition
    ``(1 + 2**(k-1)) / (1 + 2*epsilon/7) > lam**2`` is used instead.
    Pass ``squared=True`` to give ``lam**2`` directly (e.g. 2 for sqrt 2).
    """
    lam_sq = Fraction(lam) if squared else Fraction(lam) ** 2
    if lam_sq < 1:
        raise ValueError("lambda must be at least 1")
    target = lam_sq if epsilon is None else lam_sq * (1 + Fraction(2) * Fraction(epsilon) / 7)
    k = 1
    while 1 + 2 ** (k - 1) <= target:
        k += 1
    return k


# ---------------------------------------------------------------- binary code

_OPCODES = {And: "00", Or: "01", Not: "10", Var: "11"}


def enc(f: Formula) -> str:
    """Self-delimiting code: gamma(j+1), gamma(nodes+1), preorder opcodes
    with gamma variable indices, then zero padding up to ``j`` bits total
    when the code would otherwise be shorter than ``j``."""
    out = [gamma_encode(f.var_count + 1), gamma_encode(node_count(f.body) + 1)]
    stack = [f.body] if f.body is not None else []
    while stack:
        n = stack.pop()
        out.append(_OPCODES[type(n)])
        if isinstance(n, Var):
            out.append(gamma_encode(n.index))
        elif isinstance(n, Not):
            stack.append(n.child)
        else:
            stack.append(n.right)
            stack.append(n.left)
    bits = "".join(out)
    if len(bits) < f.var_count:
        bits += "0" * (f.var_count - len(bits))
    return bits


def dec(x: str, strict: bool = True) -> tuple[Formula, int]:
    """Decode the formula at the start of ``x``; return it with the number
    of bits consumed.  Raises :class:`IncompleteCode` if ``x`` ends early and
    :class:`DecodeError` if no extension of ``x`` can start a valid code.
    With ``strict`` the formula must mention all of its variables.
    """
    j1, pos = gamma_decode(x, 0)
    j = j1 - 1
    c1, pos = gamma_decode(x, pos)
    total = c1 - 1
    used = 0

    def need(count: int):
        if pos + count > len(x):
            raise IncompleteCode("bits ended inside the formula tree")

    def parse() -> Node:
        nonlocal pos, used
        used += 1
        if used > total:
            raise DecodeError("tree has more nodes than declared")
        need(2)
        op = x[pos:pos + 2]
        pos += 2
        if op == "11":
            i, pos = gamma_decode(x, pos)
            if i > j:
                raise DecodeError(f"variable A{i} outside 1..{j}")
            return Var(i)
        if op == "10":
            return Not(parse())
        if op in ("00", "01"):
            left = parse()
            right = parse()
            return And(left, right) if op == "00" else Or(left, right)
        raise DecodeError(f"bad opcode {op!r}")

    body = parse() if total > 0 else None
    if used != total:
        raise DecodeError("tree has fewer nodes than declared")
    if pos < j:
        pad = j - pos
        need(pad)
        if x[pos:pos + pad] != "0" * pad:
            raise DecodeError("nonzero padding")
        pos += pad
    if strict and len(mentioned(body)) != j:
        raise DecodeError("formula leaves variables unmentioned")
    return Formula(j, body, allow_unused=not strict), pos


def enumerate_formulas(max_bits: int, strict: bool = True) -> Iterator[tuple[Formula, str]]:
    """Every formula whose code plus assignment fits in ``max_bits`` bits,
    i.e. ``len(enc(f)) + f.var_count <= max_bits``, paired with its code."""
    j = 0
    while gamma_length(j + 1) + 1 + j <= max_bits:
        budget = max_bits - j - gamma_length(j + 1)
        for body, bits, nodes in _trees(j, budget):
            if strict and len(mentioned(body)) != j:
                continue
            head = gamma_length(j + 1) + gamma_length(nodes + 1)
            length = max(head + bits, j)
            if length + j <= max_bits:
                f = Formula(j, body, allow_unused=not strict)
                yield f, enc(f)
        j += 1


def _trees(j: int, budget: int) -> Iterator[tuple[Optional[Node], int, int]]:
    """Bodies over ``A1..Aj`` costing at most ``budget`` bits including the
    node-count header; yields ``(body, tree_bits, nodes)``."""
    yield None, 0, 0
    nodes = 1
    while gamma_length(nodes + 1) + 2 * nodes + 1 <= budget:
        room = budget - gamma_length(nodes + 1)
        for body, bits in _exact_nodes(j, nodes, room):
            yield body, bits, nodes
        nodes += 1


def _exact_nodes(j: int, nodes: int, room: int) -> Iterator[tuple[Node, int]]:
    if nodes < 1 or room < 3:
        return
    if nodes == 1:
        for i in range(1, j + 1):
            cost = 2 + gamma_length(i)
            if cost > room:
                break
            yield Var(i), cost
        return
    for child, bits in _exact_nodes(j, nodes - 1, room - 2):
        yield Not(child), bits + 2
    for left_nodes in range(1, nodes - 1):
        right_nodes = nodes - 1 - left_nodes
        for left, lb in _exact_nodes(j, left_nodes, room - 3 - 2 * right_nodes):
            for right, rb in _exact_nodes(j, right_nodes, room - 2 - lb):
                yield And(left, right), 2 + lb + rb
                yield Or(left, right), 2 + lb + rb


# ---------------------------------------------------------------- 3-CNF


@dataclass(frozen=True)
class Cnf3Formula:
    """Clauses of signed variable indices (``-3`` is ``¬A3``).

    Clauses parsed with duplicate tolerance may repeat a variable.
    """

    var_count: int
    clauses: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        for clause in self.clauses:
            if not clause:
                raise ValueError("empty clause")
            for lit in clause:
                if lit == 0 or abs(lit) > self.var_count:
                    raise ValueError(f"literal {lit} outside 1..{self.var_count}")

    def is_strict(self) -> bool:
        return all(len(c) == 3 and len({abs(v) for v in c}) == 3 for c in self.clauses)

    def use_counts(self) -> list[int]:
        counts = [0] * (self.var_count + 1)
        for clause in self.clauses:
            for lit in clause:
                counts[abs(lit)] += 1
        return counts[1:]


def evaluate_cnf(f: Cnf3Formula, a: Union[str, Sequence[int]]) -> bool:
    bits = _as_bits(a)
    if len(bits) != f.var_count:
        raise ValueError(f"assignment has {len(bits)} bits, formula has {f.var_count} variables")
    return all(any((bits[abs(v) - 1] == "1") == (v > 0) for v in c) for c in f.clauses)


def cnf3_to_formula(f: Cnf3Formula) -> Formula:
    """Right-folded conjunction of right-folded clause disjunctions.

    Variables that no clause mentions stay in range as free variables.
    """
    body = conj(*(disj(*(literal(v) for v in c)) for c in f.clauses))
    return Formula(f.var_count, body, allow_unused=True)


def formula_to_cnf3(f: Formula) -> Optional[Cnf3Formula]:
    """Inverse of :func:`cnf3_to_formula` on strict 3-CNF shapes, else None."""
    clauses = []
    node = f.body
    while node is not None:
        if isinstance(node, And):
            head, node = node.left, node.right
        else:
            head, node = node, None
        clause = _clause_literals(head)
        if clause is None:
            return None
        clauses.append(clause)
    out = Cnf3Formula(f.var_count, tuple(clauses))
    return out if out.is_strict() else None


def _clause_literals(node: Node) -> Optional[tuple[int, ...]]:
    lits = []
    for _ in range(2):
        if not isinstance(node, Or):
            return None
        lit = _as_literal(node.left)
        if lit is None:
            return None
        lits.append(lit)
        node = node.right
    lit = _as_literal(node)
    if lit is None:
        return None
    lits.append(lit)
    return tuple(lits)


def _as_literal(node: Node) -> Optional[int]:
    if isinstance(node, Var):
        return node.index
    if isinstance(node, Not) and isinstance(node.child, Var):
        return -node.child.index
    return None


def dimacs_encode(f: Cnf3Formula) -> str:
    """Render clauses as ``- 5 1 2 # 1 6 3``: the minus sign is its own token."""
    return " # ".join(
        " ".join(f"- {-v}" if v < 0 else str(v) for v in clause) for clause in f.clauses
    )


def dimacs_decode(text: str, allow_duplicates: bool = False,
                  var_count: Optional[int] = None) -> Cnf3Formula:
    """Parse the modified-DIMACS clause list.

    Both ``- 5`` and ``-5`` are accepted for a negated literal.  Every clause
    must hold exactly three literals.  By default the three variables must
    differ; ``allow_duplicates`` keeps repeated variables verbatim (so a
    clause such as ``- 5 5 - 4`` is a tautology) and the text round-trips.
    ``var_count`` defaults to the largest index used.
    """
    tokens = text.split()
    clauses: list[tuple[int, ...]] = []
    current: list[int] = []
    negate = False

    def close(position: int):
        if negate:
            raise DimacsParseError("dangling minus sign", position)
        if not current:
            raise DimacsParseError("empty clause", position)
        if len(current) != 3:
            raise DimacsParseError(f"clause has {len(current)} literals, expected 3", position)
        seen = list(current)
        if not allow_duplicates and len({abs(v) for v in seen}) != 3:
            raise DimacsParseError("variable repeated in clause", position)
        clauses.append(tuple(seen))
        current.clear()

    for pos, tok in enumerate(tokens):
        if tok == "#":
            close(pos)
            negate = False
            continue
        if tok == "-":
            if negate:
                raise DimacsParseError("double minus sign", pos)
            negate = True
            continue
        sign = -1 if negate else 1
        body = tok
        if tok.startswith("-"):
            if negate:
                raise DimacsParseError("double minus sign", pos)
            sign, body = -1, tok[1:]
        if not body.isdigit():
            raise DimacsParseError(f"malformed token {tok!r}", pos)
        index = int(body)
        if index == 0:
            raise DimacsParseError("variable index 0", pos)
        current.append(sign * index)
        negate = False
    if current or negate:
        close(len(tokens))
    elif clauses:
        raise DimacsParseError("trailing clause separator", len(tokens))
    top = max((abs(v) for c in clauses for v in c), default=0)
    if var_count is None:
        var_count = top
    elif top > var_count:
        raise DimacsParseError(f"index {top} exceeds var_count {var_count}", len(tokens))
    return Cnf3Formula(var_count, tuple(clauses))


def random_formula(rng: np.random.Generator, var_count: int, max_nodes: int = 12) -> Formula:
    """A random canonical formula over exactly ``var_count`` variables.

    Mostly small clause-like trees; used for property tests and probes.
    """
    if var_count == 0:
        return Formula(0, None)
    leaves: list[Node] = []
    order = list(rng.permutation(var_count) + 1)
    extra = int(rng.integers(0, max(1, max_nodes - var_count) + 1))
    for i in order + [int(rng.integers(1, var_count + 1)) for _ in range(extra)]:
        node: Node = Var(int(i))
        if rng.random() < 0.5:
            node = Not(node)
        leaves.append(node)
    rng.shuffle(leaves)
    while len(leaves) > 1:
        a = leaves.pop(int(rng.integers(len(leaves))))
        b = leaves.pop(int(rng.integers(len(leaves))))
        node = And(a, b) if rng.random() < 0.55 else Or(a, b)
        if rng.random() < 0.1:
            node = Not(node)
        leaves.append(node)
    return Formula(var_count, leaves[0])


def random_cnf3(rng: np.random.Generator, var_count: int, clauses: int) -> Cnf3Formula:
    """Uniform 3-CNF: three distinct variables per clause, uniform signs."""
    if var_count < 3:
        raise ValueError("3-CNF needs at least 3 variables")
    out = []
    for _ in range(clauses):
        vs = rng.choice(var_count, size=3, replace=False) + 1
        signs = rng.integers(0, 2, size=3)
        out.append(tuple(int(v) if s else -int(v) for v, s in zip(vs, signs)))
    return Cnf3Formula(var_count, tuple(out))


PHI_EX = Formula(4, conj(disj(Var(1), Not(Var(2)), Var(3)), disj(Var(1), Not(Var(4)))))
"""(A1 ∨ ¬A2 ∨ A3) ∧ (A1 ∨ ¬A4), the running example."""


def unsat_example() -> Formula:
    return Formula(1, And(Var(1), Not(Var(1))))
