import math
from fractions import Fraction

import numpy as np
import pytest

from satlm.errors import CapacityError
from satlm.formula import Formula, cnf3_to_formula, enc, random_cnf3
from satlm.language import SatWeightedLanguage
from satlm.witness import (
    ClauseUniverse, WitnessRnn, build_witness, eval_witness, eval_witness_batch,
    max_member_vars, run_witness, witness_check,
)

CNF_LANG = SatWeightedLanguage(cnf3_only=True)


def _member_cases(seed, trials=6):
    """Real clause-bearing members plus bit-flip neighbours."""
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        j = int(rng.integers(3, 6))
        c = random_cnf3(rng, j, int(rng.integers(1, 5)))
        f = cnf3_to_formula(c)
        if not f.is_canonical:
            continue
        code = enc(Formula(j, f.body))
        xs = [code + format(a, f"0{j}b") for a in range(2 ** j)]
        for _ in range(40):
            s = list(xs[int(rng.integers(len(xs)))])
            i = int(rng.integers(len(s)))
            s[i] = "1" if s[i] == "0" else "0"
            xs.append("".join(s))
        yield j, len(xs[0]), xs


class TestExhaustive:
    @pytest.mark.parametrize("n", range(0, 13))
    def test_small_lengths(self, n):
        r = witness_check(n)
        assert r.mismatches == 0
        assert r.strings == 2 ** n

    def test_only_short_member(self):
        assert witness_check(2).members == 1
        assert eval_witness(build_witness(2), "11") == Fraction(1, 27)


class TestMembers:
    @pytest.mark.parametrize("seed", range(4))
    def test_real_formulas(self, seed):
        for j, n, xs in _member_cases(seed):
            r = build_witness(n, max_vars=j)
            got = eval_witness_batch(r, xs)
            want = [CNF_LANG.weight(x) for x in xs]
            assert got == want
            assert sum(w > 0 for w in want) >= 1

    def test_scale(self):
        for j, n, xs in _member_cases(3, trials=3):
            r = build_witness(n, max_vars=j)
            nonzero = {v for v in eval_witness_batch(r, xs) if v}
            assert nonzero <= {Fraction(1, 3) ** (n + 1)}

    def test_clause_units_stay_digital(self):
        for j, n, xs in _member_cases(5, trials=3):
            r = build_witness(n, max_vars=j)
            _, history = run_witness(r, xs, trace=True)
            seen = 0
            for state in history:
                units = state[r.clause_slots]
                assert np.isin(units, (0, 1)).all()
                seen += int(units.sum())
            assert seen > 0


class TestShape:
    def test_universe_size(self):
        assert len(ClauseUniverse(3)) == 8
        assert len(ClauseUniverse(5)) == 8 * math.comb(5, 3)

    @pytest.mark.parametrize("n", [2, 10, 14, 40])
    def test_variable_bound_is_safe(self, n):
        j = max_member_vars(n)
        assert j >= 0
        # one more variable would need more than n bits
        cheapest = 2 + sum(3 + 2 * (i.bit_length()) - 1 for i in range(1, j + 2))
        assert cheapest > n

    @pytest.mark.parametrize("n", [3, 30, 300, 3000])
    def test_serialized_size_is_logarithmic(self, n):
        r = build_witness(n, max_vars=3)
        blob = r.serialize()
        assert len(blob) * 8 <= 4 * math.ceil(math.log2(n + 2)) + 16
        again = WitnessRnn.deserialize(blob)
        assert (again.n, again.jmax) == (r.n, r.jmax)

    def test_unmentioned_variable_is_rejected(self):
        f = Formula(4, cnf3_to_formula(random_cnf3(np.random.default_rng(0), 3, 2)).body,
                    allow_unused=True)
        code = enc(f)
        r = build_witness(len(code) + 4, max_vars=4)
        assert not any(eval_witness_batch(r, [code + format(a, "04b") for a in range(16)]))

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            eval_witness(build_witness(4), "101")

    def test_capacity(self):
        with pytest.raises(CapacityError):
            build_witness(400)
