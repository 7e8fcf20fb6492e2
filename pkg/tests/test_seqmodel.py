import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satlm.datagen import make_example
from satlm.errors import TrainingError
from satlm.formula import Cnf3Formula
from satlm.seqmodel import (
    ArModel, ContextVocab, GatedRnn, NgramSoftmax, Seq, TrainConfig, add_one_support,
    corpus_trie, evaluate_ar, load_model, mean_nll, numeric_grad, seq_from_example,
    single_satisfier, train_ar,
)

from oracles import count_cnf

VOCAB = ContextVocab(max_var=10)


def _corpus(vars_list=(6, 7), n=40, master=0):
    return [seq_from_example(make_example(master, v, i), VOCAB) for v in vars_list for i in range(n)]


def _bit_seqs(rng, count, max_len=6):
    out = []
    for _ in range(count):
        L = int(rng.integers(0, max_len + 1))
        ctx = tuple(int(t) for t in rng.integers(0, len(VOCAB), int(rng.integers(0, 5))))
        out.append(Seq(ctx, "".join(rng.choice(["0", "1"], L))))
    return out


class _Frozen(ArModel):
    """Fixed conditionals and a zero gradient; handy for the training loop."""

    kind = "frozen"

    def __init__(self, loss=1.0):
        super().__init__()
        self.params = {"w": np.zeros(1)}
        self.loss = loss

    def log_conditionals(self, batch):
        return [np.full((len(s.target) + 1, 3), -math.log(3)) for s in batch]

    def loss_and_grad(self, batch):
        return self.loss, len(batch), {"w": np.zeros(1)}


class TestVocab:
    def test_negative_literals_split(self):
        assert VOCAB.encode("- 5 1 # 2") == VOCAB.encode("-5 1 # 2")
        assert VOCAB.encode("# -") == (0, 1)
        assert len(VOCAB) == 12

    def test_sequence_from_example(self):
        ex = make_example(0, 6, 0)
        seq = seq_from_example(ex, VOCAB)
        assert seq.target == ex.bits and seq.key == ex.formula
        assert VOCAB.tokens[seq.context[0]] in {"-", "1", "2", "3", "4", "5", "6"}


class TestGradients:
    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_ngram(self, order):
        m = NgramSoftmax(order, seed=order, scale=0.5)
        seqs = _bit_seqs(np.random.default_rng(order), 5)
        _, _, g = m.loss_and_grad(seqs)
        rng = np.random.default_rng(9)
        for _ in range(8):
            idx = tuple(int(rng.integers(k)) for k in m.params["W"].shape)
            assert abs(g["W"][idx] - numeric_grad(m, seqs, "W", idx)) < 1e-6

    @pytest.mark.parametrize("layers", [1, 2])
    def test_recurrent(self, layers):
        m = GatedRnn(len(VOCAB), hidden=5, layers=layers, seed=layers)
        for k in m.params:
            m.params[k] += 0.3 * np.random.default_rng(1).standard_normal(m.params[k].shape)
        seqs = _bit_seqs(np.random.default_rng(2), 4)
        _, tokens, g = m.loss_and_grad(seqs)
        assert tokens == sum(len(s.target) + 1 for s in seqs)
        rng = np.random.default_rng(3)
        for name, w in m.params.items():
            for _ in range(3):
                idx = tuple(int(rng.integers(k)) for k in w.shape)
                num = numeric_grad(m, seqs, name, idx)
                assert abs(g[name][idx] - num) <= 1e-6 * max(1.0, abs(num)), name

    def test_loss_matches_sequence_nll(self):
        m = GatedRnn(len(VOCAB), hidden=4, seed=0)
        seqs = _bit_seqs(np.random.default_rng(5), 6)
        loss, _, _ = m.loss_and_grad(seqs)
        assert loss == pytest.approx(sum(m.sequence_nll(s) for s in seqs), rel=1e-10)


class TestNormalization:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_rows_sum_to_one(self, seed):
        seqs = _bit_seqs(np.random.default_rng(seed), 3)
        for m in (NgramSoftmax(2, seed=seed, scale=2.0), GatedRnn(len(VOCAB), hidden=3, seed=seed)):
            for lp in m.log_conditionals(seqs):
                assert np.allclose(np.exp(lp).sum(axis=1), 1.0)

    def test_trie_rows(self):
        for seq in _corpus(n=10):
            for lp in corpus_trie().log_conditionals([seq]):
                assert np.allclose(np.exp(lp).sum(axis=1), 1.0)


class TestNgram:
    def test_alternating_string_is_learned(self):
        seq = Seq((), "01" * 200)
        m = NgramSoftmax(2).fit_counts([seq])
        assert math.exp(mean_nll(m, [seq])) <= 1.05

    def test_sgd_learns_alternation(self):
        data = [Seq((), "01" * 200)] * 4
        res = train_ar(NgramSoftmax(2), data, data, TrainConfig(lr=1.0, batch=2, max_epochs=30))
        assert math.exp(res.dev_curve[res.best_epoch]) <= 1.05

    def test_coin_model_has_perplexity_two(self):
        m = NgramSoftmax(1)
        m.params["W"][:] = [0.0, 0.0, -1e3]
        assert evaluate_ar(m, _corpus(n=20)).enumeration_ppl == pytest.approx(2.0)


class TestExactModel:
    def test_support(self):
        f = Cnf3Formula(3, ((1, 2, 3), (-1, -2, -3)))
        sup = add_one_support(f)
        assert len(sup) == count_cnf(3, f.clauses) + 1
        assert "0000" in sup

    def test_self_score_matches_oracle(self):
        def first_bit_entropy(seq):
            p = 1 / len(add_one_support(seq.key))
            return -p * math.log(p) - (1 - p) * math.log(1 - p) if p < 1 else 0.0

        data = _corpus(n=60)
        r = evaluate_ar(corpus_trie(), data)
        want = math.exp(np.mean([first_bit_entropy(s) for s in data]))
        assert r.enumeration_ppl_oracle == pytest.approx(want, rel=1e-12)
        single = [s for s in data if single_satisfier(s) and s.target[0] == "1"]
        assert single
        assert evaluate_ar(corpus_trie(), single).assignment_ppl == pytest.approx(1.0)

    def test_oracle_dominates_trained_models(self):
        data = _corpus(n=60)
        best = evaluate_ar(corpus_trie(), data)
        for m in (NgramSoftmax(3, seed=1, scale=1.0), GatedRnn(len(VOCAB), hidden=6, seed=1)):
            r = evaluate_ar(m, data)
            assert r.enumeration_ppl_oracle >= best.enumeration_ppl_oracle - 1e-12
            assert r.assignment_ppl_oracle >= best.assignment_ppl_oracle - 1e-12

    def test_sampling_frequency(self):
        f = Cnf3Formula(3, ((1, 2, 3), (-1, -2, 3)))
        p = 1 / len(add_one_support(f))
        q = corpus_trie()
        n = 3000
        rng = np.random.default_rng(0)
        hits = sum(q.sample(rng, 10, key=f).text == "0000" for _ in range(n))
        assert abs(hits / n - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_off_support_prefix(self):
        f = Cnf3Formula(3, ((1, 2, 3),))
        with pytest.raises(ValueError):
            corpus_trie().conditional(f, "01")


class TestSampling:
    def test_truncation_flag(self):
        m = NgramSoftmax(1)
        m.params["W"][:] = [0.0, 0.0, -1e3]
        s = m.sample(0, 5)
        assert s.truncated and len(s.text) == 5
        m.params["W"][:] = [-1e3, -1e3, 0.0]
        assert m.sample(0, 5) == m.sample(1, 5)
        assert not m.sample(0, 5).truncated

    def test_seeded(self):
        m = GatedRnn(len(VOCAB), hidden=4, seed=0)
        assert m.sample(3, 20, context=(1, 2)) == m.sample(3, 20, context=(1, 2))


class TestCheckpoint:
    @pytest.mark.parametrize("make", [lambda: NgramSoftmax(3, seed=2, scale=1.0),
                                      lambda: GatedRnn(len(VOCAB), hidden=5, layers=2, seed=4)])
    def test_round_trip(self, make, tmp_path):
        m = make()
        m.save(tmp_path / "m.npz")
        again = load_model(tmp_path / "m.npz")
        seqs = _bit_seqs(np.random.default_rng(0), 4)
        for a, b in zip(m.log_conditionals(seqs), again.log_conditionals(seqs)):
            assert np.array_equal(a, b)

    def test_exact_model_reloads(self, tmp_path):
        corpus_trie().save(tmp_path / "t.npz")
        assert load_model(tmp_path / "t.npz").kind == "trie_exact"

    def test_unknown_kind(self, tmp_path):
        _Frozen().save(tmp_path / "f.npz")
        with pytest.raises(ValueError):
            load_model(tmp_path / "f.npz")


class TestTraining:
    def test_tie_keeps_first_epoch(self):
        data = _bit_seqs(np.random.default_rng(0), 8)
        res = train_ar(_Frozen(), data, data, TrainConfig(early_stop_patience=3))
        assert res.best_epoch == 0
        assert len(res.dev_curve) == 4

    def test_nan_is_reported(self):
        data = _bit_seqs(np.random.default_rng(0), 8)
        with pytest.raises(TrainingError) as err:
            train_ar(_Frozen(loss=float("nan")), data, data, TrainConfig())
        assert err.value.checkpoint is not None

    def test_deterministic(self):
        data = _corpus(n=20)
        runs = [train_ar(GatedRnn(len(VOCAB), hidden=6, seed=1), data, data[:10],
                         TrainConfig(max_epochs=2, seed=7)) for _ in range(2)]
        assert runs[0].dev_curve == runs[1].dev_curve
        for k in runs[0].model.params:
            assert np.array_equal(runs[0].model.params[k], runs[1].model.params[k])

    def test_training_lowers_dev_loss(self):
        data = _corpus(n=40)
        res = train_ar(GatedRnn(len(VOCAB), hidden=8, seed=0), data, data[:20],
                       TrainConfig(max_epochs=3))
        assert min(res.dev_curve) < res.dev_curve[0]

    def test_exact_model_is_not_trained(self):
        data = _corpus(n=5)
        res = train_ar(corpus_trie(), data, data, TrainConfig())
        assert res.train_curve == [] and res.best_epoch == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(early_stop_patience=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
