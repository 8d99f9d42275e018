import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bleu_oracle
from unmtkit.decode import (
    DecodeParams,
    ModelScorer,
    beam_search,
    bleu,
    decode,
    ensemble_decode,
    tokenize_13a,
    translate,
)
from unmtkit.model import ModelConfig, forward, init_model, make_batch
from unmtkit.subword import EOS_ID

SMALL = ModelConfig(n_layers_enc=1, n_layers_dec=1, d_model=16, d_ffn=32, n_heads=2, vocab_size=20, max_len=32)


def random_inputs(n, seed=0, vocab=20):
    rng = np.random.default_rng(seed)
    return [list(rng.integers(5, vocab, size=rng.integers(1, 7))) for _ in range(n)]


class TableScorer:
    """Fixed next-token table keyed by the last token; stands in for a model."""

    max_positions = 100

    def __init__(self, table):
        self.table = table  # {last_token: log-prob vector}

    def next_logprobs(self, prefixes, rows):
        return torch.stack([self.table[int(p[-1])] for p in prefixes])


def enumerate_hypotheses(table, tokens, max_len, bos=2):
    """Every finished or length-capped sequence of length <= max_len with its log-prob."""
    out = {}
    for n in range(max_len + 1):
        for seq in itertools.product(tokens, repeat=n):
            score, last = 0.0, bos
            for t in seq:
                score += float(table[last][t])
                last = t
            if n < max_len:
                out[seq] = score + float(table[last][EOS_ID])
            else:
                out[seq] = score
    return out


class TestBeam:
    @pytest.mark.parametrize("seed", range(10))
    def test_enumeration_oracle(self, seed):
        rng = np.random.default_rng(seed)
        V, tokens = 7, (5, 6)
        table = {}
        for last in (2, 5, 6):
            logits = np.full(V, -math.inf)
            logits[[EOS_ID, 5, 6]] = rng.normal(size=3)
            table[last] = torch.log_softmax(torch.as_tensor(logits), -1)
        # width covers every emitting state, so nothing is pruned at this depth
        dp = DecodeParams("beam", beam_size=3, max_len=2)
        nbest = beam_search(TableScorer(table), 10, dp)
        truth = enumerate_hypotheses(table, tokens, 2)
        best = max(truth.items(), key=lambda kv: kv[1])
        assert tuple(nbest[0][0]) == best[0] and nbest[0][1] == pytest.approx(best[1])
        for toks, score, _ in nbest:
            assert score == pytest.approx(truth[tuple(toks)])

    def test_beam_one_is_greedy(self):
        p = init_model(SMALL, 0)
        for src in random_inputs(100, 1):
            greedy, _ = decode(p, src, DecodeParams("greedy", max_len=8))
            beam, _ = decode(p, src, DecodeParams("beam", beam_size=1, max_len=8))
            assert beam == greedy

    def test_monotone_in_beam_size(self):
        p = init_model(SMALL, 3)
        for src in random_inputs(10, 3):
            scorer = ModelScorer(p, [src], 0, 1)
            best = [beam_search(scorer, len(src), DecodeParams("beam", beam_size=k, max_len=6))[0][1]
                    for k in (1, 2, 4, 8)]
            assert all(a <= b + 1e-9 for a, b in zip(best, best[1:]))

    def test_truncation_flag(self):
        p = init_model(SMALL, 0)
        p["output.bias"][EOS_ID] = -1e9
        out, trunc = decode(p, [5, 6], DecodeParams("greedy", max_len=3))
        assert trunc and len(out) == 3


class TestSampling:
    def test_cold_sampling_is_greedy(self):
        p = init_model(SMALL, 1)
        for src in random_inputs(20, 2):
            greedy, _ = decode(p, src, DecodeParams("greedy", max_len=8))
            cold, _ = decode(p, src, DecodeParams("sample", temperature=1e-4, max_len=8), np.random.default_rng(0))
            assert cold == greedy

    def test_needs_rng(self):
        with pytest.raises(ValueError):
            decode(init_model(SMALL), [5], DecodeParams("sample"))

    def test_seeded(self):
        p = init_model(SMALL, 1)
        dp = DecodeParams("sample", max_len=8)
        a = translate(p, random_inputs(10), 0, 1, dp, np.random.default_rng(4))
        b = translate(p, random_inputs(10), 0, 1, dp, np.random.default_rng(4))
        assert a == b

    def test_params_validation(self):
        for bad in (dict(mode="topk"), dict(temperature=0), dict(beam_size=0), dict(max_len=0)):
            with pytest.raises(ValueError):
                DecodeParams(**bad)


class TestEnsemble:
    def test_copies_identical(self):
        p = init_model(SMALL, 5)
        for src in random_inputs(100, 5):
            single, _ = decode(p, src, DecodeParams("greedy", max_len=8))
            assert ensemble_decode([p, p, p], src, DecodeParams("greedy", max_len=8))[0] == single
        src = random_inputs(1, 6)[0]
        assert ensemble_decode([p, p], src, DecodeParams("beam", max_len=8))[0] == \
            decode(p, src, DecodeParams("beam", max_len=8))[0]

    def test_uniform_partner_stepwise(self):
        a = init_model(SMALL, 6)
        u = init_model(SMALL, 7)
        u["output.weight"].zero_()
        u["output.bias"].zero_()
        src = [5, 9, 11]
        out, _ = ensemble_decode([a, u], src, DecodeParams("greedy", block_specials=False, max_len=6))
        prefix = [2]
        for tok in out + ([] if len(out) == 6 else [EOS_ID]):
            batch = make_batch([src], [prefix[1:] + [0]], 0, 1)
            pa = torch.softmax(forward(a.tensors, batch, SMALL)[0, len(prefix) - 1], -1)
            mix = (pa + 1.0 / SMALL.vocab_size) / 2
            assert abs(float(mix.sum()) - 1) < 1e-6
            assert tok == int(torch.argmax(mix))
            prefix.append(tok)

    def test_mean_distribution(self):
        a, b = init_model(SMALL, 8), init_model(SMALL, 9)
        scorer = ModelScorer([a, b], [[5, 6]], 0, 1)
        logp = scorer.next_logprobs(torch.tensor([[2, 7]]), torch.tensor([0]))
        assert abs(float(logp.exp().sum()) - 1) < 1e-6
        single = [ModelScorer(m, [[5, 6]], 0, 1).next_logprobs(torch.tensor([[2, 7]]), torch.tensor([0]))
                  for m in (a, b)]
        assert torch.allclose(logp.exp(), (single[0].exp() + single[1].exp()) / 2)

    def test_vocab_mismatch(self):
        other = init_model(ModelConfig(**{**SMALL.to_dict(), "vocab_size": 21}))
        with pytest.raises(ValueError, match="vocabular"):
            ensemble_decode([init_model(SMALL), other], [5])


class TestBleu:
    def test_identity(self):
        refs = ["Der Hund bellt.", "Ein Satz, mit Komma!", "a b c d e f"]
        assert bleu(refs, refs).score == 100.0

    def test_empty_hypotheses(self):
        assert bleu(["", ""], ["a b c d", "e f g h"]).score == 0.0

    def test_hand_example(self):
        # clipped p1 = 1/4; p2..p4 have no matches: 1/(2*3), 1/(4*2), 1/(8*1); equal lengths
        report = bleu(["the the the the"], ["the cat sat down"])
        assert round(report.score, 4) == round(100 * (1 / 4 * 1 / 6 * 1 / 8 * 1 / 8) ** 0.25, 4) == 15.9736
        assert report.brevity_penalty == 1.0

    def test_brevity_penalty(self):
        report = bleu(["a b c d"], ["a b c d e f g h"])
        assert report.brevity_penalty == pytest.approx(math.exp(1 - 8 / 4))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bleu(["a"], ["a", "b"])

    def test_13a(self):
        assert tokenize_13a("Hallo, Welt! 3.5 (x)") == "Hallo , Welt ! 3.5 ( x )"
        assert tokenize_13a("a &quot;b&quot;") == 'a " b "'

    def test_case_sensitive(self):
        assert bleu(["The cat"], ["the cat"]).score < 100

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.text(alphabet="ab c.", max_size=12), min_size=1, max_size=3),
           st.lists(st.text(alphabet="ab c.", max_size=12), min_size=1, max_size=3))
    def test_bounds(self, hyps, refs):
        n = min(len(hyps), len(refs))
        score = bleu(hyps[:n], refs[:n]).score
        assert 0.0 <= score <= 100.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from("abcd"), max_size=8), st.lists(st.sampled_from("abcd"), min_size=1, max_size=8))
    def test_sentence_oracle(self, hyp, ref):
        assert bleu([" ".join(hyp)], [" ".join(ref)]).score == pytest.approx(bleu_oracle(hyp, ref), abs=1e-9)

    def test_report_components(self):
        r = bleu(["a b c d x", "q r"], ["a b c d e", "q r s"])
        expected = r.brevity_penalty * math.exp(sum(math.log(p / 100) for p in r.precisions) / 4) * 100
        assert r.score == pytest.approx(expected)
        assert str(r).startswith("BLEU = ")
