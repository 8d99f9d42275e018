import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_orthogonal
from unmtkit.corpus import Bitext
from unmtkit.cipher import encipher, generate_sentence, make_cipher, make_grammar, write_cipher_dataset
from unmtkit.lexinduct import (
    EmbeddingTable,
    NGramLanguageModel,
    ProcrustesAligner,
    SeedDictionary,
    TranslationLexicon,
    apply_map,
    backtranslate_corpus,
    count_embeddings,
    extract_identical_seed,
    induce_lexicon,
    lm_logprob,
    procrustes_map,
    train_lm,
    word_translate,
)
from unmtkit.subword import build_vocab


def table(words, rng, d=8):
    return EmbeddingTable(list(words), rng.standard_normal((len(words), d)))


class TestSeed:
    def test_disjoint(self):
        with pytest.raises(ValueError, match="seed dictionary empty"):
            extract_identical_seed(["haus"], ["dom"])

    def test_intersection(self):
        assert extract_identical_seed(["tag", "haus"], ["tag", "dom"]).pairs == [("tag", "tag")]

    def test_short_strings_and_specials_excluded(self):
        seed = extract_identical_seed(build_vocab([[".", "2020", "x"]]), build_vocab([[".", "2020", "x"]]))
        assert seed.pairs == [("2020", "2020")]

    def test_toy_corpora_oracle(self):
        de = [["Anna", "kommt", "1999"], ["der", "Hund", "Berlin"]]
        hsb = [["Anna", "přińdźe", "1999"], ["pos", "Berlin"]]
        seed = extract_identical_seed(build_vocab(de), build_vocab(hsb))
        assert {a for a, _ in seed.pairs} == {w for s in de for w in s} & {w for s in hsb for w in s}

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            SeedDictionary([("a", "a"), ("a", "a")])


class TestProcrustes:
    def test_identity(self):
        rng = np.random.default_rng(0)
        x = table([f"w{i}" for i in range(50)], rng)
        w = procrustes_map(x, x, SeedDictionary([(s, s) for s in x.words]))
        assert np.linalg.norm(w - np.eye(8)) < 1e-8

    def test_rotation_recovery(self):
        rng = np.random.default_rng(1)
        words = [f"w{i}" for i in range(500)]
        x = table(words, rng, 32)
        r = random_orthogonal(32, rng)
        y = EmbeddingTable(words, x.matrix @ r)
        w = procrustes_map(x, y, SeedDictionary([(s, s) for s in words]))
        assert np.linalg.norm(w - r) < 1e-6

    def test_single_pair_still_orthogonal(self):
        rng = np.random.default_rng(2)
        x, y = table(["a", "b"], rng, 2), table(["a", "c"], rng, 2)
        w = procrustes_map(x, y, SeedDictionary([("a", "a")]))
        assert np.linalg.norm(w.T @ w - np.eye(2)) < 1e-8

    def test_missing_word_named(self):
        x = table(["a"], np.random.default_rng(0))
        with pytest.raises(KeyError, match="zz"):
            procrustes_map(x, x, SeedDictionary([("zz", "a")]))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(2, 40), d=st.integers(2, 12))
    def test_always_orthogonal(self, seed, n, d):
        rng = np.random.default_rng(seed)
        words = [f"w{i}" for i in range(n)]
        w = procrustes_map(table(words, rng, d), table(words, rng, d), SeedDictionary([(s, s) for s in words]))
        assert np.linalg.norm(w.T @ w - np.eye(d)) < 1e-8

    def test_estimator(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((100, 6))
        r = random_orthogonal(6, rng)
        est = ProcrustesAligner().fit(x, x @ r)
        assert np.allclose(est.transform(x), x @ r)


class TestLexicon:
    def test_self_map(self):
        x = table([f"w{i}" for i in range(30)], np.random.default_rng(4))
        lex = induce_lexicon(x, x, 1)
        for w in x.words:
            (tgt, score), = lex.candidates(w)
            assert tgt == w and abs(score - 1.0) < 1e-6

    def test_bruteforce_oracle(self):
        rng = np.random.default_rng(5)
        x, y = table([f"s{i}" for i in range(50)], rng), table([f"t{i}" for i in range(50)], rng)
        lex = induce_lexicon(x, y, 5)
        for i, w in enumerate(x.words):
            sims = [(float(np.dot(x.matrix[i], y.matrix[j])), -j) for j in range(50)]
            best = sorted(sims, reverse=True)[:5]
            assert [t for t, _ in lex.candidates(w)] == [y.words[-j] for _, j in best]
            scores = [s for _, s in lex.candidates(w)]
            assert scores == sorted(scores, reverse=True)
            assert all(-1 - 1e-9 <= s <= 1 + 1e-9 for s in scores)

    def test_k_clamped(self):
        rng = np.random.default_rng(6)
        lex = induce_lexicon(table(["a", "b"], rng), table(["x", "y", "z"], rng), 10)
        assert len(lex.candidates("a")) == 3

    def test_ties_by_target_id(self):
        x = EmbeddingTable(["a"], np.array([[1.0, 0.0]]))
        y = EmbeddingTable(["p", "q", "r"], np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]))
        assert [t for t, _ in induce_lexicon(x, y, 2).candidates("a")] == ["q", "r"]

    def test_save_load(self, tmp_path):
        lex = TranslationLexicon({"a": [("x", 0.5), ("y", 0.25)]})
        lex.save(tmp_path / "lex.tsv")
        assert TranslationLexicon.load(tmp_path / "lex.tsv").entries == lex.entries


def test_embedding_file_roundtrip(tmp_path):
    x = table(["a", "b", "c"], np.random.default_rng(7), 4)
    x.save(tmp_path / "e.vec")
    assert (tmp_path / "e.vec").read_text().startswith("3 4\n")
    y = EmbeddingTable.load(tmp_path / "e.vec")
    assert y.words == x.words and np.allclose(y.matrix, x.matrix, atol=1e-12)


class TestLM:
    def test_unigram_ratio(self):
        lm = train_lm(["a a b"], order=1, delta=1e-9)
        assert math.isclose(lm.prob("a"), 2 / 3, rel_tol=1e-6)
        assert math.isclose(lm.prob("b"), 1 / 3, rel_tol=1e-6)

    def test_normalization(self):
        rng = np.random.default_rng(8)
        corpus = [" ".join(rng.choice(list("abcde"), size=6)) for _ in range(50)]
        lm = train_lm(corpus, order=3, delta=0.1)
        for _ in range(100):
            hist = list(rng.choice(list("abcdefz"), size=rng.integers(0, 4)))
            assert abs(sum(lm.prob(w, hist) for w in lm.vocab) - 1.0) < 1e-9

    def test_bigram_count_oracle(self):
        rng = np.random.default_rng(9)
        corpus = [list(rng.choice(list("abcdef"), size=rng.integers(1, 8))) for _ in range(100)]
        delta = 0.5
        lm = train_lm(corpus, order=2, delta=delta)
        pair, hist = Counter(), Counter()
        for s in corpus:
            toks = ["<s>"] + s + ["</s>"]
            for a, b in zip(toks, toks[1:]):
                pair[(a, b)] += 1
                hist[a] += 1
        n_events = len({w for s in corpus for w in s}) + 2  # <unk>, </s>
        for s in corpus[:20]:
            toks = ["<s>"] + s + ["</s>"]
            expected = sum(math.log((pair[(a, b)] + delta) / (hist[a] + delta * n_events))
                           for a, b in zip(toks, toks[1:]))
            assert math.isclose(lm_logprob(lm, s), expected, rel_tol=1e-12)

    def test_estimator(self):
        est = NGramLanguageModel(order=2).fit(["a b", "a c"])
        assert est.score_samples(["a b"])[0] == pytest.approx(lm_logprob(est.lm_, "a b"))

    def test_bad_args(self):
        with pytest.raises(ValueError):
            train_lm(["a"], order=0)
        with pytest.raises(ValueError):
            train_lm([], order=2)


class TestWordTranslate:
    lm = train_lm(["x y z"], order=2)

    def test_empty(self):
        assert word_translate([], TranslationLexicon(), self.lm) == []

    def test_copy_fallback(self):
        assert word_translate(["p", "q"], TranslationLexicon(), self.lm) == ["p", "q"]

    def test_true_cipher_lexicon(self):
        grammar = make_grammar(3)
        mapping = make_cipher(grammar, 4)
        rng = np.random.default_rng(0)
        sents = [[t.lower() for t in generate_sentence(grammar, rng)] for _ in range(200)]
        low = [encipher(s, mapping) for s in sents]
        lex = TranslationLexicon({a: [(b, 1.0)] for a, b in mapping.items()})
        lm = train_lm(low, order=3)
        for s, ref in zip(sents, low):
            out = word_translate(s, lex, lm)
            assert out == ref and len(out) == len(s)

    def test_lm_breaks_ties(self):
        lex = TranslationLexicon({"a": [("y", 0.5), ("x", 0.5)]})
        assert word_translate(["a"], lex, self.lm) == ["x"]


class TestBacktranslate:
    def test_empty(self):
        assert len(backtranslate_corpus([], TranslationLexicon(), train_lm(["a"]), "hsb", "de")) == 0

    def test_targets_authentic(self):
        corpus = [f"w{i} v{i % 7}" for i in range(100)]
        lex = TranslationLexicon({"v1": [("u1", 1.0)]})
        bt = backtranslate_corpus(corpus, lex, train_lm(["u1 w1"]), "hsb", "de")
        assert len(bt) == 100 and bt.tgt == corpus
        assert set(bt.provenance) == {"pseudo-smt"} and bt.src[1] == "w1 u1"

    def test_token_lists_saved_as_text(self, tmp_path):
        bt = backtranslate_corpus([["w1", "v1"]], TranslationLexicon({"v1": [("u1", 1.0)]}),
                                  train_lm(["u1 w1"]), "hsb", "de")
        bt.save(tmp_path / "bt")
        assert (tmp_path / "bt.tgt").read_text() == "w1 v1\n"
        assert Bitext.load(tmp_path / "bt").src == ["w1 u1"]

    def test_bitext_rejects_token_lists(self):
        with pytest.raises(TypeError):
            Bitext.from_pairs(["a"], [["a"]], "hsb", "de", "pseudo-smt")


def test_count_embeddings_shape_and_norm():
    corpus = [["a", "b", "c", "a"], ["b", "c", "d"]] * 20
    emb = count_embeddings(corpus, dim=3, window=2, min_count=2)
    assert emb.words[0] in {"a", "b", "c"} and emb.dim == 3
    assert np.allclose(np.linalg.norm(emb.matrix, axis=1), 1.0)


def test_identical_seed_baseline_learns_something(tmp_path):
    # the demo pair shares names, numbers and a fraction of words; mapping should beat chance
    paths = write_cipher_dataset(tmp_path, n_mono=3000, n_valid=10, n_test=10, seed=0)
    read = lambda p: [line.lower().replace(".", " .").split() for line in open(p, encoding="utf-8")]
    high, low = read(paths["mono.high.txt"]), read(paths["mono.low.txt"])
    eh, el = count_embeddings(high, 16), count_embeddings(low, 16)
    seed = extract_identical_seed(build_vocab(high), build_vocab(low))
    lex = induce_lexicon(apply_map(eh, procrustes_map(eh, el, seed)), el, 5)
    truth = dict(line.split("\t")[:2] for line in open(paths["lexicon.high-low.tsv"], encoding="utf-8"))
    hits = [truth[w] in [t for t, _ in lex.candidates(w)] for w in truth if w in lex.entries and truth[w] != w]
    assert np.mean(hits) > 5 / len(el.words)
