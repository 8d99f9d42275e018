"""Word-level unsupervised translation from cross-lingual embeddings.

The signal chain: identical strings shared by both vocabularies seed an
orthogonal (Procrustes) map between monolingual embedding spaces; nearest
neighbours by cosine give a translation lexicon; an additively smoothed
n-gram model rescores candidates in a monotone word-by-word beam search.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.extmath import randomized_svd
from sklearn.utils.validation import check_is_fitted

from .corpus import Bitext
from .subword import SPECIALS

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"


@dataclass
class EmbeddingTable:
    words: list
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.words):
            raise ValueError("embedding matrix must have one row per word")
        norms = np.linalg.norm(self.matrix, axis=1, keepdims=True)
        self.matrix = self.matrix / np.where(norms > 0, norms, 1.0)
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def rows(self, words: Sequence[str]) -> np.ndarray:
        missing = [w for w in words if w not in self.index]
        if missing:
            raise KeyError(f"word {missing[0]!r} missing from embedding table")
        return self.matrix[[self.index[w] for w in words]]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self.words)} {self.dim}\n")
            for w, row in zip(self.words, self.matrix):
                fh.write(w + " " + " ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as fh:
            count, dim = map(int, fh.readline().split())
            words, rows = [], []
            for line in fh:
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    continue
                words.append(parts[0])
                rows.append([float(v) for v in parts[1:]])
        return cls(words, np.array(rows).reshape(len(words), dim))


@dataclass
class SeedDictionary:
    pairs: list = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("duplicate seed pair")

    def __len__(self):
        return len(self.pairs)


@dataclass
class TranslationLexicon:
    entries: dict = field(default_factory=dict)  # src -> [(tgt, score), ...]

    def candidates(self, word: str) -> list:
        return self.entries.get(word, [])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for src, cands in self.entries.items():
                for tgt, score in cands:
                    fh.write(f"{src}\t{tgt}\t{score!r}\n")

    @classmethod
    def load(cls, path) -> "TranslationLexicon":
        entries: dict = defaultdict(list)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                src, tgt, score = line.split("\t")
                entries[src].append((tgt, float(score)))
        return cls(dict(entries))


def extract_identical_seed(vocab_a, vocab_b, min_len: int = 2) -> SeedDictionary:
    """Pair every string present in both vocabularies with itself."""
    a = _strings(vocab_a)
    b = set(_strings(vocab_b))
    shared = [w for w in a if w in b and len(w) >= min_len and w not in SPECIALS]
    if not shared:
        raise ValueError("seed dictionary empty")
    return SeedDictionary([(w, w) for w in shared])


def _strings(vocab) -> list:
    tokens = vocab.tokens if hasattr(vocab, "tokens") else list(vocab)
    return list(dict.fromkeys(tokens))


def procrustes(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Orthogonal W minimizing ||xs W - ys||_F."""
    u, _, vt = np.linalg.svd(xs.T @ ys)
    return u @ vt


def procrustes_map(X: EmbeddingTable, Y: EmbeddingTable, seed: SeedDictionary) -> np.ndarray:
    if X.dim != Y.dim:
        raise ValueError("embedding dimensions differ")
    xs = X.rows([s for s, _ in seed.pairs])
    ys = Y.rows([t for _, t in seed.pairs])
    return procrustes(xs, ys)


def apply_map(X: EmbeddingTable, W: np.ndarray) -> EmbeddingTable:
    return EmbeddingTable(list(X.words), X.matrix @ W)


def induce_lexicon(X_mapped: EmbeddingTable, Y: EmbeddingTable, k: int = 5,
                   batch_size: int = 1024) -> TranslationLexicon:
    """k nearest target words by cosine for every source word; ties by target id."""
    if X_mapped.dim != Y.dim:
        raise ValueError("embedding dimensions differ")
    k = min(k, len(Y.words))
    entries = {}
    for start in range(0, len(X_mapped.words), batch_size):
        sims = np.clip(X_mapped.matrix[start:start + batch_size] @ Y.matrix.T, -1.0, 1.0)
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        for r, row in enumerate(order):
            src = X_mapped.words[start + r]
            entries[src] = [(Y.words[j], float(sims[r, j])) for j in row]
    return TranslationLexicon(entries)


@dataclass
class NGramLM:
    """Additively smoothed n-gram model without backoff.

    Events are the training words plus ``<unk>``; models of order >= 2 also
    predict ``</s>``.
    """

    order: int
    delta: float
    vocab: frozenset
    counts: dict  # history tuple -> Counter of next words
    totals: dict  # history tuple -> count

    @property
    def n_events(self) -> int:
        return len(self.vocab)

    def prob(self, word: str, history: Sequence[str] = ()) -> float:
        h = self._history(history)
        if word not in self.vocab:
            word = UNK
        c = self.counts.get(h)
        num = (c[word] if c is not None else 0) + self.delta
        return num / (self.totals.get(h, 0) + self.delta * self.n_events)

    def logprob(self, word: str, history: Sequence[str] = ()) -> float:
        return math.log(self.prob(word, history))

    def _history(self, history: Sequence[str]) -> tuple:
        n = self.order - 1
        if n == 0:
            return ()
        h = [BOS] * n + list(history)
        return tuple(w if (w in self.vocab or w == BOS) else UNK for w in h[-n:])


def train_lm(corpus: Iterable, order: int = 3, delta: float = 0.1) -> NGramLM:
    if order < 1:
        raise ValueError("order must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    sentences = [line.split() if isinstance(line, str) else list(line) for line in corpus]
    if not sentences:
        raise ValueError("empty corpus")
    vocab = {w for s in sentences for w in s} | {UNK}
    if order > 1:
        vocab.add(EOS)
    counts: dict = defaultdict(Counter)
    n = order - 1
    for s in sentences:
        padded = [BOS] * n + s + ([EOS] if order > 1 else [])
        for i in range(n, len(padded)):
            counts[tuple(padded[i - n:i])][padded[i]] += 1
    totals = {h: sum(c.values()) for h, c in counts.items()}
    return NGramLM(order, delta, frozenset(vocab), dict(counts), totals)


def lm_logprob(lm: NGramLM, sentence) -> float:
    words = sentence.split() if isinstance(sentence, str) else list(sentence)
    total = 0.0
    for i, w in enumerate(words):
        total += lm.logprob(w, words[:i])
    if lm.order > 1:
        total += lm.logprob(EOS, words)
    return total


def word_translate(sentence, lexicon: TranslationLexicon, lm: NGramLM, beam: int = 4,
                   lam: float = 0.5) -> list:
    """Monotone word-for-word translation.

    Each word becomes one of its lexicon candidates, or is copied when the
    lexicon has none; hypotheses are ranked by
    ``lam * cosine + (1 - lam) * LM log-prob``.
    """
    words = sentence.split() if isinstance(sentence, str) else list(sentence)
    hyps = [(0.0, [])]
    for w in words:
        cands = lexicon.candidates(w) or [(w, 0.0)]
        expanded = []
        for score, out in hyps:
            for tgt, cos in cands:
                s = score + lam * cos + (1.0 - lam) * lm.logprob(tgt, out)
                expanded.append((s, out + [tgt]))
        expanded.sort(key=lambda h: -h[0])
        hyps = expanded[:beam]
    if lm.order > 1 and words:
        hyps = [(s + (1.0 - lam) * lm.logprob(EOS, out), out) for s, out in hyps]
        hyps.sort(key=lambda h: -h[0])
    return hyps[0][1]


def backtranslate_corpus(corpus: Sequence[str], lexicon: TranslationLexicon, lm: NGramLM,
                         src_lang: str, tgt_lang: str, beam: int = 4, lam: float = 0.5) -> Bitext:
    """Translate an authentic ``tgt_lang`` corpus into ``src_lang``.

    The result pairs the synthetic translation (source side) with the
    untouched input line (target side).
    """
    authentic = [line if isinstance(line, str) else " ".join(line) for line in corpus]
    synthetic = [" ".join(word_translate(line, lexicon, lm, beam, lam)) for line in authentic]
    return Bitext.from_pairs(synthetic, authentic, src_lang, tgt_lang, "pseudo-smt")


def count_embeddings(corpus: Iterable, dim: int = 64, window: int = 2, min_count: int = 2,
                     seed: int = 0) -> EmbeddingTable:
    """PPMI + truncated SVD embeddings from a tokenized corpus.

    A lightweight substitute for a pretrained embedding file; used by the
    demo pipeline when no embeddings are supplied.
    """
    sentences = [line.split() if isinstance(line, str) else list(line) for line in corpus]
    freq = Counter(w for s in sentences for w in s)
    words = sorted((w for w, c in freq.items() if c >= min_count), key=lambda w: (-freq[w], w))
    index = {w: i for i, w in enumerate(words)}
    n = len(words)
    cooc = np.zeros((n, n))
    for s in sentences:
        ids = [index.get(w, -1) for w in s]
        for i, a in enumerate(ids):
            if a < 0:
                continue
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i and ids[j] >= 0:
                    cooc[a, ids[j]] += 1.0 / abs(i - j)
    total = cooc.sum()
    row = cooc.sum(axis=1, keepdims=True)
    col = cooc.sum(axis=0, keepdims=True) ** 0.75
    col = col / col.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log((cooc / total) / ((row / total) * col))
    ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
    dim = min(dim, n - 1) if n > 1 else 1
    u, s, _ = randomized_svd(ppmi, dim, random_state=seed)
    return EmbeddingTable(words, u * np.sqrt(s))


class ProcrustesAligner(BaseEstimator, TransformerMixin):
    """Orthogonal map fitted on seed-aligned rows ``X[i] <-> y[i]``."""

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.shape != y.shape:
            raise ValueError("X and y must have the same shape")
        self.W_ = procrustes(X, y)
        return self

    def transform(self, X):
        check_is_fitted(self, "W_")
        return np.asarray(X, dtype=np.float64) @ self.W_


class NGramLanguageModel(BaseEstimator):
    """Estimator wrapper around :func:`train_lm`; ``score`` is the mean sentence log-prob."""

    def __init__(self, order=3, delta=0.1):
        self.order = order
        self.delta = delta

    def fit(self, X, y=None):
        self.lm_ = train_lm(X, self.order, self.delta)
        return self

    def score_samples(self, X):
        check_is_fitted(self, "lm_")
        return np.array([lm_logprob(self.lm_, s) for s in X])

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))
