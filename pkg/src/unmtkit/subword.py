"""Byte-pair encoding: learning, segmentation with BPE-Dropout, vocabularies.

Words are split into characters with an end-of-word marker glued to the
final character (``"abc" -> a b c</w>``), following subword-nmt.  The merge
table is an ordered list of symbol pairs; its position is the merge rank.
"""

from __future__ import annotations

import hashlib
import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_probability

EOW = "</w>"
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>", "<mask>")
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)


@dataclass(frozen=True)
class MergeTable:
    merges: tuple = ()
    end_of_word_marker: str = EOW

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merge pair")

    def __len__(self):
        return len(self.merges)

    @property
    def ranks(self) -> dict:
        # cached on first access; the dataclass is frozen so bypass __setattr__
        try:
            return self.__dict__["_ranks"]
        except KeyError:
            ranks = {pair: i for i, pair in enumerate(self.merges)}
            object.__setattr__(self, "_ranks", ranks)
            return ranks

    def save(self, path) -> None:
        lines = ["#version: 0.2"] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MergeTable":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#version"):
                continue
            left, right = line.split(" ")
            merges.append((left, right))
        return cls(tuple(merges))


@dataclass(frozen=True)
class DropoutParams:
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        check_probability(self.p, "p")


def word_to_symbols(word: str, marker: str = EOW) -> list:
    if not word:
        raise ValueError("cannot segment an empty word")
    symbols = list(word)
    symbols[-1] += marker
    return symbols


def word_frequencies(corpus: Iterable) -> Counter:
    """Count whitespace-separated words; lines may be strings or token lists."""
    freqs = Counter()
    for line in corpus:
        freqs.update(line.split() if isinstance(line, str) else line)
    return freqs


def learn_bpe(corpus: Iterable, n_merges: int) -> MergeTable:
    """Learn ``n_merges`` merges greedily by pair frequency.

    Ties go to the lexicographically smallest ``(left, right)`` pair.
    Learning stops early once no pair occurs at least twice.
    """
    if n_merges < 0:
        raise ValueError("n_merges must be >= 0")
    freqs = word_frequencies(corpus)
    if not freqs:
        raise ValueError("empty corpus")

    words = [word_to_symbols(w) for w in freqs]
    counts = [freqs[w] for w in freqs]
    stats: dict = defaultdict(int)
    where: dict = defaultdict(set)
    for i, (syms, c) in enumerate(zip(words, counts)):
        for pair in zip(syms, syms[1:]):
            stats[pair] += c
            where[pair].add(i)

    heap = [(-f, pair) for pair, f in stats.items()]
    heapq.heapify(heap)
    merges = []
    while len(merges) < n_merges and heap:
        neg, pair = heapq.heappop(heap)
        if stats.get(pair, 0) != -neg:
            continue  # stale entry
        if -neg < 2:
            break
        merges.append(pair)
        merged = pair[0] + pair[1]
        touched = set()
        for i in where.pop(pair, ()):
            syms = words[i]
            c = counts[i]
            for old in zip(syms, syms[1:]):
                stats[old] -= c
                touched.add(old)
            new = []
            j = 0
            while j < len(syms):
                if j + 1 < len(syms) and syms[j] == pair[0] and syms[j + 1] == pair[1]:
                    new.append(merged)
                    j += 2
                else:
                    new.append(syms[j])
                    j += 1
            words[i] = new
            for p in zip(new, new[1:]):
                stats[p] += c
                where[p].add(i)
                touched.add(p)
        for p in touched:
            if stats[p] > 0:
                heapq.heappush(heap, (-stats[p], p))
            else:
                stats.pop(p, None)
        stats.pop(pair, None)
    return MergeTable(tuple(merges))


def apply_bpe(word: str, table: MergeTable) -> list:
    """Deterministic BPE: repeatedly merge every occurrence of the best-ranked pair."""
    symbols = word_to_symbols(word, table.end_of_word_marker)
    ranks = table.ranks
    while len(symbols) > 1:
        candidates = [ranks[p] for p in zip(symbols, symbols[1:]) if p in ranks]
        if not candidates:
            break
        best = table.merges[min(candidates)]
        merged = []
        j = 0
        while j < len(symbols):
            if j + 1 < len(symbols) and (symbols[j], symbols[j + 1]) == best:
                merged.append(best[0] + best[1])
                j += 2
            else:
                merged.append(symbols[j])
                j += 1
        symbols = merged
    return symbols


def segment(word: str, table: MergeTable, drop: DropoutParams = DropoutParams(),
            rng: Optional[np.random.Generator] = None) -> list:
    """Segment ``word`` with BPE-Dropout.

    At every step each applicable merge site is skipped with probability
    ``drop.p``; the best-ranked surviving site is merged.  ``p=0`` gives
    plain BPE and ``p=1`` gives characters.
    """
    symbols = word_to_symbols(word, table.end_of_word_marker)
    p = drop.p
    if p >= 1.0:
        return symbols
    if p > 0.0 and rng is None:
        rng = np.random.default_rng(drop.seed)
    ranks = table.ranks
    while len(symbols) > 1:
        sites = [(ranks[pair], j) for j, pair in enumerate(zip(symbols, symbols[1:])) if pair in ranks]
        if p > 0.0 and sites:
            keep = rng.random(len(sites)) >= p
            sites = [s for s, k in zip(sites, keep) if k]
        if not sites:
            break
        _, j = min(sites)
        symbols[j:j + 2] = [symbols[j] + symbols[j + 1]]
    return symbols


def strip_marker(subwords: Sequence[str], marker: str = EOW) -> str:
    return "".join(subwords).replace(marker, "")


def desegment(subwords: Sequence[str], marker: str = EOW) -> list:
    """Join a subword sequence back into words."""
    words, current = [], ""
    for sw in subwords:
        if sw.endswith(marker):
            words.append(current + sw[: -len(marker)])
            current = ""
        else:
            current += sw
    if current:
        words.append(current)
    return words


class Segmenter:
    """Corpus-level segmentation with a word cache for the deterministic path."""

    def __init__(self, table: MergeTable):
        self.table = table
        self._cache: dict = {}

    def word(self, w: str) -> list:
        out = self._cache.get(w)
        if out is None:
            out = apply_bpe(w, self.table)
            self._cache[w] = out
        return out

    def line(self, tokens: Sequence[str], p: float = 0.0, rng=None) -> list:
        if p == 0.0:
            return [sw for w in tokens for sw in self.word(w)]
        drop = DropoutParams(p)
        return [sw for w in tokens for sw in segment(w, self.table, drop, rng)]


def line_rng(seed: int, index: int, copy: int = 0) -> np.random.Generator:
    """RNG for one line so corpus segmentation is order-independent."""
    return np.random.default_rng([seed, index, copy])


def segment_corpus(corpus: Iterable, table: MergeTable, drop: DropoutParams = DropoutParams()) -> list:
    seg = Segmenter(table)
    out = []
    for i, line in enumerate(corpus):
        tokens = line.split() if isinstance(line, str) else line
        rng = line_rng(drop.seed, i) if drop.p > 0 else None
        out.append(seg.line(tokens, drop.p, rng))
    return out


@dataclass
class Vocabulary:
    """Token <-> id map; specials occupy ids 0..4."""

    entries: list = field(default_factory=list)  # (token, count)

    def __post_init__(self):
        self._index = {}
        for i, (tok, count) in enumerate(self.entries):
            if tok in self._index:
                raise ValueError(f"duplicate token {tok!r}")
            if count < 0:
                raise ValueError("negative count")
            self._index[tok] = i

    @classmethod
    def from_counts(cls, counts: dict) -> "Vocabulary":
        ordered = sorted((t for t in counts if t not in SPECIALS), key=lambda t: (-counts[t], t))
        return cls([(s, 0) for s in SPECIALS] + [(t, counts[t]) for t in ordered])

    def __len__(self):
        return len(self.entries)

    def __contains__(self, token):
        return token in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.entries == other.entries

    @property
    def tokens(self) -> list:
        return [t for t, _ in self.entries]

    @property
    def specials(self) -> tuple:
        return tuple(t for t, _ in self.entries[: len(SPECIALS)])

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, i: int) -> str:
        return self.entries[i][0]

    def encode(self, subwords: Sequence[str]) -> list:
        return [self._index.get(t, UNK_ID) for t in subwords]

    def decode(self, ids: Sequence[int], strip_specials: bool = True) -> list:
        out = []
        for i in ids:
            i = int(i)
            if strip_specials and i < len(SPECIALS):
                if i == EOS_ID:
                    break
                continue
            out.append(self.entries[i][0])
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for tok, _ in self.entries:
            h.update(tok.encode("utf-8") + b"\n")
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        lines = [f"{t} {c}" for t, c in self.entries]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tok, count = line.rsplit(" ", 1)
                entries.append((tok, int(count)))
        vocab = cls(entries)
        if vocab.specials != SPECIALS:
            raise ValueError("vocabulary file does not start with the reserved specials")
        return vocab


def build_vocab(segmented: Iterable[Sequence[str]]) -> Vocabulary:
    counts = Counter()
    for line in segmented:
        counts.update(line.split() if isinstance(line, str) else line)
    return Vocabulary.from_counts(counts)


def symbol_inventory(words: Iterable[str], table: MergeTable) -> set:
    """Every symbol that segmentation of ``words`` can emit under any dropout pattern."""
    symbols = set()
    for w in words:
        symbols.update(word_to_symbols(w))
        symbols.update(w[:-1])
    symbols.update(left + right for left, right in table.merges)
    return symbols


def with_inventory(vocab: Vocabulary, symbols: Iterable[str]) -> Vocabulary:
    """Append unseen ``symbols`` with count 0 (lexicographic order) so dropout never yields <unk>."""
    missing = sorted(set(symbols) - set(vocab.tokens))
    return Vocabulary(list(vocab.entries) + [(t, 0) for t in missing])


def extend_vocab(base: Vocabulary, joint: Vocabulary):
    """Union of two vocabularies keeping every base id; returns (vocab, new tokens report)."""
    if base.specials != joint.specials:
        raise ValueError("conflicting specials")
    entries = list(base.entries)
    report = []
    for tok, count in joint.entries:
        if tok not in base:
            report.append((tok, len(entries)))
            entries.append((tok, count))
    return Vocabulary(entries), report


def oversample_with_dropout(corpus, factor: int, table: MergeTable, drop: DropoutParams,
                            side: Optional[str] = None, other_table: Optional[MergeTable] = None) -> list:
    """Repeat every line ``factor`` times and segment each copy afresh.

    ``corpus`` is either a list of lines (monolingual) or a list of
    ``(src, tgt)`` pairs.  For pairs, ``side`` ("src" or "tgt") names the
    side that receives dropout; the other side is segmented with ``p=0``
    using ``other_table`` (defaults to ``table``).
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    corpus = list(corpus)
    bitext = bool(corpus) and isinstance(corpus[0], tuple)
    seg = Segmenter(table)
    other = Segmenter(other_table or table)
    out = []
    for i, item in enumerate(corpus):
        for copy in range(factor):
            rng = line_rng(drop.seed, i, copy)
            if not bitext:
                out.append(seg.line(_tokens(item), drop.p, rng))
                continue
            src, tgt = item
            if side == "src":
                out.append((seg.line(_tokens(src), drop.p, rng), other.line(_tokens(tgt))))
            elif side == "tgt":
                out.append((other.line(_tokens(src)), seg.line(_tokens(tgt), drop.p, rng)))
            else:
                raise ValueError("side must be 'src' or 'tgt' for a bitext")
    return out


def _tokens(line):
    return line.split() if isinstance(line, str) else list(line)


class BPESegmenter(BaseEstimator, TransformerMixin):
    """Learn a merge table and vocabulary on ``fit``; segment on ``transform``.

    ``X`` is a list of whitespace-tokenized lines (strings or token lists).
    ``transform`` returns lines of space-separated subwords.
    """

    def __init__(self, n_merges=500, dropout=0.0, random_state=0):
        self.n_merges = n_merges
        self.dropout = dropout
        self.random_state = random_state

    def fit(self, X, y=None):
        check_probability(self.dropout, "dropout")
        X = list(X)
        self.merges_ = learn_bpe(X, self.n_merges)
        self.vocab_ = build_vocab(segment_corpus(X, self.merges_))
        return self

    def transform(self, X):
        check_is_fitted(self, "merges_")
        drop = DropoutParams(self.dropout, self.random_state)
        return [" ".join(s) for s in segment_corpus(X, self.merges_, drop)]

    def inverse_transform(self, X):
        return [" ".join(desegment(_tokens(line))) for line in X]
