"""Deterministic synthetic language pair for demos and integration tests.

The "high" language is generated from a small topic-structured grammar;
the "low" language is the same grammar passed through a fixed word
substitution (a letter permutation plus a suffix), so every low sentence
has exactly one correct word-for-word translation.  Names and numbers
are shared verbatim by both languages, like proper nouns and digits in
real language pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONSONANTS = "bdfghklmnprstvwz"
VOWELS = "aeiou"
OPEN_QUOTE, CLOSE_QUOTE = "„", "“"


def _make_words(rng, n, syllables=(1, 3), taken=None):
    taken = set() if taken is None else taken
    words = []
    while len(words) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS)) for _ in range(k))
        if rng.random() < 0.4:
            w += rng.choice(list(CONSONANTS))
        if len(w) >= 2 and w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass
class Grammar:
    det: list  # per noun class
    prep: list
    conj: list
    adv: list
    say: list
    nouns: list  # per topic
    verbs: list  # per topic
    adjs: list  # per topic
    names: list
    numbers: list
    # word -> favoured neighbours: noun class, adjectives, prepositions, verbs, objects, adverbs
    prefs: dict = field(default_factory=dict)

    def content_words(self):
        out = [w for group in self.det for w in group] + self.prep + self.conj + self.adv + self.say
        for group in (self.nouns, self.verbs, self.adjs):
            for words in group:
                out += words
        return out


def make_grammar(seed: int = 0, n_topics: int = 6) -> Grammar:
    """Word lists plus sparse selectional preferences that give each word a distinctive context."""
    rng = np.random.default_rng(seed)
    taken = set()
    det = _make_words(rng, 6, (1, 1), taken)
    grammar = Grammar(
        det=[det[:3], det[3:]],
        prep=_make_words(rng, 6, (1, 1), taken),
        conj=_make_words(rng, 2, (1, 1), taken),
        adv=_make_words(rng, 6, (2, 3), taken),
        say=_make_words(rng, 2, (2, 2), taken),
        nouns=[_make_words(rng, 10, (2, 3), taken) for _ in range(n_topics)],
        verbs=[_make_words(rng, 5, (2, 3), taken) for _ in range(n_topics)],
        adjs=[_make_words(rng, 4, (2, 3), taken) for _ in range(n_topics)],
        names=[w.capitalize() for w in _make_words(rng, 30, (2, 3), taken)],
        numbers=[str(int(x)) for x in rng.choice(np.arange(2, 2030), size=20, replace=False)],
    )

    def some(pool, k):
        return [pool[i] for i in rng.choice(len(pool), size=min(k, len(pool)), replace=False)]

    prefs = grammar.prefs
    for t in range(n_topics):
        for n in grammar.nouns[t]:
            prefs[n] = {"class": int(rng.integers(2)), "adj": some(grammar.adjs[t], 1),
                        "prep": some(grammar.prep, 1), "verb": some(grammar.verbs[t], 2)}
        for v in grammar.verbs[t]:
            prefs[v] = {"obj": some(grammar.nouns[t], 3), "adv": some(grammar.adv, 1)}
        for name in grammar.names:
            prefs.setdefault(name, {"verb": {}})["verb"][t] = some(grammar.verbs[t], 2)
    return grammar


def make_cipher(grammar: Grammar, seed: int = 1, shared_fraction: float = 0.2) -> dict:
    """Word substitution: letter permutation plus a suffix.

    A ``shared_fraction`` of content words (cognates and loanwords) is left
    unchanged so that identical strings occur in every word class.
    """
    rng = np.random.default_rng(seed)
    letters = list(CONSONANTS + VOWELS)
    perm = dict(zip(letters, rng.permutation(letters)))
    suffixes = ["j", "c", "y", "x", "q"]
    mapping = {}
    used = set(grammar.content_words())
    for w in grammar.content_words():
        if rng.random() < shared_fraction:
            mapping[w] = w
            continue
        base = "".join(perm[c] for c in w)
        c = base + suffixes[len(w) % len(suffixes)]
        i = 0
        while c in used or c in mapping.values():
            c = base + suffixes[i % len(suffixes)] * (2 + i // len(suffixes))
            i += 1
        mapping[w] = c
    return mapping


def _zipf_choice(rng, words):
    ranks = np.arange(1, len(words) + 1)
    p = 1.0 / ranks
    return words[int(rng.choice(len(words), p=p / p.sum()))]


def _pick(rng, favoured, pool, strength=0.7):
    """A favoured word with probability ``strength``, else a Zipf draw from the whole pool."""
    if favoured and rng.random() < strength:
        return favoured[int(rng.integers(len(favoured)))]
    return _zipf_choice(rng, pool)


def generate_sentence(grammar: Grammar, rng) -> list:
    """One sentence as a token list (first word capitalized, final period)."""
    t = int(rng.integers(len(grammar.nouns)))
    g = grammar

    def np_(noun=None, adj_prob=0.4):
        noun = noun or _zipf_choice(rng, g.nouns[t])
        pref = g.prefs[noun]
        out = [_zipf_choice(rng, g.det[pref["class"]])]
        if rng.random() < adj_prob:
            out.append(_pick(rng, pref["adj"], g.adjs[t]))
        return out + [noun]

    def verb_for(subject):
        pref = g.prefs[subject]["verb"]
        return _pick(rng, pref[t] if isinstance(pref, dict) else pref, g.verbs[t])

    def object_of(verb):
        return _pick(rng, g.prefs[verb]["obj"], g.nouns[t])

    r = rng.random()
    if r < 0.35:
        subj = _zipf_choice(rng, g.nouns[t])
        v = verb_for(subj)
        obj = object_of(v)
        s = np_(subj) + [v] + np_(obj)
        if rng.random() < 0.5:
            s += [_pick(rng, g.prefs[obj]["prep"], g.prep)] + np_(adj_prob=0.2)
    elif r < 0.55:
        name = _zipf_choice(rng, g.names)
        v = verb_for(name)
        s = [name, v] + np_(object_of(v))
        if rng.random() < 0.5:
            s.append(_pick(rng, g.prefs[v]["adv"], g.adv))
    elif r < 0.7:
        subj = _zipf_choice(rng, g.nouns[t])
        v = verb_for(subj)
        s = np_(subj, adj_prob=0.2) + [v, _zipf_choice(rng, g.numbers), object_of(v)]
    elif r < 0.85:
        a, b = _zipf_choice(rng, g.nouns[t]), _zipf_choice(rng, g.nouns[t])
        s = np_(a) + [verb_for(a), _zipf_choice(rng, g.conj)] + np_(b) + [verb_for(b)]
    else:
        subj = _zipf_choice(rng, g.nouns[t])
        s = [_zipf_choice(rng, g.names), _zipf_choice(rng, g.say), OPEN_QUOTE] + np_(subj) + \
            [verb_for(subj), CLOSE_QUOTE]
    s[0] = s[0][:1].upper() + s[0][1:]
    return s + ["."]


def encipher(tokens, mapping: dict) -> list:
    out = []
    for i, tok in enumerate(tokens):
        lower = tok.lower()
        if lower in mapping:
            w = mapping[lower]
            if tok[:1].isupper():
                w = w[:1].upper() + w[1:]
            out.append(w)
        else:
            out.append(tok)
    return out


def render(tokens) -> str:
    """Join tokens with conventional spacing (quotes hug their content)."""
    text = ""
    for i, tok in enumerate(tokens):
        if i == 0:
            text = tok
        elif tok in (".", ",", CLOSE_QUOTE) or (i > 0 and tokens[i - 1] == OPEN_QUOTE):
            text += tok
        else:
            text += " " + tok
    return text


def write_cipher_dataset(out_dir, n_mono: int = 10000, n_valid: int = 200, n_test: int = 300,
                         seed: int = 0, n_mono_low=None, shared_fraction: float = 0.2) -> dict:
    """Write monolingual, validation and test files plus the true lexicon; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grammar = make_grammar(seed)
    mapping = make_cipher(grammar, seed + 1, shared_fraction)
    rng_high = np.random.default_rng([seed, 10])
    rng_low = np.random.default_rng([seed, 11])
    rng_eval = np.random.default_rng([seed, 12])
    n_low = n_mono if n_mono_low is None else n_mono_low

    high = [render(generate_sentence(grammar, rng_high)) for _ in range(n_mono)]
    low = [render(encipher(generate_sentence(grammar, rng_low), mapping)) for _ in range(n_low)]
    evals = [generate_sentence(grammar, rng_eval) for _ in range(n_valid + n_test)]
    paths = {}

    def dump(name, lines):
        p = out / name
        p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        paths[name] = str(p)

    dump("mono.high.txt", high)
    dump("mono.low.txt", low)
    dump("valid.high.txt", [render(s) for s in evals[:n_valid]])
    dump("valid.low.txt", [render(encipher(s, mapping)) for s in evals[:n_valid]])
    dump("test.high.txt", [render(s) for s in evals[n_valid:]])
    dump("test.low.txt", [render(encipher(s, mapping)) for s in evals[n_valid:]])
    dump("lexicon.high-low.tsv", [f"{a}\t{b}\t1.0" for a, b in mapping.items()])
    dump("lexicon.low-high.tsv", [f"{b}\t{a}\t1.0" for a, b in mapping.items()])
    (out / "cipher.json").write_text(json.dumps({"seed": seed, "mapping": mapping}, indent=1), encoding="utf-8")
    return paths
