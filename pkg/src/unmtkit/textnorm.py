"""Moses-style text pre- and post-processing.

Punctuation normalization, rule-based tokenization with per-language
nonbreaking prefixes, truecasing, recasing, detokenization, and fixing
quotation marks in a translation so they follow the source sentence.
"""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

__all__ = [
    "CasingModel",
    "LangRules",
    "NORMALIZATION_TABLE",
    "Truecaser",
    "detokenize",
    "fix_quotes",
    "load_rules",
    "normalize",
    "normalize_and_tokenize",
    "postprocess",
    "recase",
    "train_truecaser",
    "truecase",
]

# Fixed normalization table, applied character by character before tokenizing.
NORMALIZATION_TABLE = {
    "\u00a0": " ",  # no-break space
    "\u2009": " ",  # thin space
    "\u202f": " ",  # narrow no-break space
    "\u201c": '"',  # left double quotation mark
    "\u201d": '"',  # right double quotation mark
    "\u201e": '"',  # double low-9 quotation mark
    "\u201f": '"',
    "\u00ab": '"',  # guillemets
    "\u00bb": '"',
    "\u2033": '"',  # double prime
    "\u2018": "'",
    "\u2019": "'",
    "\u201a": "'",
    "\u201b": "'",
    "\u2032": "'",
    "\u2012": "-",  # figure dash
    "\u2013": "-",  # en dash
    "\u2014": "-",  # em dash
    "\u2015": "-",  # horizontal bar
    "\u2026": "...",
}
_TRANSLATION = str.maketrans(NORMALIZATION_TABLE)

# Opening double-quote mark -> (open, close) style.
QUOTE_STYLES = {
    "„": ("„", "“"),  # German „…“
    "“": ("“", "”"),  # English “…”
    "«": ("«", "»"),  # French «…»
    "»": ("»", "«"),  # German alternative »…«
    '"': ('"', '"'),
}

_RULE_FILES = {"de": "de", "cs": "cs", "hsb": "cs", "en": "en"}
_DEFAULT_QUOTES = {
    "de": ("„", "“"),
    "cs": ("„", "“"),
    "hsb": ("„", "“"),
    "en": ("“", "”"),
}

_ATTACH_LEFT = {",", ".", "!", "?", ":", ";", ")", "]", "}", "%", "..."}
_ATTACH_RIGHT = {"(", "[", "{", "¿", "¡"}
_SPECIAL = re.compile(r"([^\w\s.',\-])")
_LETTER = re.compile(r"[^\W\d_]")


@dataclass(frozen=True)
class LangRules:
    """Per-language tokenization assets."""

    lang_id: str
    nonbreaking_prefixes: frozenset = frozenset()
    quote_style: tuple = ("„", "“")

    def __post_init__(self):
        if not self.lang_id:
            raise ValueError("lang_id must be nonempty")
        if len(self.quote_style) != 2 or any(len(q) != 1 for q in self.quote_style):
            raise ValueError("quote marks must be single code points")


def read_prefix_file(path) -> frozenset:
    prefixes = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            prefixes.add(line)
    return frozenset(prefixes)


def load_rules(lang: str, prefix_file=None) -> LangRules:
    """Load rules for ``lang``; Upper Sorbian ("hsb") reuses the Czech file."""
    if prefix_file is not None:
        prefixes = read_prefix_file(prefix_file)
    else:
        name = _RULE_FILES.get(lang)
        if name is None:
            prefixes = frozenset()
        else:
            ref = resources.files("unmtkit") / "data" / f"nonbreaking_prefix.{name}"
            with resources.as_file(ref) as path:
                prefixes = read_prefix_file(path)
    quotes = _DEFAULT_QUOTES.get(lang, ("„", "“"))
    return LangRules(lang, prefixes, quotes)


def normalize(text: str) -> str:
    """Apply the fixed normalization table and squeeze whitespace."""
    return " ".join(text.translate(_TRANSLATION).split())


def _split_apostrophes(text: str) -> str:
    # keep apostrophes only between two letters ("Peter's")
    out = []
    for i, ch in enumerate(text):
        if ch == "'":
            prev_ok = i > 0 and _LETTER.match(text[i - 1])
            next_ok = i + 1 < len(text) and _LETTER.match(text[i + 1])
            if not (prev_ok and next_ok):
                out.append(" ' ")
                continue
        out.append(ch)
    return "".join(out)


def normalize_and_tokenize(text: str, rules: LangRules) -> list:
    """Normalize ``text`` and split it into tokens."""
    text = normalize(text)
    if not text:
        return []
    text = re.sub(r"\.\.+", lambda m: f" {m.group(0)} ", text)
    text = _SPECIAL.sub(r" \1 ", text)
    text = re.sub(r"(\D),", r"\1 , ", text)
    text = re.sub(r",(\D)", r" , \1", text)
    text = re.sub(r",$", " ,", text)
    text = re.sub(r"^,", ", ", text)
    text = _split_apostrophes(text)
    text = re.sub(r"(?<=\s)-(?=\S)|(?<=\S)-(?=\s)|^-|-$", " - ", text)

    words = text.split()
    tokens = []
    for i, word in enumerate(words):
        if word.endswith(".") and not re.fullmatch(r"\.+", word):
            stem = word[:-1]
            keep = (
                ("." in stem and _LETTER.search(stem))
                or stem in rules.nonbreaking_prefixes
                or (i + 1 < len(words) and words[i + 1][:1].islower())
            )
            if not keep:
                tokens.extend([stem, "."])
                continue
        tokens.append(word)
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    """Invert tokenization spacing: attach punctuation, pair quotes."""
    out = ""
    glue_next = True
    open_quote = {'"': False, "'": False}
    for tok in tokens:
        glue_prev = False
        glue_after = False
        if tok in _ATTACH_LEFT:
            glue_prev = True
        elif tok in _ATTACH_RIGHT:
            glue_after = True
        elif tok in open_quote:
            if open_quote[tok]:
                glue_prev = True
            else:
                glue_after = True
            open_quote[tok] = not open_quote[tok]
        if out and not glue_prev and not glue_next:
            out += " "
        out += tok
        glue_next = glue_after
    return out


@dataclass
class CasingModel:
    """Most frequent surface form per lowercased token."""

    table: dict = field(default_factory=dict)  # lower -> (surface, count)
    total_tokens: int = 0

    def lookup(self, token: str) -> Optional[str]:
        entry = self.table.get(token.lower())
        return None if entry is None else entry[0]

    def save(self, path) -> None:
        lines = [f"{surface}\t{count}" for surface, count in self.table.values()]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CasingModel":
        table = {}
        total = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            surface, count = line.rsplit("\t", 1)
            table[surface.lower()] = (surface, int(count))
            total += int(count)
        return cls(table, total)


def _initial_index(tokens: Sequence[str]) -> Optional[int]:
    """Index of the sentence-initial token: the first one containing a letter."""
    for i, tok in enumerate(tokens):
        if _LETTER.search(tok):
            return i
    return None


def train_truecaser(corpus: Iterable[Sequence[str]]) -> CasingModel:
    counts: dict = defaultdict(Counter)
    n_sentences = 0
    total = 0
    for tokens in corpus:
        n_sentences += 1
        skip = _initial_index(tokens)
        for i, tok in enumerate(tokens):
            if i == skip:
                continue
            counts[tok.lower()][tok] += 1
            total += 1
    if n_sentences == 0:
        raise ValueError("empty training data")
    table = {}
    for key, forms in counts.items():
        # highest count first; ties go to the smallest string in code-point order
        surface, count = min(forms.items(), key=lambda kv: (-kv[1], kv[0]))
        table[key] = (surface, count)
    return CasingModel(table, total)


def truecase(tokens: Sequence[str], model: CasingModel) -> list:
    tokens = list(tokens)
    i = _initial_index(tokens)
    if i is not None:
        known = model.lookup(tokens[i])
        if known is not None:
            tokens[i] = known
    return tokens


def recase(tokens: Sequence[str], model: CasingModel) -> list:
    """Restore casing: known tokens take their surface form, the first word is capitalized."""
    out = []
    for tok in tokens:
        known = model.lookup(tok)
        out.append(known if known is not None else tok)
    i = _initial_index(out)
    if i is not None:
        out[i] = out[i][:1].upper() + out[i][1:]
    return out


def detect_quote_style(text: str) -> Optional[tuple]:
    for ch in text:
        if ch in QUOTE_STYLES:
            return QUOTE_STYLES[ch]
    return None


def fix_quotes(text: str, style: tuple) -> str:
    """Rewrite ASCII double quotes left to right as open/close pairs.

    An unpaired trailing quote becomes a closing mark.
    """
    n_quotes = text.count('"')
    last_unpaired = n_quotes if n_quotes % 2 else 0
    open_mark, close_mark = style
    out = []
    seen = 0
    for ch in text:
        if ch == '"':
            seen += 1
            is_open = seen % 2 == 1 and seen != last_unpaired
            out.append(open_mark if is_open else close_mark)
        else:
            out.append(ch)
    return "".join(out)


def postprocess(hyp_tokens: Sequence[str], src_text: str, model: CasingModel, rules: LangRules) -> str:
    text = detokenize(recase(hyp_tokens, model))
    style = detect_quote_style(src_text) or rules.quote_style
    return fix_quotes(text, style)


class Truecaser(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`train_truecaser` / :func:`truecase`.

    ``X`` is a list of token lists.
    """

    def fit(self, X, y=None):
        self.model_ = train_truecaser(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return [truecase(tokens, self.model_) for tokens in X]

    def inverse_transform(self, X):
        check_is_fitted(self, "model_")
        return [recase(tokens, self.model_) for tokens in X]
