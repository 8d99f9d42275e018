"""Aligned sentence-pair corpora with per-pair provenance."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

PROVENANCES = ("pseudo-smt", "pseudo-nmt", "online-bt", "parallel")


@dataclass
class Bitext:
    """Sentence pairs stored as whitespace-tokenized strings.

    ``src_lang`` / ``tgt_lang`` hold one language id per pair so that
    corpora covering both directions can be mixed and reordered.
    """

    src: list = field(default_factory=list)
    tgt: list = field(default_factory=list)
    src_lang: list = field(default_factory=list)
    tgt_lang: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.src)
        if not (len(self.tgt) == len(self.src_lang) == len(self.tgt_lang) == len(self.provenance) == n):
            raise ValueError("bitext columns differ in length")
        bad = set(self.provenance) - set(PROVENANCES)
        if bad:
            raise ValueError(f"unknown provenance {sorted(bad)}")
        if not all(isinstance(x, str) for x in self.src + self.tgt):
            raise TypeError("bitext sentences must be whitespace-tokenized strings")

    @classmethod
    def from_pairs(cls, src, tgt, src_lang: str, tgt_lang: str, provenance: str) -> "Bitext":
        if len(src) != len(tgt):
            raise ValueError("source and target differ in length")
        n = len(src)
        return cls(list(src), list(tgt), [src_lang] * n, [tgt_lang] * n, [provenance] * n)

    def __len__(self):
        return len(self.src)

    def __add__(self, other: "Bitext") -> "Bitext":
        return Bitext(self.src + other.src, self.tgt + other.tgt, self.src_lang + other.src_lang,
                      self.tgt_lang + other.tgt_lang, self.provenance + other.provenance)

    def subset(self, indices) -> "Bitext":
        idx = list(indices)
        return Bitext([self.src[i] for i in idx], [self.tgt[i] for i in idx],
                      [self.src_lang[i] for i in idx], [self.tgt_lang[i] for i in idx],
                      [self.provenance[i] for i in idx])

    def direction(self, src_lang: str, tgt_lang: str) -> "Bitext":
        return self.subset(i for i in range(len(self))
                           if self.src_lang[i] == src_lang and self.tgt_lang[i] == tgt_lang)

    def save(self, prefix) -> None:
        """Write ``prefix.src``, ``prefix.tgt``, ``prefix.prov`` and ``prefix.langs``."""
        prefix = str(prefix)
        _write_lines(prefix + ".src", self.src)
        _write_lines(prefix + ".tgt", self.tgt)
        _write_lines(prefix + ".prov", self.provenance)
        _write_lines(prefix + ".langs", [f"{s}-{t}" for s, t in zip(self.src_lang, self.tgt_lang)])

    @classmethod
    def load(cls, prefix) -> "Bitext":
        prefix = str(prefix)
        langs = [line.split("-", 1) for line in read_lines(prefix + ".langs")]
        return cls(read_lines(prefix + ".src"), read_lines(prefix + ".tgt"),
                   [s for s, _ in langs], [t for _, t in langs], read_lines(prefix + ".prov"))


def read_lines(path, limit: Optional[int] = None) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    return lines[:limit] if limit is not None else lines


def _write_lines(path, lines) -> None:
    Path(path).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")


write_lines = _write_lines
