"""Greedy, sampling and beam decoding, ensembles, and corpus BLEU."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .model import Parameters, decode_logits, encode
from .subword import BOS_ID, EOS_ID, MASK_ID, PAD_ID, UNK_ID

_BLOCKED = (PAD_ID, UNK_ID, BOS_ID, MASK_ID)


@dataclass(frozen=True)
class DecodeParams:
    mode: str = "greedy"  # greedy | sample | beam
    temperature: float = 1.0
    beam_size: int = 5
    max_len: int = 100
    length_penalty: float = 0.0
    # cap on output length relative to the source: a * len(src) + b
    max_len_a: float = 1.5
    max_len_b: int = 5
    block_specials: bool = True

    def __post_init__(self):
        if self.mode not in ("greedy", "sample", "beam"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.beam_size < 1 or self.max_len < 1:
            raise ValueError("beam_size and max_len must be >= 1")


class ModelScorer:
    """Next-token log-probabilities from one model or the mean of several.

    Ensembles average probabilities (not log-probabilities); a single model
    returns its own log-softmax unchanged.
    """

    def __init__(self, models, src_seqs, src_lang, tgt_lang):
        if isinstance(models, Parameters):
            models = [models]
        if not models:
            raise ValueError("need at least one model")
        sizes = {m["embed.tokens"].shape[0] for m in models}
        if len(sizes) != 1:
            raise ValueError("ensemble members have different vocabularies")
        self.models = list(models)
        self.vocab_size = sizes.pop()
        src = [list(s) + [EOS_ID] for s in src_seqs]
        width = max(len(s) for s in src)
        self.src = torch.full((len(src), width), PAD_ID, dtype=torch.long)
        for i, s in enumerate(src):
            self.src[i, : len(s)] = torch.as_tensor(s)
        n = len(src)
        self.src_lang = torch.full((n,), int(src_lang), dtype=torch.long)
        self.tgt_lang = torch.full((n,), int(tgt_lang), dtype=torch.long)
        with torch.no_grad():
            self.encoded = [encode(m.tensors, self.src, self.src_lang, m.config) for m in self.models]

    @property
    def max_positions(self) -> int:
        return min(m.config.max_len for m in self.models)

    @torch.no_grad()
    def next_logprobs(self, prefixes: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
        offsets = torch.zeros(len(rows), dtype=torch.long)
        out = None
        for m, (enc, keep) in zip(self.models, self.encoded):
            logits = decode_logits(m.tensors, enc[rows], keep[rows], prefixes, self.tgt_lang[rows], offsets,
                                   m.config)[:, -1]
            if len(self.models) == 1:
                return torch.log_softmax(logits.double(), dim=-1)
            probs = torch.softmax(logits.double(), dim=-1)
            out = probs if out is None else out + probs
        return torch.log(out / len(self.models))


def _block(logp: torch.Tensor, dp: DecodeParams) -> torch.Tensor:
    if dp.block_specials:
        logp = logp.clone()
        logp[:, list(_BLOCKED)] = -math.inf
    return logp


def _length_limit(src_len: int, dp: DecodeParams, max_positions: int) -> int:
    limit = min(dp.max_len, int(dp.max_len_a * src_len) + dp.max_len_b)
    return max(1, min(limit, max_positions))


def _sample(logp: torch.Tensor, temperature: float, rng: np.random.Generator) -> torch.Tensor:
    probs = torch.softmax(logp / temperature, dim=-1).numpy()
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    idx = np.array([np.searchsorted(c, x, side="right") for c, x in zip(cdf, u)])
    # never land on a zero-probability token through rounding at the top end
    idx = np.minimum(idx, probs.shape[1] - 1)
    for r in np.nonzero(probs[np.arange(len(idx)), idx] == 0)[0]:
        idx[r] = int(np.argmax(probs[r]))
    return torch.as_tensor(idx, dtype=torch.long)


def generate(scorer: ModelScorer, src_lens: Sequence[int], dp: DecodeParams,
             rng: Optional[np.random.Generator] = None):
    """Batched greedy or sampled decoding; returns (outputs, truncated flags)."""
    if dp.mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    n = len(src_lens)
    limits = [_length_limit(l, dp, scorer.max_positions) for l in src_lens]
    outputs = [[] for _ in range(n)]
    done = [False] * n
    truncated = [False] * n
    prefix = torch.full((n, 1), BOS_ID, dtype=torch.long)
    for t in range(max(limits)):
        active = [i for i in range(n) if not done[i]]
        if not active:
            break
        rows = torch.as_tensor(active, dtype=torch.long)
        logp = _block(scorer.next_logprobs(prefix[rows], rows), dp)
        if dp.mode == "greedy":
            nxt = torch.argmax(logp, dim=-1)
        else:
            nxt = _sample(logp, dp.temperature, rng)
        step = torch.full((n, 1), PAD_ID, dtype=torch.long)
        for r, i in enumerate(active):
            tok = int(nxt[r])
            step[i, 0] = tok
            if tok == EOS_ID:
                done[i] = True
            else:
                outputs[i].append(tok)
                if len(outputs[i]) >= limits[i]:
                    done[i] = truncated[i] = True
        prefix = torch.cat([prefix, step], dim=1)
    return outputs, truncated


def beam_search(scorer: ModelScorer, src_len: int, dp: DecodeParams, row: int = 0):
    """N-best list of ``(tokens, score, truncated)`` for one source row, best first.

    Scores are summed log-probs divided by ``len ** length_penalty``.
    """
    k = dp.beam_size
    limit = _length_limit(src_len, dp, scorer.max_positions)
    alive = [([], 0.0)]
    finished = []

    def norm(tokens, score):
        return score / (max(1, len(tokens)) ** dp.length_penalty) if dp.length_penalty else score

    for t in range(limit):
        prefixes = torch.as_tensor([[BOS_ID] + toks for toks, _ in alive], dtype=torch.long)
        rows = torch.full((len(alive),), row, dtype=torch.long)
        logp = _block(scorer.next_logprobs(prefixes, rows), dp).numpy()
        total = (np.array([s for _, s in alive])[:, None] + logp).ravel()
        order = np.argsort(-total, kind="stable")
        V = logp.shape[1]
        new_alive = []
        for rank, flat in enumerate(order):
            score = float(total[flat])
            if not np.isfinite(score):
                break
            i, tok = divmod(int(flat), V)
            toks = alive[i][0]
            if tok == EOS_ID:
                if rank < k:
                    finished.append((toks, score, False))
                continue
            new_alive.append((toks + [tok], score))
            if len(new_alive) == k:
                break
        alive = new_alive
        if not alive:
            break
        if dp.length_penalty == 0 and finished:
            if max(s for _, s, _ in finished) >= max(s for _, s in alive):
                alive = []
                break
    finished += [(toks, s, True) for toks, s in alive]
    finished.sort(key=lambda h: -norm(h[0], h[1]))
    return [(toks, norm(toks, s), trunc) for toks, s, trunc in finished]


@torch.no_grad()
def translate(models, src_seqs, src_lang, tgt_lang, dp: DecodeParams = DecodeParams(),
              rng: Optional[np.random.Generator] = None, batch_size: int = 64):
    """Translate id sequences; returns a list of output id lists."""
    outputs = []
    for start in range(0, len(src_seqs), batch_size):
        chunk = [list(s) for s in src_seqs[start:start + batch_size]]
        scorer = ModelScorer(models, chunk, src_lang, tgt_lang)
        if dp.mode == "beam":
            for r, s in enumerate(chunk):
                outputs.append(beam_search(scorer, len(s), dp, row=r)[0][0])
        else:
            out, _ = generate(scorer, [len(s) for s in chunk], dp, rng)
            outputs.extend(out)
    return outputs


def decode(params, src_ids, dp: DecodeParams = DecodeParams(), rng=None, src_lang: int = 0, tgt_lang: int = 1):
    """Decode one sentence with one model; returns (output ids, truncated)."""
    scorer = ModelScorer(params, [list(src_ids)], src_lang, tgt_lang)
    if dp.mode == "beam":
        toks, _, trunc = beam_search(scorer, len(src_ids), dp)[0]
        return toks, trunc
    out, trunc = generate(scorer, [len(src_ids)], dp, rng)
    return out[0], trunc[0]


def ensemble_decode(models, src_ids, dp: DecodeParams = DecodeParams(), rng=None, src_lang: int = 0,
                    tgt_lang: int = 1):
    """Decode with the arithmetic mean of the members' next-token distributions."""
    if len({m["embed.tokens"].shape[0] for m in models}) != 1:
        raise ValueError("ensemble members have different vocabularies")
    scorer = ModelScorer(list(models), [list(src_ids)], src_lang, tgt_lang)
    if dp.mode == "beam":
        toks, _, trunc = beam_search(scorer, len(src_ids), dp)[0]
        return toks, trunc
    out, trunc = generate(scorer, [len(src_ids)], dp, rng)
    return out[0], trunc[0]


# -- BLEU ---------------------------------------------------------------------

NGRAM_ORDER = 4


def tokenize_13a(line: str) -> str:
    """mteval-v13a tokenization as used for WMT scoring."""
    norm = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    norm = norm.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    norm = f" {norm} "
    norm = re.sub(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])", r" \1 ", norm)
    norm = re.sub(r"([^0-9])([\.,])", r"\1 \2 ", norm)
    norm = re.sub(r"([\.,])([^0-9])", r" \1 \2", norm)
    norm = re.sub(r"([0-9])(-)", r"\1 \2 ", norm)
    return " ".join(norm.split())


@dataclass
class BleuReport:
    score: float
    counts: list
    totals: list
    precisions: list  # percentages
    brevity_penalty: float
    sys_len: int
    ref_len: int

    def __str__(self):
        prec = "/".join(f"{p:.1f}" for p in self.precisions)
        ratio = self.sys_len / self.ref_len if self.ref_len else 0.0
        return (f"BLEU = {self.score:.2f} {prec} (BP = {self.brevity_penalty:.3f} "
                f"ratio = {ratio:.3f} hyp_len = {self.sys_len} ref_len = {self.ref_len})")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ngrams(tokens: Sequence[str]) -> Counter:
    out = Counter()
    for n in range(1, NGRAM_ORDER + 1):
        for i in range(len(tokens) - n + 1):
            out[tuple(tokens[i:i + n])] += 1
    return out


def compute_bleu(counts, totals, sys_len: int, ref_len: int) -> BleuReport:
    """BLEU from sufficient statistics with exponential smoothing of zero counts."""
    precisions = [0.0] * NGRAM_ORDER
    ratios = [0.0] * NGRAM_ORDER
    smooth = 1.0
    for n in range(NGRAM_ORDER):
        if totals[n] == 0:
            break
        if counts[n] == 0:
            smooth *= 2
            ratios[n] = 1.0 / (smooth * totals[n])
        else:
            ratios[n] = counts[n] / totals[n]
        precisions[n] = 100.0 * ratios[n]
    if sys_len == 0 or min(ratios) == 0.0:
        bp = 0.0 if sys_len == 0 else (1.0 if sys_len >= ref_len else math.exp(1 - ref_len / sys_len))
        return BleuReport(0.0, list(counts), list(totals), precisions, bp, sys_len, ref_len)
    bp = 1.0 if sys_len >= ref_len else math.exp(1 - ref_len / sys_len)
    score = 100.0 * bp * math.exp(sum(math.log(r) for r in ratios) / NGRAM_ORDER)
    return BleuReport(score, list(counts), list(totals), precisions, bp, sys_len, ref_len)


def bleu(hypotheses: Sequence[str], references: Sequence[str]) -> BleuReport:
    """Corpus BLEU, mixed case, 13a tokenization, one reference per line."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in line count")
    counts = [0] * NGRAM_ORDER
    totals = [0] * NGRAM_ORDER
    sys_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = tokenize_13a(hyp.rstrip()).split()
        r = tokenize_13a(ref.rstrip()).split()
        sys_len += len(h)
        ref_len += len(r)
        h_ngrams, r_ngrams = _ngrams(h), _ngrams(r)
        for gram, c in h_ngrams.items():
            n = len(gram) - 1
            totals[n] += c
            counts[n] += min(c, r_ngrams.get(gram, 0))
    return compute_bleu(counts, totals, sys_len, ref_len)
