"""Training objectives and loops.

Data here is already encoded: a sentence is a list of token ids, and a
language is an integer id matching the model's language embeddings.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .corpus import Bitext
from .decode import DecodeParams, translate
from .model import Parameters, forward_loss_backward, make_batch, token_logprobs
from .subword import MASK_ID
from .validation import check_probability, check_random_state


# -- data containers -----------------------------------------------------------

@dataclass
class PairData:
    """Encoded sentence pairs with per-pair language ids."""

    src: list = field(default_factory=list)
    tgt: list = field(default_factory=list)
    src_lang: list = field(default_factory=list)
    tgt_lang: list = field(default_factory=list)

    def __len__(self):
        return len(self.src)

    @classmethod
    def single(cls, src, tgt, src_lang: int, tgt_lang: int) -> "PairData":
        if len(src) != len(tgt):
            raise ValueError("source and target differ in length")
        return cls(list(src), list(tgt), [src_lang] * len(src), [tgt_lang] * len(src))

    def subset(self, idx) -> "PairData":
        idx = list(idx)
        return PairData([self.src[i] for i in idx], [self.tgt[i] for i in idx],
                        [self.src_lang[i] for i in idx], [self.tgt_lang[i] for i in idx])

    def __add__(self, other: "PairData") -> "PairData":
        return PairData(self.src + other.src, self.tgt + other.tgt,
                        self.src_lang + other.src_lang, self.tgt_lang + other.tgt_lang)

    def batch(self, idx, max_len=None):
        idx = list(idx)
        return make_batch([self.src[i] for i in idx], [self.tgt[i] for i in idx],
                          [self.src_lang[i] for i in idx], [self.tgt_lang[i] for i in idx], max_len=max_len)


# -- optimizer -------------------------------------------------------------------

@dataclass
class OptimState:
    base_lr: float = 1e-4
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("base_lr", "warmup_steps", "beta1", "beta2", "eps", "step")}


def inverse_sqrt_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup``, then decay with ``1/sqrt(step)``."""
    if step <= 0:
        return 0.0
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


def optimizer_step(params: Parameters, grads: dict, opt: OptimState):
    """One Adam update with bias correction; updates tensors in place."""
    for name, g in grads.items():
        if name in params.frozen:
            raise ValueError(f"gradient supplied for frozen tensor {name!r}")
        if name not in params or params[name].shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
    opt.step += 1
    lr = inverse_sqrt_lr(opt.step, opt.base_lr, opt.warmup_steps)
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    with torch.no_grad():
        for name, g in grads.items():
            t = params[name]
            m = opt.m.get(name)
            if m is None or m.shape != g.shape:
                m = opt.m[name] = torch.zeros_like(t)
                opt.v[name] = torch.zeros_like(t)
            v = opt.v[name]
            m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
            v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
            t.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + opt.eps))
    return params, opt


# -- MASS ------------------------------------------------------------------------

def mass_mask(ids: Sequence[int], fraction: float, rng: np.random.Generator):
    """Mask a contiguous span; returns (encoder input, span, span start) or None if too short."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    n = len(ids)
    if n < 2:
        return None
    span = max(1, int(math.floor(fraction * n + 0.5)))
    start = int(rng.integers(0, n - span + 1))
    enc = list(ids)
    enc[start:start + span] = [MASK_ID] * span
    return enc, list(ids[start:start + span]), start


def mass_batch(sentences, lang: int, fraction: float, rng, max_len=None):
    enc, frag, starts = [], [], []
    skipped = 0
    for s in sentences:
        if max_len:
            s = s[: max_len - 1]
        out = mass_mask(s, fraction, rng)
        if out is None:
            skipped += 1
            continue
        enc.append(out[0])
        frag.append(out[1])
        starts.append(out[2])
    if not enc:
        return None, skipped
    return make_batch(enc, frag, lang, lang, tgt_offset=starts, add_eos=False, max_len=max_len), skipped


def mass_step(params: Parameters, sentences, lang: int, fraction: float, rng):
    batch, _ = mass_batch(sentences, lang, fraction, rng, params.config.max_len)
    if batch is None:
        return None, None
    loss, grads, _ = forward_loss_backward(params, batch)
    return loss, grads


# -- backtranslation and supervised steps -------------------------------------------

@dataclass(frozen=True)
class BTParams:
    sample_prob: float = 0.5
    temperature: float = 0.95

    def __post_init__(self):
        check_probability(self.sample_prob, "sample_prob")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class BTResult:
    loss: float
    grads: dict
    generated: list
    mode: str
    batch: object


def online_bt_step(params: Parameters, mono, mono_lang: int, other_lang: int, bt: BTParams,
                   rng: np.random.Generator, max_len: int = 100) -> BTResult:
    """Translate a monolingual batch with the current model, then train on (translation -> original).

    Generation runs without gradients; sampling is picked for the whole
    batch with probability ``bt.sample_prob``.
    """
    mode = "sample" if rng.random() < bt.sample_prob else "greedy"
    dp = DecodeParams(mode=mode, temperature=bt.temperature, max_len=max_len)
    generated = translate(params, mono, mono_lang, other_lang, dp, rng, batch_size=len(mono))
    batch = make_batch(generated, mono, other_lang, mono_lang, max_len=params.config.max_len)
    loss, grads, _ = forward_loss_backward(params, batch)
    return BTResult(loss, grads, generated, mode, batch)


def supervised_step(params: Parameters, pairs: PairData, idx=None):
    batch = pairs.batch(range(len(pairs)) if idx is None else idx, max_len=params.config.max_len)
    loss, grads, _ = forward_loss_backward(params, batch)
    return loss, grads


@torch.no_grad()
def validate_ppl(params: Parameters, pairs: PairData, batch_size: int = 64) -> float:
    """exp(total NLL / number of target tokens)."""
    if len(pairs) == 0:
        raise ValueError("validation set is empty")
    nll = 0.0
    n_tok = 0
    for start in range(0, len(pairs), batch_size):
        batch = pairs.batch(range(start, min(start + batch_size, len(pairs))), max_len=params.config.max_len)
        lp = token_logprobs(params, batch)
        nll -= float(lp.sum())
        n_tok += int(batch.tgt_mask.sum())
    return math.exp(nll / n_tok)


# -- loops -----------------------------------------------------------------------------

class BatchStream:
    """Endless mini-batches of indices; optionally one in-order pass first."""

    def __init__(self, n: int, batch_size: int, rng, ordered: bool = False):
        if n == 0:
            raise ValueError("cannot stream an empty dataset")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = np.arange(n) if ordered else rng.permutation(n)
        self.pos = 0

    def next(self):
        if self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx.tolist()


class JsonLog:
    """Append one JSON object per event to a file (or keep them in memory)."""

    def __init__(self, path=None):
        self.path = path
        self.records = []

    def __call__(self, **record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


def _apply(params, grads, opt):
    if grads is not None:
        optimizer_step(params, grads, opt)


def train_mass(params: Parameters, opt: OptimState, corpora: dict, steps: int, batch_size: int,
               rng, fraction: float = 0.5, log: Optional[Callable] = None, log_every: int = 100) -> list:
    """MASS updates alternating uniformly over the languages in ``corpora`` (lang id -> sentences)."""
    rng = check_random_state(rng)
    langs = sorted(corpora)
    streams = {l: BatchStream(len(corpora[l]), batch_size, rng) for l in langs}
    losses = []
    for s in range(steps):
        lang = langs[s % len(langs)]
        sents = [corpora[lang][i] for i in streams[lang].next()]
        loss, grads = mass_step(params, sents, lang, fraction, rng)
        _apply(params, grads, opt)
        if loss is not None:
            losses.append(loss)
        if log and ((s + 1) % log_every == 0 or s + 1 == steps):
            log(step=opt.step, objective="mass", lang=lang, loss=float(np.mean(losses[-log_every:])),
                lr=inverse_sqrt_lr(opt.step, opt.base_lr, opt.warmup_steps))
    return losses


def train_supervised(params: Parameters, opt: OptimState, pairs: PairData, steps: int, batch_size: int,
                     rng, ordered: bool = False, log: Optional[Callable] = None, log_every: int = 100) -> list:
    """Plain supervised updates; with ``ordered`` the data is consumed in order once, then shuffled."""
    rng = check_random_state(rng)
    stream = BatchStream(len(pairs), batch_size, rng, ordered=ordered)
    losses = []
    for s in range(steps):
        loss, grads = supervised_step(params, pairs, stream.next())
        _apply(params, grads, opt)
        losses.append(loss)
        if log and ((s + 1) % log_every == 0 or s + 1 == steps):
            log(step=opt.step, objective="supervised", loss=float(np.mean(losses[-log_every:])),
                lr=inverse_sqrt_lr(opt.step, opt.base_lr, opt.warmup_steps))
    return losses


def train_unmt(params: Parameters, opt: OptimState, mono: dict, steps: int, batch_size: int, bt: BTParams,
               rng, pseudo: Optional[PairData] = None, pseudo_ordered: bool = False,
               log: Optional[Callable] = None, log_every: int = 100, max_len: int = 100) -> list:
    """Online backtranslation on every language in ``mono``, optionally interleaved with pseudo-parallel data.

    One iteration runs, per language, one backtranslation update and (when
    ``pseudo`` is given) one supervised update.  Denoising auto-encoding is
    not used.
    """
    rng = check_random_state(rng)
    langs = sorted(mono)
    if len(langs) != 2:
        raise ValueError("online backtranslation needs exactly two languages")
    streams = {l: BatchStream(len(mono[l]), batch_size, rng) for l in langs}
    pseudo_stream = BatchStream(len(pseudo), batch_size, rng, ordered=pseudo_ordered) if pseudo else None
    losses = []
    modes = []
    for s in range(steps):
        for lang in langs:
            other = langs[1] if lang == langs[0] else langs[0]
            sents = [mono[lang][i] for i in streams[lang].next()]
            res = online_bt_step(params, sents, lang, other, bt, rng, max_len=max_len)
            optimizer_step(params, res.grads, opt)
            losses.append(res.loss)
            modes.append(res.mode)
            if pseudo_stream is not None:
                loss, grads = supervised_step(params, pseudo, pseudo_stream.next())
                optimizer_step(params, grads, opt)
        if log and ((s + 1) % log_every == 0 or s + 1 == steps):
            log(step=opt.step, objective="online-bt", loss=float(np.mean(losses[-2 * log_every:])),
                sampled=modes[-2 * log_every:].count("sample"),
                lr=inverse_sqrt_lr(opt.step, opt.base_lr, opt.warmup_steps))
    return losses


# -- curriculum ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurriculumWeights:
    """Weights for (fwd, rev) scores of the two directions, each in [-1, 1].

    Order: (lang0->lang1 fwd, lang0->lang1 rev, lang1->lang0 fwd, lang1->lang0 rev).
    """

    w: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if len(w) != 4 or any(not -1.0 <= x <= 1.0 for x in w):
            raise ValueError("curriculum weights must be 4 values in [-1, 1]")
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class ScoredPair:
    index: int
    src_lang: int
    tgt_lang: int
    s_fwd: float
    s_rev: float


@torch.no_grad()
def curriculum_score(pairs: PairData, params: Parameters, batch_size: int = 64) -> list:
    """Length-normalized log-probs of each pair in its own and the reverse direction."""
    out = []
    reverse = PairData(pairs.tgt, pairs.src, pairs.tgt_lang, pairs.src_lang)
    for start in range(0, len(pairs), batch_size):
        idx = list(range(start, min(start + batch_size, len(pairs))))
        feats = []
        for data in (pairs, reverse):
            batch = data.batch(idx, max_len=params.config.max_len)
            lp = token_logprobs(params, batch)
            lengths = batch.tgt_mask.sum(dim=1).to(lp.dtype)
            feats.append((lp.sum(dim=1) / lengths).tolist())
        for j, i in enumerate(idx):
            out.append(ScoredPair(i, pairs.src_lang[i], pairs.tgt_lang[i], feats[0][j], feats[1][j]))
    return out


def composite_scores(scored: Sequence[ScoredPair], weights: CurriculumWeights, first_lang: int = 0) -> list:
    w = weights.w
    out = []
    for sp in scored:
        a, b = (w[0], w[1]) if sp.src_lang == first_lang else (w[2], w[3])
        out.append(a * sp.s_fwd + b * sp.s_rev)
    return out


def order_by(scored: Sequence[ScoredPair], weights: CurriculumWeights, first_lang: int = 0,
             decimals: int = 9) -> list:
    """Permutation sorting pairs by descending composite score; ties keep input order.

    Weights are rescaled to unit max-norm and composites rounded to ``decimals``
    places, so positive rescaling cannot reorder pairs whose scores tie up to
    floating-point noise.
    """
    scale = max(abs(x) for x in weights.w)
    if scale == 0:
        return [sp.index for sp in scored]
    unit = CurriculumWeights(tuple(x / scale for x in weights.w))
    comp = [round(c, decimals) for c in composite_scores(scored, unit, first_lang)]
    return [scored[i].index for i in sorted(range(len(scored)), key=lambda i: -comp[i])]


class RandomSearch:
    """Uniform random suggestions in [-1, 1]^4."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.history = []

    def suggest(self) -> CurriculumWeights:
        return CurriculumWeights(tuple(self.rng.uniform(-1.0, 1.0, size=4)))

    def observe(self, weights: CurriculumWeights, objective: float) -> None:
        self.history.append((weights, objective))


@dataclass
class TrialResult:
    trial: int
    weights: CurriculumWeights
    objective: float


def run_curriculum_trial(base: Parameters, pairs: PairData, scored, weights: CurriculumWeights,
                         valid: Sequence[PairData], updates: int, batch_size: int, opt_template: OptimState,
                         seed: int) -> float:
    """Fine-tune a copy of ``base`` on ordered pseudo-parallel data; return the summed validation ppl."""
    params = base.copy()
    opt = OptimState(opt_template.base_lr, opt_template.warmup_steps, opt_template.beta1,
                     opt_template.beta2, opt_template.eps)
    ordered = pairs.subset(order_by(scored, weights))
    train_supervised(params, opt, ordered, updates, batch_size, np.random.default_rng(seed), ordered=True)
    return sum(validate_ppl(params, v) for v in valid)


def curriculum_search(trial_budget: int, updates_per_trial: int, base: Parameters, pairs: PairData,
                      valid: Sequence[PairData], batch_size: int = 16,
                      opt_template: Optional[OptimState] = None, scored=None, strategy=None, seed: int = 0,
                      log: Optional[Callable] = None):
    """Search curriculum weights minimizing the sum of validation perplexities.

    Each trial fine-tunes a fresh copy of ``base`` with supervised updates
    only (no backtranslation).  Returns ``(best weights, trial results)``.
    """
    if trial_budget < 1:
        raise ValueError("trial budget must be >= 1")
    opt_template = opt_template or OptimState()
    strategy = strategy or RandomSearch(seed)
    if scored is None:
        scored = curriculum_score(pairs, base)
    results = []
    for t in range(trial_budget):
        weights = strategy.suggest()
        objective = run_curriculum_trial(base, pairs, scored, weights, valid, updates_per_trial, batch_size,
                                         opt_template, seed)
        strategy.observe(weights, objective)
        results.append(TrialResult(t, weights, objective))
        if log:
            log(trial=t, weights=list(weights.w), objective=objective)
    best = min(results, key=lambda r: r.objective)
    return best.weights, results


# -- offline backtranslation ----------------------------------------------------------

def offline_backtranslate(params: Parameters, corpus, src_lang: int, tgt_lang: int,
                          dp: DecodeParams = DecodeParams(), vocab=None, lang_names=None,
                          batch_size: int = 64, rng=None):
    """Translate an authentic corpus (language ``src_lang``) into ``tgt_lang``.

    Pairs come out as synthetic -> authentic.  With ``vocab`` the result is
    a :class:`Bitext` of subword strings tagged ``pseudo-nmt``; otherwise a
    :class:`PairData` of ids.
    """
    corpus = [list(s) for s in corpus]
    synthetic = translate(params, corpus, src_lang, tgt_lang, dp, rng, batch_size) if corpus else []
    if vocab is None:
        return PairData.single(synthetic, corpus, tgt_lang, src_lang)
    names = lang_names or {src_lang: str(src_lang), tgt_lang: str(tgt_lang)}
    return Bitext.from_pairs([" ".join(vocab.decode(s)) for s in synthetic],
                             [" ".join(vocab.decode(s)) for s in corpus],
                             names[tgt_lang], names[src_lang], "pseudo-nmt")
