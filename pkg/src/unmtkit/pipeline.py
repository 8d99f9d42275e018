"""Stage graph, configuration and memoized execution of the full recipe.

Every stage writes into ``<workdir>/<stage>/`` and finishes by writing a
``manifest.json`` that records the hashes of the files it read, the hash
of the configuration sections it depends on, and the hashes of the files
it produced.  A stage whose recorded input and config hashes still match
is skipped as up-to-date.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Bitext, read_lines, write_lines
from .decode import DecodeParams, bleu, translate
from .lexinduct import (
    EmbeddingTable,
    SeedDictionary,
    TranslationLexicon,
    apply_map,
    backtranslate_corpus,
    count_embeddings,
    extract_identical_seed,
    induce_lexicon,
    procrustes_map,
    train_lm,
    word_translate,
)
from .model import ModelConfig, clear_freeze, extend_embeddings, init_model, insert_adapters
from .subword import (
    MergeTable,
    Segmenter,
    Vocabulary,
    build_vocab,
    desegment,
    extend_vocab,
    learn_bpe,
    line_rng,
    segment_corpus,
    symbol_inventory,
    with_inventory,
)
from .textnorm import (
    CasingModel,
    load_rules,
    normalize_and_tokenize,
    postprocess,
    train_truecaser,
    truecase,
)
from .trainer import (
    BTParams,
    JsonLog,
    OptimState,
    PairData,
    curriculum_score,
    curriculum_search,
    order_by,
    train_mass,
    train_supervised,
    train_unmt,
    validate_ppl,
)

log = logging.getLogger("unmtkit")

SIDES = ("high", "low")
LANG_ID = {"high": 0, "low": 1}
DIRECTIONS = (("high", "low"), ("low", "high"))


class PipelineError(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------

@dataclass
class PathsConfig:
    mono_high: str = "mono.high.txt"
    mono_low: str = "mono.low.txt"
    valid_high: str = "valid.high.txt"
    valid_low: str = "valid.low.txt"
    test_high: str = "test.high.txt"
    test_low: str = "test.low.txt"
    workdir: str = "work"
    # optional pre-trained word embeddings (word2vec text format)
    embeddings_high: Optional[str] = None
    embeddings_low: Optional[str] = None
    # optional fixed lexicons ("src<TAB>tgt<TAB>score"); bypass embedding mapping
    lexicon_high_low: Optional[str] = None
    lexicon_low_high: Optional[str] = None


@dataclass
class LangConfig:
    high: str = "de"
    low: str = "hsb"


@dataclass
class SubwordConfig:
    n_merges_high: int = 500
    n_merges_joint: int = 1000
    dropout_p: float = 0.1
    oversample: int = 10


@dataclass
class LexiconConfig:
    dim: int = 16
    window: int = 2
    min_count: int = 2
    seed_min_len: int = 2
    k: int = 5
    lm_order: int = 3
    lm_delta: float = 0.1
    beam: int = 4
    lam: float = 0.5


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup: int = 300
    batch_size: int = 32
    max_len: int = 60
    mass_fraction: float = 0.5
    pretrain_mass_steps: int = 1500
    finetune_mass_steps: int = 1500
    finetune_mass_adapters: bool = False
    unmt_steps: int = 600
    pseudo_steps: int = 6000
    dropout_steps: int = 300
    sample_prob: float = 0.5
    temperature: float = 0.95
    curriculum_trials: int = 8
    curriculum_updates: int = 200
    curriculum_batch_size: int = 16
    offline_bt_steps: int = 300


@dataclass
class DecodeConfig:
    mode: str = "beam"
    beam_size: int = 5
    max_len: int = 60
    temperature: float = 1.0
    batch_size: int = 64


@dataclass
class RecipeConfig:
    # extra stages run by "all" besides the core recipe
    curriculum: bool = False
    offline_bt: bool = False
    ensemble: tuple = ("finetune-pseudo", "bpe-dropout-finetune")


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    langs: LangConfig = field(default_factory=LangConfig)
    subword: SubwordConfig = field(default_factory=SubwordConfig)
    lexicon: LexiconConfig = field(default_factory=LexiconConfig)
    model: dict = field(default_factory=lambda: {"dtype": "float32", "max_len": 64})
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    recipe: RecipeConfig = field(default_factory=RecipeConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        # relative corpus paths are relative to the config file
        base = Path(path).resolve().parent
        resolved = {}
        for f in fields(PathsConfig):
            value = getattr(cfg.paths, f.name)
            if value is not None and not Path(value).is_absolute():
                value = str(base / value)
            resolved[f.name] = value
        return replace(cfg, paths=PathsConfig(**resolved))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "vocab_size": vocab_size})


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d):
    if not isinstance(d, dict):
        raise PipelineError(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise PipelineError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def stage_seed(seed: int, stage: str) -> int:
    return zlib.crc32(f"{seed}:{stage}".encode("utf-8"))


# -- hashing and manifests ----------------------------------------------------------

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class Stage:
    name: str
    deps: tuple
    config_keys: tuple  # config sections this stage reads
    raw_inputs: Callable  # cfg -> list of external input paths
    run: Callable  # (ctx) -> None


class Context:
    """What a running stage sees: its directory, its dependencies' directories, config and RNG seed."""

    def __init__(self, runner: "Runner", stage: Stage, system: Optional[str] = None):
        self.runner = runner
        self.cfg = runner.cfg
        self.stage = stage
        self.system = system
        self.dir = runner.stage_dir(stage.name if system is None else f"{stage.name}/{system}")
        self.seed = stage_seed(self.cfg.seed, self.dir.relative_to(runner.workdir).as_posix())
        self.log = JsonLog(self.dir / "log.jsonl")

    def dep(self, name: str) -> Path:
        return self.runner.stage_dir(name)

    def path(self, name: str) -> Path:
        return self.dir / name


class Runner:
    def __init__(self, cfg: PipelineConfig, workdir=None):
        self.cfg = cfg
        self.workdir = Path(workdir or cfg.paths.workdir).resolve()

    def stage_dir(self, name: str) -> Path:
        return self.workdir / name

    def manifest(self, name: str) -> Optional[dict]:
        p = self.stage_dir(name) / "manifest.json"
        if not p.exists():
            return None
        return json.loads(p.read_text(encoding="utf-8"))

    @contextmanager
    def lock(self):
        self.workdir.mkdir(parents=True, exist_ok=True)
        path = self.workdir / ".lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(f"workdir {self.workdir} is locked by another run ({path})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            path.unlink(missing_ok=True)

    def _input_hashes(self, stage: Stage, system: Optional[str]) -> dict:
        hashes = {}
        for p in stage.raw_inputs(self.cfg):
            if not Path(p).exists():
                raise PipelineError(f"stage {stage.name!r}: input file not found: {p}")
            hashes[str(p)] = file_hash(p)
        for dep in _resolve_deps(stage, system, self.cfg):
            m = self.manifest(dep)
            if m is None or m.get("status") != "done":
                raise PipelineError(f"stage {stage.name!r} needs stage {dep!r}, which has not been run "
                                    f"(missing {self.stage_dir(dep) / 'manifest.json'})")
            for rel, h in m["outputs"].items():
                hashes[f"{dep}/{rel}"] = h
        return hashes

    def _config_hash(self, stage: Stage) -> str:
        d = self.cfg.to_dict()
        sections = {k: d[k] for k in stage.config_keys}
        return _json_hash({"sections": sections, "seed": self.cfg.seed})

    def run(self, name: str, force: bool = False) -> str:
        """Run one stage (``name`` may be ``stage/system``); returns "done" or "up-to-date"."""
        base, _, system = name.partition("/")
        if base not in STAGES:
            raise PipelineError(f"unknown stage {name!r}; known: {', '.join(STAGE_ORDER)}")
        stage = STAGES[base]
        if stage.name in SYSTEM_STAGES and not system and stage.name != "evaluate":
            raise PipelineError(f"stage {base!r} needs a system, e.g. {base}/finetune-pseudo")
        system = system or None
        inputs = self._input_hashes(stage, system)
        cfg_hash = self._config_hash(stage)
        ctx = Context(self, stage, system)
        rel = ctx.dir.relative_to(self.workdir).as_posix()
        old = self.manifest(rel)
        if not force and old and old.get("status") == "done" and old["inputs"] == inputs \
                and old["config_hash"] == cfg_hash and self._outputs_intact(ctx.dir, old):
            log.info("%s: up-to-date", rel)
            return "up-to-date"
        if ctx.dir.exists():
            for p in sorted(ctx.dir.rglob("*"), reverse=True):
                p.unlink() if p.is_file() else p.rmdir()
        ctx.dir.mkdir(parents=True, exist_ok=True)
        log.info("%s: running", rel)
        t0 = time.time()
        with torch.random.fork_rng():
            torch.manual_seed(ctx.seed)
            stage.run(ctx)
        outputs = {p.relative_to(ctx.dir).as_posix(): file_hash(p) for p in sorted(ctx.dir.rglob("*"))
                   if p.is_file() and p.name not in ("manifest.json", "log.jsonl")}
        manifest = {"stage": rel, "status": "done", "inputs": inputs, "config_hash": cfg_hash,
                    "seed": ctx.seed, "outputs": outputs, "elapsed_s": round(time.time() - t0, 3)}
        (ctx.dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        log.info("%s: done in %.1fs", rel, manifest["elapsed_s"])
        return "done"

    @staticmethod
    def _outputs_intact(d: Path, manifest: dict) -> bool:
        return all((d / rel).exists() and file_hash(d / rel) == h for rel, h in manifest["outputs"].items())

    def run_all(self, force: bool = False) -> dict:
        statuses = {}
        for name in recipe_stages(self.cfg):
            statuses[name] = self.run(name, force)
        report = {}
        for name in statuses:
            if name.startswith("evaluate/"):
                report[name.split("/", 1)[1]] = json.loads((self.stage_dir(name) / "bleu.json").read_text())
        (self.workdir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
        return statuses


def _resolve_deps(stage: Stage, system: Optional[str], cfg: PipelineConfig) -> list:
    deps = list(stage.deps)
    if stage.name == "translate":
        deps += [system]
    elif stage.name == "postprocess":
        deps += [system if system in ("pseudo-smt", "ensemble-translate") else f"translate/{system}"]
    elif stage.name == "evaluate" and system:
        deps += [f"postprocess/{system}"]
    elif stage.name == "ensemble-translate":
        deps += list(cfg.recipe.ensemble)
    elif stage.name == "bpe-dropout-finetune" and cfg.recipe.offline_bt:
        deps += ["offline-bt"]
    return deps


def recipe_stages(cfg: PipelineConfig) -> list:
    names = ["preprocess", "learn-bpe", "extend-vocab", "embed-map", "pseudo-smt", "pretrain-mass",
             "finetune-mass", "train-unmt", "finetune-pseudo"]
    systems = ["finetune-pseudo"]
    if cfg.recipe.curriculum:
        names.append("curriculum-search")
        systems.append("curriculum-search")
    if cfg.recipe.offline_bt:
        names.append("offline-bt")
    names.append("bpe-dropout-finetune")
    systems.append("bpe-dropout-finetune")
    names += [f"translate/{s}" for s in systems]
    final = ["pseudo-smt"] + systems
    if cfg.recipe.ensemble:
        names.append("ensemble-translate")
        final.append("ensemble-translate")
    for s in final:
        names += [f"postprocess/{s}", f"evaluate/{s}"]
    return names


# -- shared helpers ---------------------------------------------------------------------

def _raw(*keys):
    return lambda cfg: [getattr(cfg.paths, k) for k in keys]


def _none(cfg):
    return []


def _tok_lines(path) -> list:
    return [line.split() for line in read_lines(path)]


def _write_tok(path, corpus) -> None:
    write_lines(path, [" ".join(t) for t in corpus])


class Assets:
    """Preprocessed corpora, segmenters and vocabularies loaded from the early stages."""

    def __init__(self, ctx: Context):
        pre, bpe, ext = ctx.dep("preprocess"), ctx.dep("learn-bpe"), ctx.dep("extend-vocab")
        self.ctx = ctx
        self.pre = pre
        self.vocab = Vocabulary.load(ext / "vocab.txt")
        self.joint = MergeTable.load(bpe / "bpe.joint")
        self.seg = Segmenter(self.joint)

    def tokens(self, split: str, side: str) -> list:
        return _tok_lines(self.pre / f"{split}.{side}.tok")

    def encode(self, corpus) -> list:
        return [self.vocab.encode(self.seg.line(t)) for t in corpus]

    def mono(self) -> dict:
        return {LANG_ID[s]: self.encode(self.tokens("mono", s)) for s in SIDES}

    def valid(self) -> list:
        enc = {s: self.encode(self.tokens("valid", s)) for s in SIDES}
        return [PairData.single(enc[a], enc[b], LANG_ID[a], LANG_ID[b]) for a, b in DIRECTIONS]


def _opt(cfg: PipelineConfig) -> OptimState:
    return OptimState(cfg.train.lr, cfg.train.warmup)


def _bt(cfg: PipelineConfig) -> BTParams:
    return BTParams(cfg.train.sample_prob, cfg.train.temperature)


def _load_model(ctx: Context, stage: str, vocab: Vocabulary):
    params, opt, _ = load_checkpoint(ctx.dep(stage) / "model.ckpt", vocab.content_hash())
    return params


def _save_model(ctx: Context, params, opt, vocab: Vocabulary, valid=None) -> None:
    extra = {}
    if valid is not None:
        ppl = {f"{a}-{b}": validate_ppl(params, v) for (a, b), v in zip(DIRECTIONS, valid)}
        ctx.log(step=opt.step, event="validation", ppl=ppl)
        extra["valid_ppl"] = ppl
    save_checkpoint(ctx.path("model.ckpt"), params, opt, vocab.content_hash(), extra)


# -- stages --------------------------------------------------------------------------------

def run_preprocess(ctx: Context) -> None:
    cfg = ctx.cfg
    rules = {"high": load_rules(cfg.langs.high), "low": load_rules(cfg.langs.low)}
    for side in SIDES:
        mono = [normalize_and_tokenize(line, rules[side]) for line in read_lines(getattr(cfg.paths, f"mono_{side}"))]
        model = train_truecaser(mono)
        model.save(ctx.path(f"truecase.{side}"))
        _write_tok(ctx.path(f"mono.{side}.tok"), [truecase(t, model) for t in mono])
        for split in ("valid", "test"):
            lines = read_lines(getattr(cfg.paths, f"{split}_{side}"))
            _write_tok(ctx.path(f"{split}.{side}.tok"),
                       [truecase(normalize_and_tokenize(line, rules[side]), model) for line in lines])


def run_learn_bpe(ctx: Context) -> None:
    sw = ctx.cfg.subword
    pre = ctx.dep("preprocess")
    high, low = _tok_lines(pre / "mono.high.tok"), _tok_lines(pre / "mono.low.tok")
    table_high = learn_bpe(high, sw.n_merges_high)
    table_joint = learn_bpe(high + low, sw.n_merges_joint)
    table_high.save(ctx.path("bpe.high"))
    table_joint.save(ctx.path("bpe.joint"))
    build_vocab(segment_corpus(high, table_high)).save(ctx.path("vocab.high.txt"))


def run_extend_vocab(ctx: Context) -> None:
    pre, bpe = ctx.dep("preprocess"), ctx.dep("learn-bpe")
    base = Vocabulary.load(bpe / "vocab.high.txt")
    table = MergeTable.load(bpe / "bpe.joint")
    corpus = _tok_lines(pre / "mono.high.tok") + _tok_lines(pre / "mono.low.tok")
    joint = build_vocab(segment_corpus(corpus, table))
    # symbols reachable only under dropout get ids too
    joint = with_inventory(joint, symbol_inventory({w for line in corpus for w in line}, table))
    vocab, report = extend_vocab(base, joint)
    vocab.save(ctx.path("vocab.txt"))
    write_lines(ctx.path("report.tsv"), [f"{tok}\t{i}" for tok, i in report])
    ctx.log(base=len(base), joint=len(joint), extended=len(vocab), added=len(report))


def run_embed_map(ctx: Context) -> None:
    cfg, lx = ctx.cfg, ctx.cfg.lexicon
    if cfg.paths.lexicon_high_low and cfg.paths.lexicon_low_high:
        for a, b in DIRECTIONS:
            TranslationLexicon.load(getattr(cfg.paths, f"lexicon_{a}_{b}")).save(ctx.path(f"lexicon.{a}-{b}.tsv"))
        ctx.log(source="files")
        return
    pre = ctx.dep("preprocess")
    corpora = {s: _tok_lines(pre / f"mono.{s}.tok") for s in SIDES}
    emb = {}
    for s in SIDES:
        given = getattr(cfg.paths, f"embeddings_{s}")
        emb[s] = EmbeddingTable.load(given) if given else count_embeddings(
            corpora[s], dim=lx.dim, window=lx.window, min_count=lx.min_count, seed=ctx.seed)
    seed = extract_identical_seed(build_vocab(corpora["high"]), build_vocab(corpora["low"]), lx.seed_min_len)
    seed = SeedDictionary([(a, b) for a, b in seed.pairs if a in emb["high"].index and b in emb["low"].index])
    write_lines(ctx.path("seed.tsv"), [f"{a}\t{b}" for a, b in seed.pairs])
    reverse = SeedDictionary([(b, a) for a, b in seed.pairs])
    for (a, b), sd in zip(DIRECTIONS, (seed, reverse)):
        w = procrustes_map(emb[a], emb[b], sd)
        np.save(ctx.path(f"map.{a}-{b}.npy"), w)
        induce_lexicon(apply_map(emb[a], w), emb[b], lx.k).save(ctx.path(f"lexicon.{a}-{b}.tsv"))
    ctx.log(source="induced", seed_pairs=len(seed))


def _lexicon_translator(ctx: Context, src: str, tgt: str):
    lx = ctx.cfg.lexicon
    pre, em = ctx.dep("preprocess"), ctx.dep("embed-map")
    lexicon = TranslationLexicon.load(em / f"lexicon.{src}-{tgt}.tsv")
    lm = train_lm(_tok_lines(pre / f"mono.{tgt}.tok"), lx.lm_order, lx.lm_delta)
    return lexicon, lm


def run_pseudo_smt(ctx: Context) -> None:
    """Word-by-word translation of both monolingual corpora, plus the test sets for evaluation."""
    lx = ctx.cfg.lexicon
    pre = ctx.dep("preprocess")
    bitext = None
    for a, b in DIRECTIONS:
        lexicon, lm = _lexicon_translator(ctx, b, a)
        mono = _tok_lines(pre / f"mono.{a}.tok")
        part = backtranslate_corpus(mono, lexicon, lm, b, a, beam=lx.beam, lam=lx.lam)
        bitext = part if bitext is None else bitext + part
        lexicon, lm = _lexicon_translator(ctx, a, b)
        test = _tok_lines(pre / f"test.{a}.tok")
        _write_tok(ctx.path(f"hyp.{a}-{b}.tok"), [word_translate(s, lexicon, lm, lx.beam, lx.lam) for s in test])
    bitext.save(ctx.path("pseudo"))


def run_pretrain_mass(ctx: Context) -> None:
    cfg = ctx.cfg
    bpe = ctx.dep("learn-bpe")
    vocab = Vocabulary.load(bpe / "vocab.high.txt")
    seg = Segmenter(MergeTable.load(bpe / "bpe.high"))
    mono = [vocab.encode(seg.line(t)) for t in _tok_lines(ctx.dep("preprocess") / "mono.high.tok")]
    params = init_model(cfg.model_config(len(vocab)), ctx.seed)
    opt = _opt(cfg)
    train_mass(params, opt, {LANG_ID["high"]: mono}, cfg.train.pretrain_mass_steps, cfg.train.batch_size,
               np.random.default_rng(ctx.seed), cfg.train.mass_fraction, log=ctx.log)
    save_checkpoint(ctx.path("model.ckpt"), params, opt, vocab.content_hash())


def run_finetune_mass(ctx: Context) -> None:
    cfg = ctx.cfg
    assets = Assets(ctx)
    base = Vocabulary.load(ctx.dep("learn-bpe") / "vocab.high.txt")
    params, _, _ = load_checkpoint(ctx.dep("pretrain-mass") / "model.ckpt", base.content_hash())
    params = extend_embeddings(params, base, assets.vocab, ctx.seed)
    if cfg.train.finetune_mass_adapters:
        params = insert_adapters(params, seed=ctx.seed)
    opt = _opt(cfg)
    train_mass(params, opt, assets.mono(), cfg.train.finetune_mass_steps, cfg.train.batch_size,
               np.random.default_rng(ctx.seed), cfg.train.mass_fraction, log=ctx.log)
    # later stages train the whole network
    _save_model(ctx, clear_freeze(params), opt, assets.vocab, assets.valid())


def _continue(ctx: Context, prev: str):
    assets = Assets(ctx)
    params = _load_model(ctx, prev, assets.vocab)
    return assets, params, _opt(ctx.cfg), np.random.default_rng(ctx.seed)


def run_train_unmt(ctx: Context) -> None:
    cfg = ctx.cfg
    assets, params, opt, rng = _continue(ctx, "finetune-mass")
    train_unmt(params, opt, assets.mono(), cfg.train.unmt_steps, cfg.train.batch_size, _bt(cfg), rng,
               log=ctx.log, max_len=cfg.train.max_len)
    _save_model(ctx, params, opt, assets.vocab, assets.valid())


def _pseudo_pairs(assets: Assets, prefix: Path, seg_src=None, seg_tgt=None) -> PairData:
    bt = Bitext.load(prefix)
    return PairData([assets.vocab.encode((seg_src or assets.seg.line)(s.split())) for s in bt.src],
                    [assets.vocab.encode((seg_tgt or assets.seg.line)(t.split())) for t in bt.tgt],
                    [LANG_ID[_lang_side(assets.ctx.cfg, l)] for l in bt.src_lang],
                    [LANG_ID[_lang_side(assets.ctx.cfg, l)] for l in bt.tgt_lang])


def _lang_side(cfg: PipelineConfig, lang: str) -> str:
    return lang if lang in SIDES else {cfg.langs.high: "high", cfg.langs.low: "low"}[lang]


def run_finetune_pseudo(ctx: Context) -> None:
    cfg = ctx.cfg
    assets, params, opt, rng = _continue(ctx, "train-unmt")
    pseudo = _pseudo_pairs(assets, ctx.dep("pseudo-smt") / "pseudo")
    train_unmt(params, opt, assets.mono(), cfg.train.pseudo_steps, cfg.train.batch_size, _bt(cfg), rng,
               pseudo=pseudo, log=ctx.log, max_len=cfg.train.max_len)
    _save_model(ctx, params, opt, assets.vocab, assets.valid())


def run_curriculum_search(ctx: Context) -> None:
    """Search ordering weights on the pseudo-parallel data, then fine-tune once with the best ordering."""
    cfg = ctx.cfg
    assets, base, opt, rng = _continue(ctx, "finetune-pseudo")
    pseudo = _pseudo_pairs(assets, ctx.dep("pseudo-smt") / "pseudo")
    valid = assets.valid()
    scored = curriculum_score(pseudo, base)
    best, results = curriculum_search(cfg.train.curriculum_trials, cfg.train.curriculum_updates, base, pseudo,
                                      valid, cfg.train.curriculum_batch_size, _opt(cfg), scored=scored,
                                      seed=ctx.seed, log=ctx.log)
    ctx.path("weights.json").write_text(json.dumps({"weights": list(best.w),
                                                    "trials": [[list(r.weights.w), r.objective] for r in results]},
                                                   indent=1), encoding="utf-8")
    params = base.copy()
    ordered = pseudo.subset(order_by(scored, best))
    train_supervised(params, opt, ordered, cfg.train.curriculum_updates, cfg.train.curriculum_batch_size, rng,
                     ordered=True, log=ctx.log)
    _save_model(ctx, params, opt, assets.vocab, valid)


def _decode_params(cfg: PipelineConfig, mode: Optional[str] = None) -> DecodeParams:
    d = cfg.decode
    return DecodeParams(mode=mode or d.mode, temperature=d.temperature, beam_size=d.beam_size, max_len=d.max_len)


def run_offline_bt(ctx: Context) -> None:
    """Translate both monolingual corpora with the fine-tuned model into pseudo-NMT bitext."""
    cfg = ctx.cfg
    assets = Assets(ctx)
    params = _load_model(ctx, "finetune-pseudo", assets.vocab)
    dp = _decode_params(cfg, "greedy")
    bitext = None
    for a, b in DIRECTIONS:
        mono = assets.tokens("mono", a)
        out = translate(params, assets.encode(mono), LANG_ID[a], LANG_ID[b], dp, batch_size=cfg.decode.batch_size)
        part = Bitext.from_pairs([" ".join(desegment(assets.vocab.decode(o))) for o in out],
                                 [" ".join(t) for t in mono], b, a, "pseudo-nmt")
        bitext = part if bitext is None else bitext + part
    bitext.save(ctx.path("pseudo"))


def run_bpe_dropout_finetune(ctx: Context) -> None:
    """Fine-tune with the low-resource side oversampled and segmented with BPE-Dropout."""
    cfg, sw = ctx.cfg, ctx.cfg.subword
    assets, params, opt, rng = _continue(ctx, "finetune-pseudo")
    low = LANG_ID["low"]
    drop_seed = ctx.seed

    def dropped(tokens, index, copy):
        return assets.vocab.encode(assets.seg.line(tokens, sw.dropout_p, line_rng(drop_seed, index, copy)))

    mono = assets.mono()
    low_tokens = assets.tokens("mono", "low")
    mono[low] = [dropped(t, i, c) for i, t in enumerate(low_tokens) for c in range(sw.oversample)]
    bitext = Bitext.load(ctx.dep("pseudo-smt") / "pseudo")
    if cfg.recipe.offline_bt:
        bitext = bitext + Bitext.load(ctx.dep("offline-bt") / "pseudo")
    src, tgt, sl, tl = [], [], [], []
    for i in range(len(bitext)):
        s_side, t_side = _lang_side(cfg, bitext.src_lang[i]), _lang_side(cfg, bitext.tgt_lang[i])
        copies = sw.oversample if "low" in (s_side, t_side) else 1
        for c in range(copies):
            s_tok, t_tok = bitext.src[i].split(), bitext.tgt[i].split()
            src.append(dropped(s_tok, i, c) if s_side == "low" else assets.vocab.encode(assets.seg.line(s_tok)))
            tgt.append(dropped(t_tok, i, c) if t_side == "low" else assets.vocab.encode(assets.seg.line(t_tok)))
            sl.append(LANG_ID[s_side])
            tl.append(LANG_ID[t_side])
    pseudo = PairData(src, tgt, sl, tl)
    train_unmt(params, opt, mono, cfg.train.dropout_steps, cfg.train.batch_size, _bt(cfg), rng,
               pseudo=pseudo, log=ctx.log, max_len=cfg.train.max_len)
    _save_model(ctx, params, opt, assets.vocab, assets.valid())


def _write_translations(ctx: Context, models) -> None:
    cfg = ctx.cfg
    assets = Assets(ctx)
    dp = _decode_params(cfg)
    for a, b in DIRECTIONS:
        test = assets.encode(assets.tokens("test", a))
        out = translate(models, test, LANG_ID[a], LANG_ID[b], dp, np.random.default_rng(ctx.seed),
                        batch_size=cfg.decode.batch_size)
        _write_tok(ctx.path(f"hyp.{a}-{b}.tok"), [desegment(assets.vocab.decode(o)) for o in out])


def run_translate(ctx: Context) -> None:
    assets = Assets(ctx)
    _write_translations(ctx, _load_model(ctx, ctx.system, assets.vocab))


def run_ensemble_translate(ctx: Context) -> None:
    assets = Assets(ctx)
    _write_translations(ctx, [_load_model(ctx, m, assets.vocab) for m in ctx.cfg.recipe.ensemble])


def _system_dir(ctx: Context) -> Path:
    s = ctx.system
    return ctx.dep(s if s in ("pseudo-smt", "ensemble-translate") else f"translate/{s}")


def run_postprocess(ctx: Context) -> None:
    cfg = ctx.cfg
    pre = ctx.dep("preprocess")
    rules = {"high": load_rules(cfg.langs.high), "low": load_rules(cfg.langs.low)}
    src_dir = _system_dir(ctx)
    for a, b in DIRECTIONS:
        model = CasingModel.load(pre / f"truecase.{b}")
        hyps = _tok_lines(src_dir / f"hyp.{a}-{b}.tok")
        sources = read_lines(getattr(cfg.paths, f"test_{a}"))
        if len(hyps) != len(sources):
            raise PipelineError(f"{src_dir}: {len(hyps)} hypotheses for {len(sources)} test sentences")
        write_lines(ctx.path(f"hyp.{a}-{b}.txt"),
                    [postprocess(h, s, model, rules[b]) for h, s in zip(hyps, sources)])


def run_evaluate(ctx: Context) -> None:
    cfg = ctx.cfg
    result = {}
    for a, b in DIRECTIONS:
        if ctx.system:
            hyp_path = ctx.dep(f"postprocess/{ctx.system}") / f"hyp.{a}-{b}.txt"
        else:
            hyp_path = Path(getattr(cfg.paths, f"test_{b}"))  # sanity mode: reference against itself
        report = bleu(read_lines(hyp_path), read_lines(getattr(cfg.paths, f"test_{b}")))
        result[f"{a}-{b}"] = report.to_dict()
        log.info("%s %s-%s: %s", ctx.system or "reference", a, b, report)
    ctx.path("bleu.json").write_text(json.dumps(result, indent=1, sort_keys=True), encoding="utf-8")


_ALL_TEST = _raw("test_high", "test_low")

STAGES = {s.name: s for s in [
    Stage("preprocess", (), ("langs",),
          _raw("mono_high", "mono_low", "valid_high", "valid_low", "test_high", "test_low"), run_preprocess),
    Stage("learn-bpe", ("preprocess",), ("subword",), _none, run_learn_bpe),
    Stage("extend-vocab", ("preprocess", "learn-bpe"), ("subword",), _none, run_extend_vocab),
    Stage("embed-map", ("preprocess",), ("lexicon",),
          lambda cfg: [p for p in (cfg.paths.embeddings_high, cfg.paths.embeddings_low,
                                   cfg.paths.lexicon_high_low, cfg.paths.lexicon_low_high) if p], run_embed_map),
    Stage("pseudo-smt", ("preprocess", "embed-map"), ("lexicon", "langs"), _none, run_pseudo_smt),
    Stage("pretrain-mass", ("preprocess", "learn-bpe"), ("model", "train"), _none, run_pretrain_mass),
    Stage("finetune-mass", ("preprocess", "learn-bpe", "extend-vocab", "pretrain-mass"), ("model", "train"),
          _none, run_finetune_mass),
    Stage("train-unmt", ("preprocess", "learn-bpe", "extend-vocab", "finetune-mass"), ("train",), _none,
          run_train_unmt),
    Stage("finetune-pseudo", ("preprocess", "learn-bpe", "extend-vocab", "train-unmt", "pseudo-smt"),
          ("train", "langs"), _none, run_finetune_pseudo),
    Stage("curriculum-search", ("preprocess", "learn-bpe", "extend-vocab", "finetune-pseudo", "pseudo-smt"),
          ("train", "langs"), _none, run_curriculum_search),
    Stage("offline-bt", ("preprocess", "learn-bpe", "extend-vocab", "finetune-pseudo"), ("decode",), _none,
          run_offline_bt),
    Stage("bpe-dropout-finetune", ("preprocess", "learn-bpe", "extend-vocab", "finetune-pseudo", "pseudo-smt"),
          ("train", "subword", "recipe", "langs"), _none, run_bpe_dropout_finetune),
    Stage("translate", ("preprocess", "learn-bpe", "extend-vocab"), ("decode",), _none, run_translate),
    Stage("ensemble-translate", ("preprocess", "learn-bpe", "extend-vocab"), ("decode", "recipe"), _none,
          run_ensemble_translate),
    Stage("postprocess", ("preprocess",), ("langs",), _ALL_TEST, run_postprocess),
    Stage("evaluate", (), (), _ALL_TEST, run_evaluate),
]}
STAGE_ORDER = list(STAGES)
SYSTEM_STAGES = {"translate", "postprocess", "evaluate"}
