"""A small pre-norm encoder-decoder transformer over a named-tensor store.

The network is written functionally: every op reads its weights from a
:class:`Parameters` mapping, so parameters can be copied, extended, frozen
or checkpointed by name.  Gradients come from torch autograd and are only
requested for tensors outside the freeze mask.
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .subword import BOS_ID, EOS_ID, PAD_ID

DTYPES = {"float64": torch.float64, "float32": torch.float32}
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_model: int = 64
    d_ffn: int = 256
    n_heads: int = 4
    vocab_size: int = 100
    max_len: int = 128
    adapters_enabled: bool = False
    d_adapter: int = 16
    use_lang_embeddings: bool = True
    n_langs: int = 2
    label_smoothing: float = 0.1
    tie_embeddings: bool = False
    # rejected variant: freeze cross-attention and put an adapter on top of it
    adapter_on_cross_attn: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.n_layers_enc, self.n_layers_dec, self.d_model, self.d_ffn, self.vocab_size,
               self.max_len, self.n_langs) < 1:
            raise ValueError("model dimensions must be positive")
        if self.adapters_enabled and not 0 < self.d_adapter < self.d_model:
            raise ValueError("d_adapter must be in (0, d_model)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @classmethod
    def paper(cls, vocab_size: int) -> "ModelConfig":
        """6-layer encoder/decoder, 1024 hidden, 4096 feed-forward, 8 heads."""
        return cls(6, 6, 1024, 4096, 8, vocab_size, max_len=256, d_adapter=256)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


class Parameters:
    """Ordered named tensors plus the set of frozen names."""

    def __init__(self, tensors, config: ModelConfig, frozen=()):
        self.tensors = OrderedDict(tensors)
        self.config = config
        self.frozen = set(frozen)
        unknown = self.frozen - set(self.tensors)
        if unknown:
            raise ValueError(f"frozen names not in parameters: {sorted(unknown)[:3]}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self) -> list:
        return list(self.tensors)

    def trainable_names(self) -> list:
        return [n for n in self.tensors if n not in self.frozen]

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def copy(self) -> "Parameters":
        return Parameters({n: t.clone() for n, t in self.tensors.items()}, self.config, self.frozen)

    def equal(self, other: "Parameters") -> bool:
        return (self.names() == other.names()
                and all(torch.equal(self[n], other[n]) for n in self.names()))


# -- initialization -----------------------------------------------------------

def _linear_shapes(prefix: str, d_in: int, d_out: int):
    return [(f"{prefix}.weight", (d_in, d_out), "linear"), (f"{prefix}.bias", (d_out,), "zeros")]


def _attention_shapes(prefix: str, d: int):
    out = []
    for proj in ("q", "k", "v", "o"):
        out += _linear_shapes(f"{prefix}.{proj}", d, d)
    return out


def _norm_shapes(prefix: str, d: int):
    return [(f"{prefix}.weight", (d,), "ones"), (f"{prefix}.bias", (d,), "zeros")]


def _adapter_shapes(prefix: str, d: int, a: int):
    return [(f"{prefix}.down.weight", (d, a), "linear"), (f"{prefix}.down.bias", (a,), "zeros"),
            (f"{prefix}.up.weight", (a, d), "zeros"), (f"{prefix}.up.bias", (d,), "zeros")]


def _layer_shapes(cfg: ModelConfig, side: str, i: int, with_adapters: bool):
    d, f = cfg.d_model, cfg.d_ffn
    p = f"{side}.{i}"
    shapes = _norm_shapes(f"{p}.ln_self", d) + _attention_shapes(f"{p}.self_attn", d)
    if side == "dec":
        shapes += _norm_shapes(f"{p}.ln_cross", d) + _attention_shapes(f"{p}.cross_attn", d)
        if with_adapters and cfg.adapter_on_cross_attn:
            shapes += _adapter_shapes(f"{p}.cross_adapter", d, cfg.d_adapter)
    shapes += _norm_shapes(f"{p}.ln_ffn", d) + _linear_shapes(f"{p}.ffn.in", d, f) + _linear_shapes(f"{p}.ffn.out", f, d)
    if with_adapters:
        shapes += _adapter_shapes(f"{p}.adapter", d, cfg.d_adapter)
    return shapes


def parameter_shapes(cfg: ModelConfig):
    """(name, shape, init scheme) for every tensor, in construction order."""
    d = cfg.d_model
    shapes = [("embed.tokens", (cfg.vocab_size, d), "embedding"),
              ("embed.positions", (cfg.max_len, d), "embedding")]
    if cfg.use_lang_embeddings:
        shapes.append(("embed.langs", (cfg.n_langs, d), "embedding"))
    for i in range(cfg.n_layers_enc):
        shapes += _layer_shapes(cfg, "enc", i, cfg.adapters_enabled)
    shapes += _norm_shapes("enc.ln", d)
    for i in range(cfg.n_layers_dec):
        shapes += _layer_shapes(cfg, "dec", i, cfg.adapters_enabled)
    shapes += _norm_shapes("dec.ln", d)
    if not cfg.tie_embeddings:
        shapes.append(("output.weight", (cfg.vocab_size, d), "linear"))
    shapes.append(("output.bias", (cfg.vocab_size,), "zeros"))
    return shapes


def _draw(rng: np.random.Generator, shape, scheme: str, d_model: int) -> np.ndarray:
    if scheme == "embedding":
        return rng.normal(0.0, d_model ** -0.5, size=shape)
    if scheme == "linear":
        bound = math.sqrt(6.0 / (shape[0] + shape[-1]))
        return rng.uniform(-bound, bound, size=shape)
    if scheme == "ones":
        return np.ones(shape)
    return np.zeros(shape)


def init_model(config: ModelConfig, seed: int = 0) -> Parameters:
    """Embeddings ~ N(0, d^-1/2), linear maps ~ Xavier-uniform, biases zero, norms one."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape, scheme in parameter_shapes(config):
        tensors[name] = torch.from_numpy(_draw(rng, shape, scheme, config.d_model)).to(config.torch_dtype)
    return Parameters(tensors, config)


def extend_embeddings(params: Parameters, old_vocab, new_vocab, seed: int = 0) -> Parameters:
    """Grow token embeddings and output projection to ``new_vocab``; old rows are copied."""
    cfg = params.config
    n_old, n_new = len(old_vocab), len(new_vocab)
    if params["embed.tokens"].shape[0] != n_old:
        raise ValueError("old vocabulary does not match the embedding table")
    if new_vocab.tokens[:n_old] != old_vocab.tokens:
        raise ValueError("new vocabulary does not preserve the old ids")
    if n_new == n_old:
        return params.copy()
    rng = np.random.default_rng(seed)
    extra = n_new - n_old
    dtype = cfg.torch_dtype
    tensors = OrderedDict((n, t.clone()) for n, t in params.tensors.items())
    rows = torch.from_numpy(_draw(rng, (extra, cfg.d_model), "embedding", cfg.d_model)).to(dtype)
    tensors["embed.tokens"] = torch.cat([tensors["embed.tokens"], rows])
    if "output.weight" in tensors:
        bound = math.sqrt(6.0 / (n_new + cfg.d_model))
        rows = torch.from_numpy(rng.uniform(-bound, bound, size=(extra, cfg.d_model))).to(dtype)
        tensors["output.weight"] = torch.cat([tensors["output.weight"], rows])
    tensors["output.bias"] = torch.cat([tensors["output.bias"], torch.zeros(extra, dtype=dtype)])
    return Parameters(tensors, replace(cfg, vocab_size=n_new), params.frozen)


def adapter_freeze_mask(params: Parameters) -> set:
    """Names frozen while fine-tuning with adapters.

    Trainable: embeddings, output layer, the decoder's attention to the
    encoder and the adapters; everything else inside the stacks is frozen.
    """
    cross_trainable = not params.config.adapter_on_cross_attn
    frozen = set()
    for name in params.names():
        if not name.startswith(("enc.", "dec.")):
            continue
        if ".adapter." in name or ".cross_adapter." in name:
            continue
        if cross_trainable and (".cross_attn." in name or ".ln_cross." in name):
            continue
        frozen.add(name)
    return frozen


def insert_adapters(params: Parameters, config: Optional[ModelConfig] = None, seed: int = 0) -> Parameters:
    """Add a bottleneck adapter after every feed-forward sublayer and freeze the host layers.

    The up-projection starts at zero, so the network function is unchanged.
    """
    cfg = config or params.config
    if any(".adapter." in n for n in params.names()):
        raise ValueError("adapters already inserted")
    new_cfg = replace(cfg, adapters_enabled=True)
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    existing = params.tensors
    for name, shape, scheme in parameter_shapes(new_cfg):
        if name in existing:
            tensors[name] = existing[name].clone()
        else:
            tensors[name] = torch.from_numpy(_draw(rng, shape, scheme, cfg.d_model)).to(cfg.torch_dtype)
    out = Parameters(tensors, new_cfg)
    out.frozen = adapter_freeze_mask(out)
    return out


def clear_freeze(params: Parameters) -> Parameters:
    return Parameters(params.tensors, params.config, ())


# -- batches ----------------------------------------------------------------

@dataclass
class Batch:
    src: torch.Tensor  # [B, S] source ids, EOS-terminated, PAD-padded
    tgt: torch.Tensor  # [B, T] target ids to predict
    dec_in: torch.Tensor  # [B, T] decoder input: BOS followed by tgt shifted right
    src_lang: torch.Tensor  # [B]
    tgt_lang: torch.Tensor  # [B]
    tgt_offset: torch.Tensor  # [B] first decoder position index

    def __len__(self):
        return self.src.shape[0]

    @property
    def tgt_mask(self) -> torch.Tensor:
        return self.tgt != PAD_ID


def _pad(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max(1, max(len(s) for s in seqs))
    out = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s):
            out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def _per_item(value, n):
    if isinstance(value, (int, np.integer)):
        return [int(value)] * n
    value = list(value)
    if len(value) != n:
        raise ValueError("per-item list has the wrong length")
    return value


def make_batch(src_seqs, tgt_seqs, src_lang, tgt_lang, tgt_offset=None, add_eos: bool = True,
               max_len: Optional[int] = None) -> Batch:
    """Build a padded batch; ``src_lang`` / ``tgt_lang`` may be ints or per-item lists."""
    n = len(src_seqs)
    if n == 0 or len(tgt_seqs) != n:
        raise ValueError("batch must be nonempty with aligned source and target")
    limit = (max_len - 1) if max_len else None
    src = [list(s[:limit]) + [EOS_ID] for s in src_seqs]
    tgt = [list(t[:limit]) + ([EOS_ID] if add_eos else []) for t in tgt_seqs]
    dec_in = [[BOS_ID] + t[:-1] for t in tgt]
    offsets = torch.as_tensor(_per_item(0 if tgt_offset is None else tgt_offset, n), dtype=torch.long)
    return Batch(_pad(src), _pad(tgt), _pad(dec_in),
                 torch.as_tensor(_per_item(src_lang, n), dtype=torch.long),
                 torch.as_tensor(_per_item(tgt_lang, n), dtype=torch.long), offsets)


# -- forward ----------------------------------------------------------------

def _linear(x, p, prefix):
    return x @ p[f"{prefix}.weight"] + p[f"{prefix}.bias"]


def _norm(x, p, prefix):
    return F.layer_norm(x, x.shape[-1:], p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def _attention(xq, xkv, allowed, p, prefix, n_heads):
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    dh = d // n_heads
    q = _linear(xq, p, f"{prefix}.q").view(B, Tq, n_heads, dh).transpose(1, 2)
    k = _linear(xkv, p, f"{prefix}.k").view(B, Tk, n_heads, dh).transpose(1, 2)
    v = _linear(xkv, p, f"{prefix}.v").view(B, Tk, n_heads, dh).transpose(1, 2)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
    scores = scores.masked_fill(~allowed[:, None], NEG_INF)
    ctx = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(B, Tq, d)
    return _linear(ctx, p, f"{prefix}.o")


def _adapter(h, p, prefix):
    return _linear(F.gelu(_linear(h, p, f"{prefix}.down")), p, f"{prefix}.up")


def _ffn_block(x, p, prefix, cfg):
    h = _linear(F.gelu(_linear(_norm(x, p, f"{prefix}.ln_ffn"), p, f"{prefix}.ffn.in")), p, f"{prefix}.ffn.out")
    if cfg.adapters_enabled:
        h = h + _adapter(h, p, f"{prefix}.adapter")
    return x + h


def _embed(p, ids, lang, offset, cfg):
    T = ids.shape[1]
    pos = offset[:, None] + torch.arange(T)[None, :]
    if int(pos.max()) >= cfg.max_len:
        raise ValueError(f"sequence position {int(pos.max())} exceeds max_len={cfg.max_len}")
    x = p["embed.tokens"][ids] + p["embed.positions"][pos]
    if cfg.use_lang_embeddings:
        x = x + p["embed.langs"][lang][:, None, :]
    return x


def _check_ids(ids, vocab_size):
    if ids.numel() and (int(ids.max()) >= vocab_size or int(ids.min()) < 0):
        raise ValueError(f"token id out of range for vocabulary of size {vocab_size}")


def encode(p, src, src_lang, cfg: ModelConfig):
    """Encoder states and the source key mask."""
    _check_ids(src, cfg.vocab_size)
    keep = src != PAD_ID
    x = _embed(p, src, src_lang, torch.zeros(src.shape[0], dtype=torch.long), cfg)
    allowed = keep[:, None, :].expand(-1, src.shape[1], -1)
    for i in range(cfg.n_layers_enc):
        pre = f"enc.{i}"
        h = _norm(x, p, f"{pre}.ln_self")
        x = x + _attention(h, h, allowed, p, f"{pre}.self_attn", cfg.n_heads)
        x = _ffn_block(x, p, pre, cfg)
    return _norm(x, p, "enc.ln"), keep


def decode_logits(p, enc, src_keep, dec_in, tgt_lang, tgt_offset, cfg: ModelConfig):
    """Next-token logits for every decoder position."""
    _check_ids(dec_in, cfg.vocab_size)
    B, T = dec_in.shape
    x = _embed(p, dec_in, tgt_lang, tgt_offset, cfg)
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    self_allowed = causal[None].expand(B, -1, -1)
    cross_allowed = src_keep[:, None, :].expand(-1, T, -1)
    for i in range(cfg.n_layers_dec):
        pre = f"dec.{i}"
        h = _norm(x, p, f"{pre}.ln_self")
        x = x + _attention(h, h, self_allowed, p, f"{pre}.self_attn", cfg.n_heads)
        c = _attention(_norm(x, p, f"{pre}.ln_cross"), enc, cross_allowed, p, f"{pre}.cross_attn", cfg.n_heads)
        if cfg.adapters_enabled and cfg.adapter_on_cross_attn:
            c = c + _adapter(c, p, f"{pre}.cross_adapter")
        x = x + c
        x = _ffn_block(x, p, pre, cfg)
    x = _norm(x, p, "dec.ln")
    out_w = p["embed.tokens"] if cfg.tie_embeddings else p["output.weight"]
    return x @ out_w.T + p["output.bias"]


def forward(p, batch: Batch, cfg: ModelConfig):
    enc, keep = encode(p, batch.src, batch.src_lang, cfg)
    return decode_logits(p, enc, keep, batch.dec_in, batch.tgt_lang, batch.tgt_offset, cfg)


def _loss_terms(p, batch: Batch, cfg: ModelConfig):
    _check_ids(batch.tgt, cfg.vocab_size)
    logp = torch.log_softmax(forward(p, batch, cfg), dim=-1)
    mask = batch.tgt_mask
    tok_lp = logp.gather(-1, batch.tgt[..., None]).squeeze(-1)
    eps = cfg.label_smoothing
    per_tok = -(1.0 - eps) * tok_lp
    if eps > 0:
        per_tok = per_tok - eps * logp.mean(dim=-1)
    m = mask.to(per_tok.dtype)
    loss = (per_tok * m).sum() / m.sum().clamp(min=1.0)
    return loss, tok_lp * m


def _tensors(params: Parameters, requires_grad: bool):
    leaves = OrderedDict()
    tensors = {}
    for name, t in params.tensors.items():
        if requires_grad and name not in params.frozen:
            t = t.detach().requires_grad_(True)
            leaves[name] = t
        tensors[name] = t
    return tensors, leaves


def forward_loss_backward(params: Parameters, batch: Batch, config: Optional[ModelConfig] = None):
    """Label-smoothed cross-entropy over non-pad targets, its gradients, and token log-probs.

    Returns ``(loss, grads, token_logprobs)``; ``grads`` covers trainable
    tensors only and ``token_logprobs`` is zero at padding.
    """
    cfg = config or params.config
    tensors, leaves = _tensors(params, True)
    loss, tok_lp = _loss_terms(tensors, batch, cfg)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out = OrderedDict()
    for (name, leaf), g in zip(leaves.items(), grads):
        out[name] = torch.zeros_like(leaf) if g is None else g
    return float(loss.detach()), out, tok_lp.detach()


@torch.no_grad()
def loss_value(params: Parameters, batch: Batch, config: Optional[ModelConfig] = None) -> float:
    loss, _ = _loss_terms(params.tensors, batch, config or params.config)
    return float(loss)


@torch.no_grad()
def token_logprobs(params: Parameters, batch: Batch, config: Optional[ModelConfig] = None):
    """Log-probabilities of the target tokens (no smoothing), zero at padding."""
    cfg = config or params.config
    logp = torch.log_softmax(forward(params.tensors, batch, cfg), dim=-1)
    tok = logp.gather(-1, batch.tgt[..., None]).squeeze(-1)
    return tok * batch.tgt_mask.to(tok.dtype)


def sentence_nll(params: Parameters, batch: Batch, config: Optional[ModelConfig] = None) -> torch.Tensor:
    return -token_logprobs(params, batch, config).sum(dim=1)


def copy_config(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(copy.copy(cfg), **changes)
