"""Shared test utilities: finite-difference checking, tiny pipeline configs, acceptance verdicts."""

import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from unmtkit.model import forward_loss_backward, loss_value
from unmtkit.pipeline import PathsConfig, PipelineConfig

SIDES = ("mono_high", "mono_low", "valid_high", "valid_low", "test_high", "test_low")
VERDICTS = {}


def gradient_check(params, batch, n_coords=200, h=1e-4, seed=0):
    """Largest relative error between autograd and central differences over sampled coordinates."""
    _, grads, _ = forward_loss_backward(params, batch)
    rng = np.random.default_rng(seed)
    names = params.trainable_names()
    sizes = np.array([params[n].numel() for n in names], dtype=float)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        t = params[name].view(-1)
        i = int(rng.integers(t.numel()))
        old = float(t[i])
        t[i] = old + h
        up = loss_value(params, batch)
        t[i] = old - h
        down = loss_value(params, batch)
        t[i] = old
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name].view(-1)[i])
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    return worst


def data_paths(data_dir: Path, workdir: Path) -> PathsConfig:
    return PathsConfig(**{k: str(Path(data_dir) / f"{k.replace('_', '.', 1)}.txt") for k in SIDES},
                       workdir=str(workdir))


def tiny_config(data_dir: Path, workdir: Path, seed=0, **recipe) -> PipelineConfig:
    """Smallest config that still exercises every stage."""
    d = PipelineConfig(paths=data_paths(data_dir, workdir), seed=seed).to_dict()
    for k in d["train"]:
        if k.endswith("_steps") or k == "curriculum_updates":
            d["train"][k] = 3
    d["train"].update(curriculum_trials=2, warmup=2, batch_size=8)
    d["model"].update(d_model=16, d_ffn=32, n_heads=2, n_layers_enc=1, n_layers_dec=1)
    d["subword"].update(n_merges_high=40, n_merges_joint=60, oversample=2)
    d["decode"].update(beam_size=2, max_len=8)
    d["lexicon"].update(dim=8)
    d["recipe"].update(recipe)
    return PipelineConfig.from_dict(d)


@contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for an acceptance criterion; yields a list for measured values.

    Exceptions raised in the block propagate after being recorded.
    """
    t0 = time.time()
    notes = []
    try:
        yield notes
    except BaseException as exc:
        first = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        notes.append(first[:160])
        VERDICTS[number] = _line("FAIL", number, title, notes, t0)
        raise
    VERDICTS[number] = _line("PASS", number, title, notes, t0)


def _line(status, number, title, notes, t0):
    detail = f" ({'; '.join(notes)})" if notes else ""
    return f"{status} criterion {number:>2}: {title}{detail} [{time.time() - t0:.1f}s]"
