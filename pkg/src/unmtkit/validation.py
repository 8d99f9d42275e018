"""Small argument checks shared by the estimators and pipeline stages."""

import numbers

import numpy as np


def check_probability(value, name="p"):
    if not isinstance(value, numbers.Real) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be a probability in [0, 1], got {value!r}")
    return float(value)


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_token_corpus(corpus, name="corpus", allow_empty=False):
    """Materialize a corpus of token lists; string lines are split on whitespace."""
    out = [line.split() if isinstance(line, str) else list(line) for line in corpus]
    if not out and not allow_empty:
        raise ValueError(f"{name} is empty")
    return out


def check_same_length(a, b, what="inputs"):
    if len(a) != len(b):
        raise ValueError(f"{what} differ in length: {len(a)} != {len(b)}")
