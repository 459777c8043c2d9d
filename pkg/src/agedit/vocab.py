"""Closed toy vocabulary: caption words from ``data/vocab.txt`` plus one token per age."""
from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np

CAPTION_LEN = 12
AGE_RANGE = (1, 85)
PAD, BOS = "<pad>", "<bos>"


@lru_cache(maxsize=1)
def vocabulary() -> tuple[str, ...]:
    text = resources.files("agedit").joinpath("data/vocab.txt").read_text()
    words = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    return tuple(words) + tuple(f"<age_{a}>" for a in range(AGE_RANGE[0], AGE_RANGE[1] + 1))


@lru_cache(maxsize=1)
def token_ids() -> dict[str, int]:
    return {w: i for i, w in enumerate(vocabulary())}


def vocab_size() -> int:
    return len(vocabulary())


def tokenize_caption(words) -> np.ndarray:
    """``[BOS, w1, ..., PAD, ...]`` of fixed length ``CAPTION_LEN``.

    ``words`` is a whitespace-separated string or a list of words.
    """
    if isinstance(words, str):
        words = words.split()
    ids = token_ids()
    if len(words) > CAPTION_LEN - 1:
        raise ValueError(f"caption longer than {CAPTION_LEN - 1} words")
    out = np.full(CAPTION_LEN, ids[PAD], dtype=np.int64)
    out[0] = ids[BOS]
    for i, w in enumerate(words, start=1):
        if w not in ids or w.startswith("<"):
            raise KeyError(f"out-of-vocabulary word {w!r}")
        out[i] = ids[w]
    return out


def embed_age_phrase(age: int) -> np.ndarray:
    """Token ids for "<N> years old"."""
    age = int(age)
    if not AGE_RANGE[0] <= age <= AGE_RANGE[1]:
        raise ValueError(f"age {age} outside {AGE_RANGE}")
    ids = token_ids()
    return np.array([ids[f"<age_{age}>"], ids["years"], ids["old"]], dtype=np.int64)


def neutral_caption() -> np.ndarray:
    return tokenize_caption(["portrait"])
