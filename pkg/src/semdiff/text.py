"""Deterministic metadata tokens standing in for a pretrained text encoder.

Each known vocabulary string maps to a row of a seeded Gaussian table; any
other string gets a row drawn from a generator seeded by its SHA-256 digest.
Tokens carry no positional information.
"""

import hashlib
from functools import lru_cache

import numpy as np

from .exceptions import ContractError

VOCAB_SEED = 20240917
DEFAULT_VOCAB = ("HER2", "PDL1", "Ki67", "CK", "Breast", "Lung", "Colon", "Gastric", "Bladder")


@lru_cache(maxsize=None)
def _vocab_table(vocab, dim, seed):
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 1.0, (len(vocab), dim))
    return {word: table[i] for i, word in enumerate(vocab)}


def embed_string(word, dim=32, vocab=DEFAULT_VOCAB, seed=VOCAB_SEED):
    if not isinstance(word, str) or not word:
        raise ContractError("metadata strings must be non-empty")
    table = _vocab_table(tuple(vocab), int(dim), int(seed))
    if word in table:
        return table[word].copy()
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little")).normal(0.0, 1.0, dim)


def encode_metadata(assay, indication, dim=32):
    """Token matrix ``[embed(assay), embed(indication)]`` of shape ``(2, dim)``."""
    return np.stack([embed_string(assay, dim), embed_string(indication, dim)])
