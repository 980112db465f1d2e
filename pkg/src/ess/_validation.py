"""Input checks shared by the estimators and the command line."""

import numbers
import os

import numpy as np

from .errors import ConfigurationError, DataError, TokenIndexError
from .lm import Corpus, bundled_corpus_path, load_corpus


def check_token_ids(ids, vocab_size=None, name="ids", min_len=2):
    """Return ``ids`` as a 1-D int64 array, rejecting bad ids and short streams."""
    arr = np.asarray(ids)
    if arr.ndim != 1:
        raise DataError(f"{name}: expected a 1-D token id sequence, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise DataError(f"{name}: token ids must be integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64, copy=False)
    if arr.size < min_len:
        raise DataError(f"{name}: need at least {min_len} tokens, got {arr.size}")
    if vocab_size is not None and arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        bad = int(arr[(arr < 0) | (arr >= vocab_size)][0])
        raise TokenIndexError(f"{name}: token id {bad} outside vocabulary of size {vocab_size}")
    return arr


def check_corpus(X, vocab_limit=None):
    """Accept a :class:`Corpus`, a corpus path, or ``None`` for the bundled corpus."""
    if isinstance(X, Corpus):
        return X
    if X is None or X == "":
        X = bundled_corpus_path()
    if isinstance(X, (str, os.PathLike)):
        if not os.path.exists(X):
            raise FileNotFoundError(f"corpus not found: {X}")
        return load_corpus(os.fspath(X), vocab_limit=vocab_limit or None)
    raise DataError(f"expected a Corpus or a path, got {type(X).__name__}")


def check_positive(value, name, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind) or not value > 0:
        raise ConfigurationError(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")
    return value
