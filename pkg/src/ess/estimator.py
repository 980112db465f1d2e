"""Estimator-style wrappers around search and retraining."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensorcore as tc
from ._validation import check_corpus, check_positive, check_token_ids
from .cell import EssCellSpec, EssModel, window_forward
from .config import PRECISIONS
from .derivation import DerivedArch, TrainConfig, derive
from .errors import ConfigurationError
from .lm import perplexity
from .pipeline import run_retrain, run_search
from .search import ParamPartition, SearchConfig


def _dtype(precision):
    if precision not in PRECISIONS:
        raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")
    return PRECISIONS[precision]


class ArchitectureSearch(BaseEstimator):
    """Joint intra/inter-cell architecture search on a corpus.

    ``fit`` runs the alternating search and derives the discrete cell.

    Attributes
    ----------
    model_ : EssModel
        The relaxed model after search.
    trace_ : SearchTrace
    partition_ : ParamPartition
    arch_ : DerivedArch
    """

    def __init__(self, mode="joint", d=64, n_intra=4, m=2, n_inter=3, rounds=2, lr_model=1e-2,
                 lr_intra=3e-2, lr_inter=3e-2, batch=16, bptt_len=35, inner_patience=10,
                 max_inner_steps=60, clip=1.0, model_optimizer="adam", seed=0, precision="f64",
                 vocab_limit=None):
        self.mode = mode
        self.d = d
        self.n_intra = n_intra
        self.m = m
        self.n_inter = n_inter
        self.rounds = rounds
        self.lr_model = lr_model
        self.lr_intra = lr_intra
        self.lr_inter = lr_inter
        self.batch = batch
        self.bptt_len = bptt_len
        self.inner_patience = inner_patience
        self.max_inner_steps = max_inner_steps
        self.clip = clip
        self.model_optimizer = model_optimizer
        self.seed = seed
        self.precision = precision
        self.vocab_limit = vocab_limit

    def _spec(self):
        return EssCellSpec(d=self.d, n_intra=self.n_intra, m=self.m, n_inter=self.n_inter, mode=self.mode)

    def _config(self):
        return SearchConfig(rounds=self.rounds, lr_model=self.lr_model, lr_intra=self.lr_intra,
                            lr_inter=self.lr_inter, batch=self.batch, bptt_len=self.bptt_len,
                            inner_patience=self.inner_patience, max_inner_steps=self.max_inner_steps,
                            clip=self.clip, model_optimizer=self.model_optimizer)

    def fit(self, X=None, y=None):
        """Search on corpus ``X`` (a Corpus, a path, or None for the bundled one)."""
        corpus = check_corpus(X, self.vocab_limit)
        self.model_, result, self.arch_ = run_search(corpus, self._spec(), self._config(),
                                                     seed=self.seed, dtype=_dtype(self.precision))
        self.trace_ = result.trace
        self.partition_ = result.partition
        self.corpus_ = corpus
        return self

    def derive(self):
        check_is_fitted(self, "partition_")
        return derive(self.partition_, self.model_.spec, provenance=self.arch_.provenance)


def _default_arch(mode, d, n_intra, m, n_inter):
    spec = EssCellSpec(d=d, n_intra=n_intra, m=m, n_inter=n_inter, mode=mode)
    relaxed = EssModel(spec, 2)
    return derive(ParamPartition.of(relaxed), spec)


class RecurrentLanguageModel(BaseEstimator):
    """Language model on a fixed (derived) cell, trained from scratch.

    Parameters
    ----------
    arch : DerivedArch, optional
        Cell to train. Without one, the tie-break cell of ``mode`` is used
        (an identity chain, plus gates for gated modes).
    d : int, optional
        Hidden width; defaults to the width stored in ``arch``.
    """

    def __init__(self, arch=None, mode="vanilla", d=None, n_intra=4, m=2, n_inter=3, steps=600,
                 lr=1e-2, optimizer="adam", schedule="cosine", clip=1.0, batch=16, bptt_len=35, eval_batch=10,
                 seed=0, precision="f64", vocab_limit=None):
        self.arch = arch
        self.mode = mode
        self.d = d
        self.n_intra = n_intra
        self.m = m
        self.n_inter = n_inter
        self.steps = steps
        self.lr = lr
        self.optimizer = optimizer
        self.schedule = schedule
        self.clip = clip
        self.batch = batch
        self.bptt_len = bptt_len
        self.eval_batch = eval_batch
        self.seed = seed
        self.precision = precision
        self.vocab_limit = vocab_limit

    def _arch(self):
        if self.arch is not None:
            if not isinstance(self.arch, DerivedArch):
                raise ConfigurationError(f"arch must be a DerivedArch, got {type(self.arch).__name__}")
            return self.arch
        return _default_arch(self.mode, self.d or 64, self.n_intra, self.m, self.n_inter)

    def fit(self, X=None, y=None):
        """Train on the ``train`` split of corpus ``X``; validation/test are reported."""
        check_positive(self.steps, "steps", integer=True)
        corpus = check_corpus(X, self.vocab_limit)
        config = TrainConfig(steps=self.steps, lr=self.lr, optimizer=self.optimizer, schedule=self.schedule,
                             clip=self.clip, batch=self.batch, bptt_len=self.bptt_len, eval_batch=self.eval_batch)
        self.model_, self.report_ = run_retrain(self._arch(), corpus, config, seed=self.seed,
                                                dtype=_dtype(self.precision), d=self.d)
        self.corpus_ = corpus
        self.vocab_size_ = len(corpus)
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        ids = check_token_ids(X, self.vocab_size_, min_len=1)
        history = self.model_.initial_history(1)
        out = []
        for start in range(0, ids.size, self.bptt_len):
            logits, _ = window_forward(self.model_, ids[start:start + self.bptt_len], history)
            out.append(logits.data)
            history = history.detach()
        return np.concatenate(out)

    def predict_proba(self, X):
        """Next-token distribution after each token of ``X``, shape (len(X), |V|)."""
        logp = tc.log_softmax_array(self._logits(X))
        return np.exp(logp)

    def predict(self, X):
        """Most likely next token after each token of ``X``."""
        return np.argmax(self._logits(X), axis=1)

    def perplexity(self, X, split="data"):
        check_is_fitted(self, "model_")
        ids = check_token_ids(X, self.vocab_size_)
        return perplexity(self.model_, ids, split, self.bptt_len, self.eval_batch)

    def score(self, X, y=None):
        """Mean log-likelihood per token (higher is better)."""
        return -self.perplexity(X).loss

