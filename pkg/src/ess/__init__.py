"""Joint intra-cell and inter-cell differentiable search for recurrent language models."""

__version__ = "0.1.0"

from .cell import EssCellSpec, EssModel
from .derivation import DerivedArch, derive, export_dot, load_arch, retrain, save_arch
from .errors import (ArchFileError, ConfigurationError, ContractError, CorpusEncodingError, DataError,
                     DimensionError, EssError, NumericError, TokenIndexError)
from .estimator import ArchitectureSearch, RecurrentLanguageModel
from .lm import Corpus, bundled_corpus_path, load_corpus, perplexity, sweep_nodes, word_loss_delta
from .search import ParamPartition, SearchConfig, intra_search, joint_learn, mad

__all__ = [
    "ArchFileError", "ArchitectureSearch", "ConfigurationError", "ContractError", "Corpus",
    "CorpusEncodingError", "DataError", "DerivedArch", "DimensionError", "EssCellSpec", "EssError",
    "EssModel", "NumericError", "ParamPartition", "RecurrentLanguageModel", "SearchConfig",
    "TokenIndexError", "bundled_corpus_path", "derive", "export_dot", "intra_search", "joint_learn",
    "load_arch", "load_corpus", "mad", "perplexity", "retrain", "save_arch", "sweep_nodes",
    "word_loss_delta",
]
