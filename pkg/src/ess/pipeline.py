"""Search and retrain runs seeded through named random substreams.

One integer seed feeds three independent generators: ``init`` for
parameter initialisation, ``search`` for the search-time batch offsets and
``batching`` for the retrain-time batch offsets.
"""

import logging
import zlib
from dataclasses import replace

import numpy as np

from . import tensorcore as tc
from .cell import EssModel
from .derivation import derive, retrain
from .search import joint_learn

log = logging.getLogger(__name__)


def substream(seed, name):
    """Independent generator for one named consumer of randomness."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def run_search(corpus, spec, config, seed=0, dtype=tc.DEFAULT_DTYPE, provenance=None):
    """Build a relaxed model, search it and derive the discrete cell.

    Returns ``(model, result, arch)``.
    """
    model = EssModel(spec, len(corpus), rng=substream(seed, "init"), dtype=dtype)
    log.info("search: mode=%s d=%d |V|=%d", spec.mode, spec.d, len(corpus))
    result = joint_learn(model, corpus.split("train"), corpus.split("valid"), config,
                         rng=substream(seed, "search"))
    prov = {"corpus": corpus.name, "seed": int(seed)}
    prov.update(provenance or {})
    arch = derive(result.partition, spec, provenance=prov)
    return model, result, arch


def run_retrain(arch, corpus, config, seed=0, dtype=tc.DEFAULT_DTYPE, d=None):
    """Train the fixed model for ``arch`` from scratch; returns ``(model, report)``."""
    spec = arch.spec if d is None else replace(arch.spec, d=d)
    model = EssModel(spec, len(corpus), rng=substream(seed, "init"), dtype=dtype,
                     arch=replace(arch, spec=spec))
    return retrain(arch, corpus, config, rng=substream(seed, "batching"), dtype=dtype, model=model)
