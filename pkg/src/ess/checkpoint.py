"""Model checkpoints: parameter arrays plus JSON metadata in one ``.npz`` file."""

import json

import numpy as np

from .cell import EssCellSpec, EssModel
from .derivation import arch_from_dict, arch_to_dict
from .errors import ContractError

_META = "__meta__"


def save_model(model, path, digest="", extra=None):
    meta = {
        "spec": model.spec.to_dict(),
        "vocab_size": model.vocab_size,
        "dtype": model.dtype.name,
        "digest": digest,
        "arch": arch_to_dict(model.arch) if model.arch is not None else None,
    }
    if extra:
        meta.update(extra)
    arrays = model.state_dict()
    arrays[_META] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_meta(path):
    with np.load(path) as data:
        if _META not in data:
            raise ContractError(f"{path}: not an ESS checkpoint (no metadata)")
        return json.loads(bytes(data[_META]).decode("utf-8"))


def load_model(path, expect_digest=None):
    """Rebuild the model stored at ``path``.

    With ``expect_digest`` set, a checkpoint written under a different run
    configuration is rejected.
    """
    meta = read_meta(path)
    if expect_digest is not None and meta.get("digest") != expect_digest:
        raise ContractError(
            f"{path}: config digest {meta.get('digest')!r} does not match expected {expect_digest!r}"
        )
    arch = arch_from_dict(meta["arch"]) if meta.get("arch") else None
    spec = EssCellSpec.from_dict(meta["spec"])
    model = EssModel(spec, meta["vocab_size"], dtype=np.dtype(meta["dtype"]), arch=arch)
    with np.load(path) as data:
        model.load_state_dict({k: data[k] for k in data.files if k != _META})
    return model, meta
