"""Run configuration: flat ``key=value`` files, flag overrides, digests and seeds."""

import hashlib
from dataclasses import dataclass, fields, replace

import numpy as np

from .cell import MODES, EssCellSpec
from .derivation import TrainConfig
from .errors import ConfigurationError
from .pipeline import substream  # noqa: F401  re-exported
from .search import SearchConfig

PRECISIONS = {"f64": np.float64, "f32": np.float32}

# Keys excluded from the digest: they choose where results go, not what they are.
_NOT_HASHED = ("out",)


@dataclass(frozen=True)
class RunConfig:
    corpus: str = ""
    vocab_limit: int = 0
    out: str = "ess-out"
    seed: int = 0
    precision: str = "f64"
    # cell
    mode: str = "joint"
    d: int = 64
    n_intra: int = 4
    m: int = 2
    n_inter: int = 3
    # search
    rounds: int = 2
    lr_model: float = 1e-2
    lr_intra: float = 3e-2
    lr_inter: float = 3e-2
    batch: int = 16
    bptt_len: int = 35
    inner_patience: int = 10
    max_inner_steps: int = 60
    clip: float = 1.0
    model_optimizer: str = "adam"
    # retrain / eval
    retrain_steps: int = 600
    lr_retrain: float = 1e-2
    retrain_optimizer: str = "adam"
    retrain_schedule: str = "cosine"
    eval_batch: int = 10
    # sweep
    sweep: str = "4:3"
    budget: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        self.cell_spec()
        self.search_config()
        self.train_config()

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def cell_spec(self):
        return EssCellSpec(d=self.d, n_intra=self.n_intra, m=self.m, n_inter=self.n_inter, mode=self.mode)

    def search_config(self):
        return SearchConfig(
            rounds=self.rounds, lr_model=self.lr_model, lr_intra=self.lr_intra, lr_inter=self.lr_inter,
            batch=self.batch, bptt_len=self.bptt_len, inner_patience=self.inner_patience,
            max_inner_steps=self.max_inner_steps, clip=self.clip, model_optimizer=self.model_optimizer,
        )

    def train_config(self):
        return TrainConfig(
            steps=self.retrain_steps, lr=self.lr_retrain, optimizer=self.retrain_optimizer,
            clip=self.clip, batch=self.batch, bptt_len=self.bptt_len, eval_batch=self.eval_batch,
            schedule=self.retrain_schedule,
        )

    def sweep_configs(self):
        out = []
        for item in self.sweep.split(","):
            try:
                a, b = item.strip().split(":")
                out.append((int(a), int(b)))
            except ValueError:
                raise ConfigurationError(f"bad sweep entry {item!r}; expected n_intra:n_inter") from None
        return out

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def canonical(self):
        return "".join(f"{k}={v!r}\n" for k, v in sorted(self.items()) if k not in _NOT_HASHED)

    def digest(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **overrides):
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean) if clean else self


def _coerce(name, raw):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise ConfigurationError(f"unknown config key {name!r}")
    kind = kinds[name]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text, source="<config>"):
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def load_run_config(path=None, **overrides):
    """Resolve defaults, then the file at ``path``, then non-None ``overrides``."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values = parse_config_text(fh.read(), source=str(path))
    return RunConfig(**values).with_overrides(**overrides)


