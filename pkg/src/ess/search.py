"""Alternating search over intra-cell and inter-cell edge weights."""

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .cell import window_loss
from .errors import ConfigurationError, ContractError, NumericError
from .lm import BatchStream

PHASES = ("intra", "inter")
TRACE_COLUMNS = ("step", "phase", "train_loss", "valid_ppl", "mad_intra", "mad_inter", "seconds")


@dataclass
class ParamPartition:
    w_intra: list
    w_inter: list
    W_model: list

    @classmethod
    def of(cls, model):
        return cls(model.intra_weights(), model.inter_weights(), model.model_params())

    def group(self, phase):
        return self.w_intra if phase == "intra" else self.w_inter


@dataclass
class SearchConfig:
    rounds: int = 2
    lr_model: float = 1e-2
    lr_intra: float = 3e-2
    lr_inter: float = 3e-2
    batch: int = 16
    bptt_len: int = 35
    inner_patience: int = 10
    max_inner_steps: int = 60
    rel_tol: float = 1e-3
    clip: float = 1.0
    model_optimizer: str = "adam"
    arch_optimizer: str = "adam"
    smoothing: float = 0.8

    def __post_init__(self):
        for name in ("rounds", "lr_model", "lr_intra", "lr_inter", "batch", "bptt_len",
                     "inner_patience", "max_inner_steps"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class TraceRecord:
    step: int
    phase: str
    train_loss: float
    valid_ppl: float
    mad_intra: float
    mad_inter: float
    seconds: float

    def values(self):
        return tuple(getattr(self, c) for c in TRACE_COLUMNS)


@dataclass
class SearchTrace:
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records:
            last = self.records[-1]
            if record.step <= last.step or record.seconds < last.seconds:
                raise ContractError("trace records must have increasing steps and monotone time")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def trajectory(self):
        """Every recorded value except wall-clock time."""
        return [r.values()[:-1] for r in self.records]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.records:
            writer.writerow([r.step, r.phase, repr(r.train_loss), repr(r.valid_ppl),
                             repr(r.mad_intra), repr(r.mad_inter), f"{r.seconds:.6f}"])
        return buf.getvalue()


def mad(weights):
    """Mean absolute deviation of softmaxed edge weights from the uniform 1/5."""
    arrays = [w.data if isinstance(w, tc.Tensor) else np.asarray(w) for w in weights]
    if not arrays:
        raise ContractError("MAD of an empty weight group")
    rows = np.concatenate([a.reshape(-1, a.shape[-1]) for a in arrays])
    z = rows - rows.max(axis=1, keepdims=True)
    theta = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return float(np.mean(np.abs(theta - 1.0 / rows.shape[1])))


def converged(losses, patience, rel_tol=1e-3, max_steps=None):
    """True once the last ``patience`` losses failed to beat the earlier best by ``rel_tol``."""
    n = len(losses)
    if max_steps is not None and n >= max_steps:
        return True
    if n <= patience:
        return False
    best_before = min(losses[: n - patience])
    recent = min(losses[n - patience:])
    return recent > best_before - rel_tol * abs(best_before)


class _Streams:
    def __init__(self, model, train_ids, valid_ids, config, rng):
        if valid_ids is None or len(valid_ids) == 0:
            raise ConfigurationError("search needs a non-empty validation split")
        self.model = model
        self.train = BatchStream(train_ids, config.batch, config.bptt_len, rng)
        self.valid = BatchStream(valid_ids, config.batch, config.bptt_len, rng)
        self.hist = {}

    def window(self, name):
        stream = getattr(self, name)
        inputs, targets, reset = stream.next()
        if reset or name not in self.hist:
            self.hist[name] = self.model.initial_history(stream.batch)
        return inputs, targets, self.hist[name]

    def carry(self, name, history):
        self.hist[name] = history.detach()


def model_step(model, streams, optimizer):
    """One update of the model tensors on a training window; returns the loss."""
    inputs, targets, history = streams.window("train")
    with tc.Tape() as tape:
        loss = window_loss(model, inputs, targets, history)
        grads = tape.backward(loss, optimizer.params)
    optimizer.step(grads)
    streams.carry("train", history)
    return loss.item()


def arch_step(model, group, streams, optimizer):
    """First-order update of one edge-weight group on a validation window.

    Only the tensors of ``group`` change; the other group and the model
    tensors are left untouched.
    """
    if group not in PHASES:
        raise ConfigurationError(f"unknown weight group {group!r}")
    inputs, targets, history = streams.window("valid")
    with tc.Tape() as tape:
        loss = window_loss(model, inputs, targets, history)
        grads = tape.backward(loss, optimizer.params)
    optimizer.step(grads)
    streams.carry("valid", history)
    return loss.item()


@dataclass
class SearchResult:
    partition: ParamPartition
    trace: SearchTrace


class _Runner:
    def __init__(self, model, train_ids, valid_ids, config, rng):
        self.model = model
        self.config = config
        self.partition = ParamPartition.of(model)
        self.streams = _Streams(model, train_ids, valid_ids, config, rng)
        self.model_opt = tc.make_optimizer(config.model_optimizer, self.partition.W_model,
                                           config.lr_model, clip=config.clip)
        lrs = {"intra": config.lr_intra, "inter": config.lr_inter}
        self.arch_opts = {
            phase: tc.make_optimizer(config.arch_optimizer, self.partition.group(phase), lrs[phase])
            for phase in PHASES if self.partition.group(phase)
        }
        self.trace = SearchTrace()
        self.start = time.perf_counter()

    def _mad(self, group):
        return mad(group) if group else math.nan

    def inner_loop(self, phase):
        if phase not in self.arch_opts:
            raise ConfigurationError(f"model has no searchable {phase} weights (mode={self.model.spec.mode})")
        smoothed = []
        level = None
        while not converged(smoothed, self.config.inner_patience, self.config.rel_tol,
                            self.config.max_inner_steps):
            try:
                train_loss = model_step(self.model, self.streams, self.model_opt)
                valid_loss = arch_step(self.model, phase, self.streams, self.arch_opts[phase])
            except NumericError as exc:
                raise NumericError(str(exc), trace=self.trace) from exc
            if not np.isfinite(valid_loss):
                raise NumericError("validation loss diverged", trace=self.trace)
            a = self.config.smoothing
            level = valid_loss if level is None else a * level + (1 - a) * valid_loss
            smoothed.append(level)
            self.trace.append(TraceRecord(
                step=len(self.trace) + 1,
                phase=phase,
                train_loss=train_loss,
                valid_ppl=float(np.exp(valid_loss)),
                mad_intra=self._mad(self.partition.w_intra),
                mad_inter=self._mad(self.partition.w_inter),
                seconds=time.perf_counter() - self.start,
            ))

    def result(self):
        return SearchResult(self.partition, self.trace)


def _default_phases(model):
    spec = model.spec
    phases = tuple(p for p, on in (("intra", spec.searches_intra), ("inter", spec.searches_inter)) if on)
    if not phases:
        raise ConfigurationError(f"mode {spec.mode!r} has nothing to search")
    return phases


def joint_learn(model, train_ids, valid_ids, config, rng=None, phases=None):
    """Alternate intra-cell and inter-cell search for ``config.rounds`` rounds.

    Each round first runs the intra phase to convergence with the inter
    weights frozen, then the inter phase with the intra weights frozen.
    Model tensors train in both phases and carry over between rounds.
    ``phases`` restricts the rounds to a subset, e.g. ``("intra",)``.
    """
    phases = _default_phases(model) if phases is None else tuple(phases)
    for p in phases:
        if p not in PHASES:
            raise ConfigurationError(f"unknown phase {p!r}")
    runner = _Runner(model, train_ids, valid_ids, config, rng)
    for _ in range(config.rounds):
        for phase in phases:
            runner.inner_loop(phase)
    return runner.result()


def intra_search(model, train_ids, valid_ids, config, rng=None):
    """Plain intra-cell search: the intra loop alone, repeated per round."""
    runner = _Runner(model, train_ids, valid_ids, config, rng)
    for _ in range(config.rounds):
        runner.inner_loop("intra")
    return runner.result()
