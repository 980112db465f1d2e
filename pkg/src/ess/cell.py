"""The composite recurrent cell and a language model built around it.

At step t the cell computes::

    h_hat = h_{t-1} * gate_f(x_{t-1}, ..., x_{t-m})
    x_hat = x_t     * gate_g(h_{t-1}, ..., h_{t-m})
    e1    = tanh(h_hat W_h + x_hat W_x)
    h_t   = mean of the intra-cell DAG nodes grown from e1

Modes without gates (``vanilla``, ``intra_only``) use h_hat = h_{t-1} and
x_hat = x_t.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, ContractError, DimensionError
from .searchspace import ONE, PASSTHROUGH, GatedPair, MixedDag, gated_output

MODES = ("vanilla", "intra_only", "inter_only", "joint")


@dataclass(frozen=True)
class EssCellSpec:
    d: int = 64
    n_intra: int = 4
    m: int = 2
    n_inter: int = 3
    mode: str = "joint"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d < 1:
            raise ConfigurationError(f"d must be positive, got {self.d}")
        if self.n_intra < 2:
            raise ConfigurationError(f"n_intra must be >= 2, got {self.n_intra}")
        if self.m < 1:
            raise ConfigurationError(f"m must be >= 1, got {self.m}")
        if self.n_inter < self.m:
            raise ConfigurationError(f"n_inter must be >= m, got n_inter={self.n_inter}, m={self.m}")

    @property
    def has_gates(self):
        return self.mode in ("inter_only", "joint")

    @property
    def searches_intra(self):
        return self.mode in ("intra_only", "joint")

    @property
    def searches_inter(self):
        return self.mode in ("inter_only", "joint")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data[k] for k in ("d", "n_intra", "m", "n_inter", "mode")})


class CellHistory:
    """Carried recurrent state: the last m hidden states and inputs, newest first."""

    def __init__(self, h, h_ring, x_ring):
        self.h = h
        self.h_ring = list(h_ring)
        self.x_ring = list(x_ring)

    @classmethod
    def zeros(cls, batch, d, m, dtype=tc.DEFAULT_DTYPE):
        z = np.zeros((batch, d), dtype=dtype)
        return cls(tc.Tensor(z), [tc.Tensor(z) for _ in range(m)], [tc.Tensor(z) for _ in range(m)])

    def push(self, h_t, x_t):
        self.h = h_t
        self.h_ring = [h_t] + self.h_ring[:-1]
        self.x_ring = [x_t] + self.x_ring[:-1]

    def detach(self):
        return CellHistory(self.h.detach(), [t.detach() for t in self.h_ring], [t.detach() for t in self.x_ring])


def inter_gate_dag(m, n_inter, d, **kwargs):
    """Gate DAG whose first m nodes each read only their own history input.

    Source projections carry a bias so the gate is not identically zero on
    the zero history at sequence start.
    """
    kwargs.setdefault("bias", True)
    return MixedDag(m, n_inter, d, pruned=True, **kwargs)


def intra_input(h_hat, x_hat, W_h, W_x):
    if h_hat.shape[-1] != W_h.shape[0] or x_hat.shape[-1] != W_x.shape[0]:
        raise DimensionError(
            f"intra input widths {h_hat.shape[-1]}/{x_hat.shape[-1]} do not match maps {W_h.shape}/{W_x.shape}"
        )
    return tc.tanh(tc.add(tc.matmul(h_hat, W_h), tc.matmul(x_hat, W_x)))


def f_prime(h_prev, x_window, gate, theta=None):
    """Gate the previous hidden state with a DAG over the last m inputs."""
    return _apply_gate(h_prev, x_window, gate, theta)


def g_prime(x_t, h_window, gate, theta=None):
    """Gate the current input with a DAG over the last m hidden states."""
    return _apply_gate(x_t, h_window, gate, theta)


def _apply_gate(value, window, gate, theta):
    if gate is None or gate is ONE:
        return value
    if len(window) != gate.n_inputs:
        raise ContractError(f"history window has {len(window)} entries, gate expects {gate.n_inputs}")
    if theta is None:
        return gated_output(GatedPair(PASSTHROUGH, gate), [value], window)
    return tc.mul(value, gate.output(window, theta))


class EssModel:
    """Embedding, ESS cell and untied softmax output layer.

    Parameters
    ----------
    spec : EssCellSpec
    vocab_size : int
    rng : numpy Generator, optional
        Source for parameter initialisation.
    dtype : numpy dtype
    arch : DerivedArch, optional
        When given, every DAG is discrete with the derived choices.
    """

    def __init__(self, spec, vocab_size, rng=None, dtype=tc.DEFAULT_DTYPE, arch=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        d = spec.d
        self.spec = spec
        self.vocab_size = vocab_size
        self.dtype = np.dtype(dtype)
        self.arch = arch
        self.gates_pinned = False
        self.embedding = tc.uniform_param(rng, (vocab_size, d), d, dtype, name="embedding")
        self.W_h = tc.uniform_param(rng, (d, d), d, dtype, name="W_h")
        self.W_x = tc.uniform_param(rng, (d, d), d, dtype, name="W_x")
        choices = _arch_choices(arch)
        self.intra = MixedDag(1, spec.n_intra, d, rng=rng, dtype=dtype, choice=choices["intra"], name="intra")
        has_gates = spec.has_gates if arch is None else bool(arch.inter_f)
        if has_gates:
            self.f_gate = inter_gate_dag(spec.m, spec.n_inter, d, rng=rng, dtype=dtype,
                                         choice=choices["inter_f"], name="f_gate")
            self.g_gate = inter_gate_dag(spec.m, spec.n_inter, d, rng=rng, dtype=dtype,
                                         choice=choices["inter_g"], name="g_gate")
        else:
            self.f_gate = self.g_gate = None
        # Zero output layer: a fresh model predicts the uniform distribution.
        self.out_W = tc.Tensor(np.zeros((d, vocab_size), dtype=dtype), requires_grad=True, name="out_W")
        self.out_b = tc.Tensor(np.zeros(vocab_size, dtype=dtype), requires_grad=True, name="out_b")

    @property
    def has_gates(self):
        return self.f_gate is not None

    def dags(self):
        out = {"intra": self.intra}
        if self.has_gates:
            out["f_gate"] = self.f_gate
            out["g_gate"] = self.g_gate
        return out

    def model_params(self):
        params = [self.embedding, self.W_h, self.W_x]
        for dag in self.dags().values():
            params.extend(dag.model_params())
        params.extend([self.out_W, self.out_b])
        return params

    def intra_weights(self):
        return [] if self.intra.weights is None else [self.intra.weights]

    def inter_weights(self):
        if not self.has_gates or self.f_gate.weights is None:
            return []
        return [self.f_gate.weights, self.g_gate.weights]

    def all_params(self):
        return self.model_params() + self.intra_weights() + self.inter_weights()

    def n_model_params(self):
        return int(sum(p.data.size for p in self.model_params()))

    def thetas(self):
        """Softmaxed edge weights per relaxed DAG, computed once per window."""
        return {name: dag.theta() for name, dag in self.dags().items() if dag.weights is not None}

    def initial_history(self, batch):
        return CellHistory.zeros(batch, self.spec.d, self.spec.m, self.dtype)

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.all_params()}

    def load_state_dict(self, state):
        for p in self.all_params():
            if p.name not in state:
                raise ContractError(f"state is missing parameter {p.name!r}")
            arr = np.asarray(state[p.name])
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {p.name!r}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def _arch_choices(arch):
    if arch is None:
        return {"intra": None, "inter_f": None, "inter_g": None}

    def strip(entries):
        return [(pred, op) for _, pred, op in entries] if entries else None

    return {"intra": strip(arch.intra), "inter_f": strip(arch.inter_f), "inter_g": strip(arch.inter_g)}


def cell_step(model, history, x_t, thetas=None):
    """Advance the cell by one step; returns h_t and pushes it onto ``history``."""
    thetas = thetas if thetas is not None else model.thetas()
    h_prev = history.h
    if model.has_gates and not model.gates_pinned:
        h_hat = f_prime(h_prev, history.x_ring, model.f_gate, thetas.get("f_gate"))
        x_hat = g_prime(x_t, history.h_ring, model.g_gate, thetas.get("g_gate"))
    else:
        h_hat, x_hat = h_prev, x_t
    e1 = intra_input(h_hat, x_hat, model.W_h, model.W_x)
    h_t = model.intra.output([e1], thetas.get("intra"))
    history.push(h_t, x_t)
    return h_t


def window_forward(model, inputs, history, thetas=None):
    """Run the cell over a (T, B) block of token ids; returns (T*B, V) logits and hiddens."""
    inputs = np.asarray(inputs)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    thetas = thetas if thetas is not None else model.thetas()
    hiddens = []
    for t in range(inputs.shape[0]):
        x_t = tc.take_rows(model.embedding, inputs[t])
        hiddens.append(cell_step(model, history, x_t, thetas))
    stacked = hiddens[0] if len(hiddens) == 1 else tc.concat(hiddens, axis=0)
    logits = tc.add(tc.matmul(stacked, model.out_W), model.out_b)
    return logits, hiddens


def window_loss(model, inputs, targets, history, thetas=None):
    logits, _ = window_forward(model, inputs, history, thetas)
    return tc.cross_entropy(logits, np.asarray(targets).reshape(-1))


class UnrollResult:
    def __init__(self, hiddens, losses, counts, history):
        self.hiddens = hiddens
        self.losses = losses
        self.counts = counts
        self.history = history

    @property
    def mean_loss(self):
        return float(sum(l.item() * n for l, n in zip(self.losses, self.counts)) / sum(self.counts))


def unroll(model, tokens, targets, bptt_len, history=None):
    """Process a sequence in truncated windows of ``bptt_len`` steps.

    The carried state is detached at every window boundary, so each window
    loss only back-propagates into its own window.
    """
    if bptt_len < 1:
        raise ConfigurationError(f"bptt_len must be >= 1, got {bptt_len}")
    tokens = np.asarray(tokens)
    targets = np.asarray(targets)
    if tokens.ndim == 1:
        tokens, targets = tokens[:, None], targets[:, None]
    if tokens.shape[0] < 1:
        raise ConfigurationError("unroll needs at least one step")
    history = history if history is not None else model.initial_history(tokens.shape[1])
    hiddens, losses, counts = [], [], []
    for start in range(0, tokens.shape[0], bptt_len):
        stop = min(start + bptt_len, tokens.shape[0])
        logits, hs = window_forward(model, tokens[start:stop], history)
        losses.append(tc.cross_entropy(logits, targets[start:stop].reshape(-1)))
        counts.append(targets[start:stop].size)
        hiddens.extend(hs)
        history = history.detach()
    return UnrollResult(hiddens, losses, counts, history)
