"""Relaxed DAG search space.

Sources of a DAG are numbered with the external inputs first
(``0 .. n_inputs-1``) followed by the computed nodes. Each computed node
mixes the five candidate activations over every allowed predecessor
edge; the DAG output is the average of its computed nodes.
"""

import enum

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, DimensionError

N_OPS = len(tc.ACTIVATIONS)


class CandidateOp(str, enum.Enum):
    DROP = "drop"
    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"

    @property
    def index(self):
        return tc.ACTIVATIONS.index(self.value)


# Derivation never selects drop; ties resolve in this order.
DERIVABLE_OPS = ("identity", "sigmoid", "tanh", "relu")


class _Marker:
    def __init__(self, label):
        self.label = label

    def __repr__(self):
        return self.label


PASSTHROUGH = _Marker("PASSTHROUGH")
ONE = _Marker("ONE")


def dag_preds(n_inputs, k, pruned=False):
    """Allowed predecessor sources of computed node ``k`` (0-based)."""
    if not pruned:
        return list(range(n_inputs + k))
    if k < n_inputs:
        return [k]
    return [n_inputs + j for j in range(k)]


class MixedDag:
    """A relaxed DAG with per-edge operation weights and per-source linear maps.

    Parameters
    ----------
    n_inputs : int
        Number of external input vectors feeding the DAG.
    n_nodes : int
        Number of computed nodes.
    d : int
        Width of every state vector.
    pruned : bool
        If true, computed node ``k < n_inputs`` reads only from input ``k``
        and later nodes read only from earlier computed nodes (the gate
        layout). Otherwise every node reads from all earlier sources.
    choice : sequence of (pred, op), optional
        Fixes one predecessor and one operation per node, turning the DAG
        into a discrete cell without edge weights.
    bias : bool
        Add a learned offset to every source projection (``s_j W_j + b_j``).
    """

    def __init__(self, n_inputs, n_nodes, d, *, pruned=False, rng=None, dtype=tc.DEFAULT_DTYPE,
                 choice=None, bias=False, name="dag"):
        if n_inputs < 1 or n_nodes < 1:
            raise ConfigurationError("a DAG needs at least one input and one node")
        if pruned and n_nodes < n_inputs:
            raise ConfigurationError(f"pruned DAG needs n_nodes >= n_inputs, got {n_nodes} < {n_inputs}")
        self.n_inputs = n_inputs
        self.n_nodes = n_nodes
        self.d = d
        self.pruned = pruned
        self.name = name
        self.edges = []
        for k in range(n_nodes):
            for j in self.preds(k):
                self.edges.append((n_inputs + k, j))
        self.edge_index = {e: r for r, e in enumerate(self.edges)}
        self.choice = None
        if choice is not None:
            self.choice = [(int(p), str(op)) for p, op in choice]
            self._check_choice()
            sources = sorted({p for p, _ in self.choice})
            self.weights = None
        else:
            sources = sorted({j for _, j in self.edges})
            self.weights = tc.Tensor(np.zeros((len(self.edges), N_OPS), dtype=dtype),
                                     requires_grad=True, name=f"{name}.w")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = {j: tc.uniform_param(rng, (d, d), d, dtype, name=f"{name}.W{j}") for j in sources}
        self.b = {}
        if bias:
            self.b = {j: tc.uniform_param(rng, (d,), d, dtype, name=f"{name}.b{j}") for j in sources}

    def preds(self, k):
        return dag_preds(self.n_inputs, k, self.pruned)

    def _check_choice(self):
        if len(self.choice) != self.n_nodes:
            raise ConfigurationError(f"{self.name}: need {self.n_nodes} choices, got {len(self.choice)}")
        for k, (p, op) in enumerate(self.choice):
            if p not in self.preds(k):
                raise ConfigurationError(f"{self.name}: node {k} cannot read from source {p}")
            if op not in DERIVABLE_OPS:
                raise ConfigurationError(f"{self.name}: node {k} has non-derivable op {op!r}")

    def edge_weights(self, i, j):
        """Raw weight vector w^{i,j} for source ``j`` feeding source ``i``."""
        return self.weights.data[self.edge_index[(i, j)]]

    def theta(self):
        return tc.softmax(self.weights, axis=-1)

    def model_params(self):
        return [self.W[j] for j in sorted(self.W)] + [self.b[j] for j in sorted(self.b)]

    def forward(self, inputs, theta=None):
        """Evaluate every source; returns the list of all source states."""
        if len(inputs) != self.n_inputs:
            raise DimensionError(f"{self.name}: expected {self.n_inputs} inputs, got {len(inputs)}")
        for x in inputs:
            if x.shape[-1] != self.d:
                raise DimensionError(f"{self.name}: input width {x.shape[-1]} != {self.d}")
        states = list(inputs)
        projected = {}
        if self.choice is not None and theta is None:
            for k, (p, op) in enumerate(self.choice):
                states.append(tc.activation(op, _project(self, p, states, projected)))
            return states
        if theta is None:
            theta = self.theta()
        for k in range(self.n_nodes):
            states.append(node_state(self, self.n_inputs + k, states, theta, projected))
        return states

    def output(self, inputs, theta=None):
        states = self.forward(inputs, theta)
        return last_node(states[self.n_inputs:])


def _project(dag, j, states, cache):
    u = cache.get(j)
    if u is None:
        u = tc.matmul(states[j], dag.W[j])
        if dag.b:
            u = tc.add(u, dag.b[j])
        cache[j] = u
    return u


def node_state(dag, i, states, theta=None, projected=None):
    """State of source ``i``: sum over predecessors j and ops k of theta_k * o_k(s_j W_j)."""
    if theta is None:
        theta = dag.theta()
    if projected is None:
        projected = {}
    k = i - dag.n_inputs
    rows, stacks = [], []
    for j in dag.preds(k):
        if states[j].shape[-1] != dag.d:
            raise DimensionError(f"{dag.name}: state {j} has width {states[j].shape[-1]}, expected {dag.d}")
        stacked = projected.get(("stack", j))
        if stacked is None:
            stacked = projected[("stack", j)] = tc.candidate_stack(_project(dag, j, states, projected))
        rows.append(dag.edge_index[(i, j)])
        stacks.append(stacked)
    return tc.mixed_op(theta, rows, stacks)


def last_node(states):
    """Average of the given node states."""
    if len(states) < 1:
        raise ConfigurationError("last_node needs at least one preceding node")
    if len(states) == 1:
        return states[0]
    return tc.mean_n(states)


class GatedPair:
    """Two groups whose outputs combine by a Hadamard product."""

    def __init__(self, alpha=PASSTHROUGH, beta=ONE):
        self.alpha = alpha
        self.beta = beta


def _side(side, inputs):
    if side is PASSTHROUGH:
        if len(inputs) != 1:
            raise DimensionError("passthrough side takes exactly one input")
        return inputs[0]
    return side.output(inputs)


def gated_output(pair, alpha_inputs, beta_inputs):
    s_alpha = _side(pair.alpha, alpha_inputs)
    if pair.beta is ONE:
        return s_alpha
    s_beta = _side(pair.beta, beta_inputs)
    if s_alpha.shape[-1] != s_beta.shape[-1]:
        raise DimensionError(f"gate widths differ: {s_alpha.shape[-1]} vs {s_beta.shape[-1]}")
    return tc.mul(s_alpha, s_beta)


def uniform_init(dag):
    """Reset every edge weight to zero so each theta row is uniform."""
    dag.weights.data[...] = 0.0
    return dag


def count_architectures(n_nodes, n_inputs=1):
    """Number of discrete single-predecessor cells with derivable ops."""
    total = 1
    for k in range(n_nodes):
        total *= len(DERIVABLE_OPS) * (n_inputs + k)
    return total


def enumerate_architectures(n_nodes, n_inputs=1):
    """Yield every discrete choice list for an unpruned DAG."""
    def rec(k, prefix):
        if k == n_nodes:
            yield list(prefix)
            return
        for p in range(n_inputs + k):
            for op in DERIVABLE_OPS:
                prefix.append((p, op))
                yield from rec(k + 1, prefix)
                prefix.pop()

    yield from rec(0, [])
