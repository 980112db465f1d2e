"""Dense tensors with a reverse-mode differentiation tape.

Operations record themselves on the active :class:`Tape` (entered with
``with Tape() as tape:``) when at least one input requires a gradient.
Outside a tape nothing is recorded, which is how evaluation runs.
"""

import threading

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NumericError, TokenIndexError

DEFAULT_DTYPE = np.float64

# Order matters: edge-weight columns are laid out in this order everywhere.
ACTIVATIONS = ("drop", "identity", "sigmoid", "tanh", "relu")

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of operations; inputs of every record precede it."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss, params=None):
        """Propagate d(loss) back through the tape.

        Returns a dict mapping tensors to gradient arrays. Every tensor in
        ``params`` gets an entry (zeros when the loss does not reach it) and
        has its ``.grad`` attribute set.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        keep = {id(loss): loss}
        for out, inputs, fn in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    keep[key] = inp
        result = {keep[k]: v for k, v in grads.items()}
        if params is not None:
            for p in params:
                g = result.get(p)
                if g is None:
                    g = np.zeros_like(p.data)
                    result[p] = g
                p.grad = g
        return result


def backward(loss, params=None, tape=None):
    """Run :meth:`Tape.backward` on ``tape`` or the active tape."""
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise ContractError("backward() called with no tape; build the loss inside `with Tape():`")
    return tape.backward(loss, params)


def _record(out, inputs, fn):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c):
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def add_n(tensors):
    """Sum of equally shaped tensors as one tape record."""
    if not tensors:
        raise DimensionError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"add_n shape mismatch: {shape} vs {t.shape}")
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data += t.data
    out = Tensor(data)
    return _record(out, tuple(tensors), lambda g: tuple(g for _ in tensors))


def mean_n(tensors):
    """Elementwise mean of equally shaped tensors."""
    k = len(tensors)
    return scale(add_n(tensors), 1.0 / k)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _sigmoid(x):
    # tanh form never overflows.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def apply_activation(kind, x):
    """Forward value of a candidate activation on a raw array."""
    if kind == "identity":
        return x
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "drop":
        return np.zeros_like(x)
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(kind, x, y):
    """Derivative of activation ``kind`` given input ``x`` and output ``y``."""
    if kind == "identity":
        return np.ones_like(x)
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "drop":
        return np.zeros_like(x)
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation(kind, x):
    y = apply_activation(kind, x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * activation_grad(kind, x.data, y),))


def sigmoid(x):
    return activation("sigmoid", x)


def tanh(x):
    return activation("tanh", x)


def relu(x):
    return activation("relu", x)


def candidate_stack(u):
    """All candidate activations of ``u`` stacked on a new leading axis."""
    acts = [apply_activation(kind, u.data) for kind in ACTIVATIONS]
    out = Tensor(np.stack(acts))

    def fn(g):
        du = np.zeros_like(u.data)
        for k, kind in enumerate(ACTIVATIONS[1:], start=1):
            du += g[k] * activation_grad(kind, u.data, acts[k])
        return (du,)

    return _record(out, (u,), fn)


def mixed_op(theta, rows, stacks):
    """Mixed operation summed over incoming edges.

    Computes ``sum_e sum_k theta[rows[e], k] * stacks[e][k]`` where each
    stack comes from :func:`candidate_stack`. A single int row with a single
    stack is one edge.
    """
    if isinstance(rows, (int, np.integer)):
        rows, stacks = [rows], [stacks]
    shape = stacks[0].shape[1:]
    flat = [s.data.reshape(s.shape[0], -1) for s in stacks]
    weights = [theta.data[r] for r in rows]
    data = weights[0] @ flat[0]
    for w, f in zip(weights[1:], flat[1:]):
        data = data + w @ f
    out = Tensor(data.reshape(shape))

    def fn(g):
        gflat = g.reshape(-1)
        gtheta = np.zeros_like(theta.data)
        grads = []
        for r, w, f, s in zip(rows, weights, flat, stacks):
            gtheta[r] += f @ gflat
            grads.append(np.outer(w, gflat).reshape(s.shape))
        return (gtheta, *grads)

    return _record(out, (theta, *stacks), fn)


def softmax(x, axis=-1):
    """Softmax along ``axis`` with max subtraction."""
    if x.data.size == 0 or x.data.shape[axis] == 0:
        raise DimensionError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax_array(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood (nats) of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"logits {logits.shape} do not match {targets.shape[0]} targets")
    vocab = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        bad = targets[(targets < 0) | (targets >= vocab)][0]
        raise TokenIndexError(f"target id {bad} out of range for vocabulary of size {vocab}")
    logp = log_softmax_array(logits.data)
    n = targets.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    if not np.isfinite(loss):
        raise NumericError("cross-entropy produced a non-finite loss")
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def fn(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _record(out, (logits,), fn)


def total(x):
    """Sum of all elements as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    return _record(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def take_rows(table, ids):
    """Gather rows of ``table`` (an embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TokenIndexError(f"row index out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids])

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), fn)


def concat(tensors, axis=0):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def check_finite(grads):
    for p, g in grads.items():
        if not np.all(np.isfinite(g)):
            label = getattr(p, "name", None) or "parameter"
            raise NumericError(f"non-finite gradient for {label}")


def clip_grad_norm(grads, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in grads:
            grads[p] = grads[p] * factor
    return norm


def sgd_step(params, grads, lr):
    """In-place ``p -= lr * g`` for every parameter with a gradient."""
    check_finite({p: grads[p] for p in params if p in grads})
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p.data -= lr * g


def adam_step(params, grads, lr, state, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; ``state`` holds the step count and per-parameter moments."""
    check_finite({p: grads[p] for p in params if p in grads})
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    moments = state.setdefault("moments", {})
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m, v = moments.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        moments[id(p)] = (m, v)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class SGD:
    def __init__(self, params, lr, clip=None):
        self.params = list(params)
        self.lr = lr
        self.clip = clip

    def step(self, grads):
        grads = {p: grads[p] for p in self.params if p in grads}
        check_finite(grads)
        if self.clip is not None:
            clip_grad_norm(grads, self.clip)
        sgd_step(self.params, grads, self.lr)


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, clip=None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip = clip
        self.state = {}

    def step(self, grads):
        grads = {p: grads[p] for p in self.params if p in grads}
        check_finite(grads)
        if self.clip is not None:
            clip_grad_norm(grads, self.clip)
        adam_step(self.params, grads, self.lr, self.state, *self.betas, eps=self.eps)


def make_optimizer(kind, params, lr, clip=None):
    if kind == "sgd":
        return SGD(params, lr, clip=clip)
    if kind == "adam":
        return Adam(params, lr, clip=clip)
    raise ConfigurationError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")


def uniform_param(rng, shape, fan_in, dtype=DEFAULT_DTYPE, name=None):
    """Parameter drawn from U(-r, r) with r = 1/sqrt(fan_in)."""
    r = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-r, r, size=shape).astype(dtype), requires_grad=True, name=name)
