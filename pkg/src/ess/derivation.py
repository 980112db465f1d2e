"""Discrete architectures: derivation, serialization, DOT export and retraining."""

import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .cell import EssCellSpec, EssModel
from .errors import ArchFileError, ConfigurationError, NumericError
from .lm import BatchStream, perplexity
from .searchspace import DERIVABLE_OPS, dag_preds

log = logging.getLogger(__name__)

ARCH_FORMAT = "ess-arch"
ARCH_VERSION = 1
_DROP = tc.ACTIVATIONS.index("drop")
SCHEDULES = ("cosine", "constant")


class DerivationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DerivedArch:
    """One (node, predecessor, op) triple per computed node of each DAG.

    Node and predecessor are source indices: inputs first, then nodes.
    """

    intra: tuple
    inter_f: tuple
    inter_g: tuple
    spec: EssCellSpec
    provenance: dict = field(default_factory=dict)


def derive_dag(theta, n_inputs, n_nodes, pruned=False, name="dag"):
    """Per node, the (pred, op) with the largest theta, drop excluded.

    ``theta`` has one probability row per edge in the DAG's edge order.
    Ties go to the smaller predecessor, then to the earlier op.
    """
    out = []
    row = 0
    for k in range(n_nodes):
        best = None
        all_drop = True
        for j in dag_preds(n_inputs, k, pruned):
            probs = theta[row]
            row += 1
            if probs[_DROP] <= np.delete(probs, _DROP).max():
                all_drop = False
            for op in DERIVABLE_OPS:
                score = probs[tc.ACTIVATIONS.index(op)]
                if best is None or score > best[0]:
                    best = (score, j, op)
        if all_drop:
            msg = f"{name}: node {n_inputs + k} puts most mass on drop; keeping best non-drop edge"
            warnings.warn(msg, DerivationWarning, stacklevel=3)
            log.warning(msg)
        out.append((n_inputs + k, best[1], best[2]))
    return tuple(out)


def _softmax_rows(w):
    z = w - w.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def derive(partition, spec, provenance=None):
    """Discretize learned edge weights into a :class:`DerivedArch`.

    ``partition.w_intra`` holds the intra weight tensor and
    ``partition.w_inter`` the two gate weight tensors (empty when the cell
    has no gates).
    """
    for w in partition.w_intra + partition.w_inter:
        if not np.all(np.isfinite(w.data)):
            raise NumericError("cannot derive from non-finite edge weights")
    if partition.w_intra:
        intra_theta = _softmax_rows(partition.w_intra[0].data)
    else:
        intra_theta = np.full((spec.n_intra * (spec.n_intra + 1) // 2, len(tc.ACTIVATIONS)), 0.2)
    intra = derive_dag(intra_theta, 1, spec.n_intra, name="intra")
    inter_f = inter_g = ()
    if spec.has_gates:
        f_w, g_w = partition.w_inter
        inter_f = derive_dag(_softmax_rows(f_w.data), spec.m, spec.n_inter, pruned=True, name="f_gate")
        inter_g = derive_dag(_softmax_rows(g_w.data), spec.m, spec.n_inter, pruned=True, name="g_gate")
    return DerivedArch(intra, inter_f, inter_g, spec, dict(provenance or {}))


# --- labels -----------------------------------------------------------------

def _label(source, n_inputs):
    return f"e{source + 1}" if source < n_inputs else f"s{source - n_inputs + 1}"


def _parse_label(text, n_inputs, n_nodes, where):
    m = re.fullmatch(r"([es])(\d+)", str(text))
    if not m:
        raise ArchFileError(where, f"bad node label {text!r}")
    kind, num = m.group(1), int(m.group(2))
    if kind == "e":
        if not 1 <= num <= n_inputs:
            raise ArchFileError(where, f"input {text!r} out of range (1..{n_inputs})")
        return num - 1
    if not 1 <= num <= n_nodes:
        raise ArchFileError(where, f"node {text!r} out of range (1..{n_nodes})")
    return n_inputs + num - 1


def _dag_shapes(spec):
    return {
        "intra": (1, spec.n_intra, False),
        "inter_f": (spec.m, spec.n_inter, True),
        "inter_g": (spec.m, spec.n_inter, True),
    }


# --- ArchFile -----------------------------------------------------------------

def arch_to_dict(arch):
    shapes = _dag_shapes(arch.spec)
    doc = {"format": ARCH_FORMAT, "version": ARCH_VERSION, "spec": arch.spec.to_dict()}
    for key in ("intra", "inter_f", "inter_g"):
        n_inputs = shapes[key][0]
        doc[key] = [
            {"node": _label(node, n_inputs), "pred": _label(pred, n_inputs), "op": op}
            for node, pred, op in getattr(arch, key)
        ]
    doc["provenance"] = dict(arch.provenance)
    return doc


def dumps_arch(arch):
    return json.dumps(arch_to_dict(arch), indent=2, sort_keys=True) + "\n"


def save_arch(arch, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_arch(arch))
    return path


def arch_from_dict(doc):
    if not isinstance(doc, dict):
        raise ArchFileError("$", "document must be a JSON object")
    if doc.get("format") != ARCH_FORMAT:
        raise ArchFileError("format", f"expected {ARCH_FORMAT!r}, got {doc.get('format')!r}")
    if doc.get("version") != ARCH_VERSION:
        raise ArchFileError("version", f"unsupported version {doc.get('version')!r} (expected {ARCH_VERSION})")
    try:
        spec = EssCellSpec.from_dict(doc["spec"])
    except KeyError as exc:
        raise ArchFileError(f"spec.{exc.args[0]}", "missing field") from None
    except (TypeError, ConfigurationError) as exc:
        raise ArchFileError("spec", str(exc)) from None
    shapes = _dag_shapes(spec)
    parsed = {}
    for key in ("intra", "inter_f", "inter_g"):
        entries = doc.get(key)
        if entries is None:
            raise ArchFileError(key, "missing section")
        if not isinstance(entries, list):
            raise ArchFileError(key, "section must be a list")
        n_inputs, n_nodes, pruned = shapes[key]
        if key != "intra" and not entries:
            parsed[key] = ()
            continue
        if len(entries) != n_nodes:
            raise ArchFileError(key, f"expected {n_nodes} entries, got {len(entries)}")
        triples = []
        for k, entry in enumerate(entries):
            where = f"{key}[{k}]"
            if not isinstance(entry, dict):
                raise ArchFileError(where, "entry must be an object")
            for f in ("node", "pred", "op"):
                if f not in entry:
                    raise ArchFileError(f"{where}.{f}", "missing field")
            node = _parse_label(entry["node"], n_inputs, n_nodes, f"{where}.node")
            pred = _parse_label(entry["pred"], n_inputs, n_nodes, f"{where}.pred")
            if node != n_inputs + k:
                raise ArchFileError(f"{where}.node", f"expected {_label(n_inputs + k, n_inputs)}, got {entry['node']!r}")
            if pred not in dag_preds(n_inputs, k, pruned):
                raise ArchFileError(f"{where}.pred", f"{entry['pred']!r} cannot feed {entry['node']!r}")
            if entry["op"] not in DERIVABLE_OPS:
                raise ArchFileError(f"{where}.op", f"unknown operation {entry['op']!r}; allowed {DERIVABLE_OPS}")
            triples.append((node, pred, entry["op"]))
        parsed[key] = tuple(triples)
    if bool(parsed["inter_f"]) != bool(parsed["inter_g"]):
        raise ArchFileError("inter_g" if parsed["inter_f"] else "inter_f", "gate sections must both be present or both empty")
    provenance = doc.get("provenance")
    if provenance is None:
        warnings.warn("architecture file has no provenance block", DerivationWarning, stacklevel=3)
        provenance = {}
    elif not isinstance(provenance, dict):
        raise ArchFileError("provenance", "must be an object")
    return DerivedArch(parsed["intra"], parsed["inter_f"], parsed["inter_g"], spec, provenance)


def loads_arch(text, source="<string>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchFileError(f"{source}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return arch_from_dict(doc)


def load_arch(path):
    with open(path, encoding="utf-8") as fh:
        return loads_arch(fh.read(), source=str(path))


# --- DOT ------------------------------------------------------------------------

_GATE_INPUTS = {"inter_f": "x[t-{}]", "inter_g": "h[t-{}]"}


def export_dot(arch):
    """Graph description of the derived cell, one cluster per DAG."""
    shapes = _dag_shapes(arch.spec)
    lines = ["digraph ess_cell {", "  rankdir=LR;"]
    for key, prefix, title in (("intra", "intra", "intra-cell"), ("inter_f", "f", "gate f"),
                               ("inter_g", "g", "gate g")):
        entries = getattr(arch, key)
        if not entries:
            continue
        n_inputs = shapes[key][0]
        lines.append(f"  subgraph cluster_{prefix} {{")
        lines.append(f'    label="{title}";')
        for i in range(n_inputs):
            text = "e1" if key == "intra" else _GATE_INPUTS[key].format(i + 1)
            lines.append(f'    {prefix}_e{i + 1} [shape=box, label="{text}"];')
        for node, _, _ in entries:
            name = _label(node, n_inputs)
            lines.append(f'    {prefix}_{name} [shape=ellipse, label="{name}"];')
        lines.append(f'    {prefix}_out [shape=doublecircle, label="avg"];')
        for node, pred, op in entries:
            lines.append(f'    {prefix}_{_label(pred, n_inputs)} -> {prefix}_{_label(node, n_inputs)} [label="{op}"];')
        for node, _, _ in entries:
            lines.append(f"    {prefix}_{_label(node, n_inputs)} -> {prefix}_out;")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


# --- retraining ---------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 600
    lr: float = 1e-2
    optimizer: str = "adam"
    clip: float = 1.0
    batch: int = 16
    bptt_len: int = 35
    eval_batch: int = 10
    schedule: str = "cosine"

    def __post_init__(self):
        for name in ("steps", "lr", "batch", "bptt_len", "eval_batch"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def lr_at(self, step):
        """Learning rate for 0-based ``step``; cosine decays from ``lr`` towards 0."""
        if self.schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / self.steps))


@dataclass
class RetrainReport:
    valid: object = None
    test: object = None
    train_loss: float = float("nan")
    steps_done: int = 0
    n_params: int = 0


def build_fixed_model(arch, vocab_size, rng=None, dtype=tc.DEFAULT_DTYPE, d=None):
    spec = arch.spec if d is None else replace(arch.spec, d=d)
    return EssModel(spec, vocab_size, rng=rng, dtype=dtype, arch=replace(arch, spec=spec))


def retrain(arch, corpus, config, rng=None, dtype=tc.DEFAULT_DTYPE, model=None):
    """Train a discrete model for ``arch`` from scratch and evaluate it.

    Returns ``(model, report)``; the report holds validation and, when the
    corpus has one, test perplexity.
    """
    from .cell import window_loss

    rng = rng if rng is not None else np.random.default_rng(0)
    if model is None:
        model = build_fixed_model(arch, len(corpus), rng=rng, dtype=dtype)
    report = RetrainReport(n_params=model.n_model_params())
    params = model.model_params()
    opt = tc.make_optimizer(config.optimizer, params, config.lr, clip=config.clip)
    stream = BatchStream(corpus.split("train"), config.batch, config.bptt_len, rng)
    history = None
    for step in range(config.steps):
        inputs, targets, reset = stream.next()
        if reset or history is None:
            history = model.initial_history(stream.batch)
        try:
            with tc.Tape() as tape:
                loss = window_loss(model, inputs, targets, history)
                grads = tape.backward(loss, params)
            opt.lr = config.lr_at(step)
            opt.step(grads)
        except NumericError as exc:
            raise NumericError(f"retraining diverged at step {step}: {exc}", trace=report) from exc
        history = history.detach()
        report.train_loss = loss.item()
        report.steps_done = step + 1
    report.valid = perplexity(model, corpus.split("valid"), "valid", config.bptt_len, config.eval_batch)
    if len(corpus.splits.get("test", ())) >= 2:
        report.test = perplexity(model, corpus.splits["test"], "test", config.bptt_len, config.eval_batch)
    return model, report
