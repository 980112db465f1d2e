"""Corpora, batching, perplexity and per-word loss analysis."""

import csv
import io
import os
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import tensorcore as tc
from .cell import window_forward
from .errors import ConfigurationError, ContractError, CorpusEncodingError, DataError

UNK = "<unk>"
EOS = "<eos>"
SPLITS = ("train", "valid", "test")


@dataclass
class Corpus:
    vocab: list
    splits: dict
    name: str = ""
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.vocab)}

    def __len__(self):
        return len(self.vocab)

    @property
    def unk_id(self):
        return 0

    @property
    def eos_id(self):
        return 1

    def counts(self, split):
        return np.bincount(self.splits[split], minlength=len(self.vocab))

    def split(self, name):
        ids = self.splits.get(name)
        if ids is None or len(ids) == 0:
            raise DataError(f"split {name!r} of corpus {self.name!r} is empty")
        return ids

    def encode(self, tokens):
        return np.array([self.index.get(t, 0) for t in tokens], dtype=np.int64)


def bundled_corpus_path():
    """Directory of the small character-level corpus shipped with the package."""
    return str(resources.files("ess") / "data" / "toychar")


def _read_lines(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = []
    for n, line in enumerate(raw.split(b"\n"), start=1):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusEncodingError(path, n, exc.reason) from None
        tokens = text.split()
        if tokens:
            lines.append(tokens)
    return lines


def _tokenize(lines):
    out = []
    for tokens in lines:
        out.extend(tokens)
        out.append(EOS)
    return out


def load_corpus(path, vocab_limit=None, valid_path=None, test_path=None):
    """Load whitespace-tokenised text, one sentence per line.

    ``path`` is either a directory holding ``train.txt``/``valid.txt``/
    ``test.txt`` or a single training file, with optional separate
    validation and test files. The vocabulary comes from the training split,
    ordered by frequency then token; ``vocab_limit`` caps its total size
    including the reserved ``<unk>`` and ``<eos>`` entries.
    """
    if os.path.isdir(path):
        paths = {s: os.path.join(path, f"{s}.txt") for s in SPLITS}
        paths = {s: p for s, p in paths.items() if os.path.exists(p)}
        if "train" not in paths:
            raise DataError(f"{path}: directory has no train.txt")
    else:
        paths = {"train": path}
        if valid_path:
            paths["valid"] = valid_path
        if test_path:
            paths["test"] = test_path
    tokens = {s: _tokenize(_read_lines(p)) for s, p in paths.items()}
    if not tokens["train"]:
        raise DataError(f"{paths['train']}: no tokens in training file")

    freq = Counter(t for t in tokens["train"] if t not in (UNK, EOS))
    ordered = sorted(freq, key=lambda t: (-freq[t], t))
    if vocab_limit is not None:
        ordered = ordered[: max(0, int(vocab_limit) - 2)]
    vocab = [UNK, EOS] + ordered
    corpus = Corpus(vocab=vocab, splits={}, name=os.path.basename(os.path.normpath(path)))
    corpus.splits = {s: corpus.encode(tokens.get(s, [])) for s in SPLITS}
    return corpus


def batchify(ids, batch):
    """Cut a token stream into ``batch`` contiguous columns, shape (steps, batch)."""
    ids = np.asarray(ids, dtype=np.int64)
    batch = max(1, min(batch, len(ids) // 2))
    steps = len(ids) // batch
    if steps < 2:
        raise DataError(f"stream of {len(ids)} tokens is too short to batch")
    return ids[: steps * batch].reshape(batch, steps).T.copy()


class BatchStream:
    """Endless sequence of (inputs, targets) windows over one split.

    Each pass starts at a random offset below ``bptt_len`` drawn from
    ``rng``; ``reset`` is true on the first window of every pass.
    """

    def __init__(self, ids, batch, bptt_len, rng=None):
        if bptt_len < 1:
            raise ConfigurationError(f"bptt_len must be >= 1, got {bptt_len}")
        if len(ids) == 0:
            raise ConfigurationError("cannot stream an empty split")
        self.data = batchify(ids, batch)
        self.bptt_len = bptt_len
        self.rng = rng
        self.pos = None

    @property
    def batch(self):
        return self.data.shape[1]

    def next(self):
        reset = False
        if self.pos is None or self.pos >= self.data.shape[0] - 1:
            offset = 0
            if self.rng is not None:
                offset = int(self.rng.integers(0, min(self.bptt_len, self.data.shape[0] - 1)))
            self.pos = offset
            reset = True
        stop = min(self.pos + self.bptt_len, self.data.shape[0] - 1)
        inputs = self.data[self.pos:stop]
        targets = self.data[self.pos + 1: stop + 1]
        self.pos = stop
        return inputs, targets, reset


def iter_windows(ids, bptt_len, batch):
    data = batchify(ids, batch)
    for start in range(0, data.shape[0] - 1, bptt_len):
        stop = min(start + bptt_len, data.shape[0] - 1)
        yield data[start:stop], data[start + 1: stop + 1]


@dataclass
class EvalReport:
    split: str
    loss: float
    perplexity: float
    tokens: int


def perplexity(model, ids, split="valid", bptt_len=35, eval_batch=10):
    """exp(mean NLL per token), carrying hidden state across the whole split."""
    if ids is None or len(ids) < 2:
        raise DataError(f"split {split!r} has too few tokens to evaluate")
    history = None
    total, count = 0.0, 0
    for inputs, targets in iter_windows(ids, bptt_len, eval_batch):
        if history is None:
            history = model.initial_history(inputs.shape[1])
        logits, _ = window_forward(model, inputs, history)
        total += tc.cross_entropy(logits, targets.reshape(-1)).item() * targets.size
        count += targets.size
        history = history.detach()
    loss = total / count
    return EvalReport(split=split, loss=loss, perplexity=float(np.exp(loss)), tokens=count)


def token_losses(model, ids, bptt_len=35, eval_batch=10):
    """Per-token NLL in evaluation order; returns (targets, losses) arrays."""
    if ids is None or len(ids) < 2:
        raise DataError("split has too few tokens to evaluate")
    history = None
    all_targets, all_losses = [], []
    for inputs, targets in iter_windows(ids, bptt_len, eval_batch):
        if history is None:
            history = model.initial_history(inputs.shape[1])
        logits, _ = window_forward(model, inputs, history)
        flat = targets.reshape(-1)
        logp = tc.log_softmax_array(logits.data)
        all_targets.append(flat)
        all_losses.append(-logp[np.arange(flat.size), flat])
        history = history.detach()
    return np.concatenate(all_targets), np.concatenate(all_losses)


@dataclass
class WordLossDelta:
    word: str
    count: int
    delta: float


@dataclass
class DeltaTable:
    rows: list
    most_improved: list
    most_frequent: list
    total_a: float
    total_b: float
    split: str = "valid"

    def to_tsv(self):
        buf = io.StringIO()
        buf.write(f"# split={self.split} units=nats delta=loss_b-loss_a per occurrence\n")
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(["word", "count", "delta"])
        for r in self.rows:
            writer.writerow([r.word, r.count, repr(float(r.delta))])
        return buf.getvalue()


def word_loss_delta(model_a, model_b, corpus, split="valid", k=10, bptt_len=35, eval_batch=10):
    """Per-word mean loss difference (B minus A) over one split."""
    if model_a.vocab_size != model_b.vocab_size or model_a.vocab_size != len(corpus):
        raise ContractError(
            f"vocabulary mismatch: model_a={model_a.vocab_size}, model_b={model_b.vocab_size}, corpus={len(corpus)}"
        )
    ids = corpus.split(split)
    targets, loss_a = token_losses(model_a, ids, bptt_len, eval_batch)
    targets_b, loss_b = token_losses(model_b, ids, bptt_len, eval_batch)
    assert np.array_equal(targets, targets_b)
    counts = np.bincount(targets, minlength=len(corpus))
    diff = np.bincount(targets, weights=loss_b - loss_a, minlength=len(corpus))
    rows = [
        WordLossDelta(corpus.vocab[w], int(counts[w]), float(diff[w] / counts[w]))
        for w in np.flatnonzero(counts)
    ]
    rows.sort(key=lambda r: (r.delta, r.word))
    most_frequent = sorted(rows, key=lambda r: (-r.count, r.word))[:k]
    return DeltaTable(rows, rows[:k], most_frequent, float(loss_a.sum()), float(loss_b.sum()), split)


def count_parameters(spec, vocab_size):
    """Model-parameter count of a relaxed model, computed from the layout alone."""
    d = spec.d
    linear = 2 + spec.n_intra  # W_h, W_x and one map per intra source feeding a node
    biases = 0
    if spec.has_gates:
        per_gate = spec.m + (spec.n_inter - 1 if spec.n_inter > spec.m else 0)
        linear += 2 * per_gate
        biases = 2 * per_gate * d
    return vocab_size * d + linear * d * d + biases + d * vocab_size + vocab_size


def solve_width(spec, vocab_size, budget, min_width=4):
    """Hidden width whose parameter count is closest to ``budget``."""
    from dataclasses import replace

    best = None
    d = 1
    while True:
        n = count_parameters(replace(spec, d=d), vocab_size)
        if best is None or abs(n - budget) < abs(best[1] - budget):
            best = (d, n)
        if n > budget:
            break
        d += 1
    if best[0] < min_width:
        raise ConfigurationError(f"budget {budget} gives width {best[0]} < {min_width}")
    return best[0]


@dataclass
class SweepRow:
    n_intra: int
    n_inter: int
    d: int
    params: int
    valid_ppl: float


SWEEP_COLUMNS = ("n_intra", "n_inter", "d", "params", "valid_ppl")


@dataclass
class SweepTable:
    rows: list
    budget: int

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            writer.writerow([r.n_intra, r.n_inter, r.d, r.params, repr(float(r.valid_ppl))])
        return buf.getvalue()


def _sweep_threads(threads, n):
    if threads is None:
        raw = os.environ.get("ESS_THREADS", "")
        threads = int(raw) if raw.strip() else 1
    return max(1, min(int(threads), n))


def sweep_nodes(configs, budget, corpus, spec, search_config, train_config, seed=0,
                dtype=np.float64, threads=None):
    """Search and retrain once per ``(n_intra, n_inter)`` under a shared parameter budget.

    The hidden width of every configuration is solved so that its model
    parameter count is as close to ``budget`` as possible. Runs are
    independent and fan out over ``threads`` workers (``ESS_THREADS`` when
    not given); rows come back in the order of ``configs``.
    """
    from concurrent.futures import ThreadPoolExecutor
    from dataclasses import replace

    from .pipeline import run_retrain, run_search

    configs = [(int(a), int(b)) for a, b in configs]
    if not configs:
        raise ConfigurationError("sweep needs at least one (n_intra, n_inter) config")
    plans = []
    for n_intra, n_inter in configs:
        sized = replace(spec, n_intra=n_intra, n_inter=n_inter)
        d = solve_width(sized, len(corpus), budget)
        plans.append(replace(sized, d=d))

    def run(cell):
        _, _, arch = run_search(corpus, cell, search_config, seed=seed, dtype=dtype)
        model, report = run_retrain(arch, corpus, train_config, seed=seed, dtype=dtype)
        return SweepRow(cell.n_intra, cell.n_inter, cell.d, count_parameters(cell, len(corpus)),
                        report.valid.perplexity)

    workers = _sweep_threads(threads, len(plans))
    if workers == 1:
        rows = [run(p) for p in plans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, plans))
    return SweepTable(rows, int(budget))
