"""``ess`` command line: search, retrain, eval, analyze, sweep and export-dot.

Every stage reads and writes fixed file names under ``--out``. Errors end
the process with a nonzero status and a one-line cause on stderr.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings

from . import __version__
from ._validation import check_corpus
from .checkpoint import load_model, read_meta, save_model
from .cell import MODES, EssModel
from .config import PRECISIONS, load_run_config
from .derivation import dumps_arch, export_dot, load_arch
from .errors import ContractError, EssError
from .lm import count_parameters, perplexity, sweep_nodes, word_loss_delta
from .pipeline import run_retrain, run_search, substream

log = logging.getLogger("ess")

TRACE = "trace.csv"
ARCH = "arch.json"
SEARCH_CKPT = "checkpoint.npz"
MODEL_CKPT = "model.npz"
DOT = "cell.dot"
REPORT = "report.csv"
DELTA = "delta.tsv"
SWEEP = "sweep.csv"
REPORT_COLUMNS = ("stage", "split", "loss", "perplexity", "tokens", "params")


class _Fail(Exception):
    pass


def _resolve(args):
    overrides = {"seed": args.seed, "mode": args.mode, "rounds": args.rounds, "out": args.out,
                 "precision": args.precision}
    cfg = load_run_config(args.config, **overrides)
    if cfg.corpus and args.config and not os.path.isabs(cfg.corpus):
        near = os.path.join(os.path.dirname(os.path.abspath(args.config)), cfg.corpus)
        if os.path.exists(near):
            cfg = cfg.with_overrides(corpus=near)
    os.makedirs(cfg.out, exist_ok=True)
    return cfg


def _path(cfg, name):
    return os.path.join(cfg.out, name)


def _require(path, what):
    if not os.path.exists(path):
        raise _Fail(f"missing {what}: {path}")
    return path


def _write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
    log.info("wrote %s", path)


def _corpus(cfg):
    return check_corpus(cfg.corpus or None, cfg.vocab_limit or None)


def _check_pair(arch, meta, arch_path, ckpt_path):
    a = arch.provenance.get("digest")
    b = meta.get("digest")
    if a and b and a != b:
        raise ContractError(f"config digest mismatch: {arch_path} has {a}, {ckpt_path} has {b}")


def _update_report(cfg, stage, reports, params):
    path = _path(cfg, REPORT)
    rows = {}
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            body = [line for line in fh if not line.startswith("#")]
        for row in csv.DictReader(body):
            rows[(row["stage"], row["split"])] = row
    for r in reports:
        rows[(stage, r.split)] = {"stage": stage, "split": r.split, "loss": repr(r.loss),
                                  "perplexity": repr(r.perplexity), "tokens": r.tokens, "params": params}
    buf = io.StringIO()
    buf.write(f"# digest={cfg.digest()}\n")
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for key in sorted(rows):
        writer.writerow(rows[key])
    _write(path, buf.getvalue())


def cmd_search(args):
    cfg = _resolve(args)
    corpus = _corpus(cfg)
    model, result, arch = run_search(corpus, cfg.cell_spec(), cfg.search_config(), seed=cfg.seed,
                                     dtype=cfg.dtype, provenance={"digest": cfg.digest()})
    _write(_path(cfg, TRACE), f"# digest={cfg.digest()}\n" + result.trace.to_csv())
    save_model(model, _path(cfg, SEARCH_CKPT), digest=cfg.digest())
    _write(_path(cfg, ARCH), dumps_arch(arch))
    last = result.trace[-1]
    print(f"steps={len(result.trace)} valid_ppl={last.valid_ppl:.4f} "
          f"mad_intra={last.mad_intra:.4f} mad_inter={last.mad_inter:.4f}")
    return 0


def cmd_retrain(args):
    cfg = _resolve(args)
    arch_path = _require(args.arch or _path(cfg, ARCH), "architecture file")
    arch = load_arch(arch_path)
    search_ckpt = os.path.join(os.path.dirname(arch_path), SEARCH_CKPT)
    if os.path.exists(search_ckpt):
        _check_pair(arch, read_meta(search_ckpt), arch_path, search_ckpt)
    corpus = _corpus(cfg)
    model, report = run_retrain(arch, corpus, cfg.train_config(), seed=cfg.seed, dtype=cfg.dtype)
    digest = arch.provenance.get("digest", "")
    save_model(model, _path(cfg, MODEL_CKPT), digest=digest, extra={"run_digest": cfg.digest()})
    reports = [r for r in (report.valid, report.test) if r is not None]
    _update_report(cfg, "retrain", reports, report.n_params)
    print(f"ppl={report.valid.perplexity!r}")
    return 0


def _load_checked(path):
    model, meta = load_model(_require(path, "checkpoint"))
    arch_path = os.path.join(os.path.dirname(path), ARCH)
    if os.path.exists(arch_path):
        _check_pair(load_arch(arch_path), meta, arch_path, path)
    return model


def cmd_eval(args):
    cfg = _resolve(args)
    corpus = _corpus(cfg)
    if args.fresh:
        model = EssModel(cfg.cell_spec(), len(corpus), rng=substream(cfg.seed, "init"), dtype=cfg.dtype)
    else:
        model = _load_checked(args.checkpoint or _path(cfg, MODEL_CKPT))
        if model.vocab_size != len(corpus):
            raise ContractError(f"checkpoint vocabulary {model.vocab_size} != corpus vocabulary {len(corpus)}")
    report = perplexity(model, corpus.split(args.split), args.split, cfg.bptt_len, cfg.eval_batch)
    _update_report(cfg, "eval", [report], model.n_model_params())
    print(f"loss={report.loss!r} tokens={report.tokens}")
    print(f"ppl={report.perplexity!r}")
    return 0


def cmd_analyze(args):
    cfg = _resolve(args)
    corpus = _corpus(cfg)
    model_a = _load_checked(args.model_a or _path(cfg, MODEL_CKPT))
    model_b = _load_checked(args.model_b or _path(cfg, MODEL_CKPT))
    table = word_loss_delta(model_a, model_b, corpus, split=args.split, k=args.k,
                            bptt_len=cfg.bptt_len, eval_batch=cfg.eval_batch)
    _write(_path(cfg, DELTA), f"# digest={cfg.digest()}\n" + table.to_tsv())
    print(f"words={len(table.rows)} total_delta={table.total_b - table.total_a!r}")
    return 0


def cmd_sweep(args):
    cfg = _resolve(args)
    if args.configs:
        cfg = cfg.with_overrides(sweep=args.configs)
    if args.budget:
        cfg = cfg.with_overrides(budget=args.budget)
    corpus = _corpus(cfg)
    spec = cfg.cell_spec()
    budget = cfg.budget or count_parameters(spec, len(corpus))
    table = sweep_nodes(cfg.sweep_configs(), budget, corpus, spec, cfg.search_config(),
                        cfg.train_config(), seed=cfg.seed, dtype=cfg.dtype)
    _write(_path(cfg, SWEEP), f"# digest={cfg.digest()} budget={budget}\n" + table.to_csv())
    for r in table.rows:
        print(f"{r.n_intra}:{r.n_inter} d={r.d} params={r.params} valid_ppl={r.valid_ppl:.4f}")
    return 0


def cmd_export_dot(args):
    cfg = _resolve(args)
    arch = load_arch(_require(args.arch or _path(cfg, ARCH), "architecture file"))
    digest = arch.provenance.get("digest", "")
    _write(_path(cfg, DOT), f"// digest={digest}\n" + export_dot(arch))
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--rounds", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=sorted(PRECISIONS))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ess", description="Joint intra/inter-cell recurrent architecture search.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", parents=[common], help="search and derive a cell")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("retrain", parents=[common], help="train the derived cell from scratch")
    p.add_argument("--arch", help=f"architecture file (default: OUT/{ARCH})")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", parents=[common], help="perplexity of a checkpoint on one split")
    p.add_argument("--checkpoint", help=f"model checkpoint (default: OUT/{MODEL_CKPT})")
    p.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    p.add_argument("--fresh", action="store_true", help="evaluate an untrained model instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="per-word loss difference of two models")
    p.add_argument("--model-a", help=f"reference checkpoint (default: OUT/{MODEL_CKPT})")
    p.add_argument("--model-b", help=f"compared checkpoint (default: OUT/{MODEL_CKPT})")
    p.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    p.add_argument("-k", type=int, default=10, help="rows in the most-improved/most-frequent lists")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", parents=[common], help="node-count sweep under a parameter budget")
    p.add_argument("--configs", help="comma list of n_intra:n_inter")
    p.add_argument("--budget", type=int, help="parameter budget (default: count of the base cell)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-dot", parents=[common], help="write the derived cell as DOT")
    p.add_argument("--arch", help=f"architecture file (default: OUT/{ARCH})")
    p.set_defaults(func=cmd_export_dot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (_Fail, EssError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ess {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
