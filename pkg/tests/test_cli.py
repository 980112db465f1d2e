import json
import shutil

import numpy as np
import pydot
import pytest

from ess.cli import main

pytestmark = pytest.mark.filterwarnings("ignore::ess.derivation.DerivationWarning")

TOY = """\
corpus = corpus
d = 6
n_intra = 2
m = 1
n_inter = 2
rounds = 1
batch = 4
bptt_len = 6
max_inner_steps = 3
retrain_steps = 4
eval_batch = 2
sweep = 2:2,3:2
"""


@pytest.fixture
def toy(tmp_path):
    root = tmp_path / "corpus"
    root.mkdir()
    rng = np.random.default_rng(0)
    for name in ("train", "valid", "test"):
        lines = [" ".join(rng.choice(list("abcdefg"), size=6)) for _ in range(40)]
        (root / f"{name}.txt").write_text("\n".join(lines) + "\n")
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TOY)
    return tmp_path, str(cfg)


def run(cfg, out, *args):
    return main([*args, "--config", cfg, "--out", str(out)])


def test_search_writes_three_artifacts(toy):
    tmp, cfg = toy
    assert run(cfg, tmp / "o", "search") == 0
    for name in ("trace.csv", "checkpoint.npz", "arch.json"):
        assert (tmp / "o" / name).stat().st_size > 0
    doc = json.loads((tmp / "o" / "arch.json").read_text())
    assert len(doc["intra"]) == 2 and len(doc["inter_f"]) == 2


def test_intra_only_search_has_empty_inter_sections(toy):
    tmp, cfg = toy
    assert run(cfg, tmp / "o", "search", "--mode", "intra_only") == 0
    doc = json.loads((tmp / "o" / "arch.json").read_text())
    assert doc["inter_f"] == [] and doc["inter_g"] == []


def test_same_seed_gives_identical_arch_file(toy):
    tmp, cfg = toy
    assert run(cfg, tmp / "a", "search", "--seed", "5") == 0
    assert run(cfg, tmp / "b", "search", "--seed", "5") == 0
    assert (tmp / "a" / "arch.json").read_bytes() == (tmp / "b" / "arch.json").read_bytes()


def test_full_pipeline_and_reports(toy, capsys):
    tmp, cfg = toy
    out = tmp / "o"
    assert run(cfg, out, "search") == 0
    assert run(cfg, out, "retrain") == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("ppl=")
    assert run(cfg, out, "eval", "--split", "test") == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert float(last.split("=", 1)[1]) > 1.0
    report = [line for line in (out / "report.csv").read_text().splitlines() if not line.startswith("#")]
    assert report[0] == "stage,split,loss,perplexity,tokens,params"
    assert {tuple(r.split(",")[:2]) for r in report[1:]} == {("eval", "test"), ("retrain", "test"),
                                                              ("retrain", "valid")}
    assert run(cfg, out, "analyze") == 0
    assert "total_delta=0.0" in capsys.readouterr().out
    rows = (out / "delta.tsv").read_text().splitlines()
    assert all(float(r.split("\t")[2]) == 0.0 for r in rows[3:] if r and not r.startswith("#"))
    assert run(cfg, out, "export-dot") == 0
    graphs = pydot.graph_from_dot_data((out / "cell.dot").read_text())
    assert sum(len(s.get_edges()) for s in graphs[0].get_subgraphs()) > 0


def test_eval_fresh_model_prints_vocab_size(toy, capsys):
    tmp, cfg = toy
    assert run(cfg, tmp / "o", "eval", "--fresh") == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert abs(float(last.split("=", 1)[1]) - 9) < 1e-9


def test_sweep_writes_rows_in_order(toy):
    tmp, cfg = toy
    assert run(cfg, tmp / "o", "sweep", "--configs", "3:2,2:2") == 0
    lines = [line for line in (tmp / "o" / "sweep.csv").read_text().splitlines() if not line.startswith("#")]
    assert [line.split(",")[:2] for line in lines[1:]] == [["3", "2"], ["2", "2"]]


def test_digest_mismatch_is_detected(toy, capsys):
    tmp, cfg = toy
    assert run(cfg, tmp / "a", "search", "--seed", "1") == 0
    assert run(cfg, tmp / "b", "search", "--seed", "2") == 0
    shutil.copy(tmp / "b" / "arch.json", tmp / "a" / "arch.json")
    assert run(cfg, tmp / "a", "retrain", "--seed", "1") == 1
    assert "digest mismatch" in capsys.readouterr().err


def test_missing_artifact_names_path(toy, capsys):
    tmp, cfg = toy
    assert run(cfg, tmp / "empty", "retrain") == 1
    err = capsys.readouterr().err
    assert err.startswith("ess retrain: error:") and str(tmp / "empty" / "arch.json") in err
    assert run(cfg, tmp / "empty", "eval") == 1
    assert "model.npz" in capsys.readouterr().err


def test_bad_config_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("mode = both\n")
    assert main(["search", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "mode" in capsys.readouterr().err
