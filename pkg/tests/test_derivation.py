import json
import warnings

import numpy as np
import pydot
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ess import tensorcore as tc
from ess.cell import EssCellSpec, EssModel, window_forward
from ess.derivation import (DerivationWarning, DerivedArch, TrainConfig, arch_from_dict, arch_to_dict,
                            build_fixed_model, derive, derive_dag, dumps_arch, export_dot, load_arch,
                            loads_arch, retrain, save_arch)
from ess.errors import ArchFileError, ConfigurationError, NumericError
from ess.lm import load_corpus
from ess.search import ParamPartition

from oracles import ALL_OPS, OPS, brute_force_derive, np_softmax, preds, random_arch


def relaxed(mode="joint", d=3, n_intra=3, m=2, n_inter=3, seed=0):
    return EssModel(EssCellSpec(d=d, n_intra=n_intra, m=m, n_inter=n_inter, mode=mode), 5,
                    rng=np.random.default_rng(seed))


def test_all_tanh_chain():
    model = relaxed()
    w = model.intra.weights.data
    for r, (i, j) in enumerate(model.intra.edges):
        if j == 0:
            w[r, ALL_OPS.index("tanh")] = 5.0
    arch = derive(ParamPartition.of(model), model.spec)
    assert arch.intra == ((1, 0, "tanh"), (2, 0, "tanh"), (3, 0, "tanh"))


def test_uniform_weights_tie_break_to_first_pred_identity():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        arch = derive(ParamPartition.of(relaxed()), relaxed().spec)
    assert all(pred == 0 for _, pred, _ in arch.intra)
    assert all(op == "identity" for _, _, op in arch.intra + arch.inter_f + arch.inter_g)
    assert [p for _, p, _ in arch.inter_f] == [0, 1, 2]


def test_tie_break_prefers_smaller_pred_then_op_order():
    theta = np.full((3, 5), 0.1)
    theta[1, ALL_OPS.index("relu")] = 0.3  # node 2 from pred 0... row order: (1,0), (2,0), (2,1)
    theta[2, ALL_OPS.index("sigmoid")] = 0.3
    out = derive_dag(theta, 1, 2)
    assert out[1] == (2, 0, "relu")


def test_all_drop_node_warns_and_keeps_best_non_drop():
    theta = np.tile([0.6, 0.05, 0.2, 0.1, 0.05], (3, 1))
    with pytest.warns(DerivationWarning):
        out = derive_dag(theta, 1, 2)
    assert out == ((1, 0, "sigmoid"), (2, 0, "sigmoid"))


def test_non_finite_weights_rejected():
    model = relaxed()
    model.intra.weights.data[0, 0] = np.nan
    with pytest.raises(NumericError):
        derive(ParamPartition.of(model), model.spec)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_derive_matches_brute_force_property(seed):
    rng = np.random.default_rng(seed)
    n_inputs, n_nodes = 1, 3
    edges = [(n_inputs + k, j) for k in range(n_nodes) for j in preds(n_inputs, k, False)]
    w = rng.normal(0, 2, size=(len(edges), 5))
    theta = np_softmax(w)
    expected, count = brute_force_derive(dict(zip(edges, theta)), n_inputs, n_nodes)
    assert count == 384
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DerivationWarning)
        assert list(derive_dag(theta, n_inputs, n_nodes)) == expected


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-100, 100))
def test_derive_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    model = relaxed(seed=seed % 1000)
    for w in model.intra_weights() + model.inter_weights():
        w.data[...] = rng.normal(0, 2, w.shape)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DerivationWarning)
        a = derive(ParamPartition.of(model), model.spec)
        for w in model.intra_weights() + model.inter_weights():
            w.data += c
        b = derive(ParamPartition.of(model), model.spec)
    assert a == b


@pytest.mark.parametrize("mode", ["intra_only", "joint"])
def test_fixed_model_equals_relaxed_with_one_hot_theta(mode):
    rng = np.random.default_rng(3)
    model = relaxed(mode=mode, d=4, seed=3)
    for w in model.intra_weights() + model.inter_weights():
        w.data[...] = rng.normal(0, 2, w.shape)
    for p in model.model_params():
        p.data[...] = rng.normal(0, 0.7, p.shape)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DerivationWarning)
        arch = derive(ParamPartition.of(model), model.spec)
    fixed = build_fixed_model(arch, 5)
    fixed_params = {p.name: p for p in fixed.model_params()}
    for p in model.model_params():
        if p.name in fixed_params:
            fixed_params[p.name].data[...] = p.data

    def one_hot(dag, triples):
        theta = np.zeros((len(dag.edges), 5))
        theta[:, 0] = 1.0
        for node, pred, op in triples:
            r = dag.edge_index[(node, pred)]
            theta[r] = 0.0
            theta[r, ALL_OPS.index(op)] = 1.0
        return tc.Tensor(theta)

    thetas = {"intra": one_hot(model.intra, arch.intra)}
    if model.has_gates:
        thetas["f_gate"] = one_hot(model.f_gate, arch.inter_f)
        thetas["g_gate"] = one_hot(model.g_gate, arch.inter_g)
    tokens = rng.integers(0, 5, size=(5, 2))
    a, _ = window_forward(model, tokens, model.initial_history(2), thetas)
    b, _ = window_forward(fixed, tokens, fixed.initial_history(2))
    np.testing.assert_allclose(a.data, b.data, atol=1e-10, rtol=0)
    assert fixed.n_model_params() < model.n_model_params()


def test_archfile_round_trip_random(tmp_path):
    rng = np.random.default_rng(4)
    for i in range(25):
        arch = random_arch(rng)
        path = tmp_path / f"a{i}.json"
        save_arch(arch, path)
        assert load_arch(path) == arch
        assert path.read_text() == dumps_arch(load_arch(path))


def test_archfile_is_versioned_json():
    arch = random_arch(np.random.default_rng(5), mode="joint")
    doc = json.loads(dumps_arch(arch))
    assert doc["format"] == "ess-arch" and doc["version"] == 1
    assert doc["intra"][0]["node"] == "s1" and doc["intra"][0]["pred"] == "e1"


def test_tampered_op_names_field():
    doc = arch_to_dict(random_arch(np.random.default_rng(6), mode="joint"))
    doc["intra"][1]["op"] = "swish"
    with pytest.raises(ArchFileError) as info:
        arch_from_dict(doc)
    assert info.value.field == "intra[1].op"
    assert "swish" in str(info.value)


def test_version_and_malformed_documents_rejected():
    doc = arch_to_dict(random_arch(np.random.default_rng(7)))
    with pytest.raises(ArchFileError, match="version"):
        arch_from_dict(dict(doc, version=2))
    with pytest.raises(ArchFileError) as info:
        loads_arch('{"format": "ess-arch",\n "version": 1,,}')
    assert ":2:" in info.value.field
    bad = json.loads(json.dumps(doc))
    bad["intra"][0]["pred"] = "s1"
    with pytest.raises(ArchFileError, match=r"intra\[0\].pred"):
        arch_from_dict(bad)


def test_missing_provenance_loads_with_warning():
    doc = arch_to_dict(random_arch(np.random.default_rng(8)))
    del doc["provenance"]
    with pytest.warns(DerivationWarning):
        arch = arch_from_dict(doc)
    assert arch.provenance == {}


def chain_arch(n=2, d=4, mode="vanilla"):
    spec = EssCellSpec(d=d, n_intra=n, mode=mode)
    return DerivedArch(tuple((k + 1, k, "identity") for k in range(n)), (), (), spec, {})


def test_dot_two_node_chain_structure():
    text = export_dot(chain_arch(2))
    op_edges = [line for line in text.splitlines() if "->" in line and "label=" in line]
    out_edges = [line for line in text.splitlines() if "->" in line and "_out" in line]
    assert len(op_edges) == 2
    assert len(out_edges) == 2


def test_dot_parses_and_recovers_edges():
    arch = random_arch(np.random.default_rng(9), mode="joint")
    text = export_dot(arch)
    (graph,) = pydot.graph_from_dot_data(text)
    edges = []
    for sub in graph.get_subgraphs():
        for e in sub.get_edges():
            label = e.get_label()
            if label:
                edges.append((sub.get_name(), e.get_source(), e.get_destination(), label.strip('"')))
    expected = []
    for key, prefix, n_inputs in (("intra", "intra", 1), ("inter_f", "f", arch.spec.m), ("inter_g", "g", arch.spec.m)):
        def lab(s):
            return f"{prefix}_e{s + 1}" if s < n_inputs else f"{prefix}_s{s - n_inputs + 1}"
        for node, pred, op in getattr(arch, key):
            expected.append((f"cluster_{prefix}", lab(pred), lab(node), op))
    assert edges == expected


def test_dot_is_deterministic():
    a = random_arch(np.random.default_rng(10))
    b = random_arch(np.random.default_rng(10))
    assert export_dot(a) == export_dot(b)


def write_corpus(root, train, valid=None, test=None):
    root.mkdir(parents=True, exist_ok=True)
    for name, text in (("train", train), ("valid", valid or train), ("test", test or valid or train)):
        (root / f"{name}.txt").write_text(text)
    return load_corpus(str(root))


def test_retrain_identity_chain_on_constant_corpus(tmp_path):
    corpus = write_corpus(tmp_path / "const", " ".join(["a"] * 2000) + "\n", " ".join(["a"] * 400) + "\n")
    arch = chain_arch(2, d=8)
    cfg = TrainConfig(steps=150, batch=4, bptt_len=20, eval_batch=2)
    _, report = retrain(arch, corpus, cfg, rng=np.random.default_rng(0))
    assert report.valid.perplexity < 1.05
    assert report.steps_done == 150


def test_retrain_is_deterministic(tmp_path):
    corpus = write_corpus(tmp_path / "c", "a b c a b c\nb c a\n" * 20)
    arch = chain_arch(2, d=6)
    cfg = TrainConfig(steps=10, batch=2, bptt_len=5, eval_batch=2)
    _, r1 = retrain(arch, corpus, cfg, rng=np.random.default_rng(1))
    _, r2 = retrain(arch, corpus, cfg, rng=np.random.default_rng(1))
    assert r1.valid.loss == r2.valid.loss and r1.train_loss == r2.train_loss


def test_retrain_transfers_to_another_corpus(tmp_path):
    arch = random_arch(np.random.default_rng(11), mode="joint")
    arch = DerivedArch(arch.intra, arch.inter_f, arch.inter_g,
                       EssCellSpec(**dict(arch.spec.to_dict(), d=5)), arch.provenance)
    cfg = TrainConfig(steps=3, batch=2, bptt_len=4, eval_batch=2)
    for name, text in (("one", "x y z\n" * 30), ("two", "p q r s t u\n" * 30)):
        corpus = write_corpus(tmp_path / name, text)
        model, report = retrain(arch, corpus, cfg, rng=np.random.default_rng(0))
        assert model.vocab_size == len(corpus)
        assert np.isfinite(report.valid.perplexity)


def test_retrain_divergence_carries_partial_report(tmp_path):
    corpus = write_corpus(tmp_path / "d", "a b c d\n" * 40)
    cfg = TrainConfig(steps=50, lr=1e8, optimizer="sgd", clip=None, batch=2, bptt_len=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(NumericError) as info:
            retrain(chain_arch(2, d=4), corpus, cfg, rng=np.random.default_rng(0))
    assert info.value.trace is not None


def test_retrain_schedules():
    cos = TrainConfig(steps=4, lr=0.2)
    assert [round(cos.lr_at(s), 12) for s in range(4)] == [0.2, round(0.1 * (1 + np.cos(np.pi / 4)), 12), 0.1,
                                                           round(0.1 * (1 - np.cos(np.pi / 4)), 12)]
    assert TrainConfig(steps=4, lr=0.2, schedule="constant").lr_at(3) == 0.2
    with pytest.raises(ConfigurationError):
        TrainConfig(schedule="step")
