import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ess import tensorcore as tc
from ess.errors import ConfigurationError, ContractError, DimensionError, NumericError, TokenIndexError

from oracles import check_gradients, np_act


def leaf(x):
    return tc.Tensor(np.asarray(x, dtype=float), requires_grad=True)


def grads_of(build, params):
    with tc.Tape() as tape:
        loss = build()
        g = tape.backward(loss, params)
    return loss, [g[p] for p in params]


def test_add_mul_gradients_by_hand():
    a, b = leaf([1.0, 2.0]), leaf([3.0, -1.0])
    _, (ga, gb) = grads_of(lambda: tc.total(tc.add(tc.mul(a, b), a)), [a, b])
    np.testing.assert_array_equal(ga, [4.0, 0.0])
    np.testing.assert_array_equal(gb, [1.0, 2.0])


def test_matmul_gradient_matches_outer_products():
    rng = np.random.default_rng(0)
    x, w = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    _, (gx, gw) = grads_of(lambda: tc.total(tc.matmul(x, w)), [x, w])
    np.testing.assert_allclose(gx, np.ones((3, 2)) @ w.data.T)
    np.testing.assert_allclose(gw, x.data.T @ np.ones((3, 2)))


def test_shape_mismatch_raises_dimension_error():
    with pytest.raises(DimensionError):
        tc.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        tc.mul(leaf(np.ones(3)), leaf(np.ones(4)))


def test_broadcast_add_unbroadcasts_gradient():
    x, b = leaf(np.ones((4, 3))), leaf(np.zeros(3))
    _, (_, gb) = grads_of(lambda: tc.total(tc.add(x, b)), [x, b])
    np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])


def test_unreached_parameter_gets_zero_gradient():
    a, unused = leaf([1.0]), leaf([[2.0, 3.0]])
    _, (ga, gu) = grads_of(lambda: tc.total(tc.scale(a, 3.0)), [a, unused])
    assert ga[0] == 3.0
    np.testing.assert_array_equal(gu, np.zeros((1, 2)))
    assert unused.grad is gu


def test_backward_requires_scalar_and_tape():
    a = leaf([1.0, 2.0])
    with tc.Tape() as tape:
        y = tc.tanh(a)
        with pytest.raises(ContractError):
            tape.backward(y)
    with pytest.raises(ContractError):
        tc.backward(tc.total(a))


def test_no_tape_means_no_records():
    a = leaf([1.0])
    y = tc.sigmoid(a)
    assert y.data[0] == pytest.approx(1 / (1 + np.exp(-1)))


def test_tape_stacks_are_thread_local():
    seen = {}

    def work(name, value):
        a = leaf([value])
        with tc.Tape() as tape:
            loss = tc.total(tc.mul(a, a))
            seen[name] = (len(tape), tape.backward(loss, [a])[a][0])

    threads = [threading.Thread(target=work, args=(str(i), float(i))) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert {k: v[1] for k, v in seen.items()} == {"0": 0.0, "1": 2.0, "2": 4.0, "3": 6.0}
    assert all(v[0] == 2 for v in seen.values())


@pytest.mark.parametrize("kind", tc.ACTIVATIONS)
def test_activation_values(kind):
    x = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(tc.activation(kind, tc.Tensor(x)).data, np_act(kind, x), atol=1e-15)


def test_unknown_activation_is_configuration_error():
    with pytest.raises(ConfigurationError):
        tc.activation("swish", tc.Tensor([0.0]))


def test_sigmoid_is_stable_for_large_inputs():
    y = tc.sigmoid(tc.Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [0.0, 1.0])


def test_relu_gradient_at_zero_is_zero():
    a = leaf([0.0, 1.0, -1.0])
    _, (g,) = grads_of(lambda: tc.total(tc.relu(a)), [a])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_candidate_stack_and_mixed_op_match_explicit_sum():
    rng = np.random.default_rng(1)
    u1, u2 = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
    theta = leaf(rng.dirichlet(np.ones(5), size=3))
    out = tc.mixed_op(theta, [0, 2], [tc.candidate_stack(u1), tc.candidate_stack(u2)])
    ref = sum(theta.data[0, k] * np_act(op, u1.data) for k, op in enumerate(tc.ACTIVATIONS))
    ref = ref + sum(theta.data[2, k] * np_act(op, u2.data) for k, op in enumerate(tc.ACTIVATIONS))
    np.testing.assert_allclose(out.data, ref, atol=1e-14)
    err = check_gradients(
        lambda: tc.total(tc.mul(tc.mixed_op(theta, [0, 2], [tc.candidate_stack(u1), tc.candidate_stack(u2)]),
                                tc.Tensor(np.arange(6.0).reshape(2, 3)))),
        [theta, u1, u2])
    assert err < 1e-6


def test_mixed_op_single_edge_form():
    u = leaf(np.ones((1, 2)))
    theta = leaf(np.eye(5)[[3]])
    out = tc.mixed_op(theta, 0, tc.candidate_stack(u))
    np.testing.assert_allclose(out.data, np.tanh(np.ones((1, 2))))


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]])
    y = tc.softmax(tc.Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0)
    np.testing.assert_allclose(y[1], 1 / 3)
    np.testing.assert_allclose(tc.softmax(tc.Tensor(x + 7.5)).data, y)
    with pytest.raises(DimensionError):
        tc.softmax(tc.Tensor(np.zeros((2, 0))))


def test_cross_entropy_uniform_logits_is_log_vocab():
    loss = tc.cross_entropy(tc.Tensor(np.zeros((4, 10))), [0, 3, 9, 2])
    assert loss.item() == pytest.approx(np.log(10), abs=1e-15)


def test_cross_entropy_errors():
    with pytest.raises(TokenIndexError):
        tc.cross_entropy(tc.Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DimensionError):
        tc.cross_entropy(tc.Tensor(np.zeros((2, 3))), [0])
    with pytest.raises(NumericError):
        tc.cross_entropy(tc.Tensor(np.array([[np.nan, 0.0]])), [0])


def test_take_rows_accumulates_repeated_ids():
    table = leaf(np.arange(6.0).reshape(3, 2))
    _, (g,) = grads_of(lambda: tc.total(tc.take_rows(table, [2, 0, 2])), [table])
    np.testing.assert_array_equal(g, [[1, 1], [0, 0], [2, 2]])
    with pytest.raises(TokenIndexError):
        tc.take_rows(table, [3])


def test_sgd_step_and_clip():
    p = leaf([1.0, 1.0])
    grads = {p: np.array([3.0, 4.0])}
    opt = tc.SGD([p], lr=0.1, clip=1.0)
    opt.step(grads)
    np.testing.assert_allclose(p.data, [1 - 0.1 * 0.6, 1 - 0.1 * 0.8])


def test_adam_first_step_moves_by_lr():
    p = leaf([0.0, 0.0])
    opt = tc.Adam([p], lr=0.01)
    opt.step({p: np.array([5.0, -0.1])})
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)


def test_optimizer_rejects_non_finite_gradients():
    p = leaf([0.0])
    with pytest.raises(NumericError):
        tc.SGD([p], 0.1).step({p: np.array([np.inf])})
    assert p.data[0] == 0.0


def test_make_optimizer_unknown_kind():
    with pytest.raises(ConfigurationError):
        tc.make_optimizer("rmsprop", [], 0.1)


def test_uniform_param_range():
    p = tc.uniform_param(np.random.default_rng(0), (50, 50), 25)
    assert np.abs(p.data).max() <= 0.2
    assert p.requires_grad


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_softmax_gradient_property(x):
    t = leaf(x)
    w = tc.Tensor(np.arange(12.0).reshape(3, 4))
    assert check_gradients(lambda: tc.total(tc.mul(tc.softmax(t), w)), [t]) < 1e-4


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
       st.sampled_from(["sigmoid", "tanh", "identity"]))
def test_smooth_activation_gradient_property(x, kind):
    t = leaf(x)
    assert check_gradients(lambda: tc.total(tc.mul(tc.activation(kind, t), t)), [t]) < 1e-4
