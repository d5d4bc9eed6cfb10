import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimaml import network as nw
from unimaml.episodes import Permutation
from unimaml.errors import FormatError, HeadModeError
from unimaml.network import OuterOptimizer, ParamSet

from conftest import identity_params


def random_net(rng, dim, sizes, n_heads):
    return nw.init_params(dim, sizes, n_heads, seed=int(rng.integers(1 << 30)))


def random_batch(rng, dim, n_heads, size):
    x = rng.normal(size=(size, dim))
    y = rng.integers(1, n_heads + 1, size=size)
    return x, y


# --- forward ----------------------------------------------------------------


def test_identity_encoder_logits():
    params = identity_params([[1, 0], [0, 1]])
    assert nw.forward_logits(params, np.array([1.0, 0.0])).tolist() == [1.0, 0.0]


def test_zero_heads_tie_to_first_class():
    params = identity_params(np.zeros((4, 3)))
    x = np.array([0.3, -1.0, 2.0])
    assert nw.forward_logits(params, x).tolist() == [0.0] * 4
    assert nw.predict(params, x).tolist() == [1]


def test_one_hidden_layer_by_hand():
    params = ParamSet(((np.array([[2.0]]), np.array([-1.0])),), np.array([[3.0]]))
    assert nw.features(params, np.array([2.0])).tolist() == [[3.0]]
    assert nw.forward_logits(params, np.array([2.0])).tolist() == [9.0]


def test_shape_mismatch_raises():
    params = identity_params([[1, 0], [0, 1]])
    with pytest.raises(ValueError):
        nw.forward_logits(params, np.ones(3))
    with pytest.raises(ValueError):
        ParamSet(((np.ones((3, 2)), np.ones(3)),), np.ones((2, 4)))


def test_shared_head_must_be_duplicated_first():
    with pytest.raises(HeadModeError):
        nw.forward_logits(identity_params([[1.0, 2.0]], shared=True), np.ones(2))


@given(st.integers(0, 2**31), st.permutations(list(range(1, 6))))
@settings(max_examples=30, deadline=None)
def test_logits_are_permutation_equivariant_bitwise(seed, mapping):
    rng = np.random.default_rng(seed)
    params = random_net(rng, 7, [9, 6], 5)
    pi = Permutation(tuple(mapping))
    x = rng.normal(size=(11, 7))
    before = nw.forward_logits(params, x)
    after = nw.forward_logits(nw.permute_heads(params, pi), x)
    assert np.array_equal(after[:, np.asarray(pi.mapping) - 1], before)


# --- loss and gradient ------------------------------------------------------


def test_loss_closed_form():
    params = identity_params([[1, 0], [0, 1]])
    loss, _ = nw.batch_loss_and_grad(params, np.array([[1.0, 0.0]]), np.array([1]))
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.31326, abs=1e-5)


def test_uniform_softmax_loss_is_log2():
    params = identity_params(np.zeros((2, 3)))
    loss, _ = nw.batch_loss_and_grad(params, np.array([[0.4, -2.0, 7.0]]), np.array([2]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_scalar_head_gradient_by_hand():
    params = identity_params([[0.0], [0.0]])
    _, g = nw.batch_loss_and_grad(params, np.array([[1.0]]), np.array([1]))
    assert g.heads.ravel().tolist() == [-0.5, 0.5]


def test_loss_is_a_sum_over_the_batch():
    rng = np.random.default_rng(0)
    params = random_net(rng, 4, [5], 3)
    x, y = random_batch(rng, 4, 3, 6)
    total = sum(nw.batch_loss(params, x[i : i + 1], y[i : i + 1]) for i in range(6))
    assert nw.batch_loss(params, x, y) == pytest.approx(total, rel=1e-13)


def test_label_out_of_range():
    params = identity_params(np.zeros((2, 2)))
    for bad in ([0], [3]):
        with pytest.raises(ValueError):
            nw.batch_loss_and_grad(params, np.ones((1, 2)), np.array(bad))


def test_head_gradient_rows_sum_to_zero():
    params = identity_params(np.zeros((3, 2)))
    x = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    _, g = nw.batch_loss_and_grad(params, x, np.array([1, 2, 3]))
    assert np.allclose(g.heads.sum(axis=0), 0.0, atol=1e-15)


def test_grad_check_linear_model():
    rng = np.random.default_rng(1)
    params = identity_params(rng.normal(size=(3, 4)))
    x, y = random_batch(rng, 4, 3, 5)
    assert nw.grad_check(params, x, y, 1e-5) < 1e-6


def test_grad_check_two_hidden_layers():
    rng = np.random.default_rng(2)
    params = random_net(rng, 5, [7, 6], 4)
    x, y = random_batch(rng, 5, 4, 6)
    assert nw.grad_check(params, x, y, 1e-5) < 1e-4


def test_grad_check_detects_a_wrong_gradient(monkeypatch):
    rng = np.random.default_rng(3)
    params = random_net(rng, 3, [4], 2)
    x, y = random_batch(rng, 3, 2, 4)
    real = nw.batch_loss_and_grad

    def broken(p, xx, yy, encoder_grad=True):
        loss, g = real(p, xx, yy, encoder_grad)
        return loss, g.with_arrays([a * 1.1 for a in g.arrays()])

    monkeypatch.setattr(nw, "batch_loss_and_grad", broken)
    assert nw.grad_check(params, x, y) > 1e-3


def test_grad_check_epsilon_range():
    params = identity_params(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        nw.grad_check(params, np.ones((1, 2)), np.array([1]), 1e-2)


def test_frozen_encoder_gradient_only_touches_heads():
    rng = np.random.default_rng(4)
    params = random_net(rng, 3, [4], 2)
    x, y = random_batch(rng, 3, 2, 4)
    loss_a, full = nw.batch_loss_and_grad(params, x, y)
    loss_b, heads_only = nw.batch_loss_and_grad(params, x, y, encoder_grad=False)
    assert loss_a == loss_b
    assert np.array_equal(full.heads, heads_only.heads)
    assert all(not a.any() for a in heads_only.arrays()[:-1])


@pytest.mark.parametrize("scale", [1.0, 1e2, 1e3])
def test_softmax_cross_entropy_is_finite_for_large_logits(scale):
    params = identity_params([[scale, 0.0], [-scale, 0.0]])
    loss, g = nw.batch_loss_and_grad(params, np.array([[1.0, 0.0]]), np.array([2]))
    assert math.isfinite(loss)
    assert loss == pytest.approx(2 * scale + math.log1p(math.exp(-2 * scale)), rel=1e-14)
    assert all(np.isfinite(a).all() for a in g.arrays())


# --- head manipulation ------------------------------------------------------


def test_duplicate_head():
    params = identity_params([[1.0, 2.0]], shared=True)
    dup = nw.duplicate_head(params, 3)
    assert dup.heads.tolist() == [[1, 2], [1, 2], [1, 2]] and not dup.shared
    assert nw.duplicate_head(params, 1).heads.tolist() == [[1, 2]]
    with pytest.raises(HeadModeError):
        nw.duplicate_head(dup, 3)


def test_duplicate_then_aggregate_sums_equal_grads():
    g = identity_params([[0.5, -1.0]] * 4)
    assert nw.aggregate_head_grads(g).heads.tolist() == [[2.0, -4.0]]


def test_average_heads():
    params = identity_params([[1.0, 0.0], [0.0, 1.0]])
    assert nw.average_heads(params).heads.tolist() == [[0.5, 0.5], [0.5, 0.5]]
    same = identity_params([[2.0, 3.0]] * 3)
    assert np.array_equal(nw.average_heads(same).heads, same.heads)
    with pytest.raises(HeadModeError):
        nw.average_heads(identity_params([[1.0, 0.0]], shared=True))


@given(st.permutations(list(range(1, 5))))
def test_average_heads_ignores_head_order(mapping):
    params = identity_params(np.arange(12.0).reshape(4, 3) ** 1.5)
    permuted = nw.permute_heads(params, Permutation(tuple(mapping)))
    assert np.allclose(nw.average_heads(permuted).heads, nw.average_heads(params).heads, rtol=0, atol=1e-14)


def test_copy_is_independent():
    rng = np.random.default_rng(5)
    params = random_net(rng, 3, [4], 2)
    dup = params.copy()
    assert dup.equals(params)
    dup.arrays()[0][0, 0] += 1.0
    assert not dup.equals(params)


# --- outer optimizer --------------------------------------------------------


def scalar(v):
    return identity_params([[v]])


def test_zero_gradient_without_decay_changes_nothing():
    opt = OuterOptimizer(lr_encoder=0.1, lr_heads=0.1, weight_decay=0.0)
    p = scalar(1.0)
    out = nw.outer_step(opt, p, scalar(0.0), 0)
    assert out.equals(p) and not opt.velocity.heads.any()


def test_plain_sgd_step():
    opt = OuterOptimizer(lr_encoder=0.1, lr_heads=0.1, momentum=0.0, weight_decay=0.0)
    assert nw.outer_step(opt, scalar(1.0), scalar(1.0), 0).heads.item() == pytest.approx(0.9, abs=1e-15)


def test_weight_decay_step():
    opt = OuterOptimizer(lr_encoder=0.1, lr_heads=0.1, momentum=0.0, weight_decay=0.0005)
    assert nw.outer_step(opt, scalar(1.0), scalar(0.0), 0).heads.item() == pytest.approx(0.99995, abs=1e-15)


def test_momentum_accumulates():
    opt = OuterOptimizer(lr_encoder=0.1, lr_heads=0.1, momentum=0.9, weight_decay=0.0)
    p = nw.outer_step(opt, scalar(0.0), scalar(1.0), 0)
    p = nw.outer_step(opt, p, scalar(1.0), 0)
    assert p.heads.item() == pytest.approx(-0.1 - 0.19, abs=1e-15)


def test_learning_rate_schedule_and_groups():
    opt = OuterOptimizer()
    assert (opt.momentum, opt.weight_decay) == (0.9, 0.0005)
    assert opt.learning_rates(0) == (0.001, 0.01)
    assert opt.learning_rates(19) == (0.001, 0.01)
    assert opt.learning_rates(20) == pytest.approx((0.0001, 0.001))
    assert opt.learning_rates(45) == pytest.approx((0.00001, 0.0001))


def test_groups_get_their_own_rates():
    opt = OuterOptimizer(lr_encoder=0.5, lr_heads=0.25, momentum=0.0, weight_decay=0.0)
    p = ParamSet(((np.ones((1, 1)), np.zeros(1)),), np.ones((1, 1)))
    out = nw.outer_step(opt, p, p, 0)
    assert out.layers[0][0].item() == 0.5 and out.heads.item() == 0.75


@given(st.integers(0, 2**31), st.floats(1e-4, 1.0))
@settings(max_examples=25, deadline=None)
def test_outer_step_without_momentum_or_decay_is_plain_descent(seed, lr):
    rng = np.random.default_rng(seed)
    params = random_net(rng, 3, [4, 2], 3)
    grad = params.with_arrays([rng.normal(size=a.shape) for a in params.arrays()])
    opt = OuterOptimizer(lr_encoder=lr, lr_heads=lr, momentum=0.0, weight_decay=0.0)
    out = nw.outer_step(opt, params, grad, 0)
    for new, old, g in zip(out.arrays(), params.arrays(), grad.arrays()):
        assert np.array_equal(new, old - lr * g)


def test_outer_step_rejects_incongruent_gradient():
    opt = OuterOptimizer()
    with pytest.raises(ValueError):
        nw.outer_step(opt, scalar(1.0), identity_params([[1.0, 2.0]]), 0)


def test_negative_learning_rate_rejected():
    with pytest.raises(ValueError):
        OuterOptimizer(lr_encoder=-1.0)


# --- checkpoints ------------------------------------------------------------


@pytest.mark.parametrize("shared", [False, True])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, shared):
    params = nw.init_params(5, [7, 3], 4, seed=9, shared=shared)
    nw.save_checkpoint(params, tmp_path / "m.umck", {"epoch": 3, "seed": 9})
    back, meta = nw.load_checkpoint(tmp_path / "m.umck")
    assert back.equals(params)
    assert meta["epoch"] == 3 and meta["head_mode"] == ("shared" if shared else "per_class")


def test_checkpoint_layout(tmp_path):
    params = identity_params([[1.5, -2.0]])
    nw.save_checkpoint(params, tmp_path / "m.umck")
    raw = (tmp_path / "m.umck").read_bytes()
    assert raw[:4] == b"UMCK"
    assert int.from_bytes(raw[4:8], "little") == 1
    n = int.from_bytes(raw[8:12], "little")
    assert np.frombuffer(raw[12 + n :], "<f8").tolist() == [1.5, -2.0]


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda b: b"ABCD" + b[4:], 0),
        (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], 4),
        (lambda b: b[:-8], None),
        (lambda b: b + b"\0\0", None),
    ],
)
def test_malformed_checkpoint(tmp_path, mutate, offset):
    params = identity_params([[1.5, -2.0]])
    nw.save_checkpoint(params, tmp_path / "m.umck")
    raw = (tmp_path / "m.umck").read_bytes()
    (tmp_path / "bad.umck").write_bytes(mutate(raw))
    with pytest.raises(FormatError) as info:
        nw.load_checkpoint(tmp_path / "bad.umck")
    if offset is not None:
        assert info.value.offset == offset
    assert "byte offset" in str(info.value)
