from __future__ import annotations

import gc
import math
import weakref

import numpy as np
import pytest

from fedstg import autodiff as ad
from fedstg import checkpoint
from fedstg.autodiff import ShapeError, Tape

TOL = 1e-4


def _rand(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    return np.abs(x) + 0.5 if positive else x


def _check(build, *shapes, positive=False, seed=0):
    """Grad-check every input leaf of ``loss = sum(build(*leaves) * w)``."""
    rng = np.random.default_rng(seed)
    tape = Tape()
    leaves = [tape.leaf(_rand(rng, *s, positive=positive)) for s in shapes]
    out = build(*leaves)
    w = tape.const(rng.standard_normal(out.shape))
    loss = ad.sum_(ad.mul(out, w))
    return max(ad.grad_check(tape, loss, leaf, 1e-5) for leaf in leaves)


@pytest.mark.parametrize(
    "name,build,shapes,positive",
    [
        ("add", lambda a, b: a + b, [(3, 4), (4,)], False),
        ("sub", lambda a, b: a - b, [(2, 3), (2, 1)], False),
        ("mul", lambda a, b: a * b, [(3, 4), (3, 4)], False),
        ("neg", lambda a: -a, [(5,)], False),
        ("scale", lambda a: a * 2.5, [(3,)], False),
        ("shift", lambda a: a + 1.5, [(3,)], False),
        ("square", ad.square, [(2, 3)], False),
        ("exp", ad.exp, [(2, 3)], False),
        ("log", ad.log, [(2, 3)], True),
        ("relu", ad.relu, [(4, 5)], False),
        ("sigmoid", ad.sigmoid, [(4, 5)], False),
        ("matmul", lambda a, b: a @ b, [(3, 4), (4, 2)], False),
        ("matmul_batched", lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)], False),
        ("matmul_shared", lambda a, b: a @ b, [(2, 3, 4), (4, 5)], False),
        ("softmax", lambda a: ad.softmax(a, axis=-1), [(3, 5)], False),
        ("softmax_axis0", lambda a: ad.softmax(a, axis=0), [(3, 5)], False),
        ("layer_norm", ad.layer_norm, [(3, 6)], False),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)], False),
        ("mean", lambda a: ad.mean(a, axis=1), [(3, 4)], False),
        ("sum", lambda a: ad.sum_(a, axis=0, keepdims=True), [(3, 4)], False),
        ("cosine", ad.cosine, [(4, 6), (4, 6)], False),
        ("normalize", ad.normalize, [(4, 6)], False),
        ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)], False),
        ("transpose", lambda a: ad.transpose(a, (1, 0, 2)), [(2, 3, 4)], False),
        ("broadcast_to", lambda a: ad.broadcast_to(a, (3, 2, 4)), [(1, 2, 4)], False),
        ("slice", lambda a: ad.slice_(a, 1, 1, 3), [(2, 4)], False),
        ("take", lambda a: ad.take(a, np.array([0, 2, 2, 1]), axis=0), [(3, 5)], False),
        ("take_along", lambda a: ad.take_along(a, np.array([[1], [0], [2]]), axis=-1), [(3, 4)], False),
    ],
)
def test_operator_gradients(name, build, shapes, positive):
    assert _check(build, *shapes, positive=positive) < TOL, name


def test_every_registered_operator_is_covered():
    covered = {"add", "sub", "mul", "neg", "scale", "shift", "square", "exp", "log", "relu", "sigmoid", "matmul",
               "softmax", "layer_norm", "concat", "mean", "sum", "cosine", "normalize", "reshape", "transpose", "broadcast_to",
               "slice", "take", "take_along"}
    assert set(ad.OPERATORS) <= covered


def test_matmul_shape_error_names_shapes():
    tape = Tape()
    a, b = tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((4, 5)))
    with pytest.raises(ShapeError) as err:
        a @ b
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_nonscalar_loss_rejected():
    tape = Tape()
    a = tape.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        tape.backward(a * 2.0)


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    a = tape.leaf(np.ones(3))
    b = tape.leaf(np.full(2, 7.0))
    grads = tape.backward(ad.sum_(a * 3.0))
    np.testing.assert_array_equal(grads[a.id], np.full(3, 3.0))
    np.testing.assert_array_equal(grads[b.id], np.zeros(2))


def test_const_gets_no_gradient():
    tape = Tape()
    a = tape.leaf(np.ones(2))
    c = tape.const(np.ones(2))
    grads = tape.backward(ad.sum_(a * c))
    assert c.id not in grads


def test_leaf_values_are_immutable():
    tape = Tape()
    a = tape.leaf(np.zeros(2))
    with pytest.raises(ValueError):
        a.value[0] = 1.0


def test_shared_subexpression_accumulates():
    # d/dx of x*x + x at x=3 is 7
    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    grads = tape.backward(ad.sum_(x * x + x))
    assert grads[x.id][0] == pytest.approx(7.0)


def test_sigmoid_extremes_are_finite():
    tape = Tape()
    x = tape.leaf(np.array([-800.0, 0.0, 800.0]))
    y = ad.sigmoid(x)
    np.testing.assert_allclose(y.value, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(tape.backward(ad.sum_(y))[x.id]))


def test_softmax_large_logits_stable():
    tape = Tape()
    x = tape.leaf(np.array([[1000.0, 1000.0], [-1000.0, 0.0]]))
    y = ad.softmax(x, axis=-1).value
    np.testing.assert_allclose(y, [[0.5, 0.5], [0.0, 1.0]])


def test_layer_norm_matches_formula():
    x = np.array([[1.0, 2.0, 4.0]])
    tape = Tape()
    out = ad.layer_norm(tape.leaf(x)).value
    mu, var = x.mean(), x.var()
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5), rtol=0, atol=1e-15)


def test_cosine_zero_vector_guard():
    tape = Tape()
    a = tape.leaf(np.zeros((1, 3)))
    b = tape.leaf(np.ones((1, 3)))
    out = ad.cosine(a, b)
    assert out.value[0] == 0.0
    assert np.all(np.isfinite(tape.backward(ad.sum_(out))[a.id]))


def test_grad_check_rejects_bad_perturbation():
    tape = Tape()
    a = tape.leaf(np.ones(2))
    loss = ad.sum_(a)
    with pytest.raises(ValueError):
        ad.grad_check(tape, loss, a, perturbation=0.0)
    with pytest.raises(ValueError):
        ad.grad_check(tape, loss, a, perturbation=1e-2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_inf_on_nonfinite_forward():
    tape = Tape()
    a = tape.leaf(np.array([0.0]))
    loss = ad.sum_(ad.log(a))
    assert ad.grad_check(tape, loss, a, 1e-5) == math.inf


def test_grad_check_detects_a_wrong_gradient():
    name = "wrongsq"
    ad._register(name, lambda a: a * a, lambda g, out, a: (3.0 * a * g,))
    try:
        tape = Tape()
        a = tape.leaf(np.array([1.0, 2.0]))
        loss = ad.sum_(tape.forward(name, a))
        assert ad.grad_check(tape, loss, a, 1e-5) > 0.1
    finally:
        del ad.OPERATORS[name]


def test_replay_reproduces_forward():
    rng = np.random.default_rng(1)
    tape = Tape()
    a = tape.leaf(rng.standard_normal((3, 3)))
    loss = ad.sum_(ad.softmax(a @ a, axis=-1) * 2.0)
    assert tape.replay()[loss.id] == loss.value


# ----------------------------------------------------------------------------
# named-tensor text format


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {"w": rng.standard_normal((2, 3)), "b": np.array([1e-300, -0.1, 3.0]), "s": np.array(2.5)}
    path = tmp_path / "ckpt"
    checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        np.testing.assert_array_equal(back[k], tensors[k])


def test_dropped_tape_is_freed_by_refcount():
    gc.disable()
    try:
        tape = Tape()
        out = ad.exp(tape.leaf(np.ones(3)))
        ref = weakref.ref(tape)
        del tape
        assert ref() is None
        np.testing.assert_allclose(out.value, math.e)
        with pytest.raises(RuntimeError):
            out + 1.0
    finally:
        gc.enable()


def test_checkpoint_text_layout():
    text = checkpoint.dumps({"a": np.array([[1.0, 2.0]]), "b": np.array([0.1])})
    assert text == "a 2 1 2\n1.0 2.0\n\nb 1 1\n0.1\n"


def test_checkpoint_rejects_wrong_count():
    with pytest.raises(ValueError):
        checkpoint.loads("a 1 3\n1.0 2.0\n")


def test_checkpoint_rejects_duplicate_name():
    with pytest.raises(ValueError):
        checkpoint.loads("a 1 1\n1.0\n\na 1 1\n2.0\n")
