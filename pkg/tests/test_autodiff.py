import math

import numpy as np
import pytest

from nvlm_micro import autodiff as ad
from nvlm_micro.autodiff import ShapeError, Tensor

from conftest import fd_grad, rel_err


def grad_of(build, *arrays):
    """Analytic gradients of scalar ``build(*tensors)`` w.r.t. every input."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(build(*ts))
    return [t.grad for t in ts]


def value_of(build, *arrays):
    return float(build(*[Tensor(a) for a in arrays]).data)


def check_op(build, *arrays, tol=1e-4):
    grads = grad_of(build, *arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return value_of(build, *args)
        assert rel_err(grads[i], fd_grad(f, a)) < tol


def weighted(y: Tensor, w: np.ndarray) -> Tensor:
    # random projection so Jacobian-vector products are exercised, not just sums
    return ad.total(ad.mul(y, Tensor(w)))


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal((eye @ eye).data, np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ eye).data, [[1, 2], [3, 4]])


def test_matmul_grad_matches_fd(rng):
    check_op(lambda a, b: ad.total(a @ b), rng.normal(size=(3, 4)), rng.normal(size=(4, 5)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# -- softmax --------------------------------------------------------------------

def test_softmax_uniform_row():
    y = ad.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(y, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_no_overflow():
    y = ad.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [[1.0, 0.0]], rtol=0, atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    y = ad.softmax_rows(Tensor(rng.normal(scale=30, size=(50, 17)))).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_softmax_jvp_matches_fd(rng):
    w = rng.normal(size=(4, 6))
    check_op(lambda x: weighted(ad.softmax_rows(x), w), rng.normal(size=(4, 6)))


def test_masked_softmax_zero_outside_mask_and_empty_rows(rng):
    allowed = np.array([[True, False, True], [False, False, False]])
    y = ad.masked_softmax_rows(Tensor(rng.normal(size=(2, 3))), allowed).data
    assert y[0, 1] == 0.0
    assert y[0].sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(y[1], 0.0)


def test_masked_softmax_grad(rng):
    allowed = rng.random((5, 7)) < 0.6
    allowed[:, 0] = True
    w = rng.normal(size=(5, 7))
    check_op(lambda x: weighted(ad.masked_softmax_rows(x, allowed), w), rng.normal(size=(5, 7)))


# -- layer norm -----------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    y = ad.layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(y, 0.0)


def test_layer_norm_already_standard():
    y = ad.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0).data
    np.testing.assert_allclose(y, [[1.0, -1.0]], rtol=0, atol=1e-15)


def test_layer_norm_grad(rng):
    w = rng.normal(size=(3, 5))
    check_op(lambda x, g, b: weighted(ad.layer_norm(x, g, b), w),
             rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5))


# -- cross entropy --------------------------------------------------------------

def test_ce_confident_correct_is_zero():
    logits = np.full((3, 5), -1e3)
    logits[np.arange(3), [1, 4, 0]] = 1e3
    loss = ad.cross_entropy(Tensor(logits), [1, 4, 0], [True] * 3)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)


def test_ce_uniform_is_ln_v():
    loss = ad.cross_entropy(Tensor(np.zeros((6, 4))), [0, 1, 2, 3, 0, 1], [True] * 6)
    assert float(loss.data) == pytest.approx(math.log(4), abs=1e-15)


def test_ce_mask_equals_sliced(rng):
    logits = rng.normal(size=(8, 7))
    tgt = rng.integers(0, 7, 8)
    mask = np.array([1, 0, 1, 0, 0, 1, 1, 0], dtype=bool)
    full = float(ad.cross_entropy(Tensor(logits), tgt, mask).data)
    kept = float(ad.cross_entropy(Tensor(logits[mask]), tgt[mask], [True] * mask.sum()).data)
    assert full == pytest.approx(kept, rel=1e-15)


def test_ce_grad(rng):
    tgt = rng.integers(0, 6, 5)
    mask = [True, False, True, True, False]
    check_op(lambda x: ad.cross_entropy(x, tgt, mask), rng.normal(size=(5, 6)))


def test_ce_empty_mask_error():
    with pytest.raises(ValueError, match="empty loss mask"):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [False, False])


def test_ce_target_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3], [True, True])


# -- remaining ops --------------------------------------------------------------

@pytest.mark.parametrize("name", ["tanh", "gelu"])
def test_pointwise_grad(name, rng):
    op = getattr(ad, name)
    w = rng.normal(size=(3, 4))
    check_op(lambda x: weighted(op(x), w), rng.normal(size=(3, 4)))


def test_structural_ops_grad(rng):
    w = rng.normal(size=(4, 6))
    idx = rng.permutation(24)

    def build(a, b, c):
        x = ad.concat_rows([a, ad.slice_rows(b, 1, 3)])           # 4x3
        x = ad.concat_cols([x, ad.transpose(c)])                    # 4x6
        x = ad.reshape(ad.permute(ad.reshape(x, (24,)), idx), (4, 6))
        return weighted(x, w)

    check_op(build, rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=(3, 4)))


def test_take_rows_accumulates_repeats(rng):
    table = rng.normal(size=(5, 3))
    w = rng.normal(size=(4, 3))
    check_op(lambda t: weighted(ad.take_rows(t, [2, 0, 2, 4]), w), table)


def test_linear_and_scale_by_grad(rng):
    w = rng.normal(size=(3, 2))
    check_op(lambda x, m, b, s: weighted(ad.scale_by(ad.linear(x, m, b), ad.tanh(s)), w),
             rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2), rng.normal(size=1))


# -- backward -------------------------------------------------------------------

def test_backward_sum_is_ones(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    ad.backward(ad.total(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_square_is_2x(rng):
    data = rng.normal(size=(4,))
    x = Tensor(data, requires_grad=True)
    ad.backward(ad.total(x * x))
    np.testing.assert_array_equal(x.grad, 2 * data)


def test_backward_non_scalar_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.tanh(x))


def test_backward_deterministic(rng):
    a0, b0 = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))

    def run():
        a, b = Tensor(a0, True), Tensor(b0, True)
        ad.backward(ad.total(ad.softmax_rows(ad.gelu(a @ b))))
        return a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_graph_parents_precede_children(rng):
    x = Tensor(rng.normal(size=(2, 2)), True)
    y = ad.total(ad.tanh(x @ x) * x)
    graph = ad.Graph.trace(y)
    pos = {t.id: i for i, t in enumerate(graph.nodes)}
    for t in graph.nodes:
        assert all(pos[p.id] < pos[t.id] for p in t._parents)
    assert graph.leaves() == [x]


def test_tensors_are_immutable():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0
