import math

import numpy as np
import pytest

from tinyloc import autodiff as ad
from tinyloc.autodiff import Tensor


def test_matmul_shape():
    out = ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))))
    assert out.shape == (2, 4)


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 4))))


def test_softmax_uniform():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = ad.softmax(Tensor(rng.standard_normal((5, 9)) * 3))
    assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-5


def test_layernorm_moments():
    rng = np.random.default_rng(1)
    out = ad.layernorm(Tensor(rng.standard_normal((6, 32)) * 2 + 1)).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4


def test_cross_entropy_closed_form():
    # -log softmax_0 of [0, 0] is ln 2
    out = ad.cross_entropy(Tensor(np.zeros((1, 2))), [0])
    assert out.item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_empty_mask():
    with pytest.raises(ad.EmptyMask):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], ignore_mask=[True, True])


def test_backward_sum_is_ones():
    x = Tensor(np.zeros(3), requires_grad=True)
    with ad.fresh_tape():
        ad.backward(ad.sum_(x))
    assert np.array_equal(x.grad, np.ones(3, dtype=np.float32))


def test_backward_mean_square():
    # d/dx_i mean(x*x) = 2 x_i / n
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.fresh_tape():
        ad.backward(ad.mean(ad.mul(x, x)))
    assert np.allclose(x.grad, [1.0, 2.0])


def test_backward_fanout_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.fresh_tape():
        ad.backward(ad.add(ad.sum_(x), ad.sum_(x)))
    assert np.array_equal(x.grad, np.full(3, 2.0, dtype=np.float32))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.fresh_tape():
        y = ad.mul(x, x)
        with pytest.raises(ad.NotScalar):
            ad.backward(y)


def test_off_path_grad_is_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    with ad.fresh_tape():
        _ = ad.sum_(y)  # on the tape but not on the loss path
        ad.backward(ad.sum_(x))
    assert np.array_equal(y.grad, np.zeros(3, dtype=np.float32))


def test_backward_visits_each_entry_once():
    x = Tensor(np.ones(4), requires_grad=True)
    with ad.fresh_tape() as tape:
        y = ad.mul(x, x)
        z = ad.add(y, y)
        loss = ad.sum_(z)
        ad.backward(loss)
        assert tape.backward_visits == len(tape) == 3


def test_tape_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.fresh_tape() as tape:
        y = ad.mul(x, x)
        z = ad.add(y, x)
        _ = ad.sum_(z)
        seen = {id(x)}
        for e in tape.entries:
            assert all(id(t) in seen or not t.requires_grad for t in e.inputs)
            seen.add(id(e.output))


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    data = rng.standard_normal((4, 4)).astype(np.float32)

    def run():
        x = Tensor(data.copy(), requires_grad=True)
        with ad.fresh_tape():
            h = ad.gelu(ad.matmul(x, x))
            ad.backward(ad.mean(ad.softmax(h)))
        return x.grad.copy()

    assert np.array_equal(run(), run())


def test_concat_invalid_axis():
    with pytest.raises(ad.InvalidAxis):
        ad.concat([Tensor(np.ones(2)), Tensor(np.ones(2))], axis=3)


def test_no_grad_suppresses_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.fresh_tape() as tape, ad.no_grad():
        _ = ad.mul(x, x)
        assert len(tape) == 0


def test_forward_primitives_dispatch():
    out = ad.forward_primitives("add", Tensor([1.0]), Tensor([2.0]))
    assert out.item() == pytest.approx(3.0)
    with pytest.raises(ValueError):
        ad.forward_primitives("nope", Tensor([1.0]))


def test_fd_check_linear_function_is_exact():
    # dyadic values and a power-of-two eps make the central difference exact
    x = Tensor(np.arange(3, dtype=np.float32))
    assert ad.finite_difference_check(ad.sum_, x, eps=2.0**-17) == 0.0


def test_fd_check_l1_distance():
    rng = np.random.default_rng(9)
    c = Tensor(rng.standard_normal(5), dtype=np.float64)
    x = Tensor(rng.standard_normal(5) + 3.0)  # residuals away from zero
    assert ad.finite_difference_check(lambda t: ad.l1_distance(t, c), x) < 1e-4


def test_fd_check_eps_bounds():
    x = Tensor(np.ones(2))
    with pytest.raises(ValueError):
        ad.finite_difference_check(ad.sum_, x, eps=1e-2)


def test_primitive_suite_under_tolerance():
    results = ad.primitive_gradient_checks(seeds=8)
    worst = max(results.values())
    assert worst < 1e-4, f"worst primitive error {worst}"


def test_embedding_gather_duplicate_ids_accumulate():
    table = Tensor(np.eye(3, dtype=np.float32), requires_grad=True)
    with ad.fresh_tape():
        out = ad.embedding_gather(table, np.array([1, 1, 2]))
        ad.backward(ad.sum_(out))
    expected = np.array([[0, 0, 0], [2, 2, 2], [1, 1, 1]], dtype=np.float32)
    assert np.array_equal(table.grad, expected)


def test_scatter_rows_replaces_and_blocks_grad():
    base = Tensor(np.zeros((3, 2)), requires_grad=True)
    rows = Tensor(np.ones((1, 2)), requires_grad=True)
    with ad.fresh_tape():
        out = ad.scatter_rows(base, np.array([1]), rows)
        assert np.array_equal(out.data[1], np.ones(2, dtype=np.float32))
        ad.backward(ad.sum_(out))
    assert np.array_equal(base.grad, np.array([[1, 1], [0, 0], [1, 1]], dtype=np.float32))
    assert np.array_equal(rows.grad, np.ones((1, 2), dtype=np.float32))


def test_fp32_default_fp64_preserved():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64
    out = ad.mean(Tensor(np.zeros(2, dtype=np.float64))) + 1.0
    assert out.dtype == np.float64
