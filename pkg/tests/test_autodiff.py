import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxssl import autodiff as ad


def central_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Independent central-difference gradient oracle."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


class TestMatmul:
    def test_identity(self):
        a = ad.Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = ad.Tensor([[2.0, 3.0], [4.0, 5.0]])
        assert np.array_equal(ad.matmul(a, b).data, b.data)

    def test_hand_product(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_gradient_matches_finite_differences(self):
        # d sum(A @ B) / dA at A = ones, B = [[1,2],[3,4]]
        a_val = np.ones((2, 2))
        b = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        fd = central_diff(lambda x: float((x @ b.data).sum()), a_val.copy(), step=1e-6)
        a = ad.Tensor(a_val, requires_grad=True)
        ad.reduce_sum(ad.matmul(a, b)).backward()
        assert np.allclose(a.grad, fd, rtol=1e-6, atol=1e-6)
        assert np.allclose(a.grad, [[3.0, 7.0], [3.0, 7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4, 5))
        b = rng.normal(size=(3, 5, 2))
        out = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
        for i in range(3):
            assert np.allclose(out[i], a[i] @ b[i])


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(ad.softmax(ad.Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_stability_under_large_logits(self):
        out = ad.softmax(ad.Tensor([1000.0, 1000.0])).data
        assert np.allclose(out, [0.5, 0.5])
        assert np.all(np.isfinite(out))

    def test_reference_values(self):
        # frozen from a 60-digit mpmath evaluation of exp(x)/sum(exp(x))
        out = ad.softmax(ad.Tensor([1.0, 2.0, 3.0])).data
        assert np.allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-5)

    def test_nan_raises(self):
        with pytest.raises(FloatingPointError):
            ad.softmax(ad.Tensor([np.nan, 0.0]))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
           st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, logits, shift):
        x = np.array(logits)
        p = ad.softmax(ad.Tensor(x)).data
        q = ad.softmax(ad.Tensor(x + shift)).data
        assert abs(p.sum() - 1.0) < 1e-6
        assert np.all(p > 0)
        assert np.max(np.abs(p - q)) < 1e-6


class TestLayernorm:
    def test_constant_input_maps_to_zero(self):
        x = ad.Tensor(np.full((3, 4), 7.0))
        g = ad.Tensor(np.ones(4))
        b = ad.Tensor(np.zeros(4))
        assert np.allclose(ad.layernorm(x, g, b).data, 0.0)

    def test_already_normalised_is_fixed_point(self):
        x = ad.Tensor([1.0, -1.0])
        out = ad.layernorm(x, ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), eps=0.0)
        assert np.allclose(out.data, [1.0, -1.0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        xv = rng.uniform(-2, 2, size=(2, 5))
        gv = rng.uniform(0.5, 1.5, size=5)
        bv = rng.uniform(-0.5, 0.5, size=5)
        w = rng.normal(size=(2, 5))

        def scalar_of(x):
            xt = ad.Tensor(x, requires_grad=True)
            return ad.reduce_sum(ad.mul(ad.layernorm(xt, ad.Tensor(gv), ad.Tensor(bv)), w))

        fd = central_diff(lambda x: float(scalar_of(x).data), xv.copy())
        xt = ad.Tensor(xv, requires_grad=True)
        ad.reduce_sum(ad.mul(ad.layernorm(xt, ad.Tensor(gv), ad.Tensor(bv)), w)).backward()
        rel = np.abs(xt.grad - fd) / np.maximum(np.abs(fd), 1e-2)
        assert rel.max() < 1e-4


class TestLossPrimitives:
    def test_gelu_zero(self):
        assert ad.gelu(ad.Tensor([0.0])).data[0] == 0.0

    def test_l2_identity(self):
        x = np.random.default_rng(1).normal(size=(4, 4))
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 2] = mask[3, 0] = True
        assert ad.l2_loss(ad.Tensor(x), ad.Tensor(x.copy()), mask).item() == 0.0

    def test_l2_ignores_unmasked_positions_exactly(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3))
        mask = rng.random((3, 3)) < 0.5
        mask[0, 0] = True
        base = ad.l2_loss(ad.Tensor(a), ad.Tensor(b), mask).item()
        b2 = b.copy()
        b2[~mask] = 1e6
        assert ad.l2_loss(ad.Tensor(a), ad.Tensor(b2), mask).item() == base

    def test_l2_empty_mask_raises(self):
        with pytest.raises(ValueError, match="empty mask"):
            ad.l2_loss(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(3)), np.zeros(3, dtype=bool))

    def test_cross_entropy_uniform(self):
        out = ad.cross_entropy(ad.Tensor([1.0, 0.0]), ad.Tensor([0.0, 0.0]))
        assert abs(out.item() - math.log(2)) < 1e-12


class TestGradCheck:
    def test_sum_of_squares(self):
        p = ad.Tensor([1.0, 2.0], requires_grad=True, name="p")
        report = ad.grad_check(lambda ps: ad.reduce_sum(ad.mul(ps[0], ps[0])), [p],
                               step=1e-5, tol=1e-6)
        assert report.passed
        assert np.allclose(p.grad, [2.0, 4.0])

    def test_cross_entropy_softmax_closed_form(self):
        # d/ds of -sum(t log softmax(s)) is softmax(s) - t
        rng = np.random.default_rng(4)
        t = rng.dirichlet(np.ones(5))
        s = ad.Tensor(rng.normal(size=5), requires_grad=True)
        ad.cross_entropy(ad.Tensor(t), s).backward()
        expected = ad.softmax(ad.Tensor(s.data)).data - t
        assert np.allclose(s.grad, expected, atol=1e-12)

    def test_report_flags_sampling(self):
        p = ad.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        report = ad.grad_check(lambda ps: ad.reduce_sum(ad.mul(ps[0], ps[0])), [p],
                               samples=5, rng=np.random.default_rng(0))
        assert report.n_checked == 5
        assert report.passed


def _random_input(rng, shape):
    return ad.Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


PRIMITIVES = [
    ("add", lambda x, c: ad.add(x, c), (3, 4)),
    ("sub", lambda x, c: ad.sub(c, x), (3, 4)),
    ("mul", lambda x, c: ad.mul(x, c), (3, 4)),
    ("div", lambda x, c: ad.div(x, ad.add(ad.mul(c, c), 1.0)), (3, 4)),
    ("neg", lambda x, c: ad.neg(x), (3, 4)),
    ("power", lambda x, c: ad.power(ad.add(ad.mul(x, x), 1.0), 1.5), (3, 4)),
    ("sqrt", lambda x, c: ad.sqrt(ad.add(ad.mul(x, x), 0.5)), (3, 4)),
    ("gelu", lambda x, c: ad.gelu(x), (3, 4)),
    ("matmul", lambda x, c: ad.matmul(x, c), (3, 3)),
    ("reshape", lambda x, c: ad.mul(ad.reshape(x, (4, 3)), 2.0), (3, 4)),
    ("transpose", lambda x, c: ad.transpose(x, (1, 0)), (3, 4)),
    ("take", lambda x, c: ad.take(x, (slice(0, 2), slice(1, 3))), (3, 4)),
    ("concat", lambda x, c: ad.concat([x, c], axis=0), (3, 4)),
    ("sum", lambda x, c: ad.reduce_sum(x, axis=1), (3, 4)),
    ("mean", lambda x, c: ad.reduce_mean(x, axis=0), (3, 4)),
    ("softmax", lambda x, c: ad.softmax(x, axis=-1), (3, 4)),
    ("log_softmax", lambda x, c: ad.log_softmax(x, axis=-1), (3, 4)),
    ("layernorm", lambda x, c: ad.layernorm(x, ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4))), (3, 4)),
]


@pytest.mark.parametrize("name,op,shape", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradients_match_finite_differences(name, op, shape):
    # 64-bit, step 1e-5, random inputs in [-2, 2], rel err <= 1e-4
    rng = np.random.default_rng(hash(name) % 2**32)
    const = ad.Tensor(rng.uniform(-2, 2, size=shape))
    weights = rng.normal(size=1000)  # projection to a scalar

    def scalar(ps):
        out = op(ps[0], const)
        flat = ad.reshape(out, (out.size,))
        return ad.reduce_sum(ad.mul(flat, weights[:out.size]))

    p = _random_input(rng, shape)
    report = ad.grad_check(scalar, [p], step=1e-5, tol=1e-4)
    assert report.passed, f"{name}: max rel err {report.max_rel_err:.3e} at {report.worst_index}"


class TestTape:
    def test_backward_touches_each_node_exactly_once(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = ad.mul(x, x)
        z = ad.add(y, y)  # diamond: y feeds z twice
        out = ad.reduce_sum(z)
        stats = out.backward()
        assert stats.n_applied == stats.n_nodes == 3
        assert np.allclose(x.grad, [4.0, 8.0])

    def test_leaf_never_an_op_output(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        y = ad.mul(x, 2.0)
        assert x.is_leaf and not y.is_leaf
        tape = ad.trace(ad.reduce_sum(y))
        assert all(not n.is_leaf for n in tape.nodes)

    def test_every_requires_grad_leaf_receives_gradient(self):
        a = ad.Tensor(np.ones(2), requires_grad=True)
        b = ad.Tensor(np.ones(2), requires_grad=True)
        ad.reduce_sum(ad.add(ad.mul(a, 3.0), ad.mul(b, b))).backward()
        assert a.grad is not None and b.grad is not None

    def test_gradient_accumulates_across_backward_calls(self):
        x = ad.Tensor([2.0], requires_grad=True)
        ad.reduce_sum(ad.mul(x, x)).backward()
        ad.reduce_sum(ad.mul(x, x)).backward()
        assert np.allclose(x.grad, [8.0])

    def test_backward_scale_seeds_gradient(self):
        x = ad.Tensor([3.0], requires_grad=True)
        ad.reduce_sum(ad.mul(x, x)).backward(scale=0.5)
        assert np.allclose(x.grad, [3.0])

    def test_constant_branch_not_recorded(self):
        x = ad.Tensor(np.ones(3))
        y = ad.mul(x, 5.0)
        assert not y.requires_grad and y.is_leaf


class TestDtype:
    def test_float32_graph_stays_float32(self):
        x = ad.Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        out = ad.div(ad.add(ad.mul(x, 2.0), 1.0), 3.0)
        assert out.dtype == np.float32
        out2 = ad.l2_loss(x, ad.Tensor(np.zeros(4, dtype=np.float32)),
                          np.ones(4, dtype=bool))
        assert out2.dtype == np.float32
