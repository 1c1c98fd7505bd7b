import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lumvit import autodiff as ad
from lumvit.autodiff import Tensor, grad_check, no_grad, relative_error
from lumvit.errors import DimensionError, NumericError, OracleError, UsageError, ValidationError
from lumvit.oracle import case_names, run_suite


def T(x, name=None):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=name)


class TestTape:
    def test_backward_needs_scalar(self):
        a = T([1.0, 2.0])
        with pytest.raises(UsageError):
            ad.scale(a, 2.0).backward()

    def test_shared_subexpression_accumulates(self):
        a = T(3.0)
        b = ad.mul(a, a)
        c = ad.add(b, b)  # 2 a^2
        c.backward()
        assert a.grad == pytest.approx(12.0)

    def test_each_backward_runs_once_on_diamond(self):
        a = T([1.0, 2.0])
        b = ad.scale(a, 2.0)
        c = ad.add(ad.tsum(b), ad.tsum(ad.square(b)))
        c.backward()
        # d/da [sum 2a + sum 4a^2] = 2 + 8a
        np.testing.assert_allclose(a.grad, [10.0, 18.0])

    def test_no_grad_builds_no_graph(self):
        a = T([1.0])
        with no_grad():
            b = ad.scale(a, 2.0)
        assert not b.requires_grad and b._parents == ()

    def test_nan_forward_aborts(self):
        a = T([-1.0])
        with pytest.raises(NumericError):
            ad.log(a)

    def test_mul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.mul(T(np.ones((2, 3))), T(np.ones((3, 2))))

    def test_matmul_inner_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))

    def test_deep_chain_no_recursion_limit(self):
        a = T(1.0)
        x = a
        for _ in range(5000):
            x = ad.scale(x, 1.0)
        x.backward()
        assert a.grad == 1.0


class TestLosses:
    def test_cross_entropy_soft_rows_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            ad.cross_entropy(T(np.zeros((2, 3))), np.full((2, 3), 0.5))

    def test_cross_entropy_uniform_logits(self):
        loss = ad.cross_entropy(T(np.zeros((4, 5))), np.array([0, 1, 2, 3]))
        assert loss.item() == pytest.approx(np.log(5))

    def test_int_and_onehot_targets_agree(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((6, 4))
        y = rng.integers(0, 4, 6)
        a = ad.cross_entropy(T(z), y).item()
        b = ad.cross_entropy(T(z), np.eye(4)[y]).item()
        assert a == pytest.approx(b, abs=1e-14)

    def test_softmax_rows_sum_to_one_under_large_logits(self):
        z = T(np.array([[1000.0, 999.0, -1000.0]]))
        p = ad.softmax(z).data
        assert np.all(np.isfinite(p))
        assert p.sum() == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_log_softmax_matches_log_of_softmax(self, z):
        a = ad.log_softmax(T(z)).data
        b = np.log(ad.softmax(T(z)).data)
        mask = np.isfinite(b)
        np.testing.assert_allclose(a[mask], b[mask], atol=1e-9)

    def test_layernorm_output_is_standardized(self):
        x = T(np.random.default_rng(1).standard_normal((5, 16)) * 3 + 2)
        y = ad.layernorm(x, None, None).data
        np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-4)


class TestGradCheck:
    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([1e-9]), floor=1e-6) == pytest.approx(1e-3)

    def test_detects_wrong_gradient(self):
        a = T([0.5, 1.5], "a")

        def broken(x):
            return Tensor.from_op(x.data ** 2, (x,), lambda g: x._accumulate(g * x.data), "half_sq")

        rep = grad_check(lambda: ad.tsum(broken(a)), [a])
        assert not rep.passed
        assert rep.max_rel_error == pytest.approx(0.5, rel=1e-6)

    def test_rejects_nondeterministic_function(self):
        a = T([1.0], "a")
        state = {"n": 0}

        def f():
            state["n"] += 1
            return ad.scale(ad.tsum(a), float(state["n"]))

        with pytest.raises(OracleError):
            grad_check(f, [a])

    def test_suite_covers_every_op_family(self):
        names = set(case_names())
        for op in ("add", "mul", "relu", "gelu", "exp", "log", "matmul_batched", "linear", "softmax",
                   "log_softmax", "layernorm", "cross_entropy_soft", "getitem", "concat",
                   "binarized_kernels_s_path", "spectral_outer", "gumbel_soft_sample", "apply_mask",
                   "ratio_loss_mse", "attention"):
            assert op in names

    def test_op_suite_passes_without_graph(self):
        rep = run_suite(seed=5, include_graph=False)
        assert rep.passed, "\n".join(line for line in rep.lines() if line.startswith("FAIL"))
