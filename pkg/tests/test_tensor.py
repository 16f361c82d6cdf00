from __future__ import annotations

import math

import numpy as np
import pytest

import promptcl.tensor as T
from promptcl.errors import ContractError, ShapeError
from promptcl.tensor import Tape, Tensor, backward, no_grad

from conftest import fd_gradcheck, rng_for


class TestTensorBasics:
    def test_non_float_input_casts_to_float32(self):
        t = Tensor(np.array([[1, 2]], dtype=np.int64))
        assert t.data.dtype == np.float32

    def test_float_dtypes_are_preserved(self):
        assert Tensor(np.ones((2, 2), dtype=np.float64)).data.dtype == np.float64
        assert Tensor(np.ones((2, 2), dtype=np.float32)).data.dtype == np.float32

    def test_item_requires_scalar(self):
        with pytest.raises(ShapeError):
            Tensor([[1.0, 2.0]]).item()

    def test_detach_drops_grad_tracking(self):
        t = Tensor([[1.0]], requires_grad=True)
        d = t.detach()
        assert not d.requires_grad
        assert np.array_equal(d.data, t.data)


class TestTapeSemantics:
    def test_backward_without_tape_raises(self):
        x = Tensor([[1.0]], requires_grad=True)
        y = T.tensor_sum(x)
        with pytest.raises(ContractError):
            backward(y)

    def test_backward_requires_scalar(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        with Tape():
            y = T.scale(x, 2.0)
            with pytest.raises(ContractError):
                backward(y)

    def test_tape_is_consumed_by_backward(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        with Tape():
            y = T.tensor_sum(x)
            backward(y)
            with pytest.raises(ContractError):
                backward(y)

    def test_no_grad_suppresses_recording(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        with Tape():
            with no_grad():
                y = T.tensor_sum(T.scale(x, 3.0))
            z = T.tensor_sum(x)
            backward(z)
        assert x.grad is not None
        assert np.allclose(x.grad, np.ones((1, 2)))

    def test_grad_none_for_unreached_input(self):
        x = Tensor([[1.0]], requires_grad=True)
        y = Tensor([[2.0]], requires_grad=True)
        with Tape():
            out = T.tensor_sum(x)
            backward(out)
        assert y.grad is None

    def test_no_tracking_without_requires_grad(self):
        x = Tensor([[1.0, 2.0]])
        with Tape():
            y = T.tensor_sum(x)
            # nothing was recorded, so the loss is not differentiable
            with pytest.raises(ContractError):
                backward(y)
        assert x.grad is None

    def test_grads_accumulate_across_fanout(self):
        x = Tensor([[2.0]], requires_grad=True)
        with Tape():
            y = T.add(T.scale(x, 1.0), T.scale(x, 1.0))
            backward(T.tensor_sum(y))
        assert np.allclose(x.grad, [[2.0]])


class TestForwardOracles:
    def test_softmax_reference_row(self):
        y = T.softmax(Tensor([[1.0, 2.0, 3.0]])).data[0]
        assert np.allclose(y, [0.09003057, 0.24472847, 0.66524096], atol=1e-7)
        assert math.isclose(float(y.sum()), 1.0, abs_tol=1e-6)

    def test_cross_entropy_uniform_logits(self):
        logits = Tensor(np.zeros((4, 3)))
        ce = T.cross_entropy(logits, np.array([0, 1, 2, 0]))
        assert math.isclose(ce.item(), math.log(3.0), rel_tol=1e-6)

    def test_gelu_reference_values(self):
        x = Tensor(np.array([[0.0, 1.0, -1.0]]))
        y = T.gelu(x).data[0]
        assert math.isclose(float(y[0]), 0.0, abs_tol=1e-12)
        assert math.isclose(float(y[1]), 0.8413447460685429, rel_tol=1e-9)
        assert math.isclose(float(y[2]), -0.15865525393145707, rel_tol=1e-9)

    def test_layernorm_normalizes_rows(self):
        rng = rng_for("ln-fwd", 0)
        x = Tensor(rng.normal(size=(5, 8)))
        g = Tensor(np.ones(8))
        b = Tensor(np.zeros(8))
        y = T.layernorm(x, g, b).data
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-6)
        assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_cosine_sim_known_pair(self):
        a = Tensor([[1.0, 1.0]])
        b = Tensor([[1.0, 0.0]])
        assert math.isclose(T.cosine_sim(a, b).item(), 1.0 / math.sqrt(2.0), rel_tol=1e-6)

    def test_cosine_sim_known_gradients(self):
        a = Tensor(np.array([[1.0, 1.0]]), requires_grad=True)
        b = Tensor(np.array([[1.0, 0.0]]), requires_grad=True)
        with Tape():
            backward(T.cosine_sim(a, b))
        # d cos / da = b/(|a||b|) - cos * a/|a|^2 at a=[1,1], b=[1,0]
        inv = 1.0 / (2.0 * math.sqrt(2.0))
        assert np.allclose(a.grad, [[inv, -inv]], atol=1e-6)
        assert np.allclose(b.grad, [[0.0, 1.0 / math.sqrt(2.0)]], atol=1e-6)

    def test_cosine_rows_all_pairs(self):
        rng = rng_for("cos-fwd", 1)
        a = rng.normal(size=(3, 5))
        b = rng.normal(size=(4, 5))
        got = T.cosine_rows(Tensor(a), Tensor(b)).data
        for i in range(3):
            for j in range(4):
                want = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
                assert math.isclose(float(got[i, j]), want, rel_tol=1e-6)

    def test_cosine_rows_zero_row_is_guarded(self):
        a = np.zeros((1, 4))
        b = np.ones((2, 4))
        got = T.cosine_rows(Tensor(a), Tensor(b)).data
        assert np.all(np.isfinite(got))
        assert np.allclose(got, 0.0, atol=1e-4)

    def test_normalize_rows_unit_norm(self):
        rng = rng_for("norm-fwd", 2)
        x = rng.normal(size=(6, 7))
        y = T.normalize_rows(Tensor(x)).data
        assert np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-5)

    def test_argmax_rows_breaks_ties_low(self):
        logits = np.array([[0.5, 0.5, 0.1], [0.1, 0.2, 0.2]])
        assert T.argmax_rows(logits).tolist() == [0, 1]

    def test_matmul_batched_matches_loop(self):
        rng = rng_for("bmm", 3)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(4, 5, 2))
        got = T.matmul(Tensor(a), Tensor(b)).data
        want = np.stack([a[i] @ b[i] for i in range(4)])
        assert np.allclose(got, want, atol=1e-6)

    def test_concat_narrow_roundtrip(self):
        rng = rng_for("cat", 4)
        parts = [rng.normal(size=(2, k)) for k in (3, 1, 4)]
        whole = T.concat([Tensor(p) for p in parts], axis=1)
        start = 0
        for p in parts:
            piece = T.narrow(whole, 1, start, p.shape[1]).data
            assert np.allclose(piece, p)
            start += p.shape[1]


class TestShapeContracts:
    def test_matmul_rejects_mismatched_inner(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_narrow_rejects_overrun(self):
        with pytest.raises(ShapeError):
            T.narrow(Tensor(np.ones((2, 3))), 1, 2, 5)

    def test_concat_rejects_rank_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones(2))], axis=0)

    def test_cross_entropy_rejects_bad_labels(self):
        from promptcl.errors import InputError

        with pytest.raises(InputError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestGradientSpotChecks:
    """Small FD sweeps; the exhaustive suite lives in the acceptance tests."""

    N_TRIALS = 10

    def test_add_broadcast(self):
        for k in range(self.N_TRIALS):
            rng = rng_for("add", k)
            fd_gradcheck(lambda a, b: T.tensor_sum(T.mul(T.add(a, b), b)),
                         (rng.normal(size=(3, 4)), rng.normal(size=(1, 4))),
                         trial_tag=f"add#{k}")

    def test_matmul(self):
        for k in range(self.N_TRIALS):
            rng = rng_for("mm", k)
            fd_gradcheck(lambda a, b: T.tensor_sum(T.matmul(a, b)),
                         (rng.normal(size=(3, 4)), rng.normal(size=(4, 2))),
                         trial_tag=f"mm#{k}")

    def test_softmax(self):
        for k in range(self.N_TRIALS):
            rng = rng_for("sm", k)
            w = rng.normal(size=(3, 5))
            fd_gradcheck(lambda x: T.tensor_sum(T.mul(T.softmax(x), Tensor(w))),
                         (rng.normal(size=(3, 5)),), trial_tag=f"sm#{k}")

    def test_layernorm(self):
        for k in range(self.N_TRIALS):
            rng = rng_for("ln", k)
            w = rng.normal(size=(4, 6))
            fd_gradcheck(
                lambda x, g, b: T.tensor_sum(T.mul(T.layernorm(x, g, b), Tensor(w))),
                (rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)),
                trial_tag=f"ln#{k}")

    def test_cross_entropy(self):
        for k in range(self.N_TRIALS):
            rng = rng_for("ce", k)
            labels = rng.integers(0, 3, size=5)
            fd_gradcheck(lambda x: T.cross_entropy(x, labels),
                         (rng.normal(size=(5, 3)),), trial_tag=f"ce#{k}")

    def test_cosine_rows(self):
        for k in range(self.N_TRIALS):
            rng = rng_for("cr", k)
            w = rng.normal(size=(3, 4))
            fd_gradcheck(
                lambda a, b: T.tensor_sum(T.mul(T.cosine_rows(a, b), Tensor(w))),
                (rng.normal(size=(3, 5)), rng.normal(size=(4, 5))),
                trial_tag=f"cr#{k}")

    def test_gelu(self):
        for k in range(self.N_TRIALS):
            rng = rng_for("gelu", k)
            w = rng.normal(size=(3, 4))
            fd_gradcheck(lambda x: T.tensor_sum(T.mul(T.gelu(x), Tensor(w))),
                         (rng.normal(size=(3, 4)),), trial_tag=f"gelu#{k}")

    def test_normalize_rows(self):
        for k in range(self.N_TRIALS):
            rng = rng_for("nr", k)
            w = rng.normal(size=(3, 4))
            fd_gradcheck(lambda x: T.tensor_sum(T.mul(T.normalize_rows(x), Tensor(w))),
                         (rng.normal(size=(3, 4)),), trial_tag=f"nr#{k}")
