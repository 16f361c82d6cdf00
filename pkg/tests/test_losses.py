"""Objectives: the similarity penalty in both scoring modes, and the total."""

from __future__ import annotations

import numpy as np
import pytest

import promptcl.tensor as T
from promptcl.errors import ContractError, InputError, ShapeError
from promptcl.losses import (
    DEFAULT_SIMILARITY_WEIGHT,
    LossConfig,
    loss_similarity,
    loss_total,
)
from promptcl.tensor import Tensor

from conftest import rng_for


def raw_similarity_loop(p, keys, eps):
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(keys.shape[0]):
            na = max(np.linalg.norm(p[i]), eps)
            nb = max(np.linalg.norm(keys[j]), eps)
            total += float(p[i] @ keys[j]) / (na * nb)
    return 1.0 - total / (p.shape[0] * keys.shape[0])


class TestConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.similarity_weight == DEFAULT_SIMILARITY_WEIGHT == 0.001
        assert cfg.ls_mode == "raw_cosine"
        assert cfg.p_star_source == "aggregated_phi"

    def test_validation(self):
        with pytest.raises(InputError):
            LossConfig(similarity_weight=-0.1)
        with pytest.raises(InputError):
            LossConfig(ls_mode="softmax")
        with pytest.raises(InputError):
            LossConfig(p_star_source="phi")


class TestLiteralSoftmaxDegeneracy:
    """Softmax rows always sum to one, so this mode is a constant function."""

    def test_value_is_m_minus_one_over_m(self):
        for trial in range(10):
            rng = rng_for("ls-lit", trial)
            b = int(rng.integers(1, 5))
            m = int(rng.integers(2, 12))
            d = int(rng.integers(2, 9))
            p = Tensor(rng.normal(size=(b, d)))
            k = Tensor(rng.normal(size=(m, d)))
            got = loss_similarity(p, k, mode="literal_softmax").item()
            assert abs(got - (m - 1) / m) < 1e-12

    def test_gradient_is_identically_zero(self):
        rng = rng_for("ls-lit-grad", 0)
        p = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(8, 6)), requires_grad=True)
        with T.Tape():
            T.backward(loss_similarity(p, k, mode="literal_softmax"))
        assert float(np.abs(p.grad).max()) < 1e-12
        assert float(np.abs(k.grad).max()) < 1e-12

    def test_raw_mode_does_produce_gradient(self):
        rng = rng_for("ls-raw-grad", 0)
        p = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(8, 6)), requires_grad=True)
        with T.Tape():
            T.backward(loss_similarity(p, k, mode="raw_cosine"))
        assert float(np.linalg.norm(p.grad)) > 1e-3


class TestRawCosine:
    def test_matches_loop(self):
        for trial in range(10):
            rng = rng_for("ls-raw", trial)
            b = int(rng.integers(1, 5))
            m = int(rng.integers(1, 12))
            d = int(rng.integers(2, 9))
            p = rng.normal(size=(b, d))
            k = rng.normal(size=(m, d))
            got = loss_similarity(Tensor(p), Tensor(k)).item()
            assert abs(got - raw_similarity_loop(p, k, T.NORM_EPS)) < 1e-10

    def test_identical_rows_change_nothing(self):
        rng = rng_for("ls-dup", 0)
        row = rng.normal(size=(1, 7))
        keys = rng.normal(size=(9, 7))
        single = loss_similarity(Tensor(row), Tensor(keys)).item()
        stacked = loss_similarity(Tensor(np.repeat(row, 4, axis=0)), Tensor(keys)).item()
        assert abs(single - stacked) < 1e-12

    def test_perfect_alignment_gives_zero(self):
        k = np.array([[2.0, 0.0], [5.0, 0.0]])
        p = np.array([[1.0, 0.0]])
        assert abs(loss_similarity(Tensor(p), Tensor(k)).item()) < 1e-12

    def test_scale_invariance(self):
        rng = rng_for("ls-scale", 0)
        p = rng.normal(size=(2, 5))
        k = rng.normal(size=(6, 5))
        a = loss_similarity(Tensor(p), Tensor(k)).item()
        b = loss_similarity(Tensor(p * 100.0), Tensor(k * 0.01)).item()
        assert abs(a - b) < 1e-10


class TestSimilarityContracts:
    def test_bad_mode(self):
        with pytest.raises(InputError):
            loss_similarity(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), mode="mean")

    def test_rank_contract(self):
        with pytest.raises(ShapeError):
            loss_similarity(Tensor(np.zeros(3)), Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeError):
            loss_similarity(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_batch_argument(self):
        p = Tensor(np.ones((2, 3)))
        k = Tensor(np.ones((4, 3)))
        loss_similarity(p, k, batch=2)
        with pytest.raises(ContractError):
            loss_similarity(p, k, batch=3)
        with pytest.raises(ContractError):
            loss_similarity(p, k, batch=0)


class TestTotalLoss:
    def test_zero_weight_returns_ce_object(self):
        ce = Tensor(np.array(1.25))
        ls = Tensor(np.array(0.5))
        assert loss_total(ce, ls, weight=0.0) is ce
        assert loss_total(ce, None, weight=0.7) is ce

    def test_weighted_sum(self):
        ce = Tensor(np.array(1.25))
        ls = Tensor(np.array(0.5))
        assert abs(loss_total(ce, ls, weight=0.001).item() - 1.2505) < 1e-12
        assert abs(loss_total(ce, ls, weight=2.0).item() - 2.25) < 1e-12

    def test_negative_weight_rejected(self):
        with pytest.raises(InputError):
            loss_total(Tensor(np.array(1.0)), Tensor(np.array(1.0)), weight=-1.0)

    def test_total_is_differentiable_through_both_terms(self):
        rng = rng_for("lt-grad", 0)
        logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        p = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        k = Tensor(rng.normal(size=(6, 5)))
        with T.Tape():
            ce = T.cross_entropy(logits, np.array([0, 1, 2, 1]))
            total = loss_total(ce, loss_similarity(p, k), weight=0.5)
            T.backward(total)
        assert logits.grad is not None and np.linalg.norm(logits.grad) > 0
        assert p.grad is not None and np.linalg.norm(p.grad) > 0
