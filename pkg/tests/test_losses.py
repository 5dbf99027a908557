import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from octfluid.losses import LossConfig, jaccard_class_loss, total_loss


def one_hot(codes):
    return np.eye(3, dtype=np.float64)[codes]


class TestJaccardClassLoss:
    def test_perfect_prediction_is_zero(self):
        rng = np.random.default_rng(0)
        y = (rng.random((12, 12)) > 0.7).astype(np.float64)
        assert float(jaccard_class_loss(torch.tensor(y), torch.tensor(y), 100.0)) == pytest.approx(0.0, abs=1e-9)

    def test_hand_value_all_missed(self):
        # 100 positives, prediction identically zero, alpha=100:
        # J = (1 - 100/200) * 100 = 50
        y = torch.zeros(20, 20)
        y[:5, :] = 1
        j = jaccard_class_loss(y, torch.zeros(20, 20), 100.0)
        assert float(j) == pytest.approx(50.0, abs=1e-6)

    def test_empty_class_is_zero(self):
        j = jaccard_class_loss(torch.zeros(8, 8), torch.zeros(8, 8), 100.0)
        assert float(j) == pytest.approx(0.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            jaccard_class_loss(torch.zeros(2, 2), torch.zeros(2, 3), 100.0)

    def test_alpha_domain(self):
        with pytest.raises(ValueError, match="alpha"):
            jaccard_class_loss(torch.zeros(2, 2), torch.zeros(2, 2), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(1.0, 200.0))
    def test_bounds(self, seed, alpha):
        rng = np.random.default_rng(seed)
        y = (rng.random((10, 10)) > 0.5).astype(np.float64)
        yhat = rng.random((10, 10))
        j = float(jaccard_class_loss(torch.tensor(y), torch.tensor(yhat), alpha))
        assert 0.0 <= j < alpha

    def test_spatial_permutation_symmetry(self):
        rng = np.random.default_rng(1)
        y = (rng.random(64) > 0.5).astype(np.float64)
        yhat = rng.random(64)
        perm = rng.permutation(64)
        a = float(jaccard_class_loss(torch.tensor(y.reshape(8, 8)),
                                     torch.tensor(yhat.reshape(8, 8)), 100.0))
        b = float(jaccard_class_loss(torch.tensor(y[perm].reshape(8, 8)),
                                     torch.tensor(yhat[perm].reshape(8, 8)), 100.0))
        assert a == pytest.approx(b, rel=1e-12)


class TestLossConfig:
    def test_default_weights_favor_fluid(self):
        cfg = LossConfig()
        assert cfg.class_weights == (0.5, 0.25, 0.25)
        assert cfg.weights_by_class_index() == (0.25, 0.25, 0.5)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            LossConfig(class_weights=(0.5, 0.3, 0.3))

    def test_fluid_weight_must_dominate(self):
        with pytest.raises(ValueError, match="largest"):
            LossConfig(class_weights=(0.2, 0.5, 0.3))

    def test_alpha_positive(self):
        with pytest.raises(ValueError, match="alpha"):
            LossConfig(alpha=-1.0)


class TestTotalLoss:
    def test_perfect_prediction_without_ce_is_zero(self):
        rng = np.random.default_rng(2)
        y = one_hot(rng.integers(0, 3, size=(10, 10)))
        cfg = LossConfig(include_cross_entropy=False)
        assert float(total_loss(torch.tensor(y), torch.tensor(y), cfg)) == pytest.approx(0.0, abs=1e-9)

    def test_weighted_sum_hand_value(self):
        # fluid class misses 100 pixels entirely (J=50); tissue and
        # background are exact (J=0): total = 0.5 * 50 = 25
        y = np.zeros((20, 20, 3))
        y[:5, :, 2] = 1
        y[5:, :, 0] = 1
        yhat = np.zeros_like(y)
        yhat[..., 0] = y[..., 0]
        yhat[..., 1] = y[..., 1]
        cfg = LossConfig(include_cross_entropy=False)
        assert float(total_loss(torch.tensor(y), torch.tensor(yhat), cfg)) == pytest.approx(25.0, abs=1e-6)

    def test_cross_entropy_added_when_enabled(self):
        rng = np.random.default_rng(3)
        y = one_hot(rng.integers(0, 3, size=(8, 8)))
        raw = rng.random((8, 8, 3)) + 0.1
        yhat = raw / raw.sum(axis=-1, keepdims=True)
        without = float(total_loss(torch.tensor(y), torch.tensor(yhat),
                                   LossConfig(include_cross_entropy=False)))
        with_ce = float(total_loss(torch.tensor(y), torch.tensor(yhat), LossConfig()))
        expected_ce = -np.mean(np.sum(y * np.log(np.clip(yhat, 1e-7, None)), axis=-1))
        assert with_ce == pytest.approx(without + expected_ce, rel=1e-9)

    def test_gradient_matches_finite_differences_f64(self):
        rng = np.random.default_rng(4)
        cfg = LossConfig()
        for _ in range(5):
            yhat = rng.uniform(0.05, 0.95, size=(8, 8, 3))
            y = one_hot(rng.integers(0, 3, size=(8, 8)))
            t = torch.tensor(yhat, dtype=torch.float64, requires_grad=True)
            total_loss(torch.tensor(y, dtype=torch.float64), t, cfg).backward()
            analytic = t.grad.numpy()
            eps = 1e-6
            fd = np.zeros_like(yhat)
            y64 = torch.tensor(y, dtype=torch.float64)
            for idx in np.ndindex(yhat.shape):
                plus, minus = yhat.copy(), yhat.copy()
                plus[idx] += eps
                minus[idx] -= eps
                fd[idx] = (
                    float(total_loss(y64, torch.tensor(plus), cfg))
                    - float(total_loss(y64, torch.tensor(minus), cfg))
                ) / (2 * eps)
            rel = np.linalg.norm(fd - analytic) / np.linalg.norm(fd)
            assert rel <= 1e-6

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_jaccard_part_bounded_by_alpha(self, seed):
        rng = np.random.default_rng(seed)
        y = one_hot(rng.integers(0, 3, size=(6, 6)))
        raw = rng.random((6, 6, 3)) + 0.05
        yhat = raw / raw.sum(axis=-1, keepdims=True)
        cfg = LossConfig(include_cross_entropy=False)
        loss = float(total_loss(torch.tensor(y), torch.tensor(yhat), cfg))
        assert 0.0 <= loss < cfg.alpha
