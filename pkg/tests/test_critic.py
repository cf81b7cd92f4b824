import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recallnet.critic import (
    LOG_SIM_FLOOR, CriticParams, EvaluatorParams, ValidatorParams, compound_reward, evaluate,
    evaluator_logit, referencer, validator_score,
)
from recallnet.errors import ConfigError, DimensionError
from recallnet.trainer import fit_validator

LOG_HALF = math.log(0.5)


def log_sigmoid(z):
    return -math.log1p(math.exp(-z)) if z >= 0 else z - math.log1p(math.exp(z))


def oracle_bi(ev, v, u):
    def tower(x, pre):
        W0, b0, W1, b1 = (ev[pre + s].data for s in ("_W0", "_b0", "_W1", "_b1"))
        h = [max(b0[r] + sum(W0[r, c] * x[c] for c in range(len(x))), 0.0) for r in range(len(b0))]
        return [b1[r] + sum(W1[r, c] * h[c] for c in range(len(h))) for r in range(len(b1))]
    a, b = tower(v, "ffn1"), tower(u, "ffn2")
    z = sum(ev["W_e"].data[0, i] * a[i] * b[i] for i in range(len(a)))
    return log_sigmoid(z)


def critic(seed=0, mode="BI", measure="cosine", d=4, du=5):
    rng = np.random.default_rng(seed)
    return CriticParams(EvaluatorParams(mode, d, du, rng), ValidatorParams(d, rng), measure)


class TestEvaluator:
    def test_zero_weighting_gives_log_half(self):
        c = critic()
        c.evaluator["W_e"].data[:] = 0.0
        assert evaluate(c.evaluator, np.ones(4), np.ones(5)).item() == pytest.approx(LOG_HALF, abs=1e-15)

    def test_monotone_in_logit(self):
        c = critic()
        W = c.evaluator["W_e"].data.copy()
        v, u = np.ones(4), np.ones(5)
        z0 = evaluator_logit(c.evaluator, v, u).item()
        outs = []
        for s in (1.0, 2.0, 4.0, 64.0, 1e5):
            c.evaluator["W_e"].data = W * s * np.sign(z0)
            outs.append(evaluate(c.evaluator, v, u).item())
        assert all(a < b for a, b in zip(outs, outs[1:]))
        assert outs[-1] > -1e-6

    @pytest.mark.parametrize("seed", range(4))
    def test_bi_matches_oracle(self, seed):
        c = critic(seed)
        rng = np.random.default_rng(seed + 5)
        v, u = rng.normal(size=4), rng.normal(size=5)
        assert evaluate(c.evaluator, v, u).item() == pytest.approx(oracle_bi(c.evaluator, v, u), abs=1e-10)

    def test_key_scored_like_item(self):
        c = critic(1)
        key = np.random.default_rng(0).normal(size=(3, 4))
        u = np.ones((3, 5))
        batch = evaluate(c.evaluator, key, u).data
        single = [evaluate(c.evaluator, key[i], u[i]).item() for i in range(3)]
        assert np.allclose(batch, single, atol=1e-14)

    def test_fc_broadcasts_candidates(self):
        c = critic(0, "FC")
        out = evaluator_logit(c.evaluator, np.ones((2, 3, 4)), np.ones((2, 5)))
        assert out.shape == (2, 3)

    def test_dimension_checked(self):
        with pytest.raises(DimensionError):
            evaluate(critic().evaluator, np.ones(3), np.ones(5))
        with pytest.raises(ConfigError):
            EvaluatorParams("XX", 2, 2, np.random.default_rng(0))


class TestValidator:
    def test_zero_logit(self):
        c = critic()
        for k in ("W2", "b2"):
            c.validator[k].data[:] = 0.0
        assert validator_score(c.validator, np.ones(4)).item() == pytest.approx(LOG_HALF, abs=1e-15)

    def test_repeatable_and_total(self):
        c = critic()
        x = np.array([1e6, -1e6, 0.0, 3.0])
        a = validator_score(c.validator, x).item()
        assert a == validator_score(c.validator, x).item()
        assert math.isfinite(a)

    def test_separable_clusters(self):
        rng = np.random.default_rng(0)
        v = ValidatorParams(4, rng)
        real = rng.normal(loc=2.0, size=(300, 4))
        fake = rng.normal(loc=-2.0, size=(300, 4))
        acc = fit_validator(v, real, fake, 1e-2, 20, 32, rng)
        assert acc >= 0.9
        assert validator_score(v, real).data.mean() > validator_score(v, fake).data.mean()

    def test_identical_distributions_near_chance(self):
        rng = np.random.default_rng(1)
        v = ValidatorParams(4, rng)
        pool = rng.normal(size=(4000, 4))
        acc = fit_validator(v, pool[:2000], pool[2000:], 1e-3, 3, 64, rng)
        assert abs(acc - 0.5) <= 0.05


class TestReferencer:
    def test_identical(self):
        assert referencer(np.array([1.0, 2.0]), np.array([1.0, 2.0])).item() == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert referencer(np.array([1.0, 0.0]), np.array([0.0, 3.0])).item() == pytest.approx(LOG_HALF, abs=1e-15)

    def test_opposite_clamped(self):
        got = referencer(np.array([1.0, 0.0]), np.array([-2.0, 0.0])).item()
        assert got == pytest.approx(math.log(1e-7), abs=1e-12)
        assert got == pytest.approx(-16.118, abs=1e-3)

    def test_euclidean_branch(self):
        assert referencer(np.zeros(2), np.array([3.0, 4.0]), "euclidean").item() == pytest.approx(-math.log(6))
        far = referencer(np.zeros(2), np.array([1e9, 0.0]), "euclidean").item()
        assert far == LOG_SIM_FLOOR

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_bounded(self, a, b):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        g = referencer(a, b).item()
        assert LOG_SIM_FLOOR - 1e-12 <= g <= 1e-12


class TestCompound:
    def test_evaluation_only(self):
        c = critic(2)
        rng = np.random.default_rng(0)
        k, u, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
        rb = compound_reward(c, k, u, v, (1, 0, 0))
        assert np.array_equal(rb.total.data, rb.phi.data)

    def test_key_equal_candidate(self):
        c = critic(3)
        rng = np.random.default_rng(1)
        k, u = rng.normal(size=(2, 4)), rng.normal(size=(2, 5))
        rb = compound_reward(c, k, u, k.copy(), (0.7, 0.3, 5.0))
        assert np.allclose(rb.gamma.data, 0.0, atol=1e-15)
        assert np.allclose(rb.total.data, 0.7 * rb.phi.data + 0.3 * rb.omega.data, atol=1e-15)

    @pytest.mark.parametrize("seed", range(4))
    def test_component_sum_oracle(self, seed):
        c = critic(seed)
        rng = np.random.default_rng(seed + 40)
        k, u, v = rng.normal(size=(5, 4)), rng.normal(size=(5, 5)), rng.normal(size=(5, 4))
        rb = compound_reward(c, k, u, v, (1, 1, 1))
        for i in range(5):
            phi = oracle_bi(c.evaluator, k[i], u[i])
            omega = validator_score(c.validator, k[i]).item()
            cos = k[i] @ v[i] / (np.linalg.norm(k[i]) * np.linalg.norm(v[i]))
            gamma = math.log(min(max(0.5 * (1 + cos), 1e-7), 1.0))
            assert rb.total.data[i] == pytest.approx(phi + omega + gamma, abs=1e-12)
        assert set(rb.means()) == {"phi", "omega", "gamma", "total"}
