import json
import logging

import numpy as np
import pytest

from ucmoa.errors import ConfigError, DataError, ShapeError
from ucmoa.labeler import RawSample
from ucmoa.policy_sim import (
    ConditionedPolicy,
    OnlineBuffer,
    SimConfig,
    Style,
    SynthEnv,
    builtin_env,
    cross_entropy,
    evaluate_consistency,
    generate_offline_dataset,
    offline_train,
    online_iteration,
    preference_grid,
    run_pipeline,
    sample_response,
    sample_responses,
    separable_env,
    sweep_pareto,
    tradeoff_env,
)
from ucmoa.reward_stats import RunningBounds

FAST = dict(n_offline=300, offline_epochs=60, n_generate=200, online_epochs=60, n_eval=50)


@pytest.fixture(scope="module")
def pipeline(small_ensemble):
    return run_pipeline(tradeoff_env(), small_ensemble, SimConfig(**FAST), seed=0)


class TestEnvironment:
    def test_zero_noise_returns_mean(self, rng):
        env = SynthEnv(2, [Style([1.0, 0.0], [0.0, 0.0]), Style([0.0, 1.0], [0.0, 0.0])])
        np.testing.assert_array_equal(sample_response(env, 1, rng), [0.0, 1.0])

    def test_clt_bound(self, rng):
        env = tradeoff_env()
        draws = sample_responses(env, np.full(10_000, 2), rng)
        style = env.styles[2]
        assert np.all(np.abs(draws.mean(axis=0) - style.mean) <= 4 * style.stdev / 100)

    def test_seeded(self):
        env = tradeoff_env()
        a = sample_responses(env, [0, 1, 2], np.random.default_rng(5))
        b = sample_responses(env, [0, 1, 2], np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_validation(self, rng):
        with pytest.raises(ConfigError):
            SynthEnv(2, [Style([1.0, 0.0], [0.1, 0.1])])
        with pytest.raises(ConfigError):
            SynthEnv(2, [Style([1.0, 0.0], [0.1, 0.1])] * 2)
        with pytest.raises(ShapeError):
            SynthEnv(2, [Style([1.0], [0.1]), Style([0.0], [0.1])])
        with pytest.raises(ConfigError):
            sample_response(tradeoff_env(), 99, rng)

    def test_bundled_specs_round_trip(self, tmp_path):
        for name in ("tradeoff", "separable"):
            env = builtin_env(name)
            path = tmp_path / f"{name}.json"
            path.write_text(json.dumps(env.to_dict()))
            np.testing.assert_array_equal(SynthEnv.load(path).means, env.means)
        assert separable_env().n_styles == 9
        with pytest.raises(ConfigError):
            builtin_env("nope")


class TestOfflineTrain:
    def test_deterministic_pairs_converge(self):
        tokens = np.repeat(np.arange(3), 20)
        styles = np.array([2, 0, 1])[tokens]
        policy = offline_train(ConditionedPolicy.uniform(3, 4), (tokens, styles), epochs=500, lr=0.5)
        assert [int(np.argmax(policy.probs(t))) for t in range(3)] == [2, 0, 1]

    def test_zero_epochs(self):
        p = ConditionedPolicy.uniform(2, 3)
        out = offline_train(p, (np.array([0]), np.array([1])), epochs=0)
        np.testing.assert_array_equal(out.logits, p.logits)

    def test_converges_to_empirical_conditional(self, rng):
        tokens = rng.integers(0, 2, 400)
        styles = rng.integers(0, 3, 400)
        policy = offline_train(ConditionedPolicy.uniform(2, 3), (tokens, styles), epochs=3000, lr=0.5)
        for t in range(2):
            freq = np.bincount(styles[tokens == t], minlength=3) / np.sum(tokens == t)
            np.testing.assert_allclose(policy.probs(t), freq, atol=2e-3)

    def test_loss_non_increasing(self, rng):
        tokens = rng.integers(0, 3, 200)
        styles = (tokens + rng.integers(0, 2, 200)) % 4
        history = []
        offline_train(ConditionedPolicy.uniform(3, 4), (tokens, styles), epochs=100, lr=0.5, history=history)
        assert all(b <= a + 1e-6 for a, b in zip(history, history[1:]))
        assert history[-1] == pytest.approx(cross_entropy(offline_train(ConditionedPolicy.uniform(3, 4), (tokens, styles), 100, 0.5), tokens, styles))

    def test_empty(self):
        with pytest.raises(DataError):
            offline_train(ConditionedPolicy.uniform(2, 3), (np.array([], int), np.array([], int)), epochs=3)


class TestBuffer:
    def test_fifo(self):
        buf = OnlineBuffer(capacity=3)
        buf.extend(np.eye(2)[[0, 1, 0, 1, 0]], [0, 1, 2, 3, 4], [0] * 5)
        assert len(buf) == 3
        assert list(buf.styles) == [2, 3, 4]

    def test_copy_is_independent(self):
        buf = OnlineBuffer(capacity=10)
        buf.extend([[0.0, 1.0]], [1], [0])
        other = buf.copy()
        other.extend([[1.0, 1.0]], [2], [1])
        assert len(buf) == 1 and len(other) == 2


class TestOnline:
    def _setup(self, small_ensemble, tau):
        env = tradeoff_env()
        raw = generate_offline_dataset(env, 200, np.random.default_rng(0))
        rewards = np.stack([s.rewards for s in raw])
        buf = OnlineBuffer(1000)
        buf.extend(rewards, [s.extra["style"] for s in raw], [0] * len(raw))
        cfg = SimConfig(n_generate=100, online_epochs=20, tau=tau)
        policy = ConditionedPolicy.uniform(len(small_ensemble), env.n_styles)
        return policy, env, RunningBounds.from_samples(rewards), buf, cfg

    def test_tau_zero_accepts_all(self, small_ensemble):
        policy, env, bounds, buf, cfg = self._setup(small_ensemble, 0.0)
        _, new_buf, stats = online_iteration(policy, env, small_ensemble, bounds, buf, cfg, np.random.default_rng(1))
        assert stats["accept_rate"] == 1.0
        assert len(new_buf) == len(buf) + 100

    def test_impossible_tau(self, small_ensemble, caplog):
        policy, env, bounds, buf, cfg = self._setup(small_ensemble, 1.01)
        with caplog.at_level(logging.WARNING):
            new_policy, new_buf, stats = online_iteration(policy, env, small_ensemble, bounds, buf, cfg, np.random.default_rng(1))
        assert stats["accept_rate"] == 0.0
        np.testing.assert_array_equal(new_policy.logits, policy.logits)
        assert len(new_buf) == len(buf)
        assert "no samples" in caplog.text

    def test_admitted_samples_clear_threshold(self, small_ensemble):
        policy, env, bounds, buf, cfg = self._setup(small_ensemble, 0.7)
        _, new_buf, stats = online_iteration(policy, env, small_ensemble, bounds, buf, cfg, np.random.default_rng(2))
        admitted = list(new_buf.percentiles)[len(buf):]
        assert len(admitted) == stats["n_accepted"]
        assert all(p >= 0.7 for p in admitted)


class TestPipeline:
    def test_shapes(self, pipeline, small_ensemble):
        assert len(pipeline.policies) == 3
        assert [s["iter"] for s in pipeline.stats] == [0, 1, 2]
        assert all(0.0 <= s["accept_rate"] <= 1.0 for s in pipeline.stats)
        assert all(len(s["mean_utility_token"]) == len(small_ensemble) for s in pipeline.stats)

    def test_offline_only(self, small_ensemble):
        res = run_pipeline(tradeoff_env(), small_ensemble, SimConfig(**{**FAST, "online_iters": 0}), seed=0)
        assert len(res.policies) == 1 and len(res.stats) == 1

    def test_deterministic(self, small_ensemble, pipeline):
        again = run_pipeline(tradeoff_env(), small_ensemble, SimConfig(**FAST), seed=0)
        np.testing.assert_array_equal(again.policies[-1].logits, pipeline.policies[-1].logits)

    def test_external_offline_records(self, small_ensemble):
        env = tradeoff_env()
        raw = generate_offline_dataset(env, 100, np.random.default_rng(9))
        res = run_pipeline(env, small_ensemble, SimConfig(**{**FAST, "online_iters": 0}), seed=0, offline=raw)
        assert len(res.offline_labeled) == 100
        bad = [RawSample("x", "p", "r", np.zeros(2), {})]
        with pytest.raises(DataError):
            run_pipeline(env, small_ensemble, SimConfig(**FAST), seed=0, offline=bad)


class TestEvaluation:
    def test_consistency_shape_and_range(self, pipeline, small_ensemble):
        for mode in ("percentile", "minmax"):
            means = evaluate_consistency(
                pipeline.policies[-1], tradeoff_env(), small_ensemble, pipeline.bounds[-1], 0, 200, np.random.default_rng(0), mode
            )
            assert means.shape == (len(small_ensemble),)
            assert ((means >= 0) & (means <= 1)).all()

    def test_consistency_errors(self, pipeline, small_ensemble):
        args = (pipeline.policies[-1], tradeoff_env(), small_ensemble, pipeline.bounds[-1])
        with pytest.raises(DataError):
            evaluate_consistency(*args, 0, 0, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            evaluate_consistency(*args, 0, 10, np.random.default_rng(0), "zscore")

    def test_sweep(self, pipeline, small_ensemble):
        prefs = preference_grid(4)
        np.testing.assert_allclose(prefs.sum(axis=1), 1.0)
        run = lambda p: sweep_pareto(pipeline.policies[-1], tradeoff_env(), small_ensemble, pipeline.bounds[-1], p, 100, np.random.default_rng(1))
        pts, chosen = run(prefs)
        assert pts.shape == (4, 2) and chosen.shape == (4,)
        assert run(prefs[:1])[0].shape == (1, 2)
        same, _ = run(np.repeat(prefs[:1], 2, axis=0))
        first, _ = run(prefs[:1])
        np.testing.assert_array_equal(same[0], first[0])

    def test_separable_endpoints_follow_favoured_dimension(self):
        """With one axis-aligned utility per objective, the endpoints land on the matching side."""
        from ucmoa.ensemble import UtilityEnsemble
        from ucmoa.monotone_net import MonotoneLayer, MonotoneNet, StrictUtility

        ens = UtilityEnsemble(
            [StrictUtility(MonotoneNet(2, [MonotoneLayer(np.array([w]), np.zeros(1))])) for w in ([1.0, 0.0], [0.0, 1.0])], 2
        )
        env = separable_env()
        res = run_pipeline(env, ens, SimConfig(**FAST), seed=1)
        pts, chosen = sweep_pareto(res.policies[-1], env, ens, res.bounds[-1], [[1.0, 0.0], [0.0, 1.0]], 300, np.random.default_rng(0))
        assert chosen.tolist() == [0, 1]
        assert pts[0, 0] > pts[1, 0] and pts[1, 1] > pts[0, 1]
