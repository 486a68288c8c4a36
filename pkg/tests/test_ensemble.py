import io
import json

import numpy as np
import pytest

from ucmoa.ensemble import (
    EnsembleConfig,
    UtilityEnsemble,
    diversity_objective,
    ensemble_from_dict,
    ensemble_to_dict,
    grad_discrepancy,
    initial_ensemble,
    linear_ensemble,
    load_ensemble,
    min_pairwise_discrepancy,
    normalize_net_range,
    probe_batch,
    sample_pairs,
    sample_unit_cube,
    save_ensemble,
    train_ensemble,
    value_discrepancy,
)
from ucmoa.errors import ConfigError, DataError, ParseError, ShapeError, StateError
from ucmoa.monotone_net import MonotoneLayer, MonotoneNet, forward, init_net


def const_net(c, k=2):
    return MonotoneNet(k, [MonotoneLayer(np.zeros((1, k)), np.array([float(c)]))])


def linear_net(w):
    w = np.asarray(w, dtype=float)
    return MonotoneNet(len(w), [MonotoneLayer(w[None, :], np.zeros(1))])


class TestDiscrepancies:
    def test_value_discrepancy_uses_nearest_peer(self):
        nets = [const_net(0.0), const_net(1.0), const_net(3.0)]
        batch = np.random.default_rng(0).uniform(size=(16, 2))
        assert value_discrepancy(0, nets, batch) == pytest.approx(1.0)
        assert value_discrepancy(2, nets, batch) == pytest.approx(4.0)

    def test_grad_discrepancy_of_linear_nets(self):
        # quotient along a unit direction u is w . u
        nets = [linear_net([1.0, 0.0]), linear_net([0.0, 1.0])]
        z = np.zeros((1, 2))
        z2 = np.array([[1.0, 0.0]])
        assert grad_discrepancy(0, nets, (z, z2)) == pytest.approx(1.0)

    def test_identical_members_have_zero_discrepancy(self, rng):
        net = init_net(2, rng)
        batch = sample_unit_cube(8, 2, rng)
        pairs = sample_pairs(8, 2, rng)
        assert diversity_objective(0, [net, net.copy()], batch, pairs, 0.5) == 0.0

    def test_mu_mixes(self, rng):
        nets = [init_net(2, rng) for _ in range(3)]
        batch = sample_unit_cube(8, 2, rng)
        pairs = sample_pairs(8, 2, rng)
        v, g = value_discrepancy(1, nets, batch), grad_discrepancy(1, nets, pairs)
        assert diversity_objective(1, nets, batch, pairs, 1.0) == pytest.approx(v)
        assert diversity_objective(1, nets, batch, pairs, 0.0) == pytest.approx(g)
        assert diversity_objective(1, nets, batch, pairs, 0.3) == pytest.approx(0.3 * v + 0.7 * g)

    def test_needs_two_members(self, rng):
        with pytest.raises(ConfigError):
            value_discrepancy(0, [init_net(2, rng)], sample_unit_cube(4, 2, rng))

    def test_degenerate_pair(self):
        z = np.zeros((2, 2))
        with pytest.raises(DataError):
            grad_discrepancy(0, [const_net(0), const_net(1)], (z, z.copy()))

    def test_empty_batch(self, rng):
        with pytest.raises(DataError):
            sample_unit_cube(0, 2, rng)

    def test_pairs_never_coincide(self, rng):
        z, z2 = sample_pairs(500, 1, rng)
        assert not np.any(np.all(z == z2, axis=1))


class TestTraining:
    def test_config_rejects_single_member(self):
        with pytest.raises(ConfigError):
            EnsembleConfig(m_utilities=1).validate()

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            EnsembleConfig.from_dict({"m_utilities": 3, "bogus": 1})

    def test_default_ensemble_size(self):
        assert EnsembleConfig().m_utilities == 10

    def test_outputs_are_range_normalized(self, small_ensemble):
        ends = np.array([[0.0, 0.0], [1.0, 1.0]])
        for net in small_ensemble.nets:
            g0, g1 = forward(net, ends)
            assert g0 == pytest.approx(0.0, abs=1e-12)
            assert g1 == pytest.approx(1.0, abs=1e-12) or g1 == pytest.approx(0.0, abs=1e-12)

    def test_weights_stay_nonnegative(self, small_ensemble):
        assert all((layer.weights >= 0).all() for net in small_ensemble.nets for layer in net.layers)

    def test_training_is_deterministic(self):
        cfg = EnsembleConfig(m_utilities=3, steps=10, hidden=4)
        a, b = io.StringIO(), io.StringIO()
        ea, eb = train_ensemble(cfg, a), train_ensemble(cfg, b)
        assert a.getvalue() == b.getvalue()
        assert json.dumps(ensemble_to_dict(ea)) == json.dumps(ensemble_to_dict(eb))

    def test_log_format(self):
        sink = io.StringIO()
        train_ensemble(EnsembleConfig(m_utilities=3, steps=6, hidden=4), sink)
        lines = sink.getvalue().splitlines()
        assert lines[0] == "step,member,l_val,l_grad,objective"
        # one row per member update; every step visits each member in turn
        rows = [line.split(",") for line in lines[1:]]
        assert len(rows) == 6 * 3
        assert [(int(r[0]), int(r[1])) for r in rows[:4]] == [(0, 0), (0, 1), (0, 2), (1, 0)]

    def test_diversity_grows_from_initialization(self):
        cfg = EnsembleConfig(m_utilities=4, steps=300, hidden=8, seed=1)
        probe = probe_batch(cfg)
        before = min_pairwise_discrepancy(initial_ensemble(cfg).nets, probe)
        after = min_pairwise_discrepancy(train_ensemble(cfg).nets, probe)
        assert after > before

    def test_normalize_net_range(self, rng):
        net = init_net(2, rng)
        out = normalize_net_range(net)
        assert forward(out, [0.0, 0.0]) == pytest.approx(0.0, abs=1e-12)
        assert forward(out, [1.0, 1.0]) == pytest.approx(1.0)
        shifted = normalize_net_range(const_net(2.5))
        assert forward(shifted, [0.3, 0.3]) == 0.0


class TestLinearEnsemble:
    def test_unit_norm_nonnegative(self, rng):
        ens = linear_ensemble(10, 2, rng)
        w = np.stack([net.layers[0].weights[0] for net in ens.nets])
        np.testing.assert_allclose(np.linalg.norm(w, axis=1), 1.0)
        assert (w >= 0).all()

    def test_higher_k(self, rng):
        ens = linear_ensemble(4, 3, rng)
        assert ens.k == 3 and len(ens) == 4


class TestSerialization:
    def test_round_trip_is_exact(self, small_ensemble):
        buf = io.StringIO()
        save_ensemble(small_ensemble, buf)
        back = load_ensemble(io.StringIO(buf.getvalue()), expected_k=2)
        z = np.random.default_rng(0).uniform(size=(20, 2))
        np.testing.assert_array_equal(back.scores(z), small_ensemble.scores(z))

    def test_field_names(self, small_ensemble):
        doc = ensemble_to_dict(small_ensemble)
        assert {"k", "epsilon", "nets"} <= set(doc)
        assert set(doc["nets"][0]) == {"layers"}
        assert set(doc["nets"][0]["layers"][0]) == {"weights", "bias"}

    def test_wrong_k(self, small_ensemble):
        with pytest.raises(ShapeError):
            ensemble_from_dict(ensemble_to_dict(small_ensemble), expected_k=3)

    def test_malformed(self):
        with pytest.raises(ParseError):
            ensemble_from_dict({"k": 2, "epsilon": 0.01})
        with pytest.raises(ParseError):
            ensemble_from_dict({"k": 2, "epsilon": 0.01, "nets": [{"layers": [{"weights": [[1, 1]]}]}]})
        with pytest.raises(ParseError, match=r":1:"):
            load_ensemble(io.StringIO("{not json"))

    def test_scores_shape(self, small_ensemble):
        assert small_ensemble.scores([0.5, 0.5]).shape == (4,)
        assert small_ensemble.scores(np.zeros((3, 2))).shape == (4, 3)

    def test_empty_ensemble(self):
        with pytest.raises(StateError):
            UtilityEnsemble([], 2)
