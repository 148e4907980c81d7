import csv

import numpy as np
import pytest

from cbmshift.data import Sample, SplitDataset
from cbmshift.model import CbmParameters, LossConfig, loss_and_grad
from cbmshift.pipeline import SimulationConfig, default_scenario, run_simulation
from cbmshift.synthshift import generate_id, generate_ood_samples
from cbmshift.training import (
    AdamWState,
    EpochRecord,
    TrainConfig,
    adamw_step,
    fine_tune,
    train,
    write_training_log,
)


def params_of(value, dims=(2, 2, 2, 2)):
    return CbmParameters.from_arrays([np.full_like(a, value) for a in CbmParameters.zeros(dims).arrays()])


class TestAdamW:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (1e-4, 0.01, 64, 30)
        assert (cfg.beta1, cfg.beta2, cfg.epsilon) == (0.9, 0.999, 1e-8)

    def test_first_step_by_hand(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
        theta, g = params_of(2.0), params_of(-3.0)
        new, state = adamw_step(theta, g, AdamWState.fresh(theta), cfg)
        # bias-corrected moments equal g and g^2 after one step
        expected = 2.0 - 0.1 * (-3.0 / (3.0 + 1e-8) + 0.5 * 2.0)
        np.testing.assert_allclose(new.f_weights, expected, rtol=1e-14)
        assert state.t == 1
        np.testing.assert_allclose(state.m[0], 0.1 * -3.0)
        np.testing.assert_allclose(state.v[0], 0.001 * 9.0)

    def test_second_step_by_hand(self):
        cfg = TrainConfig(learning_rate=0.01, weight_decay=0.0)
        theta = params_of(0.0)
        p1, s1 = adamw_step(theta, params_of(1.0), AdamWState.fresh(theta), cfg)
        p2, _ = adamw_step(p1, params_of(3.0), s1, cfg)
        m = 0.9 * 0.1 + 0.1 * 3.0
        v = 0.999 * 0.001 + 0.001 * 9.0
        m_hat, v_hat = m / (1 - 0.9**2), v / (1 - 0.999**2)
        np.testing.assert_allclose(p2.g_out_bias, p1.g_out_bias - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-12)

    def test_decay_is_decoupled(self):
        # with zero gradient only the decay term moves the weights
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.2)
        theta = params_of(1.5)
        new, _ = adamw_step(theta, params_of(0.0), AdamWState.fresh(theta), cfg)
        np.testing.assert_allclose(new.g_hidden_weights, 1.5 - 0.1 * 0.2 * 1.5)

    def test_non_finite_gradient(self):
        theta = params_of(1.0)
        bad = list(params_of(0.0).arrays())
        bad[0] = np.full((2, 2), np.nan)
        grads = CbmParameters.__new__(CbmParameters)
        for name, arr in zip(("g_hidden_weights", "g_hidden_bias", "g_out_weights", "g_out_bias", "f_weights", "f_bias"), bad):
            object.__setattr__(grads, name, arr)
        with pytest.raises(FloatingPointError):
            adamw_step(theta, grads, AdamWState.fresh(theta), TrainConfig())

    @pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"batch_size": 0}, {"beta1": 1.0}, {"epochs": -1}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def scenario():
    return default_scenario(0, "activation")


@pytest.fixture(scope="module")
def trained(scenario):
    ds = generate_id(scenario, (100, 50, 50))
    cfg = TrainConfig(learning_rate=0.05, seed=4)
    params, log = train(ds, (scenario.d, 16, scenario.L, scenario.K), LossConfig(), cfg)
    return ds, cfg, params, log


class TestTrain:
    def test_reaches_high_validation_accuracy(self, trained):
        _, _, _, log = trained
        assert len(log) == 30
        assert log[-1].val_accuracy >= 0.95

    def test_loss_decreases(self, trained):
        _, _, _, log = trained
        assert log[-1].mean_loss < 0.5 * log[0].mean_loss

    def test_deterministic(self, scenario, trained):
        ds, cfg, params, _ = trained
        again, _ = train(ds, (scenario.d, 16, scenario.L, scenario.K), LossConfig(), cfg)
        assert again.equals(params)

    def test_seed_changes_result(self, scenario, trained):
        ds, cfg, params, _ = trained
        other, _ = train(ds, (scenario.d, 16, scenario.L, scenario.K), LossConfig(), TrainConfig(learning_rate=0.05, seed=5))
        assert not other.equals(params)

    def test_dims_must_match(self, scenario, trained):
        ds = trained[0]
        with pytest.raises(ValueError, match="do not match"):
            train(ds, (scenario.d + 1, 16, scenario.L, scenario.K))

    def test_needs_concept_labels(self, scenario):
        samples = tuple(Sample(f"s{k}", k, [0.0] * scenario.d, split="train") for k in range(scenario.K))
        ds = SplitDataset(samples, scenario.concept_vocabulary(), scenario.class_vocabulary())
        with pytest.raises(ValueError, match="without concept labels"):
            train(ds, (scenario.d, 4, scenario.L, scenario.K))

    def test_zero_epochs_returns_initialisation(self, scenario, trained):
        ds = trained[0]
        params, log = train(ds, (scenario.d, 4, scenario.L, scenario.K), LossConfig(), TrainConfig(epochs=0, seed=1))
        assert log == []
        np.testing.assert_array_equal(params.f_bias, 0.0)


class TestFineTune:
    def test_ignores_concept_labels(self, scenario, trained):
        _, cfg, params, _ = trained
        ood = generate_ood_samples(scenario, 4)
        stripped = [Sample(s.sample_id, s.class_label, s.features, None, s.split) for s in ood]
        assert fine_tune(params, ood, LossConfig(), cfg).equals(fine_tune(params, stripped, LossConfig(), cfg))

    def test_changes_every_block(self, scenario, trained):
        _, cfg, params, _ = trained
        tuned = fine_tune(params, generate_ood_samples(scenario, 4), LossConfig(), cfg)
        assert all(not np.array_equal(a, b) for a, b in zip(tuned.arrays(), params.arrays()))

    def test_matches_class_only_training(self, scenario, trained):
        # one full-batch epoch equals a single AdamW step on the class loss
        _, _, params, _ = trained
        ood = generate_ood_samples(scenario, 2)
        cfg = TrainConfig(learning_rate=0.01, epochs=1, batch_size=64)
        x = np.array([s.features for s in ood])
        y = np.array([s.class_label for s in ood])
        _, g = loss_and_grad(params, x, None, y, LossConfig(concept_loss_weight=0.0))
        step, _ = adamw_step(params, g, AdamWState.fresh(params), cfg)
        tuned = fine_tune(params, ood, LossConfig(), cfg)
        for a, b in zip(tuned.arrays(), step.arrays()):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)

    def test_empty(self, trained):
        with pytest.raises(ValueError, match="at least one"):
            fine_tune(trained[2], [])


def test_fine_tuning_pattern_over_seeds():
    """Fine-tuning helps OOD on most seeds and forgets more ID accuracy than masking."""
    ood_up, ft_drop, mask_drop = 0, [], []
    for seed in range(20):
        r = run_simulation(default_scenario(seed), SimulationConfig())["results"]
        ood_up += r["ood_finetuned"]["accuracy"] > r["ood_unmasked"]["accuracy"]
        ft_drop.append(r["id_unmasked"]["accuracy"] - r["id_finetuned"]["accuracy"])
        mask_drop.append(r["id_unmasked"]["accuracy"] - r["id_masked"]["accuracy"])
    assert ood_up >= 16
    assert np.mean(ft_drop) > np.mean(mask_drop)


def test_training_log(tmp_path):
    write_training_log([EpochRecord(1, 0.5, 0.75), EpochRecord(2, 0.25, 1.0)], tmp_path / "log.csv")
    with open(tmp_path / "log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "mean_loss", "val_accuracy"]
    assert [float(v) for v in rows[2]] == [2, 0.25, 1.0]
