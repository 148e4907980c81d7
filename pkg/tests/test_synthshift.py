from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit, logit

from cbmshift.adaptation import ConfusionReport, IdentificationConfig, identify_confusion
from cbmshift.memory import ConceptMemory, build_memory
from cbmshift.model import LossConfig, forward
from cbmshift.pipeline import activation_records, default_scenario
from cbmshift.synthshift import (
    ShiftScenario,
    generate_id,
    generate_id_activation_records,
    generate_ood_activation_table,
    generate_ood_samples,
    make_scenario,
    oracle_consistent,
    recovery_scores,
)
from cbmshift.training import TrainConfig, train


@pytest.fixture(scope="module")
def scenario():
    return make_scenario(seed=3)


class TestScenario:
    def test_default_shape(self, scenario):
        assert (scenario.d, scenario.L, scenario.K) == (16, 12, 4)
        assert len(scenario.misactivated) == 2 and len(scenario.under_activated) == 2

    def test_invariants_hold(self, scenario):
        under_concepts = {i for _, i in scenario.under_activated}
        assert not under_concepts & set(scenario.misactivated)
        assert all(scenario.concept_probs[k, i] > 0.5 for k, i in scenario.under_activated)
        assert scenario.concept_probs.min() >= 0.05 and scenario.concept_probs.max() <= 0.95

    def test_orthonormal_feature_map(self, scenario):
        np.testing.assert_allclose(scenario.feature_map @ scenario.feature_map.T, np.eye(scenario.L), atol=1e-12)

    def test_rejects_overlap(self, scenario):
        k, i = scenario.under_activated[0]
        with pytest.raises(ValueError, match="both"):
            replace(scenario, misactivated=(i,))

    def test_rejects_non_discriminative_pair(self, scenario):
        k = int(np.argmin(scenario.concept_probs[:, 0]))
        with pytest.raises(ValueError, match="> 0.5"):
            replace(scenario, misactivated=(), under_activated=((k, 0),))

    def test_rejects_probability_range(self, scenario):
        with pytest.raises(ValueError, match=r"\[0.05, 0.95\]"):
            replace(scenario, concept_probs=np.ones_like(scenario.concept_probs))

    def test_json_round_trip(self, scenario, tmp_path):
        scenario.save(tmp_path / "s.json")
        back = ShiftScenario.load(tmp_path / "s.json")
        assert back.to_json() == scenario.to_json()

    def test_json_version(self):
        with pytest.raises(ValueError, match="version"):
            ShiftScenario.from_json({"version": "scenario-v0"})

    def test_seeded(self):
        assert make_scenario(seed=5).to_json() == make_scenario(seed=5).to_json()
        assert make_scenario(seed=5).to_json() != make_scenario(seed=6).to_json()

    def test_too_many_shifts(self):
        with pytest.raises(ValueError):
            make_scenario(L=8, K=4, signatures_per_class=1, n_misactivated=3, n_under=2)


class TestGenerateId:
    def test_deterministic(self, scenario):
        a, b = generate_id(scenario, (5, 5, 5)), generate_id(scenario, (5, 5, 5))
        np.testing.assert_array_equal(a.features("train"), b.features("train"))

    def test_counts_and_uniform_priors(self, scenario):
        ds = generate_id(scenario, {"train": 3, "val": 2})
        assert ds.splits == ("train", "val")
        assert np.bincount(ds.labels("train")).tolist() == [3] * scenario.K

    def test_concept_frequency(self, scenario):
        k, i = np.unravel_index(np.argmax(scenario.concept_probs), scenario.concept_probs.shape)
        ds = generate_id(scenario, {"train": 1000})
        c = ds.concept_labels("train")[ds.labels("train") == k, i]
        assert 0.90 <= c.mean() <= 0.99

    def test_noise_free_data_is_separable(self):
        sc = make_scenario(seed=1, feature_noise=0.0)
        ds = generate_id(sc, (100, 50, 50))
        _, log = train(ds, (sc.d, 16, sc.L, sc.K), LossConfig(), TrainConfig(learning_rate=0.05))
        assert log[-1].val_accuracy >= 0.95

    def test_features_are_linear_in_concepts(self):
        sc = make_scenario(seed=2, feature_noise=0.0)
        ds = generate_id(sc, {"train": 4})
        np.testing.assert_allclose(ds.features("train"), ds.concept_labels("train") @ sc.feature_map)

    def test_bad_count(self, scenario):
        with pytest.raises(ValueError):
            generate_id(scenario, {"train": 0})


class TestGenerateOod:
    def test_count(self):
        sc = make_scenario(seed=0, K=5, L=12, signatures_per_class=2)
        samples = generate_ood_samples(sc, 4)
        assert len(samples) == 20
        assert [s.class_label for s in samples].count(3) == 4

    def test_streams_differ(self, scenario):
        a = generate_ood_samples(scenario, 2, stream=0)
        b = generate_ood_samples(scenario, 2, stream=1)
        assert not np.array_equal(a[0].features, b[0].features)
        np.testing.assert_array_equal(a[0].features, generate_ood_samples(scenario, 2, stream=0)[0].features)

    def test_null_scenario_matches_id_distribution(self, scenario):
        null = scenario.without_shifts()
        ood = generate_ood_samples(null, 2000)
        ds = generate_id(null, {"train": 2000})
        for k in range(null.K):
            x_ood = np.array([s.features for s in ood if s.class_label == k])
            x_id = ds.features("train")[ds.labels("train") == k]
            np.testing.assert_allclose(x_ood.mean(axis=0), x_id.mean(axis=0), atol=0.05)
            np.testing.assert_allclose(x_ood.std(axis=0), x_id.std(axis=0), atol=0.05)

    def test_misactivated_evidence_ignores_class(self, scenario):
        (i, *_), F = scenario.misactivated, scenario.feature_map
        ood = generate_ood_samples(replace(scenario, feature_noise=0.0), 500)
        evidence = np.array([s.features for s in ood]) @ F.T  # orthonormal rows recover evidence
        labels = np.array([s.class_label for s in ood])
        means = [evidence[labels == k, i].mean() for k in range(scenario.K)]
        np.testing.assert_allclose(means, scenario.misactivation_spread / 2, atol=0.07)

    def test_under_activated_evidence_is_scaled(self, scenario):
        k, i = scenario.under_activated[0]
        ood = generate_ood_samples(replace(scenario, feature_noise=0.0), 50)
        ev = np.array([s.features for s in ood if s.class_label == k]) @ scenario.feature_map.T
        c = np.array([s.concept_labels for s in ood if s.class_label == k])
        np.testing.assert_allclose(ev[:, i], scenario.under_feature_scale * c[:, i], atol=1e-12)

    def test_misactivated_concept_spreads_after_training(self):
        sc = replace(make_scenario(seed=4), under_activated=())
        (i, *_) = sc.misactivated
        ds = generate_id(sc, (200, 100, 10))
        params, _ = train(ds, (sc.d, 16, sc.L, sc.K), LossConfig(), TrainConfig(learning_rate=0.07))
        id_acts = forward(params, ds.features("val")).concepts
        ood = generate_ood_samples(sc, 100)
        ood_acts = forward(params, np.array([s.features for s in ood])).concepts
        id_y, ood_y = ds.labels("val"), np.array([s.class_label for s in ood])
        # within-class variance of the shifted concept grows for the classes that lack it
        grows = [ood_acts[ood_y == k, i].var() > id_acts[id_y == k, i].var() for k in range(sc.K)]
        assert sum(grows) >= sc.K - 1


def _move_to_zero(sc: ShiftScenario) -> ShiftScenario:
    """Same scenario with its first misactivated concept relabelled as concept 0 and no other shift."""
    i = sc.misactivated[0]
    perm = np.arange(sc.L)
    perm[[0, i]] = perm[[i, 0]]
    return replace(
        sc, concept_probs=sc.concept_probs[:, perm], feature_map=sc.feature_map[perm], misactivated=(0,), under_activated=()
    )


class TestActivationOracle:
    def test_id_records_follow_concepts(self, scenario):
        recs = generate_id_activation_records(scenario, 50)
        acts = np.array([r.activations for r in recs])
        assert acts.min() >= 0 and acts.max() <= 1
        assert len(recs) == 50 * scenario.K

    def test_null_table_follows_memory(self, scenario):
        null = scenario.without_shifts()
        memory = build_memory(generate_id_activation_records(null, 100), null.K, null.L)
        table = generate_ood_activation_table(null, memory, 4000)
        # clamping to [0, 1] moves the mean but not the median
        for k in range(null.K):
            np.testing.assert_allclose(np.median(table.per_class[k], axis=0), memory.means[k], atol=0.03)

    def test_null_flags_nothing_at_tau_1_4(self):
        empty = 0
        for s in range(20):
            sc = make_scenario(seed=s).without_shifts()
            memory = build_memory(generate_id_activation_records(sc, 100), sc.K, sc.L)
            rep = identify_confusion(memory, generate_ood_activation_table(sc, memory, 8), IdentificationConfig(1.4))
            empty += rep.is_empty
        assert empty >= 18

    def test_single_misactivated_concept_recovered(self):
        hits = 0
        for s in range(20):
            sc = _move_to_zero(make_scenario(seed=s))
            memory = build_memory(generate_id_activation_records(sc, 100), sc.K, sc.L)
            rep = identify_confusion(memory, generate_ood_activation_table(sc, memory, 8), IdentificationConfig(1.1))
            hits += 0 in rep.misactivated
        assert hits >= 16

    def test_under_activation_closed_form(self, scenario):
        k, i = scenario.under_activated[0]
        sc = replace(scenario, under_logit_shift=3.0, activation_noise=0.0)
        means = np.full((sc.K, sc.L), 0.5)
        means[k, i] = 0.8
        memory = ConceptMemory(means, np.full((sc.K, sc.L), 0.1), np.full(sc.K, 10))
        table = generate_ood_activation_table(sc, memory, 16)
        expected = expit(logit(0.8) - 3.0)
        assert expected == pytest.approx(0.16607, abs=1e-5)
        np.testing.assert_allclose(table.per_class[k][:, i], expected, atol=1e-12)

    def test_dimension_check(self, scenario):
        other = make_scenario(seed=0, L=10, signatures_per_class=2)
        memory = build_memory(generate_id_activation_records(other, 5), other.K, other.L)
        with pytest.raises(ValueError, match="do not match"):
            generate_ood_activation_table(scenario, memory, 2)


class TestOracleScores:
    def test_consistency_check(self, scenario):
        memory = build_memory(generate_id_activation_records(scenario, 100), scenario.K, scenario.L)
        assert oracle_consistent(scenario, memory)

    def test_conventions(self, scenario):
        K, L = scenario.K, scenario.L
        (k, i), _ = scenario.under_activated
        empty = ConfusionReport(tuple(frozenset() for _ in range(K)), frozenset(), tuple(frozenset() for _ in range(K)), np.zeros((K, L)), np.zeros((K, L)))
        s = recovery_scores(empty, scenario)
        assert s["misactivated_precision"] == 0 and s["misactivated_recall"] == 0
        assert recovery_scores(empty, scenario.without_shifts())["misactivated_precision"] == 1
        under = tuple(frozenset({i}) if kk == k else frozenset() for kk in range(K))
        rep = ConfusionReport(under, frozenset(scenario.misactivated), under, np.zeros((K, L)), np.zeros((K, L)))
        s = recovery_scores(rep, scenario)
        assert s["misactivated_precision"] == 1 and s["misactivated_recall"] == 1
        assert s["under_activated_precision"] == 1 and s["under_activated_recall"] == 0.5


def test_feature_preset():
    sc = default_scenario(0)
    assert (sc.d, sc.L, sc.K) == (32, 20, 4)
    with pytest.raises(ValueError, match="unknown scenario preset"):
        default_scenario(0, "nope")


def test_activation_records_clip(scenario):
    ds = generate_id(scenario, {"val": 2})
    params, _ = train(generate_id(scenario, (5, 2, 2)), (scenario.d, 4, scenario.L, scenario.K), LossConfig(), TrainConfig(epochs=1))
    recs = activation_records(params, ds.split("val"))
    assert all(r.split == "val" for r in recs) and len(recs) == 2 * scenario.K
