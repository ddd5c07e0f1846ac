import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_cmc, oracle_distance_matrix, oracle_map
from reid_forge.data import AttributeSet, BoundingBox, DatasetManifest, ImageRecord
from reid_forge.errors import ProtocolError, ShapeError
from reid_forge.evalreid import (
    EvalReport,
    TwoAFCTrial,
    attribute_eval,
    compute_cmc,
    compute_map,
    distance_matrix,
    make_2afc_benchmark,
    save_report,
    score_2afc,
)
from reid_forge.synth import SynthConfig, generate_dataset


def random_instance(rng, n_q=4, n_g=12, n_ids=3):
    distmat = rng.uniform(0.0, 10.0, size=(n_q, n_g))
    g_ids = rng.integers(0, n_ids, size=n_g)
    # force every query to have a positive
    q_ids = g_ids[rng.integers(0, n_g, size=n_q)]
    q_cams = rng.integers(0, 2, size=n_q)
    g_cams = rng.integers(0, 2, size=n_g)
    return distmat, q_ids, q_cams, g_ids, g_cams


class TestDistanceMatrix:
    def test_self_distance_zero(self):
        v = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(distance_matrix(v, v), [[0.0]])

    def test_orthogonal_unit_vectors(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[0.0, 1.0]])
        assert distance_matrix(q, g)[0, 0] == pytest.approx(np.sqrt(2), abs=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        q = rng.standard_normal((5, 3))
        g = rng.standard_normal((7, 3))
        got = distance_matrix(q, g)
        want = oracle_distance_matrix(q, g)
        assert np.abs(got - want).max() < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            distance_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


class TestMAP:
    def test_perfect_ranking(self):
        distmat = np.array([[0.1, 0.2, 5.0, 6.0, 7.0]])
        g_ids = np.array([1, 1, 2, 3, 4])
        val = compute_map(distmat, [1], [0], g_ids, [1, 1, 1, 1, 1])
        assert val == pytest.approx(1.0)

    def test_single_positive_rank_two(self):
        distmat = np.array([[1.0, 2.0]])
        val = compute_map(distmat, [7], [0], [3, 7], [1, 1])
        assert val == pytest.approx(0.5)

    def test_no_positive_raises(self):
        distmat = np.array([[1.0, 2.0]])
        with pytest.raises(ProtocolError, match="0"):
            compute_map(distmat, [9], [0], [3, 7], [1, 1])

    def test_tie_broken_by_gallery_index(self):
        # equal distances: positive at lower index ranks first
        distmat = np.array([[1.0, 1.0]])
        assert compute_map(distmat, [5], [0], [5, 3], [1, 1]) == pytest.approx(1.0)
        assert compute_map(distmat, [3], [0], [5, 3], [1, 1]) == pytest.approx(0.5)

    @given(seed=st.integers(0, 50_000))
    @settings(max_examples=100, deadline=None)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        distmat, q_ids, q_cams, g_ids, g_cams = random_instance(rng)
        got = compute_map(distmat, q_ids, q_cams, g_ids, g_cams)
        want = oracle_map(distmat, q_ids, g_ids)
        assert abs(got - want) < 1e-12

    def test_monotone_transform_invariant(self):
        rng = np.random.default_rng(1)
        distmat, q_ids, q_cams, g_ids, g_cams = random_instance(rng)
        a = compute_map(distmat, q_ids, q_cams, g_ids, g_cams)
        b = compute_map(np.exp(distmat), q_ids, q_cams, g_ids, g_cams)
        assert a == pytest.approx(b, abs=1e-12)


class TestCMC:
    def test_perfect_rank_one(self):
        distmat = np.array([[0.1, 5.0], [0.2, 9.0]])
        cmc = compute_cmc(distmat, [1, 2], [0, 0], [1, 2], [1, 1], max_k=2)
        # second query's positive is at rank 2
        assert cmc[0] == pytest.approx(0.5)
        assert cmc[1] == pytest.approx(1.0)

    def test_positive_exactly_rank_three(self):
        distmat = np.array([[1.0, 2.0, 3.0, 4.0]])
        g_ids = [2, 3, 9, 4]
        cmc = compute_cmc(distmat, [9], [0], g_ids, [1, 1, 1, 1], max_k=4)
        np.testing.assert_allclose(cmc, [0.0, 0.0, 1.0, 1.0])

    def test_nondecreasing_and_saturates(self):
        rng = np.random.default_rng(2)
        distmat, q_ids, q_cams, g_ids, g_cams = random_instance(rng)
        cmc = compute_cmc(distmat, q_ids, q_cams, g_ids, g_cams, max_k=distmat.shape[1])
        assert (np.diff(cmc) >= 0).all()
        assert cmc[-1] == pytest.approx(1.0)

    @given(seed=st.integers(0, 50_000))
    @settings(max_examples=100, deadline=None)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        distmat, q_ids, q_cams, g_ids, g_cams = random_instance(rng)
        got = compute_cmc(distmat, q_ids, q_cams, g_ids, g_cams, max_k=5)
        want = oracle_cmc(distmat, q_ids, g_ids, max_k=5)
        np.testing.assert_allclose(got, want, atol=1e-15)


class TestCrossCameraProtocol:
    def test_same_camera_positives_excluded(self):
        # one same-camera positive at rank 1, cross-camera at rank 2:
        # the strict protocol must skip the first
        distmat = np.array([[1.0, 2.0, 3.0]])
        g_ids = [5, 5, 6]
        g_cams = [0, 1, 0]
        relaxed = compute_map(distmat, [5], [0], g_ids, g_cams)
        strict = compute_map(distmat, [5], [0], g_ids, g_cams, cross_camera_only=True)
        assert relaxed == pytest.approx(1.0)
        assert strict == pytest.approx(1.0)  # same-camera entry removed from ranking
        cmc = compute_cmc(distmat, [5], [0], g_ids, g_cams, max_k=2, cross_camera_only=True)
        assert cmc[0] == pytest.approx(1.0)

    def test_strict_protocol_raises_without_cross_camera_positive(self):
        distmat = np.array([[1.0, 2.0]])
        with pytest.raises(ProtocolError):
            compute_map(distmat, [5], [0], [5, 6], [0, 0], cross_camera_only=True)


class TestAttributeEval:
    def test_all_correct(self):
        labels = {
            "color": np.array([0, 3, 5]),
            "vtype": np.array([1, 2, 6]),
            "skylight": np.array([True, False, True]),
            "bumper": np.array([False, False, True]),
            "spare_tire": np.array([True, True, False]),
            "luggage_rack": np.array([False, True, False]),
        }
        accuracies, confusion = attribute_eval(labels, labels)
        assert all(v == 1.0 for v in accuracies.values())
        assert confusion.sum() == 3
        assert np.trace(confusion) == 3

    def test_hand_built_type_accuracy(self):
        true_types = np.array([0, 0, 1, 1, 2, 2, 3, 3, 4, 4])
        pred_types = true_types.copy()
        pred_types[[1, 4, 9]] = [5, 6, 0]  # 7 of 10 correct
        labels = {
            "color": np.zeros(10, int),
            "vtype": true_types,
            "skylight": np.zeros(10, bool),
            "bumper": np.zeros(10, bool),
            "spare_tire": np.zeros(10, bool),
            "luggage_rack": np.zeros(10, bool),
        }
        preds = dict(labels)
        preds["vtype"] = pred_types
        accuracies, confusion = attribute_eval(preds, labels)
        assert accuracies["vtype"] == pytest.approx(0.7)
        for cls in range(7):
            assert confusion[cls].sum() == (true_types == cls).sum()

    def test_confusion_off_diagonal_placement(self):
        labels = {
            "color": np.array([0]), "vtype": np.array([2]),
            "skylight": np.array([False]), "bumper": np.array([False]),
            "spare_tire": np.array([False]), "luggage_rack": np.array([False]),
        }
        preds = dict(labels)
        preds["vtype"] = np.array([5])
        _, confusion = attribute_eval(preds, labels)
        assert confusion[2, 5] == 1
        assert confusion.sum() == 1


class TestEvalReport:
    def test_validation(self):
        with pytest.raises(Exception):
            EvalReport(
                map_score=1.5, cmc=[0.5, 1.0], attribute_accuracy={},
                type_confusion=np.zeros((7, 7), int),
            )
        with pytest.raises(Exception):
            EvalReport(
                map_score=0.5, cmc=[0.9, 0.5], attribute_accuracy={},
                type_confusion=np.zeros((7, 7), int),
            )

    def test_json_round_trip(self):
        report = EvalReport(
            map_score=0.75,
            cmc=[0.5, 0.75, 1.0],
            attribute_accuracy={"color": 0.9, "vtype": 0.8},
            type_confusion=np.eye(7, dtype=int) * 2,
            meta={"feature": "average"},
        )
        back = EvalReport.from_json(report.to_json())
        assert back.map_score == report.map_score
        assert back.cmc == report.cmc
        np.testing.assert_array_equal(back.type_confusion, report.type_confusion)

    def test_save_writes_three_files(self, tmp_path):
        report = EvalReport(
            map_score=0.5,
            cmc=[0.25, 0.5],
            attribute_accuracy={"color": 1.0},
            type_confusion=np.zeros((7, 7), int),
        )
        save_report(report, tmp_path, stem="probe")
        data = json.loads((tmp_path / "probe.json").read_text())
        assert data["map"] == 0.5
        cmc_csv = (tmp_path / "probe_cmc.csv").read_text().strip().splitlines()
        assert cmc_csv[0].startswith("rank")
        assert len(cmc_csv) == 3
        confusion_csv = (tmp_path / "probe_confusion.csv").read_text()
        assert "Sedan" in confusion_csv


def twin_manifest():
    config = SynthConfig(
        n_identities=8,
        images_per_identity=4,
        n_cameras=2,
        image_size=32,
        attribute_twins=True,
        train_identities=0,
        noise_sigma=0.0,
    )
    return generate_dataset(config, seed=0)


class TestTwoAFC:
    def test_twin_dataset_full_benchmark(self):
        manifest, _ = twin_manifest()
        trials = make_2afc_benchmark(manifest, n_trials=10, seed=0)
        assert len(trials) == 10
        records = {r.image_id: r for r in manifest.records}
        seen_queries = set()
        for t in trials:
            q, p, d = records[t.query], records[t.positive], records[t.distractor]
            assert q.identity_id == p.identity_id
            assert q.camera_id != p.camera_id
            assert q.identity_id != d.identity_id
            assert q.attributes == d.attributes
            assert t.query not in seen_queries  # without replacement
            seen_queries.add(t.query)

    def test_unique_attributes_infeasible(self):
        manifest, _ = twin_manifest()
        # drop all odd identities: every attribute draw becomes unique
        records = [r for r in manifest.records if r.identity_id % 2 == 0]
        solo = DatasetManifest(records=records)
        with pytest.raises(ProtocolError, match="0 feasible"):
            make_2afc_benchmark(solo, n_trials=5, seed=0)
        assert make_2afc_benchmark(solo, n_trials=5, seed=0, allow_fewer=True) == []

    def test_deterministic(self):
        manifest, _ = twin_manifest()
        a = make_2afc_benchmark(manifest, n_trials=8, seed=3)
        b = make_2afc_benchmark(manifest, n_trials=8, seed=3)
        assert a == b

    def test_oracle_embedder_scores_one(self):
        manifest, _ = twin_manifest()
        trials = make_2afc_benchmark(manifest, n_trials=10, seed=1)
        records = {r.image_id: r for r in manifest.records}

        def one_hot(image_id):
            v = np.zeros(8)
            v[records[image_id].identity_id] = 1.0
            return v

        assert score_2afc(one_hot, trials) == 1.0

    def test_identical_embeddings_score_zero(self):
        manifest, _ = twin_manifest()
        trials = make_2afc_benchmark(manifest, n_trials=10, seed=2)
        assert score_2afc(lambda image_id: np.zeros(4), trials) == 0.0

    def test_random_embedder_near_half(self):
        manifest, _ = twin_manifest()
        trials = make_2afc_benchmark(manifest, n_trials=20, seed=4)
        scores = []
        for seed in range(40):
            rng = np.random.default_rng(seed)
            cache = {}

            def embed(image_id, rng=rng, cache=cache):
                if image_id not in cache:
                    cache[image_id] = rng.standard_normal(8)
                return cache[image_id]

            scores.append(score_2afc(embed, trials))
        assert abs(np.mean(scores) - 0.5) < 0.05
