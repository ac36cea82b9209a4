import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import brute_force_filter
from srpvqa import data, srp
from srpvqa.config import ConfigError
from srpvqa.embed import TextEncoderParams
from srpvqa.srp import CandidateRelation, RelationshipTriplet, filter_triplets


def cand(ps, po, pr, labels=("red ball", "on", "blue cube"), si=0, oi=1):
    return CandidateRelation(si, oi, ps, po, pr, *labels)


class TestFilter:
    def test_kept_when_both_stages_pass(self):
        c = cand(0.95, 0.9, 0.6)
        assert filter_triplets([c], 0.8, 0.5, min_keep=0) == [c]

    def test_rejected_at_stage_one(self):
        assert filter_triplets([cand(0.9, 0.8, 0.9)], 0.8, 0.5, min_keep=0) == []

    def test_rejected_at_stage_two(self):
        assert filter_triplets([cand(1.0, 1.0, 0.4)], 0.8, 0.5, min_keep=0) == []

    def test_alpha_below_beta(self):
        with pytest.raises(ConfigError):
            filter_triplets([], 0.3, 0.5)

    def test_dedup_keeps_highest_relation_probability(self):
        a = cand(0.95, 0.95, 0.6, si=0, oi=1)
        b = cand(0.9, 0.9, 0.9, si=2, oi=3)
        assert filter_triplets([a, b], 0.8, 0.5, min_keep=0) == [b]

    def test_fallback_takes_best_joint_scores(self):
        weak = [cand(0.5, 0.5, 0.3, labels=("a", "near", str(i)), si=i, oi=9) for i in range(3)]
        weak[1].p_rel = 0.4
        strong = cand(0.99, 0.99, 0.99, labels=("x", "on", "y"), si=5, oi=6)
        out = filter_triplets(weak + [strong], 0.8, 0.5, min_keep=3)
        assert out == [strong, weak[1], weak[0]]

    def test_fallback_with_too_few_candidates(self):
        c = cand(0.1, 0.1, 0.1)
        assert filter_triplets([c], 0.8, 0.5, min_keep=3) == [c]

    def test_output_sorted_by_joint_score(self):
        cs = [cand(0.9, 0.9, p, labels=("a", "on", str(i)), si=i) for i, p in enumerate((0.6, 0.9, 0.7))]
        out = filter_triplets(cs, 0.8, 0.5, min_keep=0)
        assert [c.p_rel for c in out] == [0.9, 0.7, 0.6]

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 9))
        grid = np.linspace(0.0, 1.0, 11)
        # distinct index pairs keep the fallback ranking free of ties
        pairs = rng.permutation(16)[:n]
        cands = [CandidateRelation(int(k // 4), int(k % 4),
                                   *(float(v) for v in rng.choice(grid, size=3)),
                                   f"s{rng.integers(2)}", f"p{rng.integers(2)}", f"o{rng.integers(2)}")
                 for k in pairs]
        beta = float(rng.choice(grid))
        alpha = float(rng.uniform(beta, 1.0))
        min_keep = int(rng.integers(0, 5))
        out = filter_triplets(cands, alpha, beta, min_keep)
        expected = brute_force_filter(cands, alpha, beta, min_keep)
        assert sorted(map(id, out)) == sorted(id(cands[i]) for i in expected)


class TestTriplets:
    def test_sentence(self):
        t = RelationshipTriplet("teddy bear", "on", "pillow", [0, 0, 1, 1], [0, 0, 1, 1])
        assert t.sentence() == "teddy bear on pillow."

    def test_json_round_trip(self, tmp_path):
        ts = [RelationshipTriplet("red ball", "on", "blue cube", [0.1, 0.2, 0.3, 0.4], [0.1, 0.4, 0.5, 0.6],
                                  "parsed", 0.9, 0.8, 0.7)]
        path = tmp_path / "t.jsonl"
        srp.write_triplets(path, ts)
        assert srp.read_triplets(path) == ts
        assert json.loads(path.read_text())["p_rel"] == 0.7

    def test_features_shape_and_boxes(self):
        enc = TextEncoderParams(np.random.default_rng(0), width=8, heads=2, vocab_size=97)
        a = RelationshipTriplet("red ball", "on", "blue cube", [0.1, 0.2, 0.3, 0.4], [0.1, 0.4, 0.5, 0.6])
        b = RelationshipTriplet("red ball", "on", "blue cube", [0.0, 0.0, 0.2, 0.2], [0.5, 0.5, 0.9, 0.9])
        out = srp.triplets_to_features([a, b], enc).data
        assert out.shape == (2, 16)
        np.testing.assert_allclose(out[0, :8], out[1, :8], atol=1e-15)
        np.testing.assert_array_equal(out[1, 8:], b.b_s + b.b_o)

    def test_features_need_triplets(self):
        enc = TextEncoderParams(np.random.default_rng(0), width=8, heads=2, vocab_size=97)
        with pytest.raises(ValueError):
            srp.triplets_to_features([], enc)


def _scene(graph, n=3):
    objs = [data.SceneObject("ball", "red", [0.1 * i, 0.1, 0.1 * i + 0.05, 0.2], [0.0]) for i in range(n)]
    return data.Scene(0, (64, 64), objs, graph)


class TestParseSceneGraph:
    def test_empty(self):
        assert srp.parse_scene_graph(_scene([])) == []

    def test_one_triplet_per_edge(self):
        out = srp.parse_scene_graph(_scene([(0, "left of", 1), (2, "right of", 0)]))
        assert [t.labels for t in out] == [("red ball", "left of", "red ball"), ("red ball", "right of", "red ball")]

    def test_duplicates_collapse(self):
        assert len(srp.parse_scene_graph(_scene([(0, "near", 1), (0, "near", 1)]))) == 1

    def test_missing_object(self):
        with pytest.raises(data.SchemaError):
            srp.parse_scene_graph(_scene([(0, "near", 5)]))


def _proposal(feature, box):
    return data.Proposal(0, np.asarray(feature, dtype=float), box, np.ones(1), "x")


class TestVisualFeature:
    def test_layout(self):
        props = [_proposal([1, 2], [0, 0, 1, 1]), _proposal([3, 4], [0, 0, 1, 1])]
        out = srp.visual_relationship_feature(cand(1, 1, 1, si=0, oi=1), props)
        np.testing.assert_array_equal(out.data, [1, 2, 3, 4, 0, 0, 1, 1, 0, 0, 1, 1])

    def test_swap_swaps_blocks(self, rng):
        props = [_proposal(rng.normal(size=3), [0, 0, 0.5, 0.5]), _proposal(rng.normal(size=3), [0.5, 0.5, 1, 1])]
        ab = srp.visual_relationship_feature(cand(1, 1, 1, si=0, oi=1), props).data
        ba = srp.visual_relationship_feature(cand(1, 1, 1, si=1, oi=0), props).data
        assert ab.shape == (2 * 3 + 8,)
        np.testing.assert_array_equal(ab[:3], ba[3:6])
        np.testing.assert_array_equal(ab[3:6], ba[:3])

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            srp.visual_relationship_feature(cand(1, 1, 1, si=0, oi=3), [_proposal([1.0], [0, 0, 1, 1])])


@pytest.fixture(scope="module")
def toy_detector():
    ds = srp.separable_detection_set(300, seed=1)
    params, history = srp.train_detector(ds, ["a", "b", "c"], ["p", "q", "r"], epochs=20, seed=0)
    return ds, params, history


class TestDetector:
    def test_zero_margin_identical_anchor(self, rng):
        from srpvqa.tensor import Tensor
        a = Tensor(rng.normal(size=(4, 3)))
        assert srp.triplet_loss(a, a, Tensor(rng.normal(size=(4, 3))), 0.0).item() == 0.0

    def test_golden_loss_curve(self, toy_detector):
        _, _, history = toy_detector
        assert history[0] == pytest.approx(3.187446590751722, rel=1e-9)
        assert history[-1] == 0.0
        assert history[-1] < history[0]

    def test_held_out_accuracy(self, toy_detector):
        _, params, _ = toy_detector
        assert srp.label_accuracy(params, srp.separable_detection_set(300, seed=2)) >= 0.95

    def test_predicts_training_labels(self, toy_detector):
        ds, params, _ = toy_detector
        (s, _), (r, _), (o, _) = srp.predict_labels(params, ds.f_s, ds.f_r, ds.f_o)
        np.testing.assert_array_equal(s, ds.subject)
        np.testing.assert_array_equal(r, ds.predicate)
        np.testing.assert_array_equal(o, ds.object)

    def test_degenerate_dataset_refused(self):
        ds = srp.separable_detection_set(20, seed=0, n_objects=1, n_predicates=1)
        with pytest.raises(ValueError):
            srp.train_detector(ds, ["a"], ["p"], epochs=1)

    @pytest.mark.parametrize("l", [0, 1, 2, 5])
    def test_candidate_count(self, toy_detector, rng, l):
        _, params, _ = toy_detector
        props = [_proposal(rng.normal(size=8), sorted(rng.random(2)) * 2) for _ in range(l)]
        for p in props:
            p.box = [p.box[0], p.box[0], p.box[1], p.box[1]]
        assert len(srp.detect_relationships(params, props)) == l * (l - 1)
