import json
from itertools import permutations

import numpy as np
import pytest

from _oracles import relation_oracle
from srpvqa import data, srp


@pytest.fixture(scope="module")
def scenes():
    return [data.generate_scene(s) for s in range(60)]


class TestScenes:
    def test_deterministic(self):
        assert data.generate_scene(11).to_dict() == data.generate_scene(11).to_dict()

    def test_object_count_and_unique_names(self, scenes):
        cfg = data.SceneConfig()
        for sc in scenes:
            assert cfg.l_min <= len(sc.objects) <= cfg.l_max
            assert len({o.name for o in sc.objects}) == len(sc.objects)

    def test_boxes_in_unit_square_with_low_overlap(self, scenes):
        for sc in scenes:
            boxes = [o.box for o in sc.objects]
            for b in boxes:
                assert 0 <= b[0] < b[2] <= 1 and 0 <= b[1] < b[3] <= 1
            for a, b in permutations(boxes, 2):
                assert data.iou(a, b) < data.SceneConfig().iou_cap

    def test_edges_hold_geometrically(self, scenes):
        for sc in scenes:
            for s, p, o in sc.scene_graph:
                assert relation_oracle(p, sc.objects[s].box, sc.objects[o].box), (sc.seed, s, p, o)

    def test_sampled_pairs_carry_every_true_predicate(self, scenes):
        for sc in scenes:
            by_pair = {}
            for s, p, o in sc.scene_graph:
                by_pair.setdefault((s, o), set()).add(p)
            for (s, o), preds in by_pair.items():
                a, b = sc.objects[s].box, sc.objects[o].box
                assert preds == {p for p in data.PREDICATES if relation_oracle(p, a, b)}

    def test_every_stacked_pair_is_in_graph(self, scenes):
        for sc in scenes:
            edges = set(sc.scene_graph)
            for s, o in permutations(range(len(sc.objects)), 2):
                if relation_oracle("on", sc.objects[s].box, sc.objects[o].box):
                    assert (s, "on", o) in edges

    def test_crowded_config_raises(self):
        cfg = data.SceneConfig(l_min=20, l_max=20, size_range=(0.4, 0.5), max_retries=5)
        with pytest.raises(data.PlacementError):
            data.generate_scene(0, cfg)

    @pytest.mark.parametrize("kw", [{"l_min": 1}, {"l_min": 5, "l_max": 4}, {"p_stack": 1.5}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            data.generate_scene(0, data.SceneConfig(**kw))


class TestQuestions:
    def test_answers_agree_with_rederivation(self, scenes):
        n = 0
        for sc in scenes:
            for qa in data.generate_questions(sc, sc.seed):
                assert data.answer_question(sc, qa.question) == qa.answer, qa
                n += 1
        assert n > 200

    def test_relation_questions_balanced(self, scenes):
        answers = [qa.answer for sc in scenes for qa in data.generate_questions(sc, 0)
                   if qa.template == "relation"]
        assert answers.count("yes") == answers.count("no") > 0

    def test_relation_flag(self, scenes):
        for sc in scenes:
            for qa in data.generate_questions(sc, 1):
                assert qa.depends_on_relations == (qa.template in ("relation", "on_open"))

    def test_on_open_limit(self, scenes):
        for sc in scenes:
            qs = data.generate_questions(sc, 2)
            assert sum(q.template == "on_open" for q in qs) <= data.ON_OPEN_PER_SCENE

    def test_relation_answer_not_a_function_of_objects(self, scenes):
        # same objects, boxes swapped: the answer to the same question flips
        flips = 0
        for sc in scenes:
            for qa in data.generate_questions(sc, 3):
                if qa.template != "relation" or qa.answer != "yes":
                    continue
                body = qa.question[len("Is the "):-1]
                pred = next(p for p in data.DIRECTIONAL if f" {p} the " in body)
                a, b = body.split(f" {pred} the ")
                objs = [data.SceneObject(o.label, o.color, list(o.box), o.feature) for o in sc.objects]
                ia = next(i for i, o in enumerate(objs) if o.name == a)
                ib = next(i for i, o in enumerate(objs) if o.name == b)
                objs[ia].box, objs[ib].box = objs[ib].box, objs[ia].box
                swapped = data.Scene(sc.seed, sc.extent, objs, [])
                assert data.answer_question(swapped, qa.question) == "no"
                flips += 1
        assert flips > 20

    def test_single_object_scene_has_no_questions(self):
        sc = data.generate_scene(0)
        sc.objects = sc.objects[:1]
        assert data.generate_questions(sc, 0) == []

    def test_unknown_question(self, scenes):
        with pytest.raises(ValueError):
            data.answer_question(scenes[0], "How many cubes?")


class TestDetectionSim:
    def test_noise_free_recovers_graph(self, scenes):
        for sc in scenes[:20]:
            props, cands = data.simulate_detections(sc, data.DetectionSim(), seed=5)
            kept = srp.filter_triplets(cands, 0.99, 0.99, min_keep=0)
            got = {(props[c.subject_idx].source, c.predicate, props[c.object_idx].source) for c in kept}
            assert got == set(sc.scene_graph)
            assert all(p.label == sc.objects[p.source].name for p in props)

    def test_full_dropout(self, scenes):
        props, cands = data.simulate_detections(scenes[0], data.DetectionSim(dropout=1.0), seed=0)
        assert props == [] and cands == []

    def test_relation_scores_fall_with_sigma(self, scenes):
        sigmas = (0.0, 0.5, 1.0, 2.0)
        for seed in range(100):
            sc = scenes[seed % len(scenes)]
            means = []
            for sigma in sigmas:
                _, cands = data.simulate_detections(sc, data.DetectionSim(sigma=sigma), seed)
                truth = set(sc.scene_graph)
                true_p = [c.p_rel for c in cands if (c.subject_idx, c.predicate, c.object_idx) in truth]
                means.append(np.mean(true_p) if true_p else 1.0)
            assert all(x >= y for x, y in zip(means, means[1:])), (seed, means)

    @pytest.mark.parametrize("kw", [{"sigma": -1.0}, {"dropout": 1.5}, {"confusion": -0.1}])
    def test_bad_sim(self, scenes, kw):
        with pytest.raises(ValueError):
            data.simulate_detections(scenes[0], data.DetectionSim(**kw), 0)


class TestDatasetIO:
    def test_binary_vocab(self):
        ex = data.generate_dataset(10, seed=0, templates=("exist", "relation"))
        vocab = data.build_answer_vocab(ex)
        assert vocab == {"no": 0, "yes": 1}
        assert data.build_answer_vocab(ex) == vocab

    def test_empty_vocab(self):
        with pytest.raises(ValueError):
            data.build_answer_vocab([])

    def test_dataset_deterministic(self):
        a = data.dumps_dataset(data.generate_dataset(15, seed=4))
        assert a == data.dumps_dataset(data.generate_dataset(15, seed=4))

    def test_save_load_save_identical(self, tmp_path, small_dataset):
        examples, vocab = small_dataset
        first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        data.save_dataset(first, examples, answer_vocab=vocab)
        loaded, cfg, vocab2 = data.load_dataset(first)
        data.save_dataset(second, loaded, cfg, vocab2)
        assert first.read_bytes() == second.read_bytes()
        assert vocab2 == vocab

    def test_truncated_record_names_line(self, tmp_path, small_dataset):
        path = tmp_path / "d.jsonl"
        data.save_dataset(path, small_dataset[0][:3])
        text = path.read_text()
        path.write_text(text[: len(text) - 40])
        with pytest.raises(data.SchemaError, match=r":4:"):
            data.load_dataset(path)

    def test_unknown_version(self, tmp_path, small_dataset):
        path = tmp_path / "d.jsonl"
        data.save_dataset(path, small_dataset[0][:2])
        lines = path.read_text().split("\n")
        header = json.loads(lines[0])
        header["schema_version"] = 99
        path.write_text("\n".join([json.dumps(header)] + lines[1:]))
        with pytest.raises(data.SchemaError, match="version"):
            data.load_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("")
        with pytest.raises(data.SchemaError):
            data.load_dataset(path)
