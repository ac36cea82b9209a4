"""Attention heatmaps over the scene layout and a triplet report.

Heatmaps are binary PGM (one per attention kind) plus a PPM overlay whose
red channel carries self attention and green channel mutual attention.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .checkpoint import atomic_write
from .model import FrozenFeatures, collate, prepare
from .msa import fuse_and_classify

SCALE = 4


def render_boxes(boxes, weights, extent=(64, 64), scale=SCALE):
    """Grayscale ``uint8`` image; each box filled with its normalized weight.

    Overlapping boxes take the larger value.  Weights are divided by their
    maximum, so the most attended box renders at 255.
    """
    h, w = extent[1] * scale, extent[0] * scale
    img = np.zeros((h, w), dtype=np.uint8)
    weights = np.asarray(weights, dtype=np.float64)
    top = weights.max() if weights.size else 0.0
    levels = np.zeros_like(weights) if top <= 0 else np.round(255.0 * weights / top)
    for box, level in zip(boxes, levels):
        x0, y0, x1, y1 = (int(round(c * n)) for c, n in zip(box, (w, h, w, h)))
        region = img[y0:y1, x0:x1]
        np.maximum(region, np.uint8(level), out=region)
    return img


def pgm_bytes(img):
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def ppm_bytes(rgb):
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes()


def _outline(rgb, boxes):
    h, w, _ = rgb.shape
    for box in boxes:
        x0, y0, x1, y1 = (int(round(c * n)) for c, n in zip(box, (w, h, w, h)))
        x1, y1 = min(x1, w) - 1, min(y1, h) - 1
        rgb[y0, x0:x1 + 1, 2] = 255
        rgb[y1, x0:x1 + 1, 2] = 255
        rgb[y0:y1 + 1, x0, 2] = 255
        rgb[y0:y1 + 1, x1, 2] = 255


def _scores(tensor):
    return None if tensor is None else [float(x) for x in tensor.data[0]]


def top_two(scores):
    """Indices of the two largest scores, ties broken by position."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:2]


def visualize_example(model, example, answer_vocab, out_dir, question=0, detector=None):
    """Write heatmaps and ``triplets.json`` for one question; returns the paths."""
    cfg = model.cfg
    if not 0 <= question < len(example.questions):
        raise IndexError(f"example has {len(example.questions)} questions, asked for {question}")
    scenes, questions = prepare(cfg, [example], answer_vocab, detector)
    frozen = None if cfg.train_encoder else FrozenFeatures(model.encoder)
    batch = collate(cfg, scenes, [questions[question]], {}, frozen)
    vectors, sets = model.attend(batch)
    logits = fuse_and_classify(vectors, model.fusion).data[0]
    inverse = {i: a for a, i in answer_vocab.items()}
    os.makedirs(out_dir, exist_ok=True)
    written = []

    boxes = [list(row[-4:]) for row in scenes[0].v]
    extent = example.scene.extent
    v = sets.get("v")
    layers = {}
    if v is not None:
        for kind, tensor in (("self", v.psi_yx), ("mutual", v.z_yx)):
            if tensor is not None:
                layers[kind] = render_boxes(boxes, tensor.data[0, :len(boxes)], extent)
                path = os.path.join(out_dir, f"attention_{kind}.pgm")
                atomic_write(path, pgm_bytes(layers[kind]))
                written.append(path)
    if layers:
        shape = next(iter(layers.values())).shape
        rgb = np.zeros(shape + (3,), dtype=np.uint8)
        rgb[..., 0] = layers.get("self", 0)
        rgb[..., 1] = layers.get("mutual", 0)
        _outline(rgb, boxes)
        path = os.path.join(out_dir, "attention_overlay.ppm")
        atomic_write(path, ppm_bytes(rgb))
        written.append(path)

    triplets = scenes[0].triplets
    scores = [t.p_subj * t.p_obj * t.p_rel for t in triplets]
    r = sets.get("r")
    entries = []
    for i, t in enumerate(triplets):
        entry = {"index": i, "sentence": t.sentence(), "subject": t.subject, "predicate": t.predicate,
                 "object": t.object, "p_subj": t.p_subj, "p_obj": t.p_obj, "p_rel": t.p_rel,
                 "score": scores[i], "provenance": t.provenance}
        if r is not None:
            if r.psi_yx is not None:
                entry["self_attention"] = float(r.psi_yx.data[0, i])
            if r.z_yx is not None:
                entry["mutual_attention"] = float(r.z_yx.data[0, i])
        entries.append(entry)
    best = top_two(scores)
    for rank, i in enumerate(best):
        entries[i]["highlight"] = rank + 1
    qa = example.questions[question]
    report = {
        "question": qa.question, "answer": qa.answer,
        "prediction": inverse.get(int(np.argmax(logits))),
        "top2": best, "triplets": entries,
        "object_attention": {
            "boxes": boxes,
            "self": _scores(v.psi_yx) if v is not None else None,
            "mutual": _scores(v.z_yx) if v is not None else None,
        },
    }
    path = os.path.join(out_dir, "triplets.json")
    atomic_write(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written
