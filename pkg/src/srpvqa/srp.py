"""Relationship triplets: detection, two-stage filtering and encoding.

The detector embeds visual features and label word vectors into a shared
space, trained with margin triplet losses; labels are read off by nearest
neighbour.  ``filter_triplets`` keeps confident subject/object pairs
(pair score >= alpha), then confident predicates (>= beta) and dedups on
the label triple.  When fewer than ``min_keep`` survive it falls back to
the best ``min_keep`` of all candidates.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import data
from .config import ConfigError
from .embed import encode_batch, tokenize
from .layers import LayerStack, Module
from .tensor import (
    Tape,
    Tensor,
    AdamState,
    adam_step,
    add,
    backward,
    concat,
    matmul,
    mean,
    relu,
    reshape,
    scale,
    square,
    sub,
    take_rows,
    tsum,
)

UNION_FEATURES = 12


@dataclass
class CandidateRelation:
    subject_idx: int
    object_idx: int
    p_subj: float
    p_obj: float
    p_rel: float
    subject: str
    predicate: str
    object: str

    @property
    def pair_score(self):
        return self.p_subj * self.p_obj

    @property
    def joint_score(self):
        return self.p_subj * self.p_obj * self.p_rel

    @property
    def labels(self):
        return (self.subject, self.predicate, self.object)


@dataclass
class RelationshipTriplet:
    subject: str
    predicate: str
    object: str
    b_s: list
    b_o: list
    provenance: str = "parsed"
    p_subj: float = 1.0
    p_obj: float = 1.0
    p_rel: float = 1.0

    @property
    def labels(self):
        return (self.subject, self.predicate, self.object)

    def sentence(self):
        return f"{self.subject} {self.predicate} {self.object}."

    def to_json(self):
        return json.dumps({
            "subject": self.subject, "predicate": self.predicate, "object": self.object,
            "p_subj": self.p_subj, "p_obj": self.p_obj, "p_rel": self.p_rel,
            "b_s": list(self.b_s), "b_o": list(self.b_o), "provenance": self.provenance,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(d["subject"], d["predicate"], d["object"], d["b_s"], d["b_o"],
                   d["provenance"], d["p_subj"], d["p_obj"], d["p_rel"])


def write_triplets(path, triplets):
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(t.to_json() + "\n")


def read_triplets(path):
    with open(path, encoding="utf-8") as fh:
        return [RelationshipTriplet.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- filtering

def _dedup(candidates):
    best = {}
    for c in candidates:
        cur = best.get(c.labels)
        if cur is None or c.p_rel > cur.p_rel:
            best[c.labels] = c
    return list(best.values())


def _ranked(candidates):
    return sorted(candidates, key=lambda c: (-c.joint_score, c.subject_idx, c.object_idx))


def filter_triplets(candidates, alpha=0.8, beta=0.5, min_keep=3):
    """Two-stage threshold and dedup on labels, with a ``min_keep`` fallback."""
    if not (0.0 <= beta <= 1.0 and 0.0 <= alpha <= 1.0):
        raise ConfigError("alpha and beta must lie in [0, 1]")
    if alpha < beta:
        raise ConfigError(f"alpha ({alpha}) must be >= beta ({beta})")
    stage1 = [c for c in candidates if c.pair_score >= alpha]
    stage2 = [c for c in stage1 if c.p_rel >= beta]
    kept = _dedup(stage2)
    if len(kept) < min_keep:
        return _ranked(_dedup(candidates))[:min_keep]
    return _ranked(kept)


def to_triplets(candidates, proposals, provenance="parsed"):
    return [RelationshipTriplet(c.subject, c.predicate, c.object,
                                list(proposals[c.subject_idx].box), list(proposals[c.object_idx].box),
                                provenance, c.p_subj, c.p_obj, c.p_rel)
            for c in candidates]


# ---------------------------------------------------------------- oracle

def parse_scene_graph(scene):
    """Ground-truth triplets from scene-graph edges, deduplicated, in edge order."""
    objs = scene.objects
    out = []
    seen = set()
    for s, pred, o in scene.scene_graph:
        if not (0 <= s < len(objs) and 0 <= o < len(objs)):
            raise data.SchemaError(f"edge ({s}, {pred!r}, {o}) references a missing object")
        key = (s, pred, o)
        if key in seen:
            continue
        seen.add(key)
        out.append(RelationshipTriplet(objs[s].name, pred, objs[o].name,
                                       list(objs[s].box), list(objs[o].box), "oracle"))
    return out


# ---------------------------------------------------------------- features

def triplet_token_ids(triplets, vocab_size=4096):
    """Padded ``[n, T]`` token ids and mask for the rendered sentences."""
    toks = [[t.id for t in tokenize(tr.sentence(), vocab_size)] for tr in triplets]
    width = max(len(t) for t in toks)
    ids = np.zeros((len(toks), width), dtype=np.int64)
    mask = np.zeros((len(toks), width), dtype=np.uint8)
    for i, t in enumerate(toks):
        ids[i, :len(t)] = t
        mask[i, :len(t)] = 1
    return ids, mask


def pool_sentences(encoder, ids, mask):
    """Mean of the token rows of each sentence, ``[n, d_r]``."""
    rows = encode_batch(encoder, ids, mask)
    w = mask / mask.sum(axis=1, keepdims=True)
    n = ids.shape[0]
    return reshape(matmul(Tensor(w[:, None, :]), rows), (n, encoder.width))


def triplet_boxes(triplets):
    return np.array([list(t.b_s) + list(t.b_o) for t in triplets], dtype=np.float64)


def triplets_to_features(triplets, encoder, boxes=None):
    """``[n, d_r + 8]``: pooled sentence encoding then subject and object boxes."""
    if not triplets:
        raise ValueError("no triplets to encode")
    ids, mask = triplet_token_ids(triplets, encoder.vocab_size)
    pooled = pool_sentences(encoder, ids, mask)
    b = triplet_boxes(triplets) if boxes is None else np.asarray(boxes, dtype=np.float64)
    return concat([pooled, Tensor(b)], axis=-1)


def visual_relationship_feature(candidate, proposals):
    """Subject feature, object feature, subject box, object box."""
    n = len(proposals)
    for idx in (candidate.subject_idx, candidate.object_idx):
        if not 0 <= idx < n:
            raise IndexError(f"proposal index {idx} out of range for {n} proposals")
    s, o = proposals[candidate.subject_idx], proposals[candidate.object_idx]
    return Tensor(np.concatenate([np.asarray(s.feature), np.asarray(o.feature),
                                  np.asarray(s.box), np.asarray(o.box)]))


def union_box_feature(b_s, b_o):
    """Geometry of the pair's union region, a fixed-length descriptor."""
    (sx, sy), (ox, oy) = data.center(b_s), data.center(b_o)
    ws, hs = b_s[2] - b_s[0], b_s[3] - b_s[1]
    wo, ho = b_o[2] - b_o[0], b_o[3] - b_o[1]
    ux0, uy0 = min(b_s[0], b_o[0]), min(b_s[1], b_o[1])
    ux1, uy1 = max(b_s[2], b_o[2]), max(b_s[3], b_o[3])
    overlap = max(0.0, min(b_s[2], b_o[2]) - max(b_s[0], b_o[0])) / max(1e-6, min(ws, wo))
    dx, dy = sx - ox, sy - oy
    return np.array([dx, dy, abs(dx), abs(dy), np.hypot(dx, dy), b_o[1] - b_s[3],
                     overlap, ux1 - ux0, uy1 - uy0, ws - wo, hs - ho, ws * hs - wo * ho]) * 4.0


# ---------------------------------------------------------------- detector

def word_vector(label, width=16):
    """Deterministic word vector; multi-word labels average their words."""
    vecs = []
    for word in label.split():
        rng = np.random.default_rng(zlib.crc32(word.encode("utf-8")))
        vecs.append(rng.normal(0.0, 1.0, size=width))
    return np.mean(vecs, axis=0)


class DetectorParams(Module):
    def __init__(self, rng, d_v, object_labels, predicate_labels, embed_width=16,
                 hidden=32, word_width=16, margin=0.5):
        self.object_labels = list(object_labels)
        self.predicate_labels = list(predicate_labels)
        self.margin = margin
        self.d_v = d_v
        self.embed_width = embed_width
        self.hidden = hidden
        self.word_width = word_width
        self.object_map = LayerStack(rng, [d_v, hidden, embed_width])
        self.relation_map = LayerStack(rng, [2 * d_v + UNION_FEATURES, hidden, embed_width])
        self.label_map = LayerStack(rng, [word_width, hidden, embed_width])
        self.object_words = Tensor(np.stack([word_vector(x, word_width) for x in self.object_labels]))
        self.predicate_words = Tensor(np.stack([word_vector(x, word_width) for x in self.predicate_labels]))

    def spec(self):
        """Constructor arguments, enough to rebuild an identically shaped detector."""
        return {"d_v": self.d_v, "object_labels": self.object_labels,
                "predicate_labels": self.predicate_labels, "embed_width": self.embed_width,
                "hidden": self.hidden, "word_width": self.word_width, "margin": self.margin}

    def label_embeddings(self):
        return self.label_map(self.object_words), self.label_map(self.predicate_words)


@dataclass
class DetectionSet:
    """Aligned arrays: ``f_s, f_r, f_o`` rows and integer label targets."""

    f_s: np.ndarray
    f_r: np.ndarray
    f_o: np.ndarray
    subject: np.ndarray
    predicate: np.ndarray
    object: np.ndarray

    def __len__(self):
        return len(self.subject)

    def subset(self, idx):
        return DetectionSet(*(getattr(self, k)[idx] for k in
                              ("f_s", "f_r", "f_o", "subject", "predicate", "object")))


def _sq_dist(a, b):
    return tsum(square(sub(a, b)), axis=-1)


def _triplet_term(anchor, table, target, negative, margin):
    pos = take_rows(table, target)
    neg = take_rows(table, negative)
    return mean(relu(add(sub(_sq_dist(anchor, pos), _sq_dist(anchor, neg)), margin)))


def triplet_loss(anchor, positive, negative, margin):
    """``mean(max(0, margin + |a - p|^2 - |a - n|^2))``."""
    return mean(relu(add(sub(_sq_dist(anchor, positive), _sq_dist(anchor, negative)), margin)))


def _sample_negatives(rng, target, n_labels):
    shift = rng.integers(1, n_labels, size=len(target))
    return (target + shift) % n_labels


def detection_loss(params, batch, rng):
    obj_table, pred_table = params.label_embeddings()
    e_s = params.object_map(Tensor(batch.f_s))
    e_o = params.object_map(Tensor(batch.f_o))
    e_r = params.relation_map(Tensor(np.concatenate([batch.f_s, batch.f_r, batch.f_o], axis=1)))
    n_obj, n_pred = len(params.object_labels), len(params.predicate_labels)
    m = params.margin
    loss = _triplet_term(e_s, obj_table, batch.subject, _sample_negatives(rng, batch.subject, n_obj), m)
    loss = add(loss, _triplet_term(e_o, obj_table, batch.object, _sample_negatives(rng, batch.object, n_obj), m))
    loss = add(loss, _triplet_term(e_r, pred_table, batch.predicate,
                                   _sample_negatives(rng, batch.predicate, n_pred), m))
    return loss


def train_detector(dataset, object_labels, predicate_labels, epochs=200, lr=0.01,
                   batch_size=64, seed=0, d_v=None, **kwargs):
    """Fit the detector; returns ``(params, loss_history)``."""
    if len(set(dataset.subject) | set(dataset.object)) < 2 or len(set(dataset.predicate)) < 2:
        raise ValueError("training refused: need at least two distinct labels per vocabulary")
    rng = np.random.default_rng(seed)
    params = DetectorParams(rng, d_v or dataset.f_s.shape[1], object_labels, predicate_labels, **kwargs)
    plist = params.parameters()
    state = AdamState(plist, lr=lr, beta1=0.9, beta2=0.98)
    history = []
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            batch = dataset.subset(order[start:start + batch_size])
            with Tape() as tape:
                loss = detection_loss(params, batch, rng)
            grads = backward(tape, loss)
            adam_step(plist, [grads.get(p) for p in plist], state)
            total += loss.item() * len(batch)
        history.append(total / n)
    return params, history


def _nearest(emb, table):
    d = ((emb[:, None, :] - table[None, :, :]) ** 2).sum(axis=-1)
    logits = -d
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    idx = d.argmin(axis=1)
    return idx, p[np.arange(len(idx)), idx]


def predict_labels(params, f_s, f_r, f_o):
    """Nearest-neighbour labels and probabilities for aligned feature rows."""
    obj_table, pred_table = (t.data for t in params.label_embeddings())
    e_s = params.object_map(Tensor(f_s)).data
    e_o = params.object_map(Tensor(f_o)).data
    e_r = params.relation_map(Tensor(np.concatenate([f_s, f_r, f_o], axis=1))).data
    s_idx, p_s = _nearest(e_s, obj_table)
    o_idx, p_o = _nearest(e_o, obj_table)
    r_idx, p_r = _nearest(e_r, pred_table)
    return (s_idx, p_s), (r_idx, p_r), (o_idx, p_o)


def label_accuracy(params, dataset):
    (s, _), (r, _), (o, _) = predict_labels(params, dataset.f_s, dataset.f_r, dataset.f_o)
    hits = (s == dataset.subject).sum() + (r == dataset.predicate).sum() + (o == dataset.object).sum()
    return hits / (3.0 * len(dataset))


def detect_relationships(params, proposals):
    """One candidate per ordered proposal pair, labelled by nearest neighbour."""
    l = len(proposals)
    if l < 2:
        return []
    pairs = [(i, j) for i in range(l) for j in range(l) if i != j]
    feats = np.stack([np.asarray(p.feature) for p in proposals])
    f_s = feats[[i for i, _ in pairs]]
    f_o = feats[[j for _, j in pairs]]
    f_r = np.stack([union_box_feature(proposals[i].box, proposals[j].box) for i, j in pairs])
    (s, ps), (r, pr), (o, po) = predict_labels(params, f_s, f_r, f_o)
    return [CandidateRelation(i, j, float(ps[k]), float(po[k]), float(pr[k]),
                              params.object_labels[s[k]], params.predicate_labels[r[k]],
                              params.object_labels[o[k]])
            for k, (i, j) in enumerate(pairs)]


def detection_set_from_scenes(scenes, sim=None, seed=0):
    """Training rows from scene-graph edges over simulated proposals."""
    sim = sim or data.DetectionSim()
    labels = data.object_labels()
    rows = {k: [] for k in ("f_s", "f_r", "f_o", "subject", "predicate", "object")}
    for n, scene in enumerate(scenes):
        proposals, _ = data.simulate_detections(scene, sim, seed + n)
        by_source = {p.source: p for p in proposals}
        for s, pred, o in scene.scene_graph:
            if s not in by_source or o not in by_source:
                continue
            ps, po = by_source[s], by_source[o]
            rows["f_s"].append(np.asarray(ps.feature))
            rows["f_o"].append(np.asarray(po.feature))
            rows["f_r"].append(union_box_feature(ps.box, po.box))
            rows["subject"].append(labels.index(scene.objects[s].name))
            rows["object"].append(labels.index(scene.objects[o].name))
            rows["predicate"].append(data.PREDICATES.index(pred))
    return DetectionSet(*(np.array(rows[k], dtype=np.int64 if k in ("subject", "predicate", "object")
                                   else np.float64)
                          for k in ("f_s", "f_r", "f_o", "subject", "predicate", "object")))


def separable_detection_set(n, seed=0, d_v=8, n_objects=3, n_predicates=3, spread=0.05):
    """Well-separated clusters: each label owns a prototype, small noise."""
    rng = np.random.default_rng(seed)
    proto_rng = np.random.default_rng(99)
    obj_proto = proto_rng.normal(0.0, 1.0, size=(n_objects, d_v)) * 2.0
    rel_proto = proto_rng.normal(0.0, 1.0, size=(n_predicates, UNION_FEATURES)) * 2.0
    s = rng.integers(0, n_objects, size=n)
    o = rng.integers(0, n_objects, size=n)
    p = rng.integers(0, n_predicates, size=n)
    return DetectionSet(
        obj_proto[s] + spread * rng.normal(size=(n, d_v)),
        rel_proto[p] + spread * rng.normal(size=(n, UNION_FEATURES)),
        obj_proto[o] + spread * rng.normal(size=(n, d_v)),
        s, p, o)
