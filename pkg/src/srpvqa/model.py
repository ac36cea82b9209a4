"""The full answering model: question encoder, two MSA blocks, fusion head.

``prepare`` turns dataset examples into per-scene arrays once (proposals,
relation rows, token ids); ``collate`` pads a list of questions into one
batch; ``VqaModel.forward`` maps a batch to answer logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data, srp
from .embed import TextEncoderParams, encode_batch, tokenize
from .layers import Module
from .msa import FusionParams, MsaBlockParams, fuse_and_classify, msa_block
from .tensor import Tensor, concat, matmul, reshape, take_rows

BOX_V = 4
BOX_R = 8


def relation_width(cfg):
    if cfg.relation_source == "parsed-visual":
        return 2 * cfg.d_v + BOX_R
    return cfg.d_r + BOX_R


def active_branches(cfg):
    use_v = "v" in cfg.inputs.split("+")
    use_r = "r" in cfg.inputs.split("+")
    mutual = cfg.attention in ("mutual", "msa")
    selfa = cfg.attention in ("self", "msa")
    names = []
    if use_v:
        names += (["v_m", "q_mv"] if mutual else []) + (["v_s", "q_sv"] if selfa else [])
    if use_r:
        names += (["r_m", "q_mr"] if mutual else []) + (["r_s", "q_sr"] if selfa else [])
    return names


def branch_widths(cfg):
    w = {"v": cfg.d_v + BOX_V, "r": relation_width(cfg), "q": cfg.d_q}
    return {name: w[name[0]] for name in active_branches(cfg)}


class VqaModel(Module):
    def __init__(self, cfg, n_answers, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.n_answers = n_answers
        parts = cfg.inputs.split("+")
        self.encoder = TextEncoderParams(rng, cfg.d_q, cfg.heads, cfg.vocab_size,
                                         positional=cfg.positional)
        block = dict(width=cfg.d, heads=cfg.heads, layers=cfg.layers, mlp_hidden=cfg.mlp_hidden)
        self.block_v = MsaBlockParams(rng, cfg.d_q, cfg.d_v + BOX_V, **block) if "v" in parts else None
        self.block_r = MsaBlockParams(rng, cfg.d_q, relation_width(cfg), **block) if "r" in parts else None
        self.fusion = FusionParams(rng, branch_widths(cfg), cfg.d_f, n_answers)

    def trainable_parameters(self):
        """Parameters the optimizer updates; a frozen encoder is left out."""
        if self.cfg.train_encoder:
            return self.parameters()
        return [p for name, p in self.named_parameters() if not name.startswith("encoder.")]

    def encode_questions(self, batch):
        if batch.q_feat is not None:
            return Tensor(batch.q_feat)
        return encode_batch(self.encoder, batch.q_ids, batch.q_mask)

    def relation_rows(self, batch):
        if batch.r_feat is not None:
            return Tensor(batch.r_feat)
        pooled = srp.pool_sentences(self.encoder, batch.s_ids, batch.s_mask)
        b, n = batch.r_index.shape
        rows = reshape(take_rows(pooled, batch.r_index.reshape(-1)), (b, n, self.cfg.d_r))
        return concat([rows, Tensor(batch.r_boxes)], axis=-1)

    def attend(self, batch, r_masked=False):
        """All 8 attended vectors (absent ones ``None``) plus the score sets."""
        q = self.encode_questions(batch)
        vectors = dict.fromkeys(("v_m", "q_mv", "v_s", "q_sv", "r_m", "q_mr", "r_s", "q_sr"))
        sets = {}
        if self.block_v is not None:
            a = msa_block(q, Tensor(batch.v), self.block_v, batch.q_mask, batch.v_mask,
                          mode=self.cfg.attention)
            vectors.update(v_m=a.y_m, q_mv=a.x_m, v_s=a.y_s, q_sv=a.x_s)
            sets["v"] = a
        if self.block_r is not None and not r_masked:
            a = msa_block(q, self.relation_rows(batch), self.block_r, batch.q_mask, batch.r_mask,
                          mode=self.cfg.attention)
            vectors.update(r_m=a.y_m, q_mr=a.x_m, r_s=a.y_s, q_sr=a.x_s)
            sets["r"] = a
        return vectors, sets

    def forward(self, batch, r_masked=False):
        vectors, _ = self.attend(batch, r_masked)
        return fuse_and_classify(vectors, self.fusion)


# ---------------------------------------------------------------- preparation

@dataclass
class PreparedScene:
    v: np.ndarray  # [l, d_v + 4]
    triplets: list  # RelationshipTriplet
    r_feat: np.ndarray | None  # visual relation rows, [n, 2 d_v + 8]


@dataclass
class PreparedQuestion:
    scene: int
    q_ids: np.ndarray
    answer: int
    qtype: str
    depends: bool


def _scene_rows(proposals, d_v):
    if not proposals:
        return np.zeros((1, d_v + BOX_V))
    return np.stack([np.concatenate([np.asarray(p.feature), np.asarray(p.box)]) for p in proposals])


def relations_for_scene(cfg, scene, proposals, candidates, detector=None):
    """Relation triplets (and visual rows) for one scene per the relation source."""
    if cfg.relation_source == "oracle":
        return srp.parse_scene_graph(scene), None
    if cfg.detector == "learned" and detector is not None:
        candidates = srp.detect_relationships(detector, proposals)
    kept = srp.filter_triplets(candidates, cfg.alpha, cfg.beta, cfg.min_keep)
    triplets = srp.to_triplets(kept, proposals)
    r_feat = None
    if cfg.relation_source == "parsed-visual":
        if kept:
            r_feat = np.stack([srp.visual_relationship_feature(c, proposals).data for c in kept])
        else:
            r_feat = np.zeros((1, 2 * cfg.d_v + BOX_R))
    return triplets, r_feat


def prepare(cfg, examples, answer_vocab, detector=None, sim_seed_offset=7):
    sim = data.DetectionSim(cfg.sigma, cfg.confusion, cfg.dropout)
    scenes, questions = [], []
    for k, ex in enumerate(examples):
        proposals, candidates = data.simulate_detections(ex.scene, sim, ex.seed + sim_seed_offset)
        triplets, r_feat = relations_for_scene(cfg, ex.scene, proposals, candidates, detector)
        scenes.append(PreparedScene(_scene_rows(proposals, cfg.d_v), triplets, r_feat))
        for qa in ex.questions:
            ids = np.array([t.id for t in tokenize(qa.question, cfg.vocab_size)], dtype=np.int64)
            questions.append(PreparedQuestion(k, ids, answer_vocab.get(qa.answer, -1),
                                              qa.qtype, qa.depends_on_relations))
    return scenes, questions


@dataclass
class Batch:
    q_ids: np.ndarray
    q_mask: np.ndarray
    v: np.ndarray
    v_mask: np.ndarray
    r_mask: np.ndarray
    r_feat: np.ndarray | None = None
    r_boxes: np.ndarray | None = None
    r_index: np.ndarray | None = None
    s_ids: np.ndarray | None = None
    s_mask: np.ndarray | None = None
    answers: np.ndarray | None = None
    q_feat: np.ndarray | None = None


def _pad(arrays, width=None):
    n = max(a.shape[0] for a in arrays)
    tail = arrays[0].shape[1:]
    out = np.zeros((len(arrays), n) + tail, dtype=arrays[0].dtype)
    mask = np.zeros((len(arrays), n), dtype=np.uint8)
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
        mask[i, :a.shape[0]] = 1
    return out, mask


_NULL_TRIPLET = srp.RelationshipTriplet("nothing", "near", "nothing", [0.0] * 4, [0.0] * 4, "parsed")


class FrozenFeatures:
    """Memoized encoder outputs for a frozen encoder."""

    def __init__(self, encoder, chunk=256):
        self.encoder = encoder
        self.chunk = chunk
        self.questions = {}
        self.sentences = {}

    def _encode(self, id_rows, pooled):
        ids, mask = _pad(id_rows)
        out = []
        for start in range(0, len(id_rows), self.chunk):
            sl = slice(start, start + self.chunk)
            if pooled:
                out.append(srp.pool_sentences(self.encoder, ids[sl], mask[sl]).data)
            else:
                out.append(encode_batch(self.encoder, ids[sl], mask[sl]).data)
        return np.concatenate(out), mask

    def question_rows(self, questions):
        todo = [q for q in {q.q_ids.tobytes(): q for q in questions}.values()
                if q.q_ids.tobytes() not in self.questions]
        if todo:
            feats, mask = self._encode([q.q_ids for q in todo], pooled=False)
            for q, f, m in zip(todo, feats, mask):
                self.questions[q.q_ids.tobytes()] = f[: int(m.sum())]
        return [self.questions[q.q_ids.tobytes()] for q in questions]

    def sentence_rows(self, sentences, vocab_size):
        todo = [s for s in dict.fromkeys(sentences) if s not in self.sentences]
        if todo:
            ids = [np.array([t.id for t in tokenize(s, vocab_size)], dtype=np.int64) for s in todo]
            feats, _ = self._encode(ids, pooled=True)
            self.sentences.update(zip(todo, feats))
        return np.stack([self.sentences[s] for s in sentences])


def collate(cfg, scenes, questions, sentence_cache=None, frozen=None):
    q_ids, q_mask = _pad([q.q_ids for q in questions])
    v, v_mask = _pad([scenes[q.scene].v for q in questions])
    batch = Batch(q_ids, q_mask, v, v_mask, None)
    batch.answers = np.array([q.answer for q in questions], dtype=np.int64)
    if frozen is not None:
        batch.q_feat, _ = _pad(frozen.question_rows(questions))
    if "r" not in cfg.inputs.split("+"):
        return batch
    if cfg.relation_source == "parsed-visual":
        batch.r_feat, batch.r_mask = _pad([scenes[q.scene].r_feat for q in questions])
        return batch
    if frozen is not None:
        rows = []
        for q in questions:
            trips = scenes[q.scene].triplets or [_NULL_TRIPLET]
            pooled = frozen.sentence_rows([t.sentence() for t in trips], cfg.vocab_size)
            rows.append(np.concatenate([pooled, srp.triplet_boxes(trips)], axis=1))
        batch.r_feat, batch.r_mask = _pad(rows)
        return batch
    # semantic rows: encode each distinct sentence in the batch once
    cache = sentence_cache if sentence_cache is not None else {}
    sentences = {}
    per_q = []
    boxes = []
    for q in questions:
        trips = scenes[q.scene].triplets or [_NULL_TRIPLET]
        idx = []
        for t in trips:
            s = t.sentence()
            if s not in sentences:
                sentences[s] = len(sentences)
            idx.append(sentences[s])
        per_q.append(np.array(idx, dtype=np.int64))
        boxes.append(srp.triplet_boxes(trips))
    batch.r_index, batch.r_mask = _pad(per_q)
    batch.r_boxes, _ = _pad(boxes)
    toks = []
    for s in sentences:
        if s not in cache:
            cache[s] = np.array([t.id for t in tokenize(s, cfg.vocab_size)], dtype=np.int64)
        toks.append(cache[s])
    batch.s_ids, batch.s_mask = _pad(toks)
    return batch
