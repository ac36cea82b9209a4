"""Training and evaluation loops for the answering model."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import data, srp
from .model import FrozenFeatures, VqaModel, collate, prepare
from .tensor import AdamState, NonFiniteError, Tape, adam_step, backward, cross_entropy

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: VqaModel
    detector: srp.DetectorParams | None
    optimizer: AdamState
    history: list = field(default_factory=list)
    epoch: int = 0


def split(examples, holdout, seed):
    """Deterministic scene-level train/test split."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    n_test = max(1, int(round(holdout * len(examples))))
    test = sorted(order[:n_test])
    train = sorted(order[n_test:])
    return [examples[i] for i in train], [examples[i] for i in test]


def fit_detector(cfg, examples, max_rows=4000):
    sim = data.DetectionSim(cfg.sigma, cfg.confusion, cfg.dropout)
    rows = srp.detection_set_from_scenes([ex.scene for ex in examples], sim, seed=cfg.seed + 101)
    if len(rows) > max_rows:
        pick = np.random.default_rng(cfg.seed).choice(len(rows), size=max_rows, replace=False)
        rows = rows.subset(np.sort(pick))
    params, history = srp.train_detector(rows, data.object_labels(), data.PREDICATES,
                                         epochs=cfg.detector_epochs, seed=cfg.seed, d_v=cfg.d_v)
    log.info("detector: final triplet loss %.4f, label accuracy %.3f",
             history[-1], srp.label_accuracy(params, rows))
    return params


def needs_detector(cfg):
    return ("r" in cfg.inputs.split("+") and cfg.relation_source != "oracle"
            and cfg.detector == "learned")


def batches(n, size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def train_model(cfg, examples, answer_vocab, detector=None, epoch_callback=None):
    cfg.validate()
    if detector is None and needs_detector(cfg):
        detector = fit_detector(cfg, examples)
    scenes, questions = prepare(cfg, examples, answer_vocab, detector)
    rng = np.random.default_rng(cfg.seed)
    model = VqaModel(cfg, len(answer_vocab), rng)
    params = model.trainable_parameters()
    state = AdamState(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    result = TrainResult(model, detector, state)
    cache = {}
    frozen = None if cfg.train_encoder else FrozenFeatures(model.encoder)
    for epoch in range(cfg.epochs):
        total, hits, count = 0.0, 0, 0
        for idx in batches(len(questions), cfg.batch, rng):
            batch = collate(cfg, scenes, [questions[i] for i in idx], cache, frozen)
            try:
                with Tape() as tape:
                    logits = model.forward(batch)
                    loss = cross_entropy(logits, batch.answers)
            except NonFiniteError as err:
                raise NumericError(f"epoch {epoch + 1}: non-finite value in forward pass") from err
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"epoch {epoch + 1}: loss is {value}")
            grads = backward(tape, loss)
            adam_step(params, [grads.get(p) for p in params], state)
            total += value * len(idx)
            hits += int((logits.data.argmax(axis=1) == batch.answers).sum())
            count += len(idx)
        entry = {"epoch": epoch + 1, "loss": total / count, "train_acc": hits / count}
        result.history.append(entry)
        result.epoch = epoch + 1
        log.info("epoch %d loss %.4f acc %.4f", epoch + 1, entry["loss"], entry["train_acc"])
        if epoch_callback:
            epoch_callback(result, entry)
    return result


def predict(model, examples, answer_vocab, detector=None, batch_size=128):
    """Per-question records with the predicted and true answer index."""
    cfg = model.cfg
    scenes, questions = prepare(cfg, examples, answer_vocab, detector)
    preds = np.empty(len(questions), dtype=np.int64)
    cache = {}
    frozen = None if cfg.train_encoder else FrozenFeatures(model.encoder)
    for idx in batches(len(questions), batch_size):
        batch = collate(cfg, scenes, [questions[i] for i in idx], cache, frozen)
        preds[idx] = model.forward(batch).data.argmax(axis=1)
    records = []
    k = 0
    for ex_i, ex in enumerate(examples):
        for q_i, qa in enumerate(ex.questions):
            q = questions[k]
            records.append({"example": ex_i, "question": q_i, "qtype": q.qtype,
                            "depends_on_relations": q.depends, "answer": int(q.answer),
                            "prediction": int(preds[k])})
            k += 1
    return records


def metrics_from_records(records):
    """Accuracy overall and per category; empty categories give ``None``."""
    def acc(rows):
        return None if not rows else sum(r["prediction"] == r["answer"] for r in rows) / len(rows)

    return {
        "n": len(records),
        "accuracy": acc(records),
        "binary": acc([r for r in records if r["qtype"] == "binary"]),
        "open": acc([r for r in records if r["qtype"] == "open"]),
        "relation": acc([r for r in records if r["depends_on_relations"]]),
    }
