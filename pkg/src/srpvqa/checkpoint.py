"""Versioned, checksummed checkpoint files.

Layout: one JSON header line ``{"format", "version", "sha256", "size"}``
followed by an uncompressed ``.npz`` payload.  The payload holds every
array plus a ``__meta__`` entry with the JSON-encoded config, epoch,
history and optimizer scalars.  The checksum covers the payload bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile

import numpy as np

from . import srp
from .config import RunConfig
from .model import VqaModel
from .tensor import AdamState

FORMAT = "srpvqa-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` via a same-directory rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _payload(arrays, meta):
    buf = io.BytesIO()
    entries = dict(arrays)
    entries["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(buf, **entries)
    return buf.getvalue()


def save_checkpoint(path, model, optimizer=None, epoch=0, history=(), detector=None, answer_vocab=None):
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    meta = {"config": model.cfg.to_dict(), "n_answers": model.n_answers, "epoch": int(epoch),
            "history": list(history),
            "answer_vocab": None if answer_vocab is None else sorted(answer_vocab, key=answer_vocab.get),
            "optimizer": None, "detector": None}
    if optimizer is not None:
        meta["optimizer"] = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                             "eps": optimizer.eps, "step": optimizer.step, "count": len(optimizer.m)}
        for i, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
            arrays[f"adam/m/{i}"] = m
            arrays[f"adam/v/{i}"] = v
    if detector is not None:
        meta["detector"] = detector.spec()
        arrays.update({f"detector/{k}": v for k, v in detector.state_dict().items()})
    payload = _payload(arrays, meta)
    header = {"format": FORMAT, "version": VERSION, "size": len(payload),
              "sha256": hashlib.sha256(payload).hexdigest()}
    atomic_write(path, json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload)


class Checkpoint:
    """Loaded checkpoint contents."""

    def __init__(self, model, optimizer, epoch, history, detector, answer_vocab):
        self.model = model
        self.optimizer = optimizer
        self.epoch = epoch
        self.history = history
        self.detector = detector
        self.answer_vocab = answer_vocab

    @property
    def config(self):
        return self.model.cfg


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, payload = raw.partition(b"\n")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable checkpoint header") from err
    if not sep or not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("version") != VERSION:
        raise VersionError(f"{path}: checkpoint version {header.get('version')} is not {VERSION}; "
                           "migration of old checkpoints is not supported")
    if len(payload) != header.get("size") or hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")
    with np.load(io.BytesIO(payload), allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    cfg = RunConfig.from_dict(meta["config"])
    model = VqaModel(cfg, meta["n_answers"])
    model.load_state_dict(_section(arrays, "model/"))
    optimizer = None
    if meta["optimizer"] is not None:
        o = meta["optimizer"]
        optimizer = AdamState(model.trainable_parameters(), o["lr"], o["beta1"], o["beta2"], o["eps"])
        if o["count"] != len(optimizer.m):
            raise CheckpointError(f"{path}: optimizer state does not match the model")
        optimizer.step = o["step"]
        optimizer.m = [arrays[f"adam/m/{i}"].copy() for i in range(o["count"])]
        optimizer.v = [arrays[f"adam/v/{i}"].copy() for i in range(o["count"])]
    detector = None
    if meta["detector"] is not None:
        detector = srp.DetectorParams(np.random.default_rng(0), **meta["detector"])
        detector.load_state_dict(_section(arrays, "detector/"))
    vocab = meta["answer_vocab"]
    vocab = None if vocab is None else {a: i for i, a in enumerate(vocab)}
    return Checkpoint(model, optimizer, meta["epoch"], meta["history"], detector, vocab)


def _section(arrays, prefix):
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
