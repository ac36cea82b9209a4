import json

import numpy as np
import pytest

from srpvqa import checkpoint as ckpt
from srpvqa.model import collate, prepare
from srpvqa.train import train_model


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_dataset):
    from srpvqa.config import RunConfig

    cfg = RunConfig(d_v=16, d_q=8, d=8, heads=2, d_h=4, layers=1, d_f=8, mlp_hidden=8, vocab_size=64,
                    relation_source="parsed-semantic", detector="learned", detector_epochs=2,
                    epochs=2, batch=32)
    examples, vocab = small_dataset
    result = train_model(cfg, examples[:20], vocab)
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    ckpt.save_checkpoint(path, result.model, result.optimizer, result.epoch, result.history,
                         result.detector, vocab)
    return result, path, examples[20:30], vocab


def _logits(model, examples, vocab, detector):
    scenes, questions = prepare(model.cfg, examples, vocab, detector)
    return model.forward(collate(model.cfg, scenes, questions)).data


def test_round_trip_is_exact(trained):
    result, path, held_out, vocab = trained
    loaded = ckpt.load_checkpoint(path)
    assert loaded.config == result.model.cfg
    assert loaded.epoch == result.epoch and loaded.history == result.history
    assert loaded.answer_vocab == vocab
    before, after = result.model.state_dict(), loaded.model.state_dict()
    assert before.keys() == after.keys()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])
    for a, b in zip(result.optimizer.m + result.optimizer.v, loaded.optimizer.m + loaded.optimizer.v):
        np.testing.assert_array_equal(a, b)
    assert loaded.optimizer.step == result.optimizer.step
    np.testing.assert_array_equal(_logits(result.model, held_out, vocab, result.detector),
                                  _logits(loaded.model, held_out, vocab, loaded.detector))


def test_resave_is_byte_identical(trained, tmp_path):
    _, path, _, _ = trained
    loaded = ckpt.load_checkpoint(path)
    again = tmp_path / "again.ckpt"
    ckpt.save_checkpoint(again, loaded.model, loaded.optimizer, loaded.epoch, loaded.history,
                         loaded.detector, loaded.answer_vocab)
    assert again.read_bytes() == path.read_bytes()


def test_flipped_byte(trained, tmp_path):
    raw = bytearray(trained[1].read_bytes())
    raw[-100] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ckpt.ChecksumError):
        ckpt.load_checkpoint(bad)


def test_truncated(trained, tmp_path):
    bad = tmp_path / "short.ckpt"
    bad.write_bytes(trained[1].read_bytes()[:-10])
    with pytest.raises(ckpt.ChecksumError):
        ckpt.load_checkpoint(bad)


@pytest.mark.parametrize("version", [0, 2])
def test_other_version(trained, tmp_path, version):
    head, _, payload = trained[1].read_bytes().partition(b"\n")
    header = json.loads(head)
    header["version"] = version
    old = tmp_path / "old.ckpt"
    old.write_bytes(json.dumps(header).encode() + b"\n" + payload)
    with pytest.raises(ckpt.VersionError, match="migration"):
        ckpt.load_checkpoint(old)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_text("hello\nworld")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "out.txt"
    ckpt.atomic_write(target, "one")
    ckpt.atomic_write(target, b"two")
    assert target.read_text() == "two"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]
