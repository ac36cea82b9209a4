import json
import os
import subprocess
import sys

import numpy as np
import pytest

from srpvqa import checkpoint, cli, data
from srpvqa.train import metrics_from_records

TINY = {"d_v": 16, "d_q": 8, "d": 8, "heads": 2, "d_h": 4, "layers": 1, "d_f": 8, "mlp_hidden": 8,
        "vocab_size": 64, "relation_source": "oracle", "batch": 32}

# loss per epoch for the fixed 50-scene run below
GOLDEN_LOSS = [4.8654623418320595, 3.901988675818048, 3.295751712911194, 2.8945976508640103,
               2.655803645765976, 2.5036407114812893, 2.3855808580708775, 2.2912168760713914,
               2.2139667556149893, 2.140463776361363]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    assert cli.main(["gen", "--n-scenes", "50", "--seed", "5", "--out", str(d / "ds.jsonl")]) == 0
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "m.ckpt"
    rc = cli.main(["train", "--config", str(workdir / "tiny.json"), "--dataset", str(workdir / "ds.jsonl"),
                   "--set", "epochs=10", "--out", str(out)])
    assert rc == 0
    return out


class TestGen:
    def test_byte_identical_across_runs(self, workdir, tmp_path):
        other = tmp_path / "again.jsonl"
        assert cli.main(["gen", "--n-scenes", "50", "--seed", "5", "--out", str(other)]) == 0
        assert other.read_bytes() == (workdir / "ds.jsonl").read_bytes()

    def test_record_count(self, tmp_path):
        out = tmp_path / "d.jsonl"
        assert cli.main(["gen", "--n-scenes", "100", "--out", str(out)]) == 0
        assert len(data.load_dataset(out)[0]) == 100

    def test_bad_thresholds_write_nothing(self, tmp_path):
        out = tmp_path / "d.jsonl"
        rc = cli.main(["gen", "--n-scenes", "5", "--set", "alpha=0.2", "--set", "beta=0.5", "--out", str(out)])
        assert rc == cli.EXIT_USAGE
        assert not out.exists()

    @pytest.mark.parametrize("argv", [
        ["gen", "--n-scenes", "0", "--out", "x"],
        ["gen", "--set", "nosuchkey=1", "--out", "x"],
        ["gen", "--set", "novalue", "--out", "x"],
        ["gen", "--n-scenes", "3"],
    ])
    def test_usage_errors(self, argv, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(argv) == cli.EXIT_USAGE

    def test_argparse_errors_exit_with_usage_code(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["bogus"])
        assert info.value.code == cli.EXIT_USAGE


class TestTrain:
    def test_loss_curve(self, trained):
        history = [json.loads(line) for line in open(str(trained) + ".log.jsonl")]
        losses = [h["loss"] for h in history]
        assert losses == pytest.approx(GOLDEN_LOSS, rel=1e-6)
        assert losses[-1] < losses[0]

    def test_deterministic(self, workdir, trained, tmp_path):
        again = tmp_path / "m.ckpt"
        cli.main(["train", "--config", str(workdir / "tiny.json"), "--dataset", str(workdir / "ds.jsonl"),
                  "--set", "epochs=10", "--out", str(again)])
        assert again.read_bytes() == trained.read_bytes()

    def test_zero_learning_rate_keeps_weights(self, workdir, tmp_path):
        from srpvqa.config import RunConfig
        from srpvqa.model import VqaModel

        out = tmp_path / "lr0.ckpt"
        assert cli.main(["train", "--config", str(workdir / "tiny.json"), "--dataset", str(workdir / "ds.jsonl"),
                         "--set", "epochs=2", "--set", "lr=0", "--out", str(out)]) == 0
        loaded = checkpoint.load_checkpoint(out)
        fresh = VqaModel(loaded.config, loaded.model.n_answers, np.random.default_rng(loaded.config.seed))
        for k, v in fresh.state_dict().items():
            np.testing.assert_array_equal(v, loaded.model.state_dict()[k])
        assert isinstance(loaded.config, RunConfig)

    def test_missing_dataset(self, workdir, tmp_path):
        rc = cli.main(["train", "--dataset", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "m")])
        assert rc == cli.EXIT_DATA

    def test_width_mismatch(self, workdir, tmp_path):
        rc = cli.main(["train", "--dataset", str(workdir / "ds.jsonl"), "--set", "d_v=8",
                       "--out", str(tmp_path / "m")])
        assert rc == cli.EXIT_DATA


class TestEval:
    def test_metrics_match_dump(self, workdir, trained, tmp_path, capsys):
        out, dump = tmp_path / "metrics.json", tmp_path / "dump.jsonl"
        rc = cli.main(["eval", "--checkpoint", str(trained), "--dataset", str(workdir / "ds.jsonl"),
                       "--out", str(out), "--dump", str(dump)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["schema_version"] == cli.METRICS_SCHEMA_VERSION
        rows = [json.loads(line) for line in dump.read_text().splitlines()]
        assert metrics_from_records(rows) == report["metrics"]
        assert all((r["prediction"] == r["answer"]) == (r["prediction_text"] == r["answer_text"]) for r in rows)
        assert "Relation" in capsys.readouterr().out

    def test_empty_category_is_na(self):
        table = cli.format_metrics({"n": 3, "accuracy": 1.0, "binary": 1.0, "open": None, "relation": None})
        lines = table.splitlines()
        assert "n/a" in lines[3] and "n/a" in lines[4] and "n/a" not in lines[2]

    def test_corrupt_checkpoint(self, workdir, trained, tmp_path):
        bad = tmp_path / "bad.ckpt"
        raw = bytearray(trained.read_bytes())
        raw[-50] ^= 1
        bad.write_bytes(bytes(raw))
        assert cli.main(["eval", "--checkpoint", str(bad), "--dataset", str(workdir / "ds.jsonl")]) == cli.EXIT_DATA


class TestVisualize:
    def test_deterministic_outputs(self, workdir, trained, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            assert cli.main(["visualize", "--checkpoint", str(trained), "--dataset", str(workdir / "ds.jsonl"),
                             "--example", "2", "--question", "1", "--out", str(d)]) == 0
        names = sorted(os.listdir(dirs[0]))
        assert names == ["attention_mutual.pgm", "attention_overlay.ppm", "attention_self.pgm", "triplets.json"]
        for n in names:
            assert (dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes()
        report = json.loads((dirs[0] / "triplets.json").read_text())
        scores = [t["score"] for t in report["triplets"]]
        assert report["top2"] == sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:2]
        assert sum(report["object_attention"]["self"]) == pytest.approx(1.0, abs=1e-9)

    def test_example_out_of_range(self, workdir, trained, tmp_path):
        rc = cli.main(["visualize", "--checkpoint", str(trained), "--dataset", str(workdir / "ds.jsonl"),
                       "--example", "500", "--out", str(tmp_path)])
        assert rc == cli.EXIT_USAGE

    def test_uniform_attention_renders_equal_boxes(self):
        from srpvqa.visualize import render_boxes

        boxes = [[0.0, 0.0, 0.25, 0.25], [0.5, 0.5, 0.75, 0.75]]
        img = render_boxes(boxes, np.array([0.5, 0.5]), (16, 16), scale=1)
        assert img[1, 1] == img[10, 10] == 255
        assert img[6, 6] == 0


class TestMatrix:
    def test_two_cells(self, workdir, tmp_path):
        out = tmp_path / "m.json"
        rc = cli.main(["matrix", "--config", str(workdir / "tiny.json"), "--dataset", str(workdir / "ds.jsonl"),
                       "--set", "epochs=1", "--seeds", "0,1", "--cells", "v+q/msa,r_oracle+q", "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert set(report["cells"]) == {"v+q/msa", "r_oracle+q"}
        assert [r["seed"] for r in report["cells"]["v+q/msa"]["runs"]] == [0, 1]
        assert (tmp_path / "m.txt").exists()

    def test_unknown_cell(self, workdir, tmp_path):
        rc = cli.main(["matrix", "--dataset", str(workdir / "ds.jsonl"), "--cells", "nope",
                       "--out", str(tmp_path / "m.json")])
        assert rc == cli.EXIT_USAGE

    def test_grid_has_twelve_cells(self):
        from srpvqa.experiments import grid_cells

        assert len(grid_cells()) == 12


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.jsonl"
    proc = subprocess.run([sys.executable, "-m", "srpvqa.cli", "gen", "--n-scenes", "3", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
