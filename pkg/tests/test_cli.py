import json

import numpy as np
import pytest

from qmatch.cli import EXIT_CONFIG, EXIT_OK, main
from qmatch.data import ColumnSpec, load_manifest, save_csv
from qmatch.train import TrialResult
from tests.conftest import make_fixture_dataset


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Fixture CSV + schema + split spec on disk."""
    root = tmp_path_factory.mktemp("corpus")
    ds = make_fixture_dataset(n=600, seed=0)
    save_csv(ds, root / "fixture.csv")
    schema = {"columns": (
        [{"name": n, "type": "numeric"} for n in ds.feature_names[:6]]
        + [{"name": ds.feature_names[6], "type": "categorical", "categories": ds.cat_vocab[6]},
           {"name": ds.feature_names[7], "type": "categorical", "categories": ds.cat_vocab[7]},
           {"name": "label", "type": "label", "categories": ["0", "1", "2"]}])}
    (root / "schema.json").write_text(json.dumps(schema))
    (root / "spec.json").write_text(json.dumps(
        {"pretext_train": 192, "pretext_val": 32, "down_train": 60,
         "down_val": 60, "test": 60}))
    return root


def prepare(corpus, out, seed=0):
    return main(["prepare-data", "--csv", str(corpus / "fixture.csv"),
                 "--schema", str(corpus / "schema.json"),
                 "--split-spec", str(corpus / "spec.json"),
                 "--out", str(out), "--seed", str(seed)])


@pytest.fixture(scope="module")
def prepared(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("prepared")
    assert prepare(corpus, out) == EXIT_OK
    return out


SMALL_TRAIN = ["--widths", "32,32", "--batch-size", "32",
               "--max-epochs", "2", "--patience", "1", "--queue-size", "64"]


@pytest.fixture(scope="module")
def checkpoint(prepared, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.qmc"
    code = main(["pretrain", "--data", str(prepared), "--out", str(path),
                 "--algorithm", "qmatch", "--seed", "0"] + SMALL_TRAIN)
    assert code == EXIT_OK
    return path


class TestPrepareData:
    def test_outputs_and_sizes(self, prepared, capsys):
        splits = load_manifest(prepared / "splits.json")
        assert {k: len(v) for k, v in splits.items()} == {
            "pretext_train": 192, "pretext_val": 32, "down_train": 60,
            "down_val": 60, "test": 60}
        assert (prepared / "preprocess.json").exists()
        assert (prepared / "meta.json").exists()

    def test_reruns_byte_identical(self, corpus, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert prepare(corpus, a) == EXIT_OK
        assert prepare(corpus, b) == EXIT_OK
        for name in ("splits.json", "preprocess.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_preset_and_spec_mutually_exclusive(self, corpus, tmp_path):
        code = main(["prepare-data", "--csv", str(corpus / "fixture.csv"),
                     "--schema", str(corpus / "schema.json"),
                     "--preset", "adult1pct",
                     "--split-spec", str(corpus / "spec.json"),
                     "--out", str(tmp_path / "x")])
        assert code == EXIT_CONFIG

    def test_neither_preset_nor_spec(self, corpus, tmp_path):
        code = main(["prepare-data", "--csv", str(corpus / "fixture.csv"),
                     "--schema", str(corpus / "schema.json"),
                     "--out", str(tmp_path / "x")])
        assert code == EXIT_CONFIG

    def test_missing_csv(self, corpus, tmp_path):
        code = main(["prepare-data", "--csv", str(corpus / "nope.csv"),
                     "--schema", str(corpus / "schema.json"),
                     "--split-spec", str(corpus / "spec.json"),
                     "--out", str(tmp_path / "x")])
        assert code == EXIT_CONFIG

    def test_unknown_flag(self):
        assert main(["prepare-data", "--frobnicate"]) == EXIT_CONFIG


class TestPretrain:
    def test_dry_run_prints_resolved_config(self, prepared, tmp_path, capsys):
        code = main(["pretrain", "--data", str(prepared), "--out",
                     str(tmp_path / "c.qmc"), "--algorithm", "qmatch",
                     "--dry-run"] + SMALL_TRAIN)
        assert code == EXIT_OK
        resolved = json.loads(capsys.readouterr().out)
        assert resolved["algorithm"] == "qmatch"
        assert resolved["encoder"]["layer_widths"] == [32, 32]
        assert resolved["qmatch"]["queue_capacity"] == 64
        assert not (tmp_path / "c.qmc").exists()

    def test_checkpoint_written(self, checkpoint):
        assert checkpoint.exists()
        assert checkpoint.read_bytes()[:8] == b"QMCKPT01"

    def test_no_algorithm_is_config_error(self, prepared, tmp_path):
        code = main(["pretrain", "--data", str(prepared),
                     "--out", str(tmp_path / "c.qmc")] + SMALL_TRAIN)
        assert code == EXIT_CONFIG

    def test_invalid_run_config_rejected(self, prepared, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"algorithm": "qmatch", "bogus_key": 1}))
        code = main(["pretrain", "--data", str(prepared), "--out",
                     str(tmp_path / "c.qmc"), "--config", str(cfg), "--dry-run"])
        assert code == EXIT_CONFIG

    def test_config_file_supplies_settings(self, prepared, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"algorithm": "vime", "seed": 3,
                                   "loop": {"batch_size": 64},
                                   "encoder": {"layer_widths": [16, 16]}}))
        code = main(["pretrain", "--data", str(prepared), "--out",
                     str(tmp_path / "c.qmc"), "--config", str(cfg), "--dry-run"])
        assert code == EXIT_OK
        resolved = json.loads(capsys.readouterr().out)
        assert resolved["algorithm"] == "vime"
        assert resolved["seed"] == 3
        assert resolved["loop"]["batch_size"] == 64
        assert resolved["encoder"]["layer_widths"] == [16, 16]


class TestEval:
    def test_linear_eval_appends_jsonl(self, prepared, checkpoint, tmp_path):
        out = tmp_path / "results.jsonl"
        args = ["linear-eval", "--checkpoint", str(checkpoint), "--data",
                str(prepared), "--out", str(out), "--max-epochs", "20",
                "--patience", "5"]
        assert main(args) == EXIT_OK
        assert main(args + ["--seed", "1"]) == EXIT_OK
        lines = out.read_text().splitlines()
        assert len(lines) == 2
        results = [TrialResult.from_json(l) for l in lines]
        assert all(r.task == "linear" and r.algorithm == "qmatch" for r in results)
        assert [r.seed for r in results] == [0, 1]

    def test_finetune(self, prepared, checkpoint, tmp_path):
        out = tmp_path / "ft.jsonl"
        code = main(["finetune", "--checkpoint", str(checkpoint), "--data",
                     str(prepared), "--out", str(out), "--max-epochs", "10",
                     "--patience", "3"])
        assert code == EXIT_OK
        r = TrialResult.from_json(out.read_text().splitlines()[0])
        assert r.task == "finetune"

    def test_missing_checkpoint(self, prepared, tmp_path):
        code = main(["linear-eval", "--checkpoint", str(tmp_path / "nope.qmc"),
                     "--data", str(prepared), "--out", str(tmp_path / "r.jsonl")])
        assert code == EXIT_CONFIG

    def test_corrupt_checkpoint_is_runtime_error(self, prepared, tmp_path):
        bad = tmp_path / "bad.qmc"
        bad.write_bytes(b"QMCKPT01" + b"\x00" * 64)
        code = main(["linear-eval", "--checkpoint", str(bad),
                     "--data", str(prepared), "--out", str(tmp_path / "r.jsonl")])
        assert code == 3


class TestGrid:
    def test_singleton_grid(self, prepared, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"loop": {"max_epochs": 6, "patience": 2,
                                            "downstream_max_epochs": 30,
                                            "batch_size": 32}}))
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"learning_rate": [0.01]}))
        out = tmp_path / "gridout"
        code = main(["grid", "--data", str(prepared), "--out", str(out),
                     "--algorithm", "supervised", "--seeds", "0,1",
                     "--task", "finetune", "--grid", str(grid),
                     "--config", str(cfg), "--widths", "32,32"])
        assert code == EXIT_OK
        lines = (out / "results.jsonl").read_text().splitlines()
        assert len(lines) == 2
        summary = json.loads((out / "grid.json").read_text())
        assert summary["best_point"] == {"learning_rate": 0.01}
        assert len(summary["points"]) == 1
        assert "best_point" in capsys.readouterr().out


class TestSweep:
    def test_queue_size_sweep_rows(self, prepared, tmp_path):
        out = tmp_path / "sweep.csv"
        code = main(["sweep", "--kind", "queue-size", "--data", str(prepared),
                     "--out", str(out), "--values", "64,128", "--seeds", "0,1"]
                    + SMALL_TRAIN)
        assert code == EXIT_OK
        import csv
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 4  # 2 sizes x 2 seeds
        assert {r["queue_size"] for r in rows} == {"64", "128"}
        for r in rows:
            assert 0.0 <= float(r["accuracy"]) <= 100.0
            assert "mean_accuracy" in r and "std_accuracy" in r
        # per-cell mean equals the mean of its per-seed rows
        for size in ("64", "128"):
            cell = [r for r in rows if r["queue_size"] == size]
            np.testing.assert_allclose(
                float(cell[0]["mean_accuracy"]),
                np.mean([float(r["accuracy"]) for r in cell]))

    def test_unknown_kind_rejected_by_parser(self, prepared, tmp_path):
        code = main(["sweep", "--kind", "bogus", "--data", str(prepared),
                     "--out", str(tmp_path / "s.csv")])
        assert code == EXIT_CONFIG


# Published linear-classification means used as a synthetic report input: the
# resulting average ranks are known (1.3 for the queue method, 5.3 supervised).
REPORT_MEANS = {
    "supervised": (70.45, 60.39, 78.63, 85.97),
    "tabnet": (51.28, 61.15, 76.46, 24.20),
    "dino": (57.18, 56.87, 76.84, 64.63),
    "imix": (67.90, 60.19, 75.62, 90.66),
    "simclr_lb": (66.87, 64.22, 76.66, 91.01),
    "simsiam": (64.66, 60.11, 78.75, 92.98),
    "vime": (68.42, 64.37, 79.01, 88.02),
    "vicreg": (64.86, 65.81, 76.67, 97.36),
    "simclr": (69.66, 65.42, 76.87, 91.84),
    "qmatch": (70.90, 66.84, 80.33, 97.13),
}
REPORT_DATASETS = ("covtype1pct", "higgs100k", "adult1pct", "mnist1pct")


class TestReport:
    def test_rank_table(self, tmp_path, capsys):
        path = tmp_path / "results.jsonl"
        with open(path, "w") as fh:
            for algo, means in REPORT_MEANS.items():
                for d, m in zip(REPORT_DATASETS, means):
                    fh.write(TrialResult(algo, d, "linear", {}, 0, m, m, 0.0)
                             .to_json() + "\n")
        json_out = tmp_path / "report.json"
        code = main(["report", str(path), "--json", str(json_out)])
        assert code == EXIT_OK
        payload = json.loads(json_out.read_text())
        assert payload["avg_rank"]["qmatch"] == "1.3"
        assert payload["avg_rank"]["supervised"] == "5.3"
        assert payload["ranks"]["qmatch|adult1pct"] == 1
        assert payload["ranks"]["qmatch|mnist1pct"] == 2
        table = capsys.readouterr().out
        assert table.splitlines()[1].strip().startswith("qmatch")

    def test_empty_results_rejected(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert main(["report", str(p)]) == EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert main(["report", str(tmp_path / "nope.jsonl")]) == EXIT_CONFIG
