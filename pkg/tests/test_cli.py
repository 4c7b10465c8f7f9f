from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from ewcseg import cli
from ewcseg.runinfo import load_run_manifest


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    data = tmp_path_factory.mktemp("cli") / "data"
    spec = {
        "source": {"n_subjects": 6, "volume_extent": 40, "mean_tumor_volume": 600},
        "target": {"n_subjects": 5, "volume_extent": 40, "mean_tumor_volume": 200,
                   "enhancement": False,
                   "channel_contrasts": [0.15, 0.05, 0.25, 0.30]},
    }
    spec_path = data.parent / "spec.json"
    spec_path.write_text(json.dumps(spec))
    assert run_cli("gen-data", "--out", str(data), "--spec", str(spec_path), "--seed", "7") == 0
    return data


class TestGenData:
    def test_counts_and_manifest(self, tiny_data):
        manifest = json.loads((tiny_data / "manifest.json").read_text())
        assert len(manifest["domains"]["source"]["subjects"]) == 6
        assert len(manifest["domains"]["target"]["subjects"]) == 5
        assert len(list(tiny_data.glob("*.ewcv"))) == 11
        run_manifest = load_run_manifest(tiny_data)
        assert run_manifest["command"] == "gen-data"

    def test_same_seed_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert run_cli("gen-data", "--out", str(tmp_path / d), "--seed", "3",
                           "--source-subjects", "5", "--target-subjects", "5") == 0
        for f in sorted((tmp_path / "a").glob("*.ewcv")):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_malformed_spec_exits_2_without_partial_output(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        out = tmp_path / "out"
        assert run_cli("gen-data", "--out", str(out), "--spec", str(bad)) == 2
        assert not out.exists()

    def test_invalid_spec_value_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"source": {"n_subjects": 0}, "target": {}}))
        out = tmp_path / "out"
        assert run_cli("gen-data", "--out", str(out), "--spec", str(bad)) == 2
        assert not out.exists()


class TestTrain:
    def test_unknown_scheme_exits_2_listing_names(self, tiny_data, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("train", "--scheme", "alchemy", "--data", str(tiny_data), "--out", "/tmp/x")
        assert exc.value.code == 2
        assert "source-then-target" in capsys.readouterr().err

    def test_missing_data_exits_2(self, tmp_path):
        assert run_cli("train", "--scheme", "source-only", "--data", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "out")) == 2

    def test_train_writes_report_and_manifest(self, tiny_data, tmp_path):
        out = tmp_path / "run"
        assert run_cli("train", "--scheme", "source-then-target", "--lambda", "100",
                       "--split", "1", "--data", str(tiny_data), "--out", str(out),
                       "--epochs", "1", "--seed", "5") == 0
        report = json.loads((out / "report.json").read_text())
        assert report["pre_finetune_source_dice"] is not None
        assert (out / "consolidation.ewcl").exists()
        assert load_run_manifest(out)["command"] == "train"

    def test_lambda_zero_equals_plain_finetune_bit_exact(self, tiny_data, tmp_path):
        cache = tmp_path / "cache"
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("train", "--scheme", "source-then-target", "--lambda", "0",
                           "--split", "1", "--data", str(tiny_data), "--out", str(out),
                           "--cache", str(cache), "--epochs", "1", "--seed", "5",
                           "--strict-deterministic") == 0
            outs.append(out)
        assert (outs[0] / "report.csv").read_bytes() == (outs[1] / "report.csv").read_bytes()
        assert (outs[0] / "checkpoint-final.ewcl").read_bytes() == \
               (outs[1] / "checkpoint-final.ewcl").read_bytes()


class TestReproduce:
    @pytest.fixture(scope="class")
    def tiny_reproduce(self, tiny_data, tmp_path_factory):
        out = tmp_path_factory.mktemp("rep") / "run"
        code = run_cli("reproduce", "--data", str(tiny_data), "--out", str(out),
                       "--epochs", "1", "--splits", "2", "--seed", "3")
        return code, out

    def test_emits_six_row_table(self, tiny_reproduce):
        code, out = tiny_reproduce
        assert code == 0
        table = (out / "table.md").read_text()
        labels = [l.split("|")[1].strip() for l in table.strip().split("\n")[2:]]
        assert labels == ["Target only", "Source only", "+ Target", "+ Target EWC 10",
                          "+ Target EWC 100", "Source & Target"]
        assert (out / "table.csv").exists()
        assert (out / "per_subject.csv").exists()

    def test_summary_has_forgetting_per_lambda(self, tiny_reproduce):
        _, out = tiny_reproduce
        summary = json.loads((out / "summary.json").read_text())
        assert {"0", "10", "100"} <= set(summary["forgetting_by_lambda"])
        assert "orderings" in summary

    def test_rerun_is_up_to_date_noop(self, tiny_reproduce, tiny_data, capsys):
        _, out = tiny_reproduce
        mtime = (out / "table.csv").stat().st_mtime_ns
        assert run_cli("reproduce", "--data", str(tiny_data), "--out", str(out),
                       "--epochs", "1", "--splits", "2", "--seed", "3") == 0
        assert "up to date" in capsys.readouterr().out
        assert (out / "table.csv").stat().st_mtime_ns == mtime

    def test_missing_data_exits_2(self, tmp_path):
        assert run_cli("reproduce", "--data", str(tmp_path / "missing"),
                       "--out", str(tmp_path / "out")) == 2


class TestDiagnostics:
    def test_gradcheck_ops_pass(self, capsys):
        assert run_cli("gradcheck", "--level", "ops", "--samples", "16") == 0
        assert "conv3d_valid" in capsys.readouterr().out

    def test_gradcheck_model_pass(self):
        assert run_cli("gradcheck", "--level", "model", "--samples", "16") == 0

    def test_corrupted_backward_detected(self, monkeypatch):
        from ewcseg import kernels

        original = kernels.conv3d_grad_weight
        monkeypatch.setattr(kernels, "conv3d_grad_weight",
                            lambda x, gout: original(x, gout) * 1.01)
        assert run_cli("gradcheck", "--level", "ops", "--samples", "16") == 1

    def test_fisher_stats(self, tiny_data, tmp_path, capsys):
        out = tmp_path / "run"
        run_cli("train", "--scheme", "source-then-target", "--lambda", "10",
                "--split", "1", "--data", str(tiny_data), "--out", str(out),
                "--epochs", "1", "--seed", "5")
        capsys.readouterr()
        assert run_cli("fisher-stats", "--checkpoint", str(out / "consolidation.ewcl")) == 0
        stdout = capsys.readouterr().out
        assert "min" in stdout and "zero fraction" in stdout
        min_line = [l for l in stdout.split("\n") if l.startswith("min")][0]
        assert float(min_line.split()[1]) >= 0.0

    def test_fisher_stats_missing_file_exits_2(self, tmp_path):
        assert run_cli("fisher-stats", "--checkpoint", str(tmp_path / "none.ewcl")) == 2
