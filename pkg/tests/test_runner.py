"""Experiment runner artifacts, reruns, comparison tables, and the CLI."""

import json
import os
import re

import pytest

from dualfed.cli import main
from dualfed.config import parse_config
from dualfed.metrics import load_representations, read_metrics_csv
from dualfed.runner import (
    MEAN_STD_PATTERN,
    compare_runs,
    format_mean_std,
    load_snapshot_blob,
    run_experiment,
)

TINY = {
    "arch.input_dim": "6",
    "arch.encoder_layers": "6,4",
    "arch.projector_hidden": "5",
    "arch.projector_out": "4",
    "arch.num_classes": "3",
    "data.num_domains": "2",
    "data.train_per_client": "24",
    "data.test_per_client": "12",
    "train.rounds": "3",
    "train.batch_size": "8",
    "train.lr": "0.05",
    "run.figures": "false",
}


def tiny_config(out_dir, **extra):
    values = dict(TINY)
    values["run.output_dir"] = str(out_dir)
    values.update({k: str(v) for k, v in extra.items()})
    return parse_config(None, values), values


class TestRunExperiment:
    def test_two_seeds_emit_expected_files(self, tmp_path):
        cfg, _ = tiny_config(tmp_path / "out", **{"run.seeds": "0,1"})
        artifacts = run_experiment(cfg)
        names = sorted(os.listdir(artifacts.output_dir))
        assert "metrics_seed0.csv" in names
        assert "metrics_seed1.csv" in names
        assert "ledger_seed0.csv" in names
        assert "summary.json" in names
        assert "config_resolved.txt" in names

    def test_rerun_byte_identical(self, tmp_path):
        out = tmp_path / "out"
        cfg, values = tiny_config(out, **{"run.seeds": "0,1"})
        run_experiment(cfg, config_values=values)
        first = {name: open(os.path.join(out, name), "rb").read()
                 for name in os.listdir(out)}
        run_experiment(cfg, config_values=values)
        second = {name: open(os.path.join(out, name), "rb").read()
                  for name in os.listdir(out)}
        assert first == second

    def test_summary_std_recomputable_from_headlines(self, tmp_path):
        cfg, _ = tiny_config(tmp_path / "out", **{"run.seeds": "0,1,2"})
        artifacts = run_experiment(cfg)
        with open(artifacts.summary_path) as fh:
            summary = json.load(fh)
        per_seed = summary["headline"]["per_seed"]
        # independent recomputation from the emitted metrics files
        recomputed = []
        for seed in (0, 1, 2):
            header, rows = read_metrics_csv(
                os.path.join(artifacts.output_dir, f"metrics_seed{seed}.csv"))
            col = header.index("mean_acc_ensemble")
            recomputed.append(max(r[col] for r in rows))
        assert per_seed == recomputed
        n = len(per_seed)
        mean = sum(per_seed) / n
        std = (sum((x - mean) ** 2 for x in per_seed) / (n - 1)) ** 0.5
        assert summary["headline"]["mean"] == pytest.approx(mean, abs=1e-15)
        assert summary["headline"]["std"] == pytest.approx(std, abs=1e-15)

    def test_figures_rendered_when_enabled(self, tmp_path):
        cfg, _ = tiny_config(tmp_path / "out",
                             **{"run.seeds": "0", "run.figures": "true"})
        artifacts = run_experiment(cfg)
        for name in ("accuracy_seed0.png", "representations_seed0.png"):
            path = os.path.join(artifacts.output_dir, name)
            assert os.path.exists(path)
            assert os.path.getsize(path) > 1000

    def test_dump_reps_flag(self, tmp_path):
        cfg, _ = tiny_config(tmp_path / "out",
                             **{"run.seeds": "0", "run.dump_reps": "true"})
        artifacts = run_experiment(cfg)
        path = os.path.join(artifacts.output_dir, "reps_seed0_client0.csv")
        labels, z, u, meta = load_representations(path)
        assert meta["N"] == 12 and meta["k"] == 4 and meta["d"] == 4

    def test_checkpoints(self, tmp_path):
        cfg, _ = tiny_config(tmp_path / "out",
                             **{"run.seeds": "0", "run.checkpoint_every": "2"})
        run_experiment(cfg)
        ckpt = os.path.join(str(tmp_path / "out"), "checkpoints")
        names = sorted(os.listdir(ckpt))
        assert "seed0_round2_server.bin" in names
        assert "seed0_round2_client0.bin" in names
        snapshot = load_snapshot_blob(
            open(os.path.join(ckpt, "seed0_round2_server.bin"), "rb").read())
        assert "encoder.0.weight" in snapshot

        from dualfed.model import deserialize_params

        params = deserialize_params(
            open(os.path.join(ckpt, "seed0_round2_client1.bin"), "rb").read())
        assert params.arch.input_dim == 6


class TestFlatFileRun:
    def test_end_to_end(self, tmp_path):
        from dualfed.data import SyntheticSpec, generate_synthetic, save_flatfile

        spec = SyntheticSpec(num_domains=2, num_classes=3, input_dim=6,
                             train_per_client=24, test_per_client=12, seed=13)
        train_files, test_files = [], []
        for i, client in enumerate(generate_synthetic(spec)):
            train_path = str(tmp_path / f"train{i}.csv")
            test_path = str(tmp_path / f"test{i}.csv")
            save_flatfile(client.train, train_path)
            save_flatfile(client.test, test_path)
            train_files.append(train_path)
            test_files.append(test_path)

        values = dict(TINY)
        values.update({
            "run.output_dir": str(tmp_path / "out"),
            "run.seeds": "0",
            "data.source": "flatfile",
            "data.train_files": ",".join(train_files),
            "data.test_files": ",".join(test_files),
        })
        cfg = parse_config(None, values)
        artifacts = run_experiment(cfg)
        assert 0.0 <= artifacts.summary["headline"]["mean"] <= 1.0

    def test_dimension_mismatch_rejected(self, tmp_path):
        path = str(tmp_path / "train.csv")
        with open(path, "w") as fh:
            fh.write("label,f0,f1\n0,1.0,2.0\n1,0.5,0.25\n")
        values = dict(TINY)
        values.update({
            "run.output_dir": str(tmp_path / "out"),
            "data.source": "flatfile",
            "data.train_files": path,
            "data.test_files": path,
        })
        from dualfed.errors import ConfigError

        with pytest.raises(ConfigError, match="arch.input_dim"):
            run_experiment(parse_config(None, values))


class TestCompareRuns:
    def _make_summaries(self, tmp_path, methods=("dualfed", "fedavg")):
        paths = []
        for method in methods:
            cfg, _ = tiny_config(tmp_path / method,
                                 **{"run.seeds": "0,1", "method.name": method})
            artifacts = run_experiment(cfg)
            paths.append(artifacts.summary_path)
        return paths

    def test_single_summary_single_row(self, tmp_path):
        paths = self._make_summaries(tmp_path, methods=("dualfed",))
        text, rows = compare_runs(paths)
        assert len(rows) == 1
        assert rows[0]["method"] == "DualFed"
        assert "DualFed" in text

    def test_identical_summaries_identical_rows(self, tmp_path):
        paths = self._make_summaries(tmp_path, methods=("dualfed",))
        _, rows = compare_runs([paths[0], paths[0]])
        assert rows[0] == rows[1]

    def test_format_contract(self, tmp_path):
        paths = self._make_summaries(tmp_path)
        _, rows = compare_runs(paths)
        for row in rows:
            assert MEAN_STD_PATTERN.match(row["accuracy"]), row["accuracy"]

    def test_artifacts_written(self, tmp_path):
        paths = self._make_summaries(tmp_path, methods=("dualfed",))
        out = str(tmp_path / "cmp")
        compare_runs(paths, out_dir=out)
        assert os.path.exists(os.path.join(out, "comparison.csv"))
        assert os.path.exists(os.path.join(out, "comparison.txt"))
        assert os.path.exists(os.path.join(out, "comparison.png"))

    def test_missing_file(self):
        from dualfed.errors import DualFedError

        with pytest.raises(DualFedError):
            compare_runs(["/nonexistent/summary.json"])

    def test_headline_free_summary_rejected(self, tmp_path):
        # a zero-round run has no evaluated rounds and thus no headline
        cfg, _ = tiny_config(tmp_path / "out",
                             **{"run.seeds": "0", "train.rounds": "0"})
        artifacts = run_experiment(cfg)
        assert "headline" not in artifacts.summary
        from dualfed.errors import DualFedError

        with pytest.raises(DualFedError, match="headline"):
            compare_runs([artifacts.summary_path])


class TestFormat:
    def test_examples(self):
        assert format_mean_std(0.9501, 0.0031) == "95.01±0.31"
        assert format_mean_std(1.0, 0.0) == "100.00±0.00"
        assert MEAN_STD_PATTERN.match(format_mean_std(0.333333, 0.00123))


class TestCli:
    def _write_config(self, tmp_path, out_name="out", **extra):
        values = dict(TINY)
        values["run.output_dir"] = str(tmp_path / out_name)
        values["run.seeds"] = "0"
        values.update({k: str(v) for k, v in extra.items()})
        path = tmp_path / "run.conf"
        path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
        return path

    def test_run_ok(self, tmp_path, capsys):
        conf = self._write_config(tmp_path)
        assert main(["run", "--config", str(conf)]) == 0
        out = capsys.readouterr().out
        assert "artifacts written" in out

    def test_run_rounds_override(self, tmp_path):
        conf = self._write_config(tmp_path)
        assert main(["run", "--config", str(conf), "--rounds", "1",
                     "--out", str(tmp_path / "o2")]) == 0
        header, rows = read_metrics_csv(str(tmp_path / "o2" / "metrics_seed0.csv"))
        assert len(rows) == 1

    def test_config_error_exit_code(self, tmp_path, capsys):
        conf = tmp_path / "bad.conf"
        conf.write_text("loss.tau = -1\n")
        assert main(["run", "--config", str(conf)]) == 2
        assert "loss.tau" in capsys.readouterr().err

    def test_runtime_error_exit_code(self, tmp_path, capsys):
        assert main(["compare", str(tmp_path / "missing.json")]) == 3
        assert "error" in capsys.readouterr().err

    def test_compare_and_plot(self, tmp_path, capsys):
        conf = self._write_config(tmp_path)
        assert main(["run", "--config", str(conf)]) == 0
        summary = str(tmp_path / "out" / "summary.json")
        assert main(["compare", summary]) == 0
        assert "DualFed" in capsys.readouterr().out
        assert main(["plot", "--run-dir", str(tmp_path / "out")]) == 0
        assert os.path.exists(str(tmp_path / "out" / "accuracy_seed0.png"))

    def test_dump_reps_command(self, tmp_path, capsys):
        conf = self._write_config(tmp_path, out_name="dump_out")
        assert main(["dump-reps", "--config", str(conf), "--round", "2"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2  # one dump per client
        for line in lines:
            assert os.path.exists(line)
            assert re.search(r"reps_seed0_round2_client\d\.csv$", line)

    def test_set_override(self, tmp_path):
        conf = self._write_config(tmp_path, out_name="set_out")
        assert main(["run", "--config", str(conf), "--set", "train.rounds=1",
                     "--out", str(tmp_path / "set_out2")]) == 0
        _, rows = read_metrics_csv(str(tmp_path / "set_out2" / "metrics_seed0.csv"))
        assert len(rows) == 1
