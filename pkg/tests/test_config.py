"""Config parsing: defaults, overrides, and validation errors naming keys."""

import pytest

from dualfed.config import (
    DATA_FLATFILE,
    FlatFileData,
    config_text,
    parse_config,
    read_config_file,
)
from dualfed.data import SyntheticSpec
from dualfed.errors import ConfigError


class TestDefaults:
    def test_empty_file_is_valid(self, tmp_path):
        path = tmp_path / "empty.conf"
        path.write_text("")
        cfg = parse_config(str(path))
        assert cfg.train.lr == 0.01
        assert cfg.train.momentum == 0.5
        assert cfg.train.rounds == 300
        assert cfg.train.local_epochs == 1
        assert cfg.train.batch_size == 256
        assert cfg.seeds == (0, 1, 2, 3, 4)
        assert cfg.method.name == "dualfed"
        assert isinstance(cfg.data, SyntheticSpec)

    def test_no_file_at_all(self):
        cfg = parse_config(None)
        assert cfg.train.rounds == 300

    def test_synthetic_spec_follows_arch(self):
        cfg = parse_config(None, {"arch.num_classes": "5",
                                  "arch.input_dim": "10",
                                  "data.train_per_client": "25",
                                  "data.test_per_client": "10"})
        assert cfg.data.num_classes == 5
        assert cfg.data.input_dim == 10


class TestValidation:
    def test_negative_tau_names_key(self):
        with pytest.raises(ConfigError, match="loss.tau"):
            parse_config(None, {"loss.tau": "-1"})

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("loss.temperature = 0.1\n")
        with pytest.raises(ConfigError, match="loss.temperature"):
            parse_config(str(path))

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config(None, {"nope.nope": "1"})

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="train.rounds"):
            parse_config(None, {"train.rounds": "many"})

    def test_bad_strategy(self):
        with pytest.raises(ConfigError, match="train.strategy"):
            parse_config(None, {"train.strategy": "interleaved"})

    def test_bad_method(self):
        with pytest.raises(ConfigError, match="method.name"):
            parse_config(None, {"method.name": "fedsomething"})

    def test_unbalanced_counts(self):
        with pytest.raises(ConfigError, match="divisible"):
            parse_config(None, {"data.train_per_client": "500"})

    def test_duplicate_key_in_file(self, tmp_path):
        path = tmp_path / "dup.conf"
        path.write_text("loss.tau = 0.1\nloss.tau = 0.2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(str(path))

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="cannot read"):
            parse_config("/nonexistent/path.conf")

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("just words\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config(str(path))


class TestOverrides:
    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("train.rounds = 300\n")
        cfg = parse_config(str(path), {"train.rounds": "10"})
        assert cfg.train.rounds == 10

    def test_method_and_seeds(self):
        cfg = parse_config(None, {"method.name": "fedavg",
                                  "run.seeds": "3,4"})
        assert cfg.method.name == "fedavg"
        assert cfg.seeds == (3, 4)

    def test_tag_overrides_parse(self):
        cfg = parse_config(None, {
            "method.tag_overrides": "projector=global,personal_classifier=global"})
        assert cfg.method.group_tags["projector"] == "global"

    def test_mu_override(self):
        cfg = parse_config(None, {"method.name": "fedprox", "method.mu": "0.5"})
        assert cfg.method.mu == 0.5


class TestFlatFileConfig:
    def test_paths_required(self):
        with pytest.raises(ConfigError, match="data.train_files"):
            parse_config(None, {"data.source": DATA_FLATFILE})

    def test_pairs_required(self):
        with pytest.raises(ConfigError, match="data.test_files"):
            parse_config(None, {"data.source": DATA_FLATFILE,
                                "data.train_files": "a.csv,b.csv",
                                "data.test_files": "a_test.csv"})

    def test_valid(self):
        cfg = parse_config(None, {"data.source": DATA_FLATFILE,
                                  "data.train_files": "a.csv,b.csv",
                                  "data.test_files": "at.csv,bt.csv"})
        assert isinstance(cfg.data, FlatFileData)
        assert cfg.data.train_files == ("a.csv", "b.csv")


class TestFileFormat:
    def test_comments_and_blanks(self, tmp_path):
        path = tmp_path / "c.conf"
        path.write_text("# a comment\n\nloss.tau = 0.2\n   # indented comment\n")
        values = read_config_file(str(path))
        assert values == {"loss.tau": "0.2"}

    def test_config_text_round_trips(self, tmp_path):
        text = config_text({"train.rounds": "7"})
        path = tmp_path / "echo.conf"
        path.write_text(text)
        cfg = parse_config(str(path))
        assert cfg.train.rounds == 7
