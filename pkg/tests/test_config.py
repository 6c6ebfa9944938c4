"""Run-configuration parsing, precedence, and persistence."""

import pytest

from coregate.config import RunConfig, load_config_file, make_config, write_effective
from coregate.errors import ConfigError


class TestDefaults:
    def test_canonical_values(self):
        cfg = RunConfig()
        assert cfg.knn_k == 3
        assert cfg.top_q == 0.03
        assert cfg.coreset_ratio == 0.3
        assert cfg.tau == 1.0
        assert cfg.tau_relaxed == 1.5
        assert cfg.finetune_lr == 3e-5
        assert cfg.rank_mode == "boundary"
        assert cfg.label_policy == "none"

    def test_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(knn_k=0)
        with pytest.raises(ConfigError):
            RunConfig(rounds=0)
        with pytest.raises(ConfigError):
            RunConfig(coreset_ratio=1.5)
        with pytest.raises(ConfigError):
            RunConfig(top_q=0.0)
        with pytest.raises(ConfigError):
            RunConfig(rank_mode="alphabetical")
        with pytest.raises(ConfigError):
            RunConfig(label_policy="maybe")
        RunConfig(warmup_epochs=0)  # zero epochs is a valid degenerate run


class TestFileParsing:
    def test_key_value_lines(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment line\n"
            "knn_k = 5\n"
            "\n"
            "top_q = 0.1   # trailing comment\n"
            "rank_mode = uncert\n"
        )
        values = load_config_file(path)
        assert values == {"knn_k": 5, "top_q": 0.1, "rank_mode": "uncert"}

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("knn = 5\n")
        with pytest.raises(ConfigError, match="unknown config key: knn"):
            load_config_file(path)

    def test_duplicate_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("knn_k = 5\nknn_k = 6\n")
        with pytest.raises(ConfigError, match="duplicate"):
            load_config_file(path)

    def test_bad_value_type(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("knn_k = three\n")
        with pytest.raises(ConfigError):
            load_config_file(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("knn_k 5\n")
        with pytest.raises(ConfigError):
            load_config_file(path)


class TestPrecedence:
    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("knn_k = 5\ntop_q = 0.1\n")
        cfg = make_config(path, {"knn_k": "7"})
        assert cfg.knn_k == 7      # flag wins
        assert cfg.top_q == 0.1    # file survives where no flag given
        assert cfg.budget == 200   # default everywhere else

    def test_none_overrides_are_ignored(self, tmp_path):
        cfg = make_config(None, {"knn_k": None, "budget": "50"})
        assert cfg.knn_k == 3
        assert cfg.budget == 50

    def test_override_validation_applies(self):
        with pytest.raises(ConfigError):
            make_config(None, {"knn_k": "0"})


class TestEffective:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig(knn_k=7, top_q=0.25, rank_mode="uncert", seed=99)
        path = tmp_path / "config.effective"
        write_effective(cfg, path)
        assert make_config(path) == cfg

    def test_deterministic_bytes(self, tmp_path):
        cfg = RunConfig(noise_scale=0.07)
        write_effective(cfg, tmp_path / "a")
        write_effective(cfg, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_floats_survive_exactly(self, tmp_path):
        cfg = RunConfig(top_q=0.1 + 0.2)  # 0.30000000000000004
        path = tmp_path / "config.effective"
        write_effective(cfg, path)
        assert make_config(path).top_q == cfg.top_q
