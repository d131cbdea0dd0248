import pytest
import yaml

from trajmoe.config import ConfigError, RunConfig


def _write(tmp_path, text):
    path = tmp_path / "run.yaml"
    path.write_text(text)
    return str(path)


class TestRunConfig:
    def test_defaults(self):
        config = RunConfig()
        assert config.get("grpo", "clip") == 0.2
        assert config.get("vocab", "k") == 256
        assert config.get("vocab", "restarts") == 10
        assert config["model"]["ffn"] == "moe"

    def test_file_values_are_coerced(self, tmp_path):
        config = RunConfig.from_file(_write(tmp_path, "train:\n  epochs: 3\n  lr: 5e-4\nmodel:\n  ffn: dense\n  moe_blocks: 0,1\n"))
        assert config.get("train", "epochs") == 3
        assert config.get("train", "lr") == 5e-4
        assert config.get("model", "ffn") == "dense"
        assert config.moe_blocks() == [0, 1]

    def test_every_error_is_reported(self, tmp_path):
        path = _write(tmp_path, "train:\n  epochs: three\n  speed: 2\nplanner:\n  k: 1\n")
        with pytest.raises(ConfigError) as info:
            RunConfig.from_file(path)
        assert len(info.value.errors) == 3
        assert "train.epochs" in str(info.value)

    def test_malformed_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.from_file(_write(tmp_path, "epochs: 3\n"))
        with pytest.raises(ConfigError):
            RunConfig.from_file(_write(tmp_path, "- train\n- grpo\n"))
        with pytest.raises(ConfigError):
            RunConfig.from_file(_write(tmp_path, "train: {epochs: 3\n"))

    def test_empty_file(self, tmp_path):
        assert RunConfig.from_file(_write(tmp_path, "")).values == RunConfig().values

    def test_precedence(self, tmp_path):
        path = _write(tmp_path, "run:\n  seed: 5\n")
        assert RunConfig.resolve(path, environ={}).get("run", "seed") == 5
        assert RunConfig.resolve(path, environ={"TRAJMOE_SEED": "7"}).get("run", "seed") == 7
        flags = {"run.seed": 9, "train.epochs": None}
        config = RunConfig.resolve(path, flags, environ={"TRAJMOE_SEED": "7"})
        assert config.get("run", "seed") == 9
        assert config.get("train", "epochs") == 10

    def test_bad_flags(self):
        with pytest.raises(ConfigError):
            RunConfig.resolve(flags={"seed": 1}, environ={})
        with pytest.raises(ConfigError):
            RunConfig.resolve(flags={"run.speed": 1}, environ={})
        with pytest.raises(ConfigError):
            RunConfig.resolve(environ={"TRAJMOE_SEED": "x"})

    def test_resolved_text(self, tmp_path):
        config = RunConfig({"train": {"epochs": 2}})
        text = config.to_text()
        sections = [line[:-1] for line in text.splitlines() if not line.startswith(" ")]
        assert sections == sorted(sections)
        assert yaml.safe_load(text)["train"]["epochs"] == 2
        path = config.write_resolved(tmp_path / "model.ckpt")
        assert path.endswith("model.ckpt.resolved.yaml")
        assert RunConfig.from_file(path).values == config.values

    def test_moe_blocks(self):
        assert RunConfig().moe_blocks() is None
        assert RunConfig({"model": {"moe_blocks": "none"}}).moe_blocks() == []
        assert RunConfig({"model": {"moe_blocks": "0,1"}}).moe_blocks() == [0, 1]
        with pytest.raises(ConfigError):
            RunConfig({"model": {"moe_blocks": "first"}}).moe_blocks()

    def test_component_configs(self):
        config = RunConfig({"model": {"dim": 32, "sigma_min": 0.05}, "run": {"seed": 4}})
        scorer = config.scorer_config(horizon=6)
        assert (scorer.dim, scorer.horizon, scorer.sigma_min) == (32, 6, 0.05)
        grpo = config.grpo_config()
        assert (grpo.seed, grpo.sigma_min, grpo.group_size) == (4, 0.05, 16)
