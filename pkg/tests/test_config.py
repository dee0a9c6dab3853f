import pytest
import yaml

from scaled.config import ConfigError, RunConfig, dump_config, from_dict, load_config


def write(tmp_path, data, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.seed == 0 and cfg.jobs == 1
        assert cfg.sweep.scales == ["2/3", "1/2", "2/5", "1/3", "1/4", "1/5"]
        assert cfg.sweep.qps == list(range(17, 48, 3))

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="lamdbas"):
            load_config(write(tmp_path, {"train": {"lamdbas": [0.1]}}))

    def test_type_checked(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, {"seed": "zero"}))
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, {"train": {"qps": 32}}))

    @pytest.mark.parametrize("bad", [
        {"train": {"strategies": ["adamw"]}},
        {"train": {"scales": ["0"]}},
        {"sweep": {"qps": [60]}},
        {"sweep": {"filters": ["nearest"]}},
        {"codec": {"backend": "vp9"}},
        {"jobs": 0},
        {"dataset": {"holdout_fraction": 1.0}},
    ])
    def test_semantic_validation(self, tmp_path, bad):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, bad))

    def test_relative_paths_resolved(self, tmp_path):
        cfg = load_config(write(tmp_path, {"dataset": {"sources": [{"path": "clips/a.y4m"}]}}))
        assert cfg.dataset.sources[0].path == str((tmp_path / "clips" / "a.y4m").resolve())
        assert cfg.dataset.sources[0].label == "a"

    def test_dump_round_trip(self, tmp_path):
        data = {"seed": 4, "codec": {"backend": "toy"}, "train": {"qps": [20, 26], "lambdas": [0.5]},
                "sweep": {"sequences": [{"path": "/x/y.y4m", "name": "y", "dataset": "set1"}]}}
        cfg = load_config(write(tmp_path, data))
        again = from_dict(RunConfig, yaml.safe_load(dump_config(cfg)))
        assert again == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")
