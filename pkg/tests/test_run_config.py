from pathlib import Path

import pytest

from data_sources import SplitConfig
from run_config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    build_dataset,
    build_sessions,
    load_run_config,
    parse_run_config,
)

ROOT = Path(__file__).resolve().parents[1]


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_shipped_desk_scale_config_matches_defaults():
    cfg = load_run_config(ROOT / "configs" / "desk_scale.toml")
    assert cfg == RunConfig()
    assert cfg.source_path.endswith("desk_scale.toml")


def test_missing_config_gives_defaults_and_missing_file_is_an_error(tmp_path):
    assert load_run_config(None) == RunConfig()
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "absent.toml")


def test_partial_config_overrides_only_named_keys(tmp_path):
    path = _write(tmp_path, "[train]\nepochs = 3\ngamma = 0.1\n\n[split]\nn_sessions = 2\n")
    cfg = load_run_config(path)
    assert cfg.train.epochs == 3
    assert cfg.train.hyperparams.gamma == 0.1
    assert cfg.train.hyperparams.alpha == 0.1
    assert cfg.split.n_sessions == 2
    assert cfg.train.batch_size == 32


def test_integer_is_accepted_for_float_keys(tmp_path):
    cfg = load_run_config(_write(tmp_path, "[train]\nlearning_rate = 1\n"))
    assert cfg.train.learning_rate == 1.0
    assert isinstance(cfg.train.learning_rate, float)


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("[trian]\nepochs = 3\n", "trian: unknown section"),
        ("[train]\nepoch = 3\n", "train.epoch: unknown key"),
        ("[train]\nepochs = \"many\"\n", "train.epochs: expected int"),
        ("[train]\nepochs = true\n", "train.epochs: expected int"),
        ("[study]\nseeds = [0, \"one\"]\n", "study.seeds: expected a list of int"),
        ("[train]\nepochs = 0\n", "train:"),
        ("[output]\nformat = \"xml\"\n", "output:"),
        ("[data]\nsource = \"embeddings\"\n", "data:"),
        ("[data]\nn_classes = 20\n", "config:"),
    ],
)
def test_invalid_configs_name_the_offending_entry(tmp_path, text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_run_config(_write(tmp_path, text))


def test_malformed_toml_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(_write(tmp_path, "[train\nepochs = 3\n"))


def test_relative_data_paths_resolve_against_the_config_directory(tmp_path):
    sub = tmp_path / "configs"
    sub.mkdir()
    path = _write(sub, '[data]\nsource = "embeddings"\npath = "emb.csv"\n')
    cfg = load_run_config(path)
    assert Path(cfg.data.path) == sub.resolve() / "emb.csv"


def test_overrides_are_applied_and_validated():
    cfg = apply_overrides(RunConfig(), seed=7, strategy="prototype", gamma=0.0, out="elsewhere", fmt="json")
    assert cfg.data.synthetic.seed == cfg.split.seed == cfg.train.seed == 7
    assert cfg.train.strategy == "prototype"
    assert cfg.train.hyperparams.gamma == 0.0 and cfg.train.hyperparams.alpha == 0.1
    assert (cfg.output.dir, cfg.output.format, cfg.output.extension) == ("elsewhere", "json", ".json")
    with pytest.raises(ConfigError, match="override"):
        apply_overrides(RunConfig(), alpha=-1.0)


def test_manifest_sections_flatten_hyperparameters():
    sections = RunConfig().manifest_sections()
    assert set(sections) == {"data", "split", "train", "output", "study"}
    assert sections["train"]["gamma"] == 0.01
    assert "hyperparams" not in sections["train"]
    assert sections["data"]["n_classes"] == 24


def test_build_sessions_follows_the_split():
    cfg = parse_run_config(
        {
            "data": {"input_dim": 4, "n_classes": 6, "train_per_class": 6, "test_per_class": 2},
            "split": {"base_classes": 2, "n_way": 2, "k_shot": 3, "n_sessions": 2},
        }
    )
    assert cfg.split == SplitConfig(base_classes=2, n_way=2, k_shot=3, n_sessions=2)
    dataset = build_dataset(cfg)
    sessions = build_sessions(cfg, dataset)
    assert [len(s.train) for s in sessions] == [12, 6, 6]
