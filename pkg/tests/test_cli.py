import numpy as np
import pandas as pd
import pytest

from checkpoints import load_checkpoint
from data_sources import SyntheticConfig, generate_synthetic, load_embeddings_csv
from manifests import read_manifest
from metrics import read_results_csv
from tools.fscil_experiments import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, LOG_LEVEL_ENV, build_parser, main

SMALL_RUN = """
[data]
input_dim = 6
n_classes = 9
train_per_class = 10
test_per_class = 3
separation = 2.0
seed = 0

[split]
base_classes = 3
n_way = 2
k_shot = 2
n_sessions = 3

[train]
epochs = 3
hidden_widths = [8]
feature_dim = 4
incremental_epochs = 3

[study]
seeds = [0, 1]
gamma_grid = [0.0, 0.01]
alpha_grid = [0.0, 0.01]
shots = [1, 2]
gradcheck_configs = 5
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_RUN, encoding="utf-8")
    return path


def _run(config_path, out, *args):
    return main(["--config", str(config_path), "--out", str(out), *args])


def test_run_writes_results_manifest_and_checkpoint(tmp_path, config_path, capsys):
    out = tmp_path / "out"
    assert _run(config_path, out, "run") == EXIT_OK
    frame = read_results_csv(out / "results.csv")
    assert [c for c in frame.columns if c.startswith("session_")] == [f"session_{i}" for i in range(4)]
    assert list(frame["method"]) == ["spl"]
    assert "session_0" in capsys.readouterr().out

    manifest = read_manifest(out / "results.manifest.toml")
    assert manifest["command"]["name"] == "run"
    assert manifest["train"]["gamma"] == 0.01
    assert manifest["runtime"]["written_at"].endswith("Z")
    dataset_meta = read_manifest(out / "dataset.meta.toml")
    assert dataset_meta["dataset"]["source"] == "synthetic"
    assert "runtime" not in dataset_meta
    assert (out / "checkpoint.npz").is_file()


def test_run_is_byte_reproducible(tmp_path, config_path):
    assert _run(config_path, tmp_path / "a", "run") == EXIT_OK
    assert _run(config_path, tmp_path / "b", "run") == EXIT_OK
    for name in ("results.csv", "dataset.meta.toml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_the_run(tmp_path, config_path):
    assert _run(config_path, tmp_path / "a", "run") == EXIT_OK
    assert main(["--config", str(config_path), "--out", str(tmp_path / "b"), "--seed", "5", "run"]) == EXIT_OK
    first = load_checkpoint(tmp_path / "a" / "checkpoint.npz")
    second = load_checkpoint(tmp_path / "b" / "checkpoint.npz")
    assert not np.array_equal(first.classifier.prototypes, second.classifier.prototypes)
    assert read_manifest(tmp_path / "b" / "dataset.meta.toml")["dataset"]["seed"] == 5


def test_text_and_json_formats_use_their_extensions(tmp_path, config_path):
    assert _run(config_path, tmp_path, "--format", "json", "run") == EXIT_OK
    assert (tmp_path / "results.json").is_file()
    assert _run(config_path, tmp_path, "--format", "text", "run", "--layout", "sessions") == EXIT_OK
    assert "session_3" in (tmp_path / "results.txt").read_text(encoding="utf-8")


def test_unknown_config_key_exits_with_config_error(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[train]\nepoch = 3\n", encoding="utf-8")
    assert main(["--config", str(path), "--out", str(tmp_path / "out"), "run"]) == EXIT_CONFIG
    assert "train.epoch" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["--config", "does-not-exist.toml", "run"],
        ["--log-level", "chatty", "run"],
        ["--gamma", "-1", "run"],
        ["sweep", "--workers", "0"],
    ],
)
def test_invalid_invocations_exit_with_config_error(argv, capsys):
    assert main(argv) == EXIT_CONFIG
    assert capsys.readouterr().err.startswith("error:")


def test_log_level_can_come_from_the_environment(monkeypatch, capsys):
    monkeypatch.setenv(LOG_LEVEL_ENV, "chatty")
    assert main(["run"]) == EXIT_CONFIG
    assert "unknown level 'chatty'" in capsys.readouterr().err


def test_gradcheck_passes_and_corruption_is_caught(tmp_path, config_path, capsys):
    assert _run(config_path, tmp_path, "gradcheck") == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6 and all("ok" in line for line in lines)

    assert _run(config_path, tmp_path, "gradcheck", "--corrupt-gradient") == EXIT_FAILURE
    captured = capsys.readouterr()
    assert "FAIL" in captured.out
    assert "gradient check failed" in captured.err


def test_export_writes_one_row_per_sample(tmp_path, config_path, capsys):
    out = tmp_path / "out"
    assert _run(config_path, out, "run") == EXIT_OK
    assert _run(config_path, out, "export", "--checkpoint", str(out / "checkpoint.npz")) == EXIT_OK
    assert "exported 27 embeddings of dimension 4" in capsys.readouterr().out
    exported = load_embeddings_csv(out / "embeddings.csv")
    assert exported.inputs.shape == (27, 4)
    sidecar = read_manifest(out / "embeddings.csv.meta.toml")
    assert sidecar["dataset"]["split"] == "test"


def test_identity_export_is_a_fixpoint(tmp_path, config_path):
    identity = tmp_path / "identity.toml"
    identity.write_text(
        SMALL_RUN.replace("incremental_epochs = 3", 'incremental_epochs = 3\nextractor = "identity"'), encoding="utf-8"
    )
    out = tmp_path / "out"
    checkpoint = str(out / "checkpoint.npz")
    assert _run(identity, out, "run") == EXIT_OK
    first = out / "first.csv"
    assert _run(identity, out, "export", "--checkpoint", checkpoint, "--output", str(first)) == EXIT_OK
    expected = generate_synthetic(
        SyntheticConfig(input_dim=6, n_classes=9, train_per_class=10, test_per_class=3, separation=2.0, seed=0)
    )
    np.testing.assert_array_equal(load_embeddings_csv(first).inputs, expected.test.inputs)

    second = out / "second.csv"
    assert (
        _run(identity, out, "export", "--checkpoint", checkpoint, "--dataset", str(first), "--output", str(second))
        == EXIT_OK
    )
    assert first.read_bytes() == second.read_bytes()


def test_perturb_writes_features_and_perturbed_copies(tmp_path, config_path, capsys):
    out = tmp_path / "out"
    assert _run(config_path, out, "perturb") == EXIT_OK
    assert "exported 12 few-shot features and their perturbed copies from 3 sessions" in capsys.readouterr().out
    frame = pd.read_csv(out / "perturbed.csv")
    assert list(frame.columns) == ["session", "label", "kind", "f0", "f1", "f2", "f3"]
    assert len(frame) == 24
    assert sorted(set(frame["session"])) == [1, 2, 3]
    assert (frame["kind"] == "perturbed").sum() == 12
    sidecar = read_manifest(out / "perturbed.csv.meta.toml")
    assert sidecar["dataset"]["spl_head_init"] == "prior"


def test_export_without_checkpoint_file_fails(tmp_path, config_path, capsys):
    assert _run(config_path, tmp_path, "export", "--checkpoint", str(tmp_path / "none.npz")) == EXIT_FAILURE
    assert "checkpoint not found" in capsys.readouterr().err


def test_compare_shares_the_base_accuracy(tmp_path, config_path):
    assert _run(config_path, tmp_path, "compare") == EXIT_OK
    frame = read_results_csv(tmp_path / "compare.csv")
    assert list(frame.columns) == ["method", "base", "old", "new", "avg", "pd", "harmonic"]
    assert list(frame["method"]) == ["prototype", "finetune_ce", "spl"]
    assert frame["base"].nunique() == 1


def test_compare_over_seeds_reports_spl_wins(tmp_path, config_path, capsys):
    assert _run(config_path, tmp_path, "compare", "--seeds", "0", "1") == EXIT_OK
    assert "of 2 seeds" in capsys.readouterr().out
    assert len(read_results_csv(tmp_path / "compare.csv")) == 6


def test_ablate_shots_and_sweep_tables(tmp_path, config_path):
    assert _run(config_path, tmp_path, "ablate") == EXIT_OK
    assert list(read_results_csv(tmp_path / "ablation.csv")["method"]) == ["CE", "CE+SPL", "CE+CCL", "CE+CCL+SPL"]

    assert _run(config_path, tmp_path, "shots") == EXIT_OK
    assert list(read_results_csv(tmp_path / "shots.csv")["method"]) == ["1-shot", "2-shot"]

    assert _run(config_path, tmp_path, "sweep") == EXIT_OK
    sweep = read_results_csv(tmp_path / "sweep.csv")
    assert list(sweep.columns) == ["gamma", "alpha=0.0", "alpha=0.01"]
    assert len(sweep) == 2
    assert read_manifest(tmp_path / "sweep.manifest.toml")["command"]["workers"] == 1


def test_parser_requires_a_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
