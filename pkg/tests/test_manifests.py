import math

import pytest

from manifests import (
    atomic_write_text,
    code_version,
    format_manifest,
    provenance_path,
    read_manifest,
    runtime_section,
    utc_timestamp,
    write_manifest,
    write_provenance,
)


def test_format_manifest_layout():
    text = format_manifest(
        {
            "command": {"name": "run", "argv": ["--seed", "3"]},
            "train": {"gamma": 0.01, "epochs": 50, "shuffle": True, "path": None},
        }
    )
    assert text == (
        '[command]\nname = "run"\nargv = ["--seed", "3"]\n'
        "\n[train]\ngamma = 0.01\nepochs = 50\nshuffle = true\n"
    )


def test_manifest_round_trips_through_toml(tmp_path):
    sections = {
        "data": {"source": "synthetic", "separation": 0.1 + 0.2, "seeds": [0, 1, 2], "note": 'say "hi"\n'},
        "study": {"grid": [0.0, 0.0001, 1e-300]},
    }
    path = write_manifest(tmp_path / "run.manifest.toml", sections)
    assert read_manifest(path) == sections


def test_non_finite_floats_are_written_as_toml_specials(tmp_path):
    path = write_manifest(tmp_path / "x.toml", {"s": {"a": float("inf"), "b": float("nan")}})
    loaded = read_manifest(path)["s"]
    assert loaded["a"] == math.inf
    assert math.isnan(loaded["b"])


def test_unsupported_values_are_rejected():
    with pytest.raises(TypeError):
        format_manifest({"s": {"nested": {"a": 1}}})


def test_atomic_write_replaces_and_cleans_up(tmp_path):
    target = tmp_path / "deep" / "out.txt"
    atomic_write_text(target, "first")
    atomic_write_text(target, "second")
    assert target.read_text(encoding="utf-8") == "second"
    assert [p.name for p in target.parent.iterdir()] == ["out.txt"]


def test_runtime_section_fields():
    section = runtime_section()
    assert set(section) == {"written_at", "code_version", "python_version", "numpy_version"}
    assert utc_timestamp().endswith("Z")


def test_code_version_outside_a_checkout_is_unknown(tmp_path):
    assert code_version(tmp_path / "missing") == "unknown"


def test_provenance_sidecar_sits_next_to_the_data_file(tmp_path):
    data_file = tmp_path / "emb.csv"
    assert provenance_path(data_file).name == "emb.csv.meta.toml"
    path = write_provenance(data_file, {"source": "synthetic", "seed": 0})
    assert read_manifest(path)["dataset"] == {"source": "synthetic", "seed": 0}
