import json

import pytest
from hypothesis import given, settings, strategies as st

from phonetrack.config import DEFAULTS, ConfigError, load_config, set_key, validate_config


def write(tmp_path, doc, name="run.json"):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return p


MINIMAL = {"seed": 1, "synth": {}}


def test_empty_file_names_required_keys(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, ""))
    errors = exc.value.errors
    assert len(errors) >= 1
    assert any(e.startswith("seed:") for e in errors)
    assert any(e.startswith("dataset.manifest:") for e in errors)


def test_overlap_above_one_cites_segmentation_bound(tmp_path):
    doc = {**MINIMAL, "mm": {"segmentation": {"overlap_fraction": 1.2}}}
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, doc))
    (err,) = exc.value.errors
    assert err.startswith("mm.segmentation.overlap_fraction:")
    assert "SegmentationConfig" in err and "< 1" in err


def test_minimal_config_fills_documented_defaults(tmp_path):
    cfg = load_config(write(tmp_path, MINIMAL))
    v = cfg.values
    assert v["trf"]["window_ms"] == 400
    seg = cfg.segmentation()
    assert (seg.window_s, seg.overlap_fraction, seg.mismatch_gap_s) == (5.0, 0.8, 1.0)
    t = cfg.train_config("train", seed=0)
    assert (t.max_epochs, t.patience) == (30, 5)
    assert v["trf"]["lambda_grid"] == pytest.approx([10.0 ** k for k in range(-3, 7)])
    assert v["trf"]["channels"] is None
    assert v["preprocess"] == {"highpass_hz": 0.5, "filter_order": 4, "intermediate_fs": 1024.0,
                               "target_fs": 64.0}


def test_errors_are_aggregated(tmp_path):
    doc = {"seed": -1, "synth": {"noise": "brown"}, "trf": {"window_ms": -5, "lambda_grid": []},
           "mm": {"train": {"batch_size": 0}}, "bogus": 1}
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, doc))
    paths = {e.split(":")[0] for e in exc.value.errors}
    assert {"seed", "synth.noise", "trf.window_ms", "trf.lambda_grid", "mm.train.batch_size", "<root>"} <= paths


def test_missing_dataset_file_reported_relative_to_config(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, {"seed": 0, "dataset": {"manifest": "nope/manifest.json"}}))
    assert "file not found" in exc.value.errors[0]
    (tmp_path / "nope").mkdir()
    (tmp_path / "nope" / "manifest.json").write_text("{}")
    cfg = load_config(write(tmp_path, {"seed": 0, "dataset": {"manifest": "nope/manifest.json"}}))
    assert cfg.dataset_manifest() == (tmp_path / "nope" / "manifest.json").resolve()
    assert "synth" not in cfg.values


def test_dataset_and_synth_are_exclusive(tmp_path):
    (tmp_path / "m.json").write_text("{}")
    with pytest.raises(ConfigError, match="not both"):
        load_config(write(tmp_path, {"seed": 0, "synth": {}, "dataset": {"manifest": "m.json"}}))


def test_patience_must_be_below_epochs(tmp_path):
    with pytest.raises(ConfigError, match="mm.finetune.patience"):
        load_config(write(tmp_path, {**MINIMAL, "mm": {"finetune": {"max_epochs": 3, "patience": 3}}}))


def test_pairs_must_reference_selected_schemes(tmp_path):
    with pytest.raises(ConfigError, match="stats.pairs.0"):
        load_config(write(tmp_path, {**MINIMAL, "schemes": ["VC"], "stats": {"pairs": [["VC", "BPC"]]}}))


def test_invalid_json_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(write(tmp_path, "{seed: 1"))


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")


def test_overrides_apply_before_validation(tmp_path):
    p = write(tmp_path, MINIMAL)
    cfg = load_config(p, {"seed": 9, "mm.train.max_epochs": 12})
    assert cfg.seed == 9 and cfg.values["mm"]["train"]["max_epochs"] == 12
    with pytest.raises(ConfigError, match="overlap_fraction"):
        load_config(p, {"mm.segmentation.overlap_fraction": 1.0})


def test_default_pairs_are_all_scheme_pairs(tmp_path):
    cfg = load_config(write(tmp_path, {**MINIMAL, "schemes": ["NPC", "BPC", "VC"]}))
    assert cfg.comparison_pairs == [("NPC", "BPC"), ("NPC", "VC"), ("BPC", "VC")]


def test_hash_tracks_content(tmp_path):
    a = load_config(write(tmp_path, MINIMAL, "a.json"))
    b = load_config(write(tmp_path, {"synth": {}, "seed": 1}, "b.json"))
    c = load_config(write(tmp_path, {"seed": 2, "synth": {}}, "c.json"))
    assert a.hash() == b.hash() != c.hash()


def test_defaults_not_mutated(tmp_path):
    before = json.dumps(DEFAULTS, sort_keys=True)
    cfg = load_config(write(tmp_path, MINIMAL))
    cfg.values["trf"]["lambda_grid"].append(5.0)
    assert json.dumps(DEFAULTS, sort_keys=True) == before


def test_set_key_creates_nested():
    raw = {}
    set_key(raw, "a.b.c", 3)
    assert raw == {"a": {"b": {"c": 3}}}


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=-2, max_value=2, allow_nan=False))
def test_overlap_bound_property(x):
    doc = {"seed": 0, "synth": {}, "mm": {"segmentation": {"overlap_fraction": x}}}
    if 0 <= x < 1:
        assert validate_config(doc).segmentation().overlap_fraction == x
    else:
        with pytest.raises(ConfigError):
            validate_config(doc)
