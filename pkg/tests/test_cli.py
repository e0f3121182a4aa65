import filecmp
import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdistill import config as cfgmod
from gpdistill import pipeline
from gpdistill.cli import main
from gpdistill.exceptions import ConfigurationError, ContractError

TINY = {
    "source_pool": 24,
    "train_pool": 30,
    "test_size": 70,
    "k_shot": 5,
    "pretrain_iterations": 3,
    "pretrain_batch": 4,
    "adapt_iterations": 2,
    "adapt_batch": 4,
    "iterations": 4,
    "batch_size": 2,
    "log_interval": 2,
    "scales": [0.2, 1.0],
    "seeds": [0],
    "augment_count": 3,
}


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(cfgmod.render(cfgmod.parse_dict(TINY)))
    return path


def run(*argv):
    return main([str(a) for a in argv])


# -- config ---------------------------------------------------------------------


def test_defaults_documented():
    c = cfgmod.RunConfig()
    assert c.iterations == 30000 and c.mu == 5.0 and (c.ratio_in, c.ratio_out) == (1, 2)
    assert c.scales == [0.0625, 0.125, 0.25, 0.5, 1.0] and len(c.seeds) == 3


def test_round_trip_defaults():
    c = cfgmod.RunConfig()
    assert cfgmod.parse(cfgmod.render(c)) == c


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    mu=st.floats(0, 100, allow_nan=False),
    mode=st.sampled_from(["BL", "Aug", "Aug+Anchor"]),
    k=st.integers(1, 20),
    lr=st.floats(1e-6, 1.0),
    oracle=st.sampled_from(["invert_colors", "edge_sketch", "posterize"]),
)
def test_round_trip_property(seed, mu, mode, k, lr, oracle):
    c = cfgmod.RunConfig(seed=seed, mu=mu, mode=mode, k_shot=k, lr=lr, oracle=oracle)
    assert cfgmod.parse(cfgmod.render(c)) == c


def test_unknown_and_bad_keys():
    with pytest.raises(ConfigurationError, match="unknown config keys: lambda3"):
        cfgmod.parse("lambda3: 1\n")
    with pytest.raises(ConfigurationError):
        cfgmod.parse("iterations: many\n")
    with pytest.raises(ConfigurationError):
        cfgmod.parse("k_shot: 21\n")
    with pytest.raises(ConfigurationError):
        cfgmod.parse("- a\n- b\n")
    with pytest.raises(ConfigurationError):
        cfgmod.parse("oracle: sepia\n")


def test_int_accepted_for_float_key():
    assert cfgmod.parse("mu: 3\n").mu == 3.0


# -- subcommands ------------------------------------------------------------------


def test_datagen_layout_and_reproducible(conf, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("datagen", "--config", conf, "--out", a) == 0
    assert run("datagen", "--config", conf, "--out", b) == 0
    m = json.loads((a / "data" / "manifest.json").read_text())
    assert m["counts"] == {"source_pool": 24, "train": 30, "test": 70, "anchors": 5}
    cmp = filecmp.dircmp(a / "data", b / "data")
    _assert_same_tree(cmp)


def _assert_same_tree(cmp):
    assert not cmp.left_only and not cmp.right_only and not cmp.funny_files
    _, mismatch, errors = filecmp.cmpfiles(cmp.left, cmp.right, cmp.common_files, shallow=False)
    assert not mismatch and not errors
    for sub in cmp.subdirs.values():
        _assert_same_tree(sub)


def test_datagen_k_flag(conf, tmp_path):
    assert run("datagen", "--config", conf, "--out", tmp_path, "--k", 3) == 0
    assert len(list((tmp_path / "data" / "anchors" / "source").iterdir())) == 3
    assert run("datagen", "--config", conf, "--out", tmp_path, "--k", 25) == 2


def test_adapt_without_data_is_config_error(conf, tmp_path, capsys):
    assert run("adapt", "--config", conf, "--out", tmp_path / "empty") == 2
    assert "datagen" in capsys.readouterr().err


def test_missing_config_file_is_io_error(tmp_path):
    assert run("datagen", "--config", tmp_path / "nope.yaml", "--out", tmp_path) == 3


def test_bad_override_is_config_error(conf, tmp_path):
    assert run("datagen", "--config", conf, "--out", tmp_path, "--set", "colour=red") == 2
    assert run("datagen", "--config", conf, "--out", tmp_path, "--set", "novalue") == 2


def test_pipeline_end_to_end(conf, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("datagen", "--config", conf, "--out", out) == 0
    assert run("adapt", "--config", conf, "--out", out, "--k", 4) == 0
    teacher = json.loads((out / "teacher" / "manifest.json").read_text())
    assert teacher["k"] == 4
    assert (out / "teacher" / "adapt_log.csv").exists() and (out / "teacher" / "pretrain_log.csv").exists()
    assert run("augment", "--config", conf, "--out", out) == 0
    assert len(list((out / "augment" / "source").iterdir())) == 3

    assert run("distill", "--config", conf, "--out", out, "--mode", "BL") == 0
    cell = out / "cells" / "BL_n5_s0"
    assert (cell / "student" / "header.json").exists() and (cell / "metrics.csv").exists()
    assert json.loads((cell / "manifest.json").read_text())["checkpoints"]["teacher"] is None

    assert run("distill", "--config", conf, "--out", out, "--mode", "Aug+Anchor", "--pairs", 10) == 0
    m = json.loads((out / "cells" / "Aug_Anchor_n10_s0" / "manifest.json").read_text())
    assert m["updates"]["d_updates"]["fine"] == m["updates"]["steps"]["anchor"]

    capsys.readouterr()
    assert run("eval", "--config", conf, "--out", out) == 0
    report = (out / "eval" / "report.csv").read_text().splitlines()
    assert len(report) == 3
    assert (out / "eval" / "verdicts.json").exists()
    assert (out / "eval" / "sheets" / "BL_n5_s0.png").exists()


def test_distill_aug_needs_teacher(conf, tmp_path):
    out = tmp_path / "run"
    assert run("datagen", "--config", conf, "--out", out) == 0
    assert run("distill", "--config", conf, "--out", out, "--mode", "Aug") == 2


def test_eval_refuses_anchor_images(conf, tmp_path):
    out = tmp_path / "run"
    run("datagen", "--config", conf, "--out", out)
    assert run("distill", "--config", conf, "--out", out, "--mode", "BL") == 0
    assert run("eval", "--config", conf, "--out", out, "--test-dir", out / "data" / "anchors") == 2


def test_tampered_checkpoint_rejected(conf, tmp_path):
    out = tmp_path / "run"
    run("datagen", "--config", conf, "--out", out)
    run("adapt", "--config", conf, "--out", out)
    blob = sorted((out / "teacher" / "target").glob("*.bin"))[0]
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ContractError):
        pipeline.load_teacher(out)
    assert run("augment", "--config", conf, "--out", out) == 2


def test_ablate_resumes_and_reruns_from_manifest(conf, tmp_path):
    out = tmp_path / "run"
    assert run("ablate", "--config", conf, "--out", out) == 0
    summary = (out / "ablate" / "summary.csv").read_text()
    rows = summary.splitlines()
    # 3 modes at k_shot=5, plus BL/Aug/Aug+Anchor at 6 and 30 pairs
    assert len(rows) == 1 + 3 + 3 + 3
    assert json.loads((out / "ablate" / "verdicts.json").read_text())
    stamp = (out / "cells" / "BL_n5_s0" / "student" / "header.json").stat().st_mtime_ns
    assert run("ablate", "--config", conf, "--out", out) == 0
    assert (out / "cells" / "BL_n5_s0" / "student" / "header.json").stat().st_mtime_ns == stamp
    assert (out / "ablate" / "summary.csv").read_text() == summary

    cell = out / "cells" / "Aug_Anchor_n6_s0"
    again = tmp_path / "again"
    assert run("distill", "--config", cell / "manifest.json", "--out", again) == 0
    assert (again / "cells" / cell.name / "metrics.csv").read_bytes() == (cell / "metrics.csv").read_bytes()
