import json

import pytest

from ota.cli import main
from ota.core import SeededRng, load_checkpoint, load_dataset, sample_few_data
from ota.metrics import extract_features, fd_score

CONFIG = """\
output_dir = "out"

[seeds]
master = 11

[data]
upstream = "data/up"
downstream = "data/down"
few_fraction = 0.5

[synth]
n_upstream = 32
n_downstream = 16
num_classes = 4

[vq]
n_codes = 16
code_dim = 4
hidden = 12
steps = 10
batch_size = 8

[lt]
n_layers = 1
n_heads = 2
dim = 16
steps = 10
batch_size = 8
max_train_grids = 8

[backbone]
width = 8
depth = 2
feature_dim = 16
steps = 10
batch_size = 8

[irf]
stage3_steps = 4
stage4_steps = 4
batch_size = 8
stage3_lr_points = 2
stage4_lr_points = 2
stage4_wd_points = 2
baseline_steps = 4

[digg]
target_count = 8
top_k = 8

[distill]
epochs = 1
batch_size = 8
student_width = 4
student_depth = 2
student_feature_dim = 8
finetune_steps = 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.toml").write_text(CONFIG)
    return root


def run(workdir, *argv):
    import os

    old = os.getcwd()
    os.chdir(workdir)
    try:
        return main(["--config", "run.toml", *argv])
    finally:
        os.chdir(old)


@pytest.fixture(scope="module")
def primed(workdir):
    assert run(workdir, "synth") == 0
    assert run(workdir, "prime") == 0
    return workdir


def test_synth_writes_both_domains(primed):
    up = load_dataset(primed / "data" / "up")
    down = load_dataset(primed / "data" / "down")
    assert len(up.records) == 32
    assert len(down.records) == 16


def test_prime_caches_artifacts(primed, capsys):
    assert run(primed, "prime") == 0
    out = capsys.readouterr().out
    assert out.count("reusing cached artifact") == 3


def test_run_manifest_records_artifacts(primed):
    manifest = json.loads((primed / "out" / "run_manifest.json").read_text())
    assert {"vq", "lt", "backbone"} <= set(manifest["artifacts"])
    assert manifest["seed"] == 11


def test_assemble_and_digg(primed):
    assert run(primed, "assemble") == 0
    rerep = load_dataset(primed / "out" / "rerepresented")
    assert rerep.provenance.value == "re_represented"
    assert run(primed, "digg") == 0
    corpus = load_dataset(primed / "out" / "distill_corpus")
    assert len(corpus.records) == 8
    assert (primed / "out" / "distill_corpus" / "contact_sheet.png").exists()


def test_irf_and_eval(primed):
    assert run(primed, "irf") == 0
    assert (primed / "out" / "irf" / "stage4_calibrate.ckpt").exists()
    report = json.loads((primed / "out" / "irf" / "stage4_calibrate_report.json").read_text())
    assert set(report) == {"stage", "config", "seed", "metrics", "lr_trace_path"}
    assert run(primed, "eval", "--checkpoint", "out/irf/stage4_calibrate.ckpt") == 0


def test_ota_both_orders_and_report(primed):
    assert run(primed, "ota", "--order", "irf_then_digg") == 0
    assert run(primed, "ota", "--order", "digg_then_irf") == 0
    assert run(primed, "report") == 0
    table = (primed / "out" / "reports" / "ota_comparison.tsv").read_text()
    lines = table.strip().split("\n")
    assert lines[0] == "order\tsynthetic\taverage"
    assert len(lines) == 3


def test_fdscore_is_thin_wrapper(primed, capsys):
    assert run(primed, "fdscore", "--a", "data/up", "--b", "data/down",
               "--label", "original") == 0
    printed = float(capsys.readouterr().out.strip().split("\n")[-1])

    backbone = load_checkpoint(
        primed / "out" / "artifacts" /
        json.loads((primed / "out" / "artifacts" / "backbone.json").read_text())["path"])
    up = load_dataset(primed / "data" / "up")
    down = load_dataset(primed / "data" / "down")
    expected = fd_score(extract_features(backbone, up), extract_features(backbone, down))
    assert printed == pytest.approx(expected.value, abs=5e-7)


def test_few_data_matches_library_call(primed):
    few_disk = load_dataset(primed / "out" / "few_data")
    down = load_dataset(primed / "data" / "down")
    few_lib = sample_few_data(down, 0.5, SeededRng(11).derive("few_data"))
    assert [r.id for r in few_disk.records] == [r.id for r in few_lib.records]


def test_unknown_subcommand_is_usage_error(workdir):
    assert run(workdir, "bogus") == 2


def test_unknown_flag_is_usage_error(workdir):
    assert run(workdir, "irf", "--frobnicate") == 2


def test_unknown_config_key_is_config_error(workdir, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[vq]\nbits = 3\n")
    import os

    old = os.getcwd()
    os.chdir(workdir)
    try:
        assert main(["--config", str(bad), "prime"]) == 2
    finally:
        os.chdir(old)


def test_seed_flag_overrides_config(primed, capsys):
    assert run(primed, "--seed", "99", "fdscore", "--a", "data/up", "--b", "data/down",
               "--label", "seeded") == 0
