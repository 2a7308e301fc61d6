"""End-to-end command-line workflows and exit codes."""

import json

import numpy as np
import pytest

from trasr.checkpoint import load_checkpoint
from trasr.cli import main
from trasr.data import load_manifest

ALPHABET = "abcd "

TINY = [
    "--set", f"data.alphabet={ALPHABET}",
    "--set", "model.d_att=16", "--set", "model.d_ff=32", "--set", "model.heads=2",
    "--set", "model.e1=1", "--set", "model.e2=1", "--set", "model.dec_layers=1",
    "--set", "model.dropout=0.0", "--set", "model.feature_dim=16",
    "--set", "train.epochs=2", "--set", "train.batch_size=3",
    "--set", "train.lr_scale=0.5", "--set", "train.warmup_steps=100",
    "--set", "train.specaugment=false", "--set", "train.label_smoothing=0.0",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-data")
    rc = main(["synth-data", "--out", str(out), "--n-utterances", "6",
               "--alphabet", ALPHABET, "--feature-dim", "16",
               "--frames-per-token", "16", "20", "--words", "1", "1",
               "--word-len", "2", "3", "--seed", "0"])
    assert rc == 0
    return out / "manifest.tsv"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-train")
    rc = main(["train", "--out", str(out),
               "--set", f"paths.train_manifest={dataset}"] + TINY)
    assert rc == 0
    return out


# -- synth-data -------------------------------------------------------------


def test_synth_data_writes_manifest_and_features(dataset):
    entries = load_manifest(dataset)
    assert len(entries) == 6
    assert all(e.feature_path.exists() for e in entries)


def test_synth_data_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["synth-data", "--out", str(tmp_path / sub), "--n-utterances", "3",
                     "--seed", "5"]) == 0
    for e1, e2 in zip(load_manifest(tmp_path / "a" / "manifest.tsv"),
                      load_manifest(tmp_path / "b" / "manifest.tsv")):
        assert e1.transcript == e2.transcript
        assert e1.feature_path.read_bytes() == e2.feature_path.read_bytes()


# -- train ------------------------------------------------------------------


def test_train_writes_run_artifacts(trained):
    assert (trained / "config.resolved").exists()
    assert (trained / "epochs.jsonl").exists()
    assert (trained / "epoch0002.ckpt").exists()
    assert (trained / "best.json").exists()


def test_seed_flag_overrides_config(dataset, tmp_path):
    rc = main(["train", "--out", str(tmp_path / "run"), "--seed", "42",
               "--set", f"paths.train_manifest={dataset}"] + TINY)
    assert rc == 0
    text = (tmp_path / "run" / "config.resolved").read_text()
    assert "train.seed = 42" in text


def test_unknown_config_key_exit_2(tmp_path):
    assert main(["train", "--out", str(tmp_path / "run"),
                 "--set", "model.depth=3"]) == 2


def test_missing_manifest_config_exit_2(tmp_path):
    assert main(["train", "--out", str(tmp_path / "run")] + TINY) == 2


def test_locked_out_dir_exit_3(dataset, tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / ".lock").touch()
    rc = main(["train", "--out", str(out),
               "--set", f"paths.train_manifest={dataset}"] + TINY)
    assert rc == 3


def test_train_skd_phi_zero_matches_plain(dataset, trained, tmp_path):
    rc = main(["train-skd", "--out", str(tmp_path / "skd"),
               "--set", f"paths.train_manifest={dataset}",
               "--set", "kd.phi_final=0.0"] + TINY)
    assert rc == 0
    a = load_checkpoint(trained / "epoch0002.ckpt")
    b = load_checkpoint(tmp_path / "skd" / "epoch0002.ckpt")
    for name in a:
        assert np.array_equal(a[name], b[name])


def test_finetune_skd_runs_from_checkpoint(dataset, trained, tmp_path):
    rc = main(["finetune-skd", "--out", str(tmp_path / "ft"),
               "--init", str(trained / "epoch0002.ckpt"),
               "--set", f"paths.train_manifest={dataset}",
               "--set", "train.finetune_epochs=1",
               "--set", "kd.phi_final=0.5"] + TINY)
    assert rc == 0
    records = [json.loads(l) for l in
               (tmp_path / "ft" / "epochs.jsonl").read_text().splitlines()]
    assert len(records) == 1
    assert records[0]["phi"] == 0.5


# -- decode -----------------------------------------------------------------


def test_decode_greedy_writes_report(dataset, trained, tmp_path, capsys):
    out = tmp_path / "dec"
    rc = main(["decode", "--out", str(out), "--checkpoint",
               str(trained / "epoch0002.ckpt"), "--manifest", str(dataset),
               "--greedy"] + TINY)
    assert rc == 0
    assert "WER" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["utterances"] == 6
    assert 0.0 <= report["wer"]
    hyps = (out / "hyps.tsv").read_text().splitlines()
    assert len(hyps) == 6
    assert all("\t" in line for line in hyps)


def test_decode_lm_weight_without_lm_exit_2(dataset, trained, tmp_path):
    rc = main(["decode", "--out", str(tmp_path / "dec"), "--checkpoint",
               str(trained / "epoch0002.ckpt"), "--manifest", str(dataset),
               "--set", "decode.lm_weight=0.7"] + TINY)
    assert rc == 2


def test_decode_beam_with_lm(dataset, trained, tmp_path):
    lm_out = tmp_path / "lm"
    rc = main(["train-lm", "--out", str(lm_out), "--manifest", str(dataset),
               "--set", f"data.alphabet={ALPHABET}", "--set", "lm.layers=1",
               "--set", "lm.d_att=16", "--set", "lm.d_ff=32", "--set", "lm.heads=2",
               "--set", "lm.epochs=2"])
    assert rc == 0
    rc = main(["decode", "--out", str(tmp_path / "dec"), "--checkpoint",
               str(trained / "epoch0002.ckpt"), "--manifest", str(dataset),
               "--lm-checkpoint", str(lm_out / "lm.ckpt"),
               "--set", "decode.beam_size=4", "--set", "decode.ctc_weight=0.3",
               "--set", "decode.lm_weight=0.2",
               "--set", "decode.insertion_penalty=0.5",
               "--set", "lm.layers=1", "--set", "lm.d_att=16",
               "--set", "lm.d_ff=32", "--set", "lm.heads=2"] + TINY)
    assert rc == 0
    assert (tmp_path / "dec" / "report.json").exists()


def test_decode_missing_checkpoint_exit_3(dataset, tmp_path):
    rc = main(["decode", "--out", str(tmp_path / "dec"), "--checkpoint",
               str(tmp_path / "nope.ckpt"), "--manifest", str(dataset),
               "--greedy"] + TINY)
    assert rc == 3


# -- average ----------------------------------------------------------------


def test_average_identical_is_identity(trained, tmp_path):
    src = trained / "epoch0002.ckpt"
    out = tmp_path / "avg.ckpt"
    rc = main(["average", "--out", str(out), str(src), str(src)])
    assert rc == 0
    a, b = load_checkpoint(src), load_checkpoint(out)
    for name in a:
        assert np.array_equal(a[name], b[name])


def test_average_two_checkpoints_mean(trained, tmp_path):
    out = tmp_path / "avg.ckpt"
    rc = main(["average", "--out", str(out),
               str(trained / "epoch0001.ckpt"), str(trained / "epoch0002.ckpt")])
    assert rc == 0
    a = load_checkpoint(trained / "epoch0001.ckpt")
    b = load_checkpoint(trained / "epoch0002.ckpt")
    avg = load_checkpoint(out)
    for name in a:
        np.testing.assert_allclose(
            avg[name], (a[name].astype(np.float64) + b[name]) / 2, atol=1e-7)


def test_average_mismatched_exit_3(trained, tmp_path):
    other = tmp_path / "other"
    bad = main(["average", "--out", str(tmp_path / "avg.ckpt"),
                str(trained / "epoch0002.ckpt"), str(tmp_path / "missing.ckpt")])
    assert bad == 3
    del other


# -- benchmark --------------------------------------------------------------


def test_benchmark_writes_csv_and_matches_analytic(tmp_path, capsys):
    rc = main(["benchmark", "--out", str(tmp_path / "bench"), "--lengths", "64",
               "--repetitions", "1",
               "--set", "model.d_att=16", "--set", "model.d_ff=32",
               "--set", "model.heads=2", "--set", "model.e1=1",
               "--set", "model.e2=2", "--set", "model.dec_layers=1",
               "--set", "model.feature_dim=16", "--set", f"data.alphabet={ALPHABET}"])
    assert rc == 0
    assert "match the analytic formula" in capsys.readouterr().out
    lines = (tmp_path / "bench" / "benchmark.csv").read_text().splitlines()
    header = lines[0].split(",")
    i_meas = header.index("measured_macs")
    i_ana = header.index("analytic_total_macs")
    assert len(lines) > 1
    for line in lines[1:]:
        parts = line.split(",")
        if parts[i_meas]:
            assert parts[i_meas] == parts[i_ana]
