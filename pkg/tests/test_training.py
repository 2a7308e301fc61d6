"""Training loops: artifacts, determinism, distillation modes, LM training,
and dataset decoding."""

import json

import numpy as np
import pytest

from trasr.checkpoint import load_checkpoint
from trasr.config import resolve
from trasr.data import SyntheticTaskSpec, Vocabulary, load_manifest, make_batches, synth_generate
from trasr.errors import TrasrError
from trasr.model import ForwardCtx, init_lm_params, init_model_params
from trasr.search import BeamConfig
from trasr.training import (RunLock, batch_loss, decode_dataset, lm_perplexity,
                            run_lm_training, run_training)

ALPHABET = "abcd "


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = SyntheticTaskSpec(alphabet=ALPHABET, feature_dim=16,
                             frames_per_token=(16, 20), noise_std=0.05)
    return synth_generate(spec, root, 6, words_range=(1, 1),
                          word_len_range=(2, 3), seed=0)


def tiny_cfg(manifest, **extra):
    overrides = {
        "data.alphabet": ALPHABET,
        "model.d_att": "16", "model.d_ff": "32", "model.heads": "2",
        "model.e1": "1", "model.e2": "1", "model.dec_layers": "1",
        "model.dropout": "0.0", "model.frontend": "conv2d4",
        "model.feature_dim": "16",
        "train.epochs": "2", "train.batch_size": "3",
        "train.label_smoothing": "0.0", "train.lr_scale": "0.5",
        "train.warmup_steps": "100", "train.specaugment": "false",
        "paths.train_manifest": str(manifest),
    }
    overrides.update(extra)
    return resolve({}, overrides)


def strip_wall_time(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


# -- run lock ---------------------------------------------------------------


def test_run_lock_exclusive(tmp_path):
    with RunLock(tmp_path):
        with pytest.raises(TrasrError, match="locked"):
            with RunLock(tmp_path):
                pass
    with RunLock(tmp_path):  # released after exit
        pass


# -- artifacts --------------------------------------------------------------


def test_training_writes_expected_artifacts(dataset, tmp_path):
    cfg = tiny_cfg(dataset)
    records = run_training(cfg, tmp_path / "run", log=lambda s: None)
    assert len(records) == 2
    out = tmp_path / "run"
    assert (out / "config.resolved").exists()
    lines = (out / "epochs.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for line, rec in zip(lines, records):
        parsed = json.loads(line)
        assert parsed == rec
        for key in ("epoch", "train_total", "dev_accuracy", "checkpoint", "wall_time"):
            assert key in parsed
    best = json.loads((out / "best.json").read_text())
    assert best and all((out / name).exists() for name in best)
    assert not (out / ".lock").exists()


def test_keep_best_prunes_checkpoints(dataset, tmp_path):
    cfg = tiny_cfg(dataset, **{"train.epochs": "4", "train.keep_best": "2"})
    run_training(cfg, tmp_path / "run", log=lambda s: None)
    kept = sorted(p.name for p in (tmp_path / "run").glob("*.ckpt"))
    # the best two by dev accuracy plus (possibly) the final epoch
    assert 2 <= len(kept) <= 3
    assert "epoch0004.ckpt" in kept


def test_training_deterministic_given_seed(dataset, tmp_path):
    cfg = tiny_cfg(dataset)
    r1 = run_training(cfg, tmp_path / "a", log=lambda s: None)
    r2 = run_training(cfg, tmp_path / "b", log=lambda s: None)
    assert strip_wall_time(r1) == strip_wall_time(r2)
    c1 = load_checkpoint(tmp_path / "a" / r1[-1]["checkpoint"])
    c2 = load_checkpoint(tmp_path / "b" / r2[-1]["checkpoint"])
    for name in c1:
        assert np.array_equal(c1[name], c2[name])


def test_different_seed_changes_results(dataset, tmp_path):
    r1 = run_training(tiny_cfg(dataset), tmp_path / "a", log=lambda s: None)
    r2 = run_training(tiny_cfg(dataset, **{"train.seed": "2"}), tmp_path / "b",
                      log=lambda s: None)
    assert strip_wall_time(r1) != strip_wall_time(r2)


# -- distillation modes -----------------------------------------------------


def test_skd_phi_zero_matches_plain_bit_exact(dataset, tmp_path):
    plain = run_training(tiny_cfg(dataset), tmp_path / "plain", log=lambda s: None)
    skd = run_training(tiny_cfg(dataset, **{"kd.phi_final": "0.0"}),
                       tmp_path / "skd", mode="skd", log=lambda s: None)
    assert strip_wall_time(plain) == strip_wall_time(skd)


def test_skd_records_linear_phi_ramp(dataset, tmp_path):
    cfg = tiny_cfg(dataset, **{"kd.phi_final": "0.5"})
    records = run_training(cfg, tmp_path / "run", mode="skd", log=lambda s: None)
    assert abs(records[0]["phi"] - 0.5 * 1 / 2) < 1e-12
    assert abs(records[1]["phi"] - 0.5) < 1e-12
    assert all(np.isfinite(r["teacher_entropy"]) for r in records)


def test_finetune_phi_zero_lr_zero_is_noop(dataset, tmp_path):
    cfg = tiny_cfg(dataset)
    run_training(cfg, tmp_path / "pre", log=lambda s: None)
    init = tmp_path / "pre" / "epoch0002.ckpt"
    ft_cfg = tiny_cfg(dataset, **{"kd.phi_final": "0.0", "train.finetune_lr": "0.0",
                                  "train.finetune_epochs": "1"})
    run_training(ft_cfg, tmp_path / "ft", mode="finetune", init_checkpoint=init,
                 log=lambda s: None)
    before = load_checkpoint(init)
    after = load_checkpoint(tmp_path / "ft" / "epoch0001.ckpt")
    for name in before:
        assert np.array_equal(before[name], after[name])


def test_finetune_uses_fixed_phi(dataset, tmp_path):
    cfg = tiny_cfg(dataset)
    run_training(cfg, tmp_path / "pre", log=lambda s: None)
    ft_cfg = tiny_cfg(dataset, **{"kd.phi_final": "0.5", "train.finetune_epochs": "2"})
    records = run_training(ft_cfg, tmp_path / "ft", mode="finetune",
                           init_checkpoint=tmp_path / "pre" / "epoch0002.ckpt",
                           log=lambda s: None)
    assert [r["phi"] for r in records] == [0.5, 0.5]


def test_init_checkpoint_architecture_mismatch(dataset, tmp_path):
    from trasr.errors import ShapeError

    run_training(tiny_cfg(dataset), tmp_path / "pre", log=lambda s: None)
    wider = tiny_cfg(dataset, **{"model.d_ff": "64"})
    with pytest.raises(ShapeError):
        run_training(wider, tmp_path / "ft", mode="finetune",
                     init_checkpoint=tmp_path / "pre" / "epoch0002.ckpt",
                     log=lambda s: None)


# -- loss plumbing ----------------------------------------------------------


def test_alpha_one_gives_decoder_zero_gradient(dataset):
    cfg = tiny_cfg(dataset)
    vocab = Vocabulary(cfg.alphabet)
    params = init_model_params(cfg.model, 0)
    (batch,) = make_batches(load_manifest(dataset)[:3], vocab, 3)
    total, _, _ = batch_loss(batch, cfg.model, params, ForwardCtx(),
                             alpha=1.0, label_smoothing=0.0)
    total.backward()
    assert np.allclose(params["dec.out.w"].grad, 0.0)
    assert np.allclose(params["dec.layer0.self.wq"].grad, 0.0)
    assert not np.allclose(params["ctc.w"].grad, 0.0)
    params.zero_grad()


# -- language model ---------------------------------------------------------


def test_lm_memorizes_single_sentence(tmp_path):
    cfg = resolve({}, {"data.alphabet": ALPHABET, "lm.layers": "1", "lm.d_att": "16",
                       "lm.d_ff": "32", "lm.heads": "2", "lm.epochs": "60",
                       "lm.batch_size": "4", "lm.lr_scale": "0.5",
                       "lm.warmup_steps": "20"})
    records = run_lm_training(cfg, ["ab c"] * 4, tmp_path, log=lambda s: None)
    assert records[-1]["perplexity"] < 1.05
    params = init_lm_params(cfg.lm, cfg.train.seed)
    params.load_state_dict(load_checkpoint(tmp_path / "lm.ckpt"))
    assert lm_perplexity(["ab c"], cfg.lm, params, cfg.alphabet) < 1.05


def test_untrained_lm_perplexity_near_vocab_size():
    cfg = resolve({}, {"data.alphabet": ALPHABET})
    params = init_lm_params(cfg.lm, 0)
    rng = np.random.default_rng(0)
    texts = ["".join(rng.choice(list("abcd"), size=8)) for _ in range(10)]
    ppl = lm_perplexity(texts, cfg.lm, params, cfg.alphabet)
    assert 2 < ppl < 3 * cfg.vocab_size  # near-uniform, order of the vocab size


def test_lm_training_deterministic(tmp_path):
    cfg = resolve({}, {"data.alphabet": ALPHABET, "lm.layers": "1", "lm.d_att": "16",
                       "lm.d_ff": "32", "lm.heads": "2", "lm.epochs": "3"})
    r1 = run_lm_training(cfg, ["ab", "cd a"], tmp_path / "a", log=lambda s: None)
    r2 = run_lm_training(cfg, ["ab", "cd a"], tmp_path / "b", log=lambda s: None)
    assert r1 == r2
    assert (tmp_path / "a" / "lm.ckpt").read_bytes() == \
        (tmp_path / "b" / "lm.ckpt").read_bytes()


# -- decoding ---------------------------------------------------------------


def test_decode_dataset_runs_and_reports(dataset, tmp_path):
    cfg = tiny_cfg(dataset)
    run_training(cfg, tmp_path / "run", log=lambda s: None)
    params = init_model_params(cfg.model, cfg.train.seed)
    params.load_state_dict(load_checkpoint(tmp_path / "run" / "epoch0002.ckpt"))
    vocab = Vocabulary(cfg.alphabet)
    entries = load_manifest(dataset)[:2]
    beam = BeamConfig(beam_size=2, ctc_weight=0.5, lm_weight=0.0,
                      insertion_penalty=0.5, max_len_ratio=1.0)
    results, totals = decode_dataset(entries, cfg.model, params, beam, vocab)
    assert len(results) == 2
    assert totals.ref_length == sum(len(e.transcript.split()) for e in entries)
    for r in results:
        assert isinstance(r.hypothesis, str)
