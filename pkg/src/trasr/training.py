"""Training loops (pre-training, S-KD from scratch, FS-KD fine-tuning),
evaluation, LM training, and dataset decoding."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import (Batch, EditStats, ManifestEntry, Vocabulary, load_features,
                   load_manifest, make_batches, wer)
from .errors import ConfigError, TrasrError
from .frontend import FeatureSequence, spec_augment
from .losses import (KDConfig, ce_label_smoothed, ctc_loss,
                     finetune_loss, joint_loss, phi_schedule, skd_loss,
                     snapshot_teacher, teacher_entropy)
from .model import (EVAL_CTX, ForwardCtx, ModelConfig, LMConfig, ctc_log_probs,
                    decode_forward, encoder_forward, init_lm_params,
                    init_model_params, lm_forward)
from .optim import AdamState, ParameterStore, adam_step
from .rng import StreamCache, stream
from .search import BeamConfig, CtcPrefixScorer, beam_search
from .tensor import Tensor


class RunLock:
    """Exclusive ownership of an output directory via a lock file."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        try:
            self.path.touch(exist_ok=False)
        except FileExistsError:
            raise TrasrError(f"output directory locked by another run: {self.path}") from None
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


@dataclass
class UtteranceLoss:
    ctc_sum: object        # Tensor, summed negative log-likelihood
    s2s_sum: object        # Tensor, summed smoothed CE over positions
    skd_sum: object | None
    n_ctc_tokens: int
    n_positions: int
    n_correct: int
    t_entropy_sum: float


def utterance_losses(seq: FeatureSequence, target_ids: list[int], model_cfg: ModelConfig,
                     params: ParameterStore, ctx: ForwardCtx, label_smoothing: float,
                     teacher: ParameterStore | None = None,
                     temperature: float = 1.0) -> UtteranceLoss:
    x_e, _ = encoder_forward(seq, model_cfg, params, ctx)
    l_ctc = ctc_loss(ctc_log_probs(x_e, params), target_ids, blank_id=Vocabulary.BLANK)

    prefix = [Vocabulary.SOS] + list(target_ids)
    targets = list(target_ids) + [Vocabulary.EOS]
    logits = decode_forward(prefix, x_e, model_cfg, params, ctx)
    l_s2s = ce_label_smoothed(logits, targets, label_smoothing, reduce="sum")
    correct = int((logits.data.argmax(axis=-1) == np.asarray(targets)).sum())

    l_skd = None
    ent = 0.0
    if teacher is not None:
        with T.no_grad():
            t_xe, _ = encoder_forward(seq, model_cfg, teacher, EVAL_CTX)
            t_logits = decode_forward(prefix, t_xe, model_cfg, teacher, EVAL_CTX)
        l_skd = skd_loss(t_logits, logits, temperature=temperature, reduce="sum")
        ent = teacher_entropy(t_logits, temperature=temperature) * len(targets)
    return UtteranceLoss(l_ctc, l_s2s, l_skd, len(target_ids), len(targets), correct, ent)


@dataclass
class EpochStats:
    l_ctc: float
    l_s2s: float
    l_skd: float
    total: float
    accuracy: float
    teacher_entropy: float


def batch_loss(batch: Batch, model_cfg: ModelConfig, params: ParameterStore,
               ctx: ForwardCtx, alpha: float, label_smoothing: float,
               phi: float = 0.0, teacher: ParameterStore | None = None,
               temperature: float = 1.0):
    """Combined loss over one padded batch, normalized by target-token counts."""
    parts = [utterance_losses(FeatureSequence(batch.features[i], int(batch.feature_lengths[i])),
                              list(batch.targets[i, : int(batch.target_lengths[i])]),
                              model_cfg, params, ctx, label_smoothing,
                              teacher=teacher, temperature=temperature)
             for i in range(len(batch.utt_ids))]
    n_ctc = sum(p.n_ctc_tokens for p in parts)
    n_pos = sum(p.n_positions for p in parts)
    l_ctc = sum((p.ctc_sum for p in parts), start=Tensor(0.0)) * (1.0 / max(1, n_ctc))
    l_s2s = sum((p.s2s_sum for p in parts), start=Tensor(0.0)) * (1.0 / max(1, n_pos))
    if teacher is not None:
        l_skd = sum((p.skd_sum for p in parts), start=Tensor(0.0)) * (1.0 / max(1, n_pos))
        total = finetune_loss(l_ctc, l_s2s, l_skd, alpha, phi)
        skd_val = l_skd.item()
        ent = sum(p.t_entropy_sum for p in parts) / max(1, n_pos)
    else:
        total = joint_loss(l_ctc, l_s2s, alpha)
        skd_val, ent = 0.0, 0.0
    accuracy = sum(p.n_correct for p in parts) / max(1, n_pos)
    stats = EpochStats(l_ctc.item(), l_s2s.item(), skd_val, total.item(), accuracy, ent)
    return total, stats, n_pos


def evaluate(batches: list[Batch], model_cfg: ModelConfig, params: ParameterStore,
             alpha: float, label_smoothing: float) -> EpochStats:
    sums = np.zeros(4)
    n_correct = n_pos = 0
    with T.no_grad():
        for batch in batches:
            _, stats, pos = batch_loss(batch, model_cfg, params, EVAL_CTX,
                                       alpha, label_smoothing)
            sums += np.array([stats.l_ctc, stats.l_s2s, stats.total, 0.0]) * pos
            n_correct += round(stats.accuracy * pos)
            n_pos += pos
    return EpochStats(sums[0] / n_pos, sums[1] / n_pos, 0.0, sums[2] / n_pos,
                      n_correct / n_pos, 0.0)


def _record_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def run_training(cfg: ExperimentConfig, out_dir, mode: str = "plain",
                 init_checkpoint=None, log=print) -> list[dict]:
    """Train per `mode`: "plain" (joint loss), "skd" (self-distillation from
    scratch with the linear phi ramp), or "finetune" (FS-KD at fixed phi/lr).

    Writes the resolved config, per-epoch checkpoints (pruned to the best k
    by dev token accuracy), and an append-only JSONL epoch log.
    """
    from .config import dump_config

    if mode not in ("plain", "skd", "finetune"):
        raise ValueError(f"unknown training mode {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not cfg.train_manifest:
        raise ConfigError("paths.train_manifest is required for training")

    with RunLock(out_dir):
        (out_dir / "config.resolved").write_text(dump_config(cfg), encoding="utf-8")
        vocab = Vocabulary(cfg.alphabet)
        train_entries = load_manifest(cfg.train_manifest)
        dev_entries = load_manifest(cfg.dev_manifest) if cfg.dev_manifest else train_entries

        seed = cfg.train.seed
        model_cfg = cfg.model
        params = init_model_params(model_cfg, seed)
        if init_checkpoint is not None:
            params.load_state_dict(load_checkpoint(init_checkpoint))

        if mode == "finetune":
            adam = AdamState(fixed_lr=cfg.train.finetune_lr)
            n_epochs = cfg.train.finetune_epochs
            kd = KDConfig(phi_final=cfg.kd.phi_final, total_epochs=n_epochs, mode="fixed",
                          teacher_snapshot_cadence=cfg.kd.teacher_snapshot_cadence,
                          freeze_teacher=cfg.kd.freeze_teacher,
                          temperature=cfg.kd.temperature)
        else:
            adam = AdamState(scale=cfg.train.lr_scale, d_att=model_cfg.d_att,
                             warmup_steps=cfg.train.warmup_steps)
            n_epochs = cfg.train.epochs
            kd = cfg.kd

        streams = StreamCache(seed)
        train_batches = make_batches(train_entries, vocab, cfg.train.batch_size)
        dev_batches = make_batches(dev_entries, vocab, cfg.train.batch_size)

        teacher = snapshot_teacher(params) if mode == "finetune" else None
        records: list[dict] = []
        best: list[tuple[float, int, Path]] = []  # (accuracy, epoch, path)
        record_path = out_dir / "epochs.jsonl"

        for epoch in range(1, n_epochs + 1):
            t0 = time.perf_counter()
            if mode == "skd":
                phi = phi_schedule(epoch, kd)
                if teacher is None or (not kd.freeze_teacher
                                       and (epoch - 1) % kd.teacher_snapshot_cadence == 0):
                    teacher = snapshot_teacher(params)
            elif mode == "finetune":
                phi = kd.phi_final
                if (not kd.freeze_teacher and epoch > 1
                        and (epoch - 1) % kd.teacher_snapshot_cadence == 0):
                    teacher = snapshot_teacher(params)
            else:
                phi = 0.0

            order = stream(seed, f"shuffle/epoch{epoch}").permutation(len(train_batches))
            agg = np.zeros(5)
            n_total = 0
            ctx = ForwardCtx(train=True, dropout=model_cfg.dropout, streams=streams)
            for b in order:
                batch = train_batches[b]
                batch_in = batch
                if cfg.train.specaugment:
                    batch_in = _augment_batch(batch, cfg, streams)
                total, stats, n_pos = batch_loss(
                    batch_in, model_cfg, params, ctx, cfg.train.alpha,
                    cfg.train.label_smoothing, phi=phi,
                    teacher=teacher if phi > 0.0 else None,
                    temperature=kd.temperature)
                if not np.isfinite(total.data):
                    raise TrasrError(
                        f"non-finite loss at epoch {epoch}, batch of {batch.utt_ids}")
                total.backward()
                adam_step(params, adam)
                agg += np.array([stats.l_ctc, stats.l_s2s, stats.l_skd, stats.total,
                                 stats.teacher_entropy]) * n_pos
                n_total += n_pos

            dev = evaluate(dev_batches, model_cfg, params, cfg.train.alpha,
                           cfg.train.label_smoothing)
            ckpt_path = out_dir / f"epoch{epoch:04d}.ckpt"
            save_checkpoint(ckpt_path, params.state_dict())

            record = {
                "epoch": epoch,
                "train_ctc": agg[0] / n_total,
                "train_s2s": agg[1] / n_total,
                "train_skd": agg[2] / n_total,
                "train_total": agg[3] / n_total,
                "teacher_entropy": agg[4] / n_total,
                "phi": phi,
                "dev_loss": dev.total,
                "dev_accuracy": dev.accuracy,
                "checkpoint": ckpt_path.name,
                "wall_time": time.perf_counter() - t0,
            }
            records.append(record)
            with open(record_path, "a", encoding="utf-8") as fh:
                fh.write(_record_line(record) + "\n")
            log(f"epoch {epoch}: loss {record['train_total']:.4f} "
                f"dev_acc {dev.accuracy:.4f}")

            best.append((dev.accuracy, epoch, ckpt_path))
            best.sort(key=lambda x: (-x[0], x[1]))
            keep = {p for _, _, p in best[: cfg.train.keep_best]} | {ckpt_path}
            for _, _, p in best[cfg.train.keep_best:]:
                if p not in keep and p.exists():
                    p.unlink()

        best_paths = [p.name for _, _, p in best[: cfg.train.keep_best] if p.exists()]
        (out_dir / "best.json").write_text(json.dumps(best_paths), encoding="utf-8")
    return records


def _augment_batch(batch: Batch, cfg: ExperimentConfig, streams: StreamCache) -> Batch:
    feats = batch.features.copy()
    for i, utt_id in enumerate(batch.utt_ids):
        seq = FeatureSequence(feats[i], int(batch.feature_lengths[i]))
        aug = spec_augment(seq, streams.get(f"specaug/{utt_id}"),
                           n_freq_masks=cfg.train.freq_masks,
                           freq_mask_max=cfg.train.freq_mask_max,
                           n_time_masks=cfg.train.time_masks,
                           time_mask_max=cfg.train.time_mask_max)
        feats[i] = aug.features
    return Batch(batch.utt_ids, feats, batch.feature_lengths,
                 batch.targets, batch.target_lengths)


# -- LM training -------------------------------------------------------------


def run_lm_training(cfg: ExperimentConfig, transcripts: list[str], out_dir,
                    log=print) -> list[dict]:
    """Train the decoder-only LM on next-token prediction over transcripts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not transcripts:
        raise ConfigError("no transcripts to train the LM on")
    vocab = Vocabulary(cfg.alphabet)
    lm_cfg = cfg.lm
    seed = cfg.train.seed
    params = init_lm_params(lm_cfg, seed)
    adam = AdamState(scale=cfg.lm_train.lr_scale, d_att=lm_cfg.d_att,
                     warmup_steps=cfg.lm_train.warmup_steps)
    streams = StreamCache(seed)
    tokenized = [vocab.tokenize(t) for t in transcripts]
    records = []
    for epoch in range(1, cfg.lm_train.epochs + 1):
        order = stream(seed, f"lm-shuffle/epoch{epoch}").permutation(len(tokenized))
        ctx = ForwardCtx(train=True, dropout=lm_cfg.dropout, streams=streams)
        nll_sum, n_tok = 0.0, 0
        for start in range(0, len(order), cfg.lm_train.batch_size):
            chunk = order[start:start + cfg.lm_train.batch_size]
            total = Tensor(0.0)
            n_pos = 0
            for j in chunk:
                ids = tokenized[j]
                prefix = [Vocabulary.SOS] + ids
                targets = ids + [Vocabulary.EOS]
                logits = lm_forward(prefix, lm_cfg, params, ctx)
                total = total + ce_label_smoothed(logits, targets, 0.0, reduce="sum")
                n_pos += len(targets)
            loss = total * (1.0 / n_pos)
            if not np.isfinite(loss.data):
                raise TrasrError(f"non-finite LM loss at epoch {epoch}")
            loss.backward()
            adam_step(params, adam)
            nll_sum += total.item()
            n_tok += n_pos
        ppl = float(np.exp(nll_sum / n_tok))
        records.append({"epoch": epoch, "nll": nll_sum / n_tok, "perplexity": ppl})
        log(f"lm epoch {epoch}: ppl {ppl:.3f}")
    save_checkpoint(out_dir / "lm.ckpt", params.state_dict())
    return records


def lm_perplexity(transcripts, lm_cfg: LMConfig, params: ParameterStore,
                  alphabet: str) -> float:
    vocab = Vocabulary(alphabet)
    nll, n = 0.0, 0
    with T.no_grad():
        for t in transcripts:
            ids = vocab.tokenize(t)
            logits = lm_forward([Vocabulary.SOS] + ids, lm_cfg, params)
            lp = T.log_softmax(logits, axis=-1).data
            targets = ids + [Vocabulary.EOS]
            nll -= sum(lp[i, tgt] for i, tgt in enumerate(targets))
            n += len(targets)
    return float(np.exp(nll / n))


# -- decoding -----------------------------------------------------------------


@dataclass
class DecodeResult:
    utt_id: str
    reference: str
    hypothesis: str
    score: float
    finished: bool


def decode_utterance(seq: FeatureSequence, model_cfg: ModelConfig,
                     params: ParameterStore, beam_cfg: BeamConfig, vocab: Vocabulary,
                     lm_cfg: LMConfig | None = None,
                     lm_params: ParameterStore | None = None):
    with T.no_grad():
        x_e, n = encoder_forward(seq, model_cfg, params)
        ctc_lp = ctc_log_probs(x_e, params).data
    scorer = CtcPrefixScorer(ctc_lp, blank_id=Vocabulary.BLANK) \
        if beam_cfg.ctc_weight > 0 else None

    def s2s_fn(prefix):
        with T.no_grad():
            logits = decode_forward(prefix, x_e, model_cfg, params)
            return T.log_softmax(logits, axis=-1).data[-1]

    lm_fn = None
    if beam_cfg.lm_weight != 0.0 and lm_params is not None:
        def lm_fn(prefix):
            with T.no_grad():
                logits = lm_forward(prefix, lm_cfg, lm_params)
                return T.log_softmax(logits, axis=-1).data[-1]

    return beam_search(s2s_fn, beam_cfg, Vocabulary.SOS, Vocabulary.EOS,
                       vocab.character_ids(), n, ctc_scorer=scorer, lm_fn=lm_fn)


def decode_dataset(entries: list[ManifestEntry], model_cfg: ModelConfig,
                   params: ParameterStore, beam_cfg: BeamConfig, vocab: Vocabulary,
                   lm_cfg=None, lm_params=None, log=lambda s: None):
    results = []
    total = EditStats(0, 0, 0, 0, 0)
    for e in entries:
        seq = load_features(e.feature_path)
        res = decode_utterance(seq, model_cfg, params, beam_cfg, vocab,
                               lm_cfg=lm_cfg, lm_params=lm_params)
        text = vocab.detokenize(res.tokens)
        results.append(DecodeResult(e.utt_id, e.transcript, text, res.score, res.finished))
        total = total + wer(e.transcript, text)
        log(f"{e.utt_id}\t{text}")
    return results, total
