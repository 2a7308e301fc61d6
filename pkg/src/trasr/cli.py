"""Command-line entry points.

Verbs: train, train-skd, finetune-skd, decode, average, train-lm,
benchmark, synth-data. Exit codes: 0 success, 2 configuration error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import average_checkpoints, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_config, resolve
from .data import (SyntheticTaskSpec, Vocabulary, load_manifest, synth_generate)
from .errors import ConfigError, TrasrError
from .frontend import KINDS, FeatureSequence, minimum_input_length
from .model import (MacCounter, ForwardCtx, ModelConfig, count_attention_macs,
                    encoder_forward, init_model_params, init_lm_params)
from .search import BeamConfig
from .training import (decode_dataset, run_lm_training, run_training)


def _load_cfg(args) -> ExperimentConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        overrides[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    if args.config:
        return load_config(args.config, overrides)
    return resolve({}, overrides)


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run_training(cfg, args.out, mode="plain")
    return 0


def cmd_train_skd(args) -> int:
    cfg = _load_cfg(args)
    run_training(cfg, args.out, mode="skd")
    return 0


def cmd_finetune_skd(args) -> int:
    cfg = _load_cfg(args)
    run_training(cfg, args.out, mode="finetune", init_checkpoint=args.init)
    return 0


def cmd_decode(args) -> int:
    cfg = _load_cfg(args)
    beam_cfg = cfg.decode
    if args.greedy:
        beam_cfg = BeamConfig(beam_size=1, ctc_weight=0.0, lm_weight=0.0,
                              insertion_penalty=0.0, max_len_ratio=beam_cfg.max_len_ratio)
    lm_params = None
    lm_path = args.lm_checkpoint or (cfg.lm_checkpoint or None)
    if beam_cfg.lm_weight != 0.0:
        if lm_path is None:
            raise ConfigError("decode.lm_weight != 0 but no LM checkpoint given; "
                              "pass --lm-checkpoint or set decode.lm_weight = 0")
        lm_params = init_lm_params(cfg.lm, cfg.train.seed)
        lm_params.load_state_dict(load_checkpoint(lm_path))

    vocab = Vocabulary(cfg.alphabet)
    params = init_model_params(cfg.model, cfg.train.seed)
    params.load_state_dict(load_checkpoint(args.checkpoint))
    entries = load_manifest(args.manifest)

    args.out.mkdir(parents=True, exist_ok=True)
    results, totals = decode_dataset(entries, cfg.model, params, beam_cfg, vocab,
                                     lm_cfg=cfg.lm, lm_params=lm_params)
    with open(args.out / "hyps.tsv", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(f"{r.utt_id}\t{r.hypothesis}\n")
    report = {
        "utterances": len(results),
        "wer": totals.rate,
        "errors": totals.errors,
        "substitutions": totals.substitutions,
        "insertions": totals.insertions,
        "deletions": totals.deletions,
        "ref_words": totals.ref_length,
        "unfinished": sum(not r.finished for r in results),
    }
    (args.out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    (args.out / "config.resolved").write_text(dump_config(cfg), encoding="utf-8")
    print(f"WER {100 * totals.rate:.2f}% "
          f"(S={totals.substitutions} I={totals.insertions} D={totals.deletions} "
          f"over {totals.ref_length} words)")
    return 0


def cmd_average(args) -> int:
    state = average_checkpoints(args.checkpoints)
    save_checkpoint(args.out, state)
    print(f"averaged {len(args.checkpoints)} checkpoints -> {args.out}")
    return 0


def cmd_train_lm(args) -> int:
    cfg = _load_cfg(args)
    entries = load_manifest(args.manifest)
    run_lm_training(cfg, [e.transcript for e in entries], args.out)
    return 0


def cmd_synth_data(args) -> int:
    spec = SyntheticTaskSpec(alphabet=args.alphabet, feature_dim=args.feature_dim,
                             frames_per_token=tuple(args.frames_per_token),
                             noise_std=args.noise_std)
    manifest = synth_generate(spec, args.out, args.n_utterances,
                              words_range=tuple(args.words),
                              word_len_range=tuple(args.word_len), seed=args.seed or 0)
    print(f"wrote {args.n_utterances} utterances, manifest at {manifest}")
    return 0


ARCHES = ("no-tr", "tr0", "tr2", "pyramidal")


def _arch_config(base: ModelConfig, arch: str, frontend_kind: str) -> ModelConfig:
    total = base.num_encoder_layers
    fe = replace(base.frontend, kind=frontend_kind, channels=None,
                 apply_positional_encoding=None)
    common = dict(dec_layers=base.dec_layers, d_att=base.d_att, d_ff=base.d_ff,
                  heads=base.heads, post_norm=base.post_norm,
                  vocab_size=base.vocab_size, dropout=0.0, frontend=fe)
    if arch == "no-tr":
        return ModelConfig(e1=0, e2=total, tr_enabled=False, pyramidal=False, **common)
    if arch == "tr0":
        return ModelConfig(e1=0, e2=total, tr_enabled=True, pyramidal=False, **common)
    if arch == "tr2":
        return ModelConfig(e1=2, e2=total - 2, tr_enabled=True, pyramidal=False, **common)
    if arch == "pyramidal":
        return ModelConfig(e1=0, e2=total, tr_enabled=False, pyramidal=True, **common)
    raise ValueError(f"unknown architecture {arch!r}")


def benchmark_cells(cfg: ExperimentConfig, lengths: list[int], repetitions: int = 10,
                    log=lambda s: None) -> list[dict]:
    """Analytic vs measured attention MACs and wall-clock medians per cell."""
    cells = []
    for length in lengths:
        for arch in ARCHES:
            for kind in KINDS:
                mcfg = _arch_config(cfg.model, arch, kind)
                analytic = count_attention_macs(mcfg, length)
                cell = {"length": length, "arch": arch, "frontend": kind,
                        "analytic_total_macs": analytic["total_macs"],
                        "analytic_score_macs": analytic["score_macs"],
                        "final_length": analytic["final_length"]}
                if length < minimum_input_length(kind) or analytic["final_length"] < 1:
                    cell.update(measured_macs=None, median_ms=None, note="too short")
                    cells.append(cell)
                    continue
                params = init_model_params(mcfg, cfg.train.seed)
                feats = np.random.default_rng(0).normal(
                    size=(length, mcfg.frontend.feature_dim)).astype(np.float32)
                seq = FeatureSequence(feats, length)
                times = []
                measured = None
                for _ in range(max(1, repetitions)):
                    counter = MacCounter()
                    t0 = time.perf_counter()
                    with T.no_grad():
                        encoder_forward(seq, mcfg, params, ForwardCtx(counter=counter))
                    times.append((time.perf_counter() - t0) * 1e3)
                    measured = counter.total
                cell.update(measured_macs=measured,
                            median_ms=statistics.median(times), note="")
                cells.append(cell)
                log(f"{length} {arch} {kind}: {measured} MACs, "
                    f"{cell['median_ms']:.2f} ms")
    return cells


def cmd_benchmark(args) -> int:
    cfg = _load_cfg(args)
    args.out.mkdir(parents=True, exist_ok=True)
    cells = benchmark_cells(cfg, args.lengths, repetitions=args.repetitions)
    fields = ["length", "arch", "frontend", "final_length", "analytic_total_macs",
              "analytic_score_macs", "measured_macs", "median_ms", "note"]
    with open(args.out / "benchmark.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(cells)
    header = f"{'len':>5} {'arch':<10} {'frontend':<12} {'macs':>14} {'ms':>9}"
    print(header)
    print("-" * len(header))
    mismatches = 0
    for c in cells:
        if c["measured_macs"] is None:
            print(f"{c['length']:>5} {c['arch']:<10} {c['frontend']:<12} "
                  f"{'too short':>14} {'-':>9}")
            continue
        if c["measured_macs"] != c["analytic_total_macs"]:
            mismatches += 1
        print(f"{c['length']:>5} {c['arch']:<10} {c['frontend']:<12} "
              f"{c['measured_macs']:>14} {c['median_ms']:>9.2f}")
    if mismatches:
        raise TrasrError(f"{mismatches} cells where measured MACs != analytic count")
    print(f"all measured MAC counts match the analytic formula "
          f"({sum(c['measured_macs'] is not None for c in cells)} cells)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trasr",
                                     description="Desk-scale Transformer ASR with "
                                                 "time reduction and self-distillation")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="pre-train with the joint CTC/attention loss")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-skd", help="train from scratch with self-distillation")
    _common(p)
    p.set_defaults(fn=cmd_train_skd)

    p = sub.add_parser("finetune-skd", help="fine-tune a checkpoint with self-distillation")
    _common(p)
    p.add_argument("--init", type=Path, required=True, help="initial checkpoint")
    p.set_defaults(fn=cmd_finetune_skd)

    p = sub.add_parser("decode", help="beam-search decode a manifest")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--lm-checkpoint", type=Path, default=None)
    p.add_argument("--greedy", action="store_true",
                   help="beam 1, no CTC/LM/penalty terms")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("average", help="average checkpoints parameter-wise")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint path")
    p.add_argument("checkpoints", nargs="+", type=Path)
    p.set_defaults(fn=cmd_average)

    p = sub.add_parser("train-lm", help="train the shallow-fusion language model")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True,
                   help="manifest providing transcripts")
    p.set_defaults(fn=cmd_train_lm)

    p = sub.add_parser("benchmark", help="attention-cost benchmark across architectures")
    _common(p)
    p.add_argument("--lengths", type=int, nargs="+", required=True)
    p.add_argument("--repetitions", type=int, default=10)
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-utterances", type=int, default=50)
    p.add_argument("--alphabet", type=str, default="abcdefgh ")
    p.add_argument("--feature-dim", type=int, default=40)
    p.add_argument("--frames-per-token", type=int, nargs=2, default=(4, 8))
    p.add_argument("--words", type=int, nargs=2, default=(1, 3))
    p.add_argument("--word-len", type=int, nargs=2, default=(2, 4))
    p.add_argument("--noise-std", type=float, default=0.05)
    p.set_defaults(fn=cmd_synth_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrasrError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
