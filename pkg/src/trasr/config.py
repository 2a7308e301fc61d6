"""Flat `section.key = value` experiment configuration.

Lines are UTF-8, '#' starts a comment, values may be single- or
double-quoted to preserve surrounding whitespace. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .frontend import FrontendConfig
from .losses import KDConfig
from .model import LMConfig, ModelConfig
from .search import BeamConfig


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default); None default means "required when used"
KEYS: dict[str, tuple] = {
    "model.e1": (int, 2),
    "model.e2": (int, 10),
    "model.dec_layers": (int, 6),
    "model.d_att": (int, 256),
    "model.d_ff": (int, 2048),
    "model.heads": (int, 4),
    "model.tr_enabled": (_bool, True),
    "model.pyramidal": (_bool, False),
    "model.post_norm": (_bool, False),
    "model.dropout": (float, 0.1),
    "model.frontend": (str, "conv2d4"),
    "model.frontend_pe": (str, "auto"),  # auto | on | off
    "model.feature_dim": (int, 40),
    "data.alphabet": (str, " abcdefghijklmnopqrstuvwxyz'"),
    "train.epochs": (int, 150),
    "train.batch_size": (int, 8),
    "train.alpha": (float, 0.3),
    "train.label_smoothing": (float, 0.1),
    "train.lr_scale": (float, 5.0),
    "train.warmup_steps": (int, 25000),
    "train.seed": (int, 1),
    "train.keep_best": (int, 5),
    "train.finetune_lr": (float, 1e-4),
    "train.finetune_epochs": (int, 50),
    "train.specaugment": (_bool, True),
    "train.freq_masks": (int, 2),
    "train.freq_mask_max": (int, 10),
    "train.time_masks": (int, 2),
    "train.time_mask_max": (int, 20),
    "kd.phi_final": (float, 0.5),
    "kd.mode": (str, "linear"),
    "kd.cadence": (int, 1),
    "kd.freeze_teacher": (_bool, False),
    "kd.temperature": (float, 1.0),
    "decode.beam_size": (int, 20),
    "decode.ctc_weight": (float, 0.5),
    "decode.lm_weight": (float, 0.7),
    "decode.insertion_penalty": (float, 2.0),
    "decode.max_len_ratio": (float, 1.0),
    "lm.layers": (int, 2),
    "lm.d_att": (int, 64),
    "lm.d_ff": (int, 256),
    "lm.heads": (int, 2),
    "lm.dropout": (float, 0.0),
    "lm.epochs": (int, 50),
    "lm.batch_size": (int, 8),
    "lm.lr_scale": (float, 1.0),
    "lm.warmup_steps": (int, 100),
    "paths.train_manifest": (str, ""),
    "paths.dev_manifest": (str, ""),
    "paths.lm_checkpoint": (str, ""),
}


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    alpha: float
    label_smoothing: float
    lr_scale: float
    warmup_steps: int
    seed: int
    keep_best: int
    finetune_lr: float
    finetune_epochs: int
    specaugment: bool
    freq_masks: int
    freq_mask_max: int
    time_masks: int
    time_mask_max: int


@dataclass
class LMTrainConfig:
    epochs: int
    batch_size: int
    lr_scale: float
    warmup_steps: int


@dataclass
class ExperimentConfig:
    raw: dict
    model: ModelConfig
    train: TrainConfig
    kd: KDConfig
    decode: BeamConfig
    lm: LMConfig
    lm_train: LMTrainConfig
    alphabet: str
    train_manifest: str
    dev_manifest: str
    lm_checkpoint: str

    @property
    def vocab_size(self) -> int:
        return self.model.vocab_size


def parse_flat(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip() if not value.strip().startswith(("'", '"')) \
            else value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def resolve(values: dict[str, str] | None = None,
            overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Apply defaults, parse types, and assemble the config dataclasses."""
    merged = dict(values or {})
    for k, v in (overrides or {}).items():
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}")
        merged[k] = v
    raw: dict = {}
    for key, (parser, default) in KEYS.items():
        if key in merged:
            try:
                raw[key] = parser(merged[key])
            except (ValueError, TypeError) as e:
                raise ConfigError(f"bad value for {key!r}: {merged[key]!r} ({e})") from e
        else:
            raw[key] = default

    alphabet = raw["data.alphabet"]
    vocab_size = 5 + len(dict.fromkeys(alphabet))
    pe_mode = raw["model.frontend_pe"]
    if pe_mode not in ("auto", "on", "off"):
        raise ConfigError(f"model.frontend_pe must be auto/on/off, got {pe_mode!r}")
    try:
        frontend = FrontendConfig(
            kind=raw["model.frontend"],
            d_att=raw["model.d_att"],
            feature_dim=raw["model.feature_dim"],
            apply_positional_encoding=None if pe_mode == "auto" else pe_mode == "on",
        )
        model = ModelConfig(
            e1=raw["model.e1"], e2=raw["model.e2"], dec_layers=raw["model.dec_layers"],
            d_att=raw["model.d_att"], d_ff=raw["model.d_ff"], heads=raw["model.heads"],
            tr_enabled=raw["model.tr_enabled"], pyramidal=raw["model.pyramidal"],
            post_norm=raw["model.post_norm"], vocab_size=vocab_size,
            dropout=raw["model.dropout"], frontend=frontend,
        )
        kd = KDConfig(
            phi_final=raw["kd.phi_final"], total_epochs=raw["train.epochs"],
            mode=raw["kd.mode"], teacher_snapshot_cadence=raw["kd.cadence"],
            freeze_teacher=raw["kd.freeze_teacher"], temperature=raw["kd.temperature"],
        )
        decode = BeamConfig(
            beam_size=raw["decode.beam_size"], ctc_weight=raw["decode.ctc_weight"],
            lm_weight=raw["decode.lm_weight"],
            insertion_penalty=raw["decode.insertion_penalty"],
            max_len_ratio=raw["decode.max_len_ratio"],
        )
        lm = LMConfig(layers=raw["lm.layers"], d_att=raw["lm.d_att"], d_ff=raw["lm.d_ff"],
                      heads=raw["lm.heads"], vocab_size=vocab_size,
                      dropout=raw["lm.dropout"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    train = TrainConfig(
        epochs=raw["train.epochs"], batch_size=raw["train.batch_size"],
        alpha=raw["train.alpha"], label_smoothing=raw["train.label_smoothing"],
        lr_scale=raw["train.lr_scale"], warmup_steps=raw["train.warmup_steps"],
        seed=raw["train.seed"], keep_best=raw["train.keep_best"],
        finetune_lr=raw["train.finetune_lr"], finetune_epochs=raw["train.finetune_epochs"],
        specaugment=raw["train.specaugment"], freq_masks=raw["train.freq_masks"],
        freq_mask_max=raw["train.freq_mask_max"], time_masks=raw["train.time_masks"],
        time_mask_max=raw["train.time_mask_max"],
    )
    lm_train = LMTrainConfig(epochs=raw["lm.epochs"], batch_size=raw["lm.batch_size"],
                             lr_scale=raw["lm.lr_scale"], warmup_steps=raw["lm.warmup_steps"])
    return ExperimentConfig(
        raw=raw, model=model, train=train, kd=kd, decode=decode, lm=lm,
        lm_train=lm_train, alphabet=alphabet,
        train_manifest=raw["paths.train_manifest"],
        dev_manifest=raw["paths.dev_manifest"],
        lm_checkpoint=raw["paths.lm_checkpoint"],
    )


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    return resolve(parse_flat(Path(path).read_text(encoding="utf-8")), overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize the resolved config; re-parsing it reproduces the run."""
    lines = ["# resolved configuration"]
    for key in sorted(cfg.raw):
        value = cfg.raw[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        value = str(value)
        if value != value.strip() or value == "":
            value = f'"{value}"'
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
