"""Front-ends that map raw feature sequences to the encoder's frame rate.

Five kinds are supported: conv2d4 / conv2d8 (valid 3x3 convolutions with
stride 2, one stage per halving), vggconv2d4 / vggconv2d8 (two 3x3 stride-1
convolutions with padding 1, a 2x2 max-pool, and a layer norm per stage),
and identity (a plain linear projection, no length change).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import SequenceTooShortError
from .optim import ParameterStore
from .rng import stream
from .tensor import Tensor

KINDS = ("conv2d4", "conv2d8", "vggconv2d4", "vggconv2d8", "identity")

REDUCTION = {
    "conv2d4": 4,
    "conv2d8": 8,
    "vggconv2d4": 4,
    "vggconv2d8": 8,
    "identity": 1,
}

_N_STAGES = {"conv2d4": 2, "conv2d8": 3, "vggconv2d4": 2, "vggconv2d8": 3, "identity": 0}


@dataclass
class FeatureSequence:
    """T x F feature matrix plus the true frame count (rows beyond are padding)."""

    features: np.ndarray
    length: int

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {self.features.shape}")
        if not 0 < self.length <= self.features.shape[0]:
            raise ValueError(
                f"length {self.length} outside allocated rows {self.features.shape[0]}")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def trimmed(self) -> np.ndarray:
        return self.features[: self.length]


@dataclass
class FrontendConfig:
    kind: str = "conv2d4"
    d_att: int = 256
    feature_dim: int = 40
    channels: tuple[int, ...] | None = None
    apply_positional_encoding: bool | None = None  # None: on for conv, off for vgg

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown front-end kind {self.kind!r}; choose from {KINDS}")
        if self.channels is None:
            if self.kind.startswith("vgg"):
                self.channels = (64, 128, 256)[: _N_STAGES[self.kind]]
            elif self.kind.startswith("conv"):
                self.channels = (self.d_att,) * _N_STAGES[self.kind]
            else:
                self.channels = ()
        self.channels = tuple(self.channels)
        if len(self.channels) != _N_STAGES[self.kind]:
            raise ValueError(
                f"{self.kind} needs {_N_STAGES[self.kind]} channel counts, got {self.channels}")
        if self.apply_positional_encoding is None:
            self.apply_positional_encoding = not self.kind.startswith("vgg")

    @property
    def reduction(self) -> int:
        return REDUCTION[self.kind]


def _conv_len(L: int) -> int:
    return max(0, (L - 3) // 2 + 1)


def output_length(kind: str, T_in: int) -> int:
    """Frames coming out of the front-end; 0 means the input is too short."""
    if T_in < 1:
        raise ValueError(f"sequence length must be >= 1, got {T_in}")
    n = T_in
    if kind.startswith("conv"):
        for _ in range(_N_STAGES[kind]):
            n = _conv_len(n)
    elif kind.startswith("vgg"):
        for _ in range(_N_STAGES[kind]):
            n = n // 2
    elif kind != "identity":
        raise ValueError(f"unknown front-end kind {kind!r}")
    return n


def minimum_input_length(kind: str) -> int:
    t = 1
    while output_length(kind, t) < 1:
        t += 1
    return t


def positional_encoding(n: int, d: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos."""
    if d % 2 != 0:
        raise ValueError(f"positional encoding needs an even width, got {d}")
    t = np.arange(n, dtype=np.float64)[:, None]
    inv = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)[None, :]
    pe = np.empty((n, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(t * inv)
    pe[:, 1::2] = np.cos(t * inv)
    return pe.astype(dtype)


def init_frontend_params(cfg: FrontendConfig, store: ParameterStore, seed: int,
                         prefix: str = "frontend", dtype=np.float32) -> None:
    """Create the front-end's parameters in `store` under `prefix`."""

    def xavier(name, shape, fan_in, fan_out):
        rng = stream(seed, f"init/{prefix}.{name}")
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}.{name}", Tensor(
            rng.uniform(-bound, bound, size=shape).astype(dtype)))

    def zeros(name, shape):
        store.add(f"{prefix}.{name}", Tensor(np.zeros(shape, dtype=dtype)))

    F = cfg.feature_dim
    if cfg.kind.startswith("conv"):
        c_in, f = 1, F
        for s, c_out in enumerate(cfg.channels):
            xavier(f"conv{s}.w", (c_out, c_in, 3, 3), c_in * 9, c_out * 9)
            zeros(f"conv{s}.b", (c_out,))
            c_in, f = c_out, _conv_len(f)
        flat = c_in * f
    elif cfg.kind.startswith("vgg"):
        c_in, f = 1, F
        for s, c_out in enumerate(cfg.channels):
            xavier(f"stage{s}.conv0.w", (c_out, c_in, 3, 3), c_in * 9, c_out * 9)
            zeros(f"stage{s}.conv0.b", (c_out,))
            xavier(f"stage{s}.conv1.w", (c_out, c_out, 3, 3), c_out * 9, c_out * 9)
            zeros(f"stage{s}.conv1.b", (c_out,))
            f = f // 2
            store.add(f"{prefix}.stage{s}.ln.gain", Tensor(np.ones(c_out * f, dtype=dtype)))
            zeros(f"stage{s}.ln.bias", (c_out * f,))
            c_in = c_out
        flat = c_in * f
    else:
        flat = F
    xavier("proj.w", (flat, cfg.d_att), flat, cfg.d_att)
    zeros("proj.b", (cfg.d_att,))


def subsample(x: FeatureSequence, cfg: FrontendConfig, params: ParameterStore,
              prefix: str = "frontend") -> tuple[Tensor, int]:
    """Map a feature sequence to (X_0 of shape [n_sub, d_att], n_sub)."""
    n_sub = output_length(cfg.kind, x.length)
    if n_sub < 1:
        raise SequenceTooShortError(
            f"{cfg.kind} needs at least {minimum_input_length(cfg.kind)} frames, "
            f"got {x.length}")
    feats = np.asarray(x.trimmed())
    dtype = feats.dtype if feats.dtype in (np.float32, np.float64) else np.float32
    h = Tensor(feats.astype(dtype, copy=False))

    if cfg.kind == "identity":
        out = T.matmul(h, params[f"{prefix}.proj.w"]) + params[f"{prefix}.proj.b"]
    else:
        h = T.reshape(h, 1, 1, x.length, cfg.feature_dim)
        if cfg.kind.startswith("conv"):
            for s in range(len(cfg.channels)):
                h = T.relu(T.conv2d(h, params[f"{prefix}.conv{s}.w"],
                                    params[f"{prefix}.conv{s}.b"], stride=2, padding=0))
        else:
            for s in range(len(cfg.channels)):
                h = T.relu(T.conv2d(h, params[f"{prefix}.stage{s}.conv0.w"],
                                    params[f"{prefix}.stage{s}.conv0.b"], stride=1, padding=1))
                h = T.relu(T.conv2d(h, params[f"{prefix}.stage{s}.conv1.w"],
                                    params[f"{prefix}.stage{s}.conv1.b"], stride=1, padding=1))
                h = T.max_pool2d(h, 2)
                _, c, t, f = h.shape
                h = T.reshape(T.transpose(h, (0, 2, 1, 3)), t, c * f)
                h = T.layer_norm(h, params[f"{prefix}.stage{s}.ln.gain"],
                                 params[f"{prefix}.stage{s}.ln.bias"])
                h = T.reshape(h, 1, t, c, f)
                h = T.transpose(h, (0, 2, 1, 3))
        _, c, t, f = h.shape
        h = T.reshape(T.transpose(h, (0, 2, 1, 3)), t, c * f)
        out = T.matmul(h, params[f"{prefix}.proj.w"]) + params[f"{prefix}.proj.b"]

    if cfg.apply_positional_encoding:
        out = out + Tensor(positional_encoding(n_sub, cfg.d_att, dtype=out.dtype))
    return out, n_sub


def spec_augment(x: FeatureSequence, rng: np.random.Generator,
                 n_freq_masks: int = 2, freq_mask_max: int = 10,
                 n_time_masks: int = 2, time_mask_max: int = 20) -> FeatureSequence:
    """Zero random frequency bands and time bands; train-time augmentation."""
    feats = x.features.copy()
    F = x.feature_dim
    f_cap = min(freq_mask_max, max(0, F - 1))
    t_cap = min(time_mask_max, max(0, x.length - 1))
    for _ in range(n_freq_masks):
        f = int(rng.integers(0, f_cap + 1))
        f0 = int(rng.integers(0, F - f + 1))
        feats[: x.length, f0:f0 + f] = 0.0
    for _ in range(n_time_masks):
        t = int(rng.integers(0, t_cap + 1))
        t0 = int(rng.integers(0, x.length - t + 1))
        feats[t0:t0 + t, :] = 0.0
    return FeatureSequence(feats, x.length)
