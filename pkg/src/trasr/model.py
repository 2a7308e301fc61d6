"""Encoder with an insertable time-reduction layer, the pyramidal baseline,
the decoder, the CTC head, and a decoder-only language model.

All forward functions take a ParameterStore plus a ForwardCtx carrying
train/eval mode, dropout streams, and the optional attention MAC counter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import SequenceTooShortError, ShapeError
from .frontend import (FeatureSequence, FrontendConfig, output_length,
                       positional_encoding, init_frontend_params, subsample)
from .optim import ParameterStore
from .rng import StreamCache, stream
from .tensor import Tensor


@dataclass
class ModelConfig:
    e1: int = 2
    e2: int = 10
    dec_layers: int = 6
    d_att: int = 256
    d_ff: int = 2048
    heads: int = 4
    tr_enabled: bool = True
    pyramidal: bool = False
    post_norm: bool = False
    vocab_size: int = 32
    dropout: float = 0.1
    frontend: FrontendConfig | None = None

    def __post_init__(self):
        if self.d_att % self.heads != 0:
            raise ValueError(f"d_att={self.d_att} not divisible by heads={self.heads}")
        if self.tr_enabled and self.pyramidal:
            raise ValueError("tr_enabled and pyramidal are mutually exclusive")
        if self.pyramidal and self.num_encoder_layers < 3:
            raise ValueError("pyramidal encoder needs at least 3 layers")
        if self.frontend is None:
            self.frontend = FrontendConfig(d_att=self.d_att)
        if self.frontend.d_att != self.d_att:
            raise ValueError("front-end output width must equal d_att")

    @property
    def num_encoder_layers(self) -> int:
        return self.e1 + self.e2


class MacCounter:
    """Accumulates attention multiply-adds (scores + weighted sum)."""

    def __init__(self):
        self.total = 0

    def add(self, n_q: int, n_k: int, d_k: int) -> None:
        self.total += 2 * n_q * n_k * d_k

    def reset(self) -> None:
        self.total = 0


@dataclass
class ForwardCtx:
    train: bool = False
    dropout: float = 0.0
    streams: StreamCache | None = None
    counter: MacCounter | None = None

    def drop(self, x: Tensor, name: str) -> Tensor:
        if not self.train or self.dropout == 0.0:
            return x
        return T.dropout(x, self.dropout, self.streams.get(f"dropout/{name}"), True)


EVAL_CTX = ForwardCtx()


# -- parameter initialization ---------------------------------------------


def _xavier(store: ParameterStore, seed: int, name: str, shape, dtype):
    rng = stream(seed, f"init/{name}")
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    store.add(name, Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype)))


def _zeros(store, name, shape, dtype):
    store.add(name, Tensor(np.zeros(shape, dtype=dtype)))


def _ln(store, prefix, n, dtype):
    store.add(f"{prefix}.gain", Tensor(np.ones(n, dtype=dtype)))
    store.add(f"{prefix}.bias", Tensor(np.zeros(n, dtype=dtype)))


def _init_mha(store, seed, prefix, d_att, dtype):
    for w in ("wq", "wk", "wv", "wo"):
        _xavier(store, seed, f"{prefix}.{w}", (d_att, d_att), dtype)


def _init_ffn(store, seed, prefix, d_att, d_ff, dtype):
    _xavier(store, seed, f"{prefix}.w1", (d_att, d_ff), dtype)
    _zeros(store, f"{prefix}.b1", (d_ff,), dtype)
    _xavier(store, seed, f"{prefix}.w2", (d_ff, d_att), dtype)
    _zeros(store, f"{prefix}.b2", (d_att,), dtype)


def init_encoder_layer_params(store, seed, prefix, d_att, d_ff, dtype=np.float32):
    _ln(store, f"{prefix}.ln1", d_att, dtype)
    _init_mha(store, seed, f"{prefix}.mha", d_att, dtype)
    _ln(store, f"{prefix}.ln2", d_att, dtype)
    _init_ffn(store, seed, f"{prefix}.ffn", d_att, d_ff, dtype)


def init_time_reduction_params(store, seed, prefix, d_att, dtype=np.float32):
    _xavier(store, seed, f"{prefix}.w", (2 * d_att, d_att), dtype)
    _zeros(store, f"{prefix}.b", (d_att,), dtype)


def init_model_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParameterStore:
    store = ParameterStore()
    init_frontend_params(cfg.frontend, store, seed, prefix="frontend", dtype=dtype)
    for i in range(cfg.num_encoder_layers):
        init_encoder_layer_params(store, seed, f"enc.layer{i}", cfg.d_att, cfg.d_ff, dtype)
    if cfg.tr_enabled:
        init_time_reduction_params(store, seed, "enc.tr", cfg.d_att, dtype)
    if cfg.pyramidal:
        for i in range(3):
            init_time_reduction_params(store, seed, f"enc.tr{i}", cfg.d_att, dtype)
    _ln(store, "enc.ln_out", cfg.d_att, dtype)
    _xavier(store, seed, "ctc.w", (cfg.d_att, cfg.vocab_size), dtype)
    _zeros(store, "ctc.b", (cfg.vocab_size,), dtype)
    _xavier(store, seed, "dec.embed", (cfg.vocab_size, cfg.d_att), dtype)
    for j in range(cfg.dec_layers):
        p = f"dec.layer{j}"
        _ln(store, f"{p}.ln1", cfg.d_att, dtype)
        _init_mha(store, seed, f"{p}.self", cfg.d_att, dtype)
        _ln(store, f"{p}.ln2", cfg.d_att, dtype)
        _init_mha(store, seed, f"{p}.src", cfg.d_att, dtype)
        _ln(store, f"{p}.ln3", cfg.d_att, dtype)
        _init_ffn(store, seed, f"{p}.ffn", cfg.d_att, cfg.d_ff, dtype)
    _ln(store, "dec.ln_out", cfg.d_att, dtype)
    _xavier(store, seed, "dec.out.w", (cfg.d_att, cfg.vocab_size), dtype)
    _zeros(store, "dec.out.b", (cfg.vocab_size,), dtype)
    return store


# -- attention blocks ------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              counter: MacCounter | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over single sequences (no batch axis)."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention expects 2-d inputs, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shape mismatch: q={q.shape} k={k.shape} v={v.shape}")
    d_k = q.shape[1]
    if counter is not None:
        counter.add(q.shape[0], k.shape[0], d_k)
    scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(d_k))
    weights = T.masked_softmax(scores, mask, axis=-1)
    return T.matmul(weights, v)


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: ParameterStore, prefix: str,
                         heads: int, mask: np.ndarray | None = None,
                         counter: MacCounter | None = None) -> Tensor:
    d_att = x_q.shape[1]
    d_k = d_att // heads
    q = T.matmul(x_q, params[f"{prefix}.wq"])
    k = T.matmul(x_kv, params[f"{prefix}.wk"])
    v = T.matmul(x_kv, params[f"{prefix}.wv"])
    outs = []
    for i in range(heads):
        sl = slice(i * d_k, (i + 1) * d_k)
        outs.append(attention(q[:, sl], k[:, sl], v[:, sl], mask=mask, counter=counter))
    cat = outs[0] if heads == 1 else T.concat_last_axis(outs)
    return T.matmul(cat, params[f"{prefix}.wo"])


def position_wise_ffn(x: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    h = T.relu(T.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return T.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _ln_apply(x, params, prefix):
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def encoder_layer(x: Tensor, params: ParameterStore, prefix: str, heads: int,
                  ctx: ForwardCtx = EVAL_CTX, mask: np.ndarray | None = None,
                  post_norm: bool = False) -> Tensor:
    if post_norm:
        a = multi_head_attention(x, x, params, f"{prefix}.mha", heads, mask, ctx.counter)
        x = _ln_apply(x + ctx.drop(a, f"{prefix}.mha"), params, f"{prefix}.ln1")
        f = position_wise_ffn(x, params, f"{prefix}.ffn")
        return _ln_apply(x + ctx.drop(f, f"{prefix}.ffn"), params, f"{prefix}.ln2")
    h = _ln_apply(x, params, f"{prefix}.ln1")
    a = multi_head_attention(h, h, params, f"{prefix}.mha", heads, mask, ctx.counter)
    x = x + ctx.drop(a, f"{prefix}.mha")
    f = position_wise_ffn(_ln_apply(x, params, f"{prefix}.ln2"), params, f"{prefix}.ffn")
    return x + ctx.drop(f, f"{prefix}.ffn")


def time_reduce(x: Tensor, params: ParameterStore, prefix: str = "enc.tr") -> Tensor:
    """Concatenate adjacent frame pairs, project back to d_att; odd tail dropped."""
    n, d = x.shape
    if n < 2:
        raise SequenceTooShortError(f"time reduction needs >= 2 frames, got {n}")
    m = n // 2
    pairs = T.reshape(x[: 2 * m], m, 2 * d)
    return T.matmul(pairs, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


# -- full encoder / decoder ------------------------------------------------


def encode(x: FeatureSequence, cfg: ModelConfig, params: ParameterStore,
           ctx: ForwardCtx = EVAL_CTX) -> tuple[Tensor, int]:
    """Front-end, e1 layers, optional time reduction, e2 layers, final norm."""
    h, n = subsample(x, cfg.frontend, params)
    h = ctx.drop(h, "frontend")
    for i in range(cfg.e1):
        h = encoder_layer(h, params, f"enc.layer{i}", cfg.heads, ctx,
                          post_norm=cfg.post_norm)
    if cfg.tr_enabled:
        h = time_reduce(h, params, "enc.tr")
        n = n // 2
        if n < 1:
            raise SequenceTooShortError("sequence collapsed to length 0 at time reduction")
    for i in range(cfg.e1, cfg.num_encoder_layers):
        h = encoder_layer(h, params, f"enc.layer{i}", cfg.heads, ctx,
                          post_norm=cfg.post_norm)
    return _ln_apply(h, params, "enc.ln_out"), n


def pyramidal_encode(x: FeatureSequence, cfg: ModelConfig, params: ParameterStore,
                     ctx: ForwardCtx = EVAL_CTX) -> tuple[Tensor, int]:
    """Baseline: halve the sequence after each of the first three layers."""
    h, n = subsample(x, cfg.frontend, params)
    h = ctx.drop(h, "frontend")
    for i in range(cfg.num_encoder_layers):
        h = encoder_layer(h, params, f"enc.layer{i}", cfg.heads, ctx,
                          post_norm=cfg.post_norm)
        if i < 3:
            h = time_reduce(h, params, f"enc.tr{i}")
            n = n // 2
            if n < 1:
                raise SequenceTooShortError(
                    f"sequence collapsed to length 0 at pyramid stage {i}")
    return _ln_apply(h, params, "enc.ln_out"), n


def encoder_forward(x, cfg, params, ctx=EVAL_CTX):
    if cfg.pyramidal:
        return pyramidal_encode(x, cfg, params, ctx)
    return encode(x, cfg, params, ctx)


def ctc_log_probs(x_e: Tensor, params: ParameterStore) -> Tensor:
    """Per-frame log distribution over the vocabulary from the CTC head."""
    return T.log_softmax(T.matmul(x_e, params["ctc.w"]) + params["ctc.b"], axis=-1)


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _embed(ids, table: Tensor, d_att: int, ctx: ForwardCtx, name: str) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    e = T.embedding_lookup(table, ids) * math.sqrt(d_att)
    e = e + Tensor(positional_encoding(len(ids), d_att, dtype=e.dtype))
    return ctx.drop(e, name)


def decode_forward(prefix, x_e: Tensor, cfg: ModelConfig, params: ParameterStore,
                   ctx: ForwardCtx = EVAL_CTX) -> Tensor:
    """Next-token logits for every position of a sos-led prefix."""
    prefix = list(prefix)
    if not prefix:
        raise ValueError("decoder prefix must not be empty")
    n = len(prefix)
    mask = _causal_mask(n)
    y = _embed(prefix, params["dec.embed"], cfg.d_att, ctx, "dec.embed")
    for j in range(cfg.dec_layers):
        p = f"dec.layer{j}"
        if cfg.post_norm:
            a = multi_head_attention(y, y, params, f"{p}.self", cfg.heads, mask, ctx.counter)
            y = _ln_apply(y + ctx.drop(a, f"{p}.self"), params, f"{p}.ln1")
            c = multi_head_attention(y, x_e, params, f"{p}.src", cfg.heads,
                                     counter=ctx.counter)
            y = _ln_apply(y + ctx.drop(c, f"{p}.src"), params, f"{p}.ln2")
            f = position_wise_ffn(y, params, f"{p}.ffn")
            y = _ln_apply(y + ctx.drop(f, f"{p}.ffn"), params, f"{p}.ln3")
        else:
            h = _ln_apply(y, params, f"{p}.ln1")
            a = multi_head_attention(h, h, params, f"{p}.self", cfg.heads, mask, ctx.counter)
            y = y + ctx.drop(a, f"{p}.self")
            h = _ln_apply(y, params, f"{p}.ln2")
            c = multi_head_attention(h, x_e, params, f"{p}.src", cfg.heads,
                                     counter=ctx.counter)
            y = y + ctx.drop(c, f"{p}.src")
            f = position_wise_ffn(_ln_apply(y, params, f"{p}.ln3"), params, f"{p}.ffn")
            y = y + ctx.drop(f, f"{p}.ffn")
    y = _ln_apply(y, params, "dec.ln_out")
    return T.matmul(y, params["dec.out.w"]) + params["dec.out.b"]


# -- analytic attention cost ----------------------------------------------


def encoder_layer_lengths(cfg: ModelConfig, T_in: int) -> tuple[int, list[int], int]:
    """(front-end output length, per-layer input lengths, final length)."""
    n0 = output_length(cfg.frontend.kind, T_in)
    lengths = []
    if cfg.pyramidal:
        n = n0
        for i in range(cfg.num_encoder_layers):
            lengths.append(n)
            if i < 3:
                n = n // 2
        final = n
    elif cfg.tr_enabled:
        lengths = [n0] * cfg.e1 + [n0 // 2] * cfg.e2
        final = n0 // 2
    else:
        lengths = [n0] * cfg.num_encoder_layers
        final = n0
    return n0, lengths, final


def count_attention_macs(cfg: ModelConfig, T_in: int) -> dict:
    """Analytic encoder self-attention MACs at each layer's actual length."""
    n0, lengths, final = encoder_layer_lengths(cfg, T_in)
    layers = []
    for n in lengths:
        score = n * n * cfg.d_att
        layers.append({"length": n, "score_macs": score, "total_macs": 2 * score})
    return {
        "frontend_length": n0,
        "final_length": final,
        "layers": layers,
        "score_macs": sum(l["score_macs"] for l in layers),
        "total_macs": sum(l["total_macs"] for l in layers),
    }


# -- decoder-only language model -------------------------------------------


@dataclass
class LMConfig:
    layers: int = 2
    d_att: int = 64
    d_ff: int = 256
    heads: int = 2
    vocab_size: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_att % self.heads != 0:
            raise ValueError(f"d_att={self.d_att} not divisible by heads={self.heads}")


def init_lm_params(cfg: LMConfig, seed: int, dtype=np.float32) -> ParameterStore:
    store = ParameterStore()
    _xavier(store, seed, "lm.embed", (cfg.vocab_size, cfg.d_att), dtype)
    for i in range(cfg.layers):
        init_encoder_layer_params(store, seed, f"lm.layer{i}", cfg.d_att, cfg.d_ff, dtype)
    _ln(store, "lm.ln_out", cfg.d_att, dtype)
    _xavier(store, seed, "lm.out.w", (cfg.d_att, cfg.vocab_size), dtype)
    _zeros(store, "lm.out.b", (cfg.vocab_size,), dtype)
    return store


def lm_forward(prefix, cfg: LMConfig, params: ParameterStore,
               ctx: ForwardCtx = EVAL_CTX) -> Tensor:
    """Next-token logits from a causal self-attention stack (no cross-attention)."""
    prefix = list(prefix)
    if not prefix:
        raise ValueError("LM prefix must not be empty")
    mask = _causal_mask(len(prefix))
    y = _embed(prefix, params["lm.embed"], cfg.d_att, ctx, "lm.embed")
    for i in range(cfg.layers):
        y = encoder_layer(y, params, f"lm.layer{i}", cfg.heads, ctx, mask=mask)
    y = _ln_apply(y, params, "lm.ln_out")
    return T.matmul(y, params["lm.out.w"]) + params["lm.out.b"]
