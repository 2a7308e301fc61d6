"""Shared fixtures and brute-force oracles used across the test suite."""

import itertools

import numpy as np
import pytest

from trasr.frontend import FeatureSequence, FrontendConfig
from trasr.model import ModelConfig, init_model_params


def random_log_probs(rng, n_frames, vocab):
    """Random [T, V] grid of valid log-probabilities."""
    logits = rng.normal(size=(n_frames, vocab))
    return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


def brute_force_ctc(log_probs, target, blank=0):
    """-log P(target) by enumerating every V^T alignment path."""
    n_frames, vocab = log_probs.shape
    target = list(target)
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=n_frames):
        out, prev = [], None
        for s in path:
            if s != blank and s != prev:
                out.append(s)
            prev = s
        if out == target:
            total = np.logaddexp(total, sum(log_probs[t, path[t]] for t in range(n_frames)))
    return -total


def brute_force_prefix(log_probs, prefix, blank=0):
    """log P(output starts with prefix) by enumerating every alignment path."""
    n_frames, vocab = log_probs.shape
    prefix = list(prefix)
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=n_frames):
        out, prev = [], None
        for s in path:
            if s != blank and s != prev:
                out.append(s)
            prev = s
        if out[: len(prefix)] == prefix:
            total = np.logaddexp(total, sum(log_probs[t, path[t]] for t in range(n_frames)))
    return total


def tiny_model_config(**overrides):
    """Small identity-frontend model; cheap enough for gradient checks."""
    d_att = overrides.pop("d_att", 16)
    feature_dim = overrides.pop("feature_dim", d_att)
    fe = FrontendConfig(kind=overrides.pop("frontend_kind", "identity"),
                        d_att=d_att, feature_dim=feature_dim)
    defaults = dict(e1=1, e2=1, dec_layers=1, d_att=d_att, d_ff=32, heads=2,
                    tr_enabled=True, pyramidal=False, post_norm=False,
                    vocab_size=7, dropout=0.0, frontend=fe)
    defaults.update(overrides)
    return ModelConfig(**defaults)


def random_features(rng, n_frames, dim, dtype=np.float32):
    return FeatureSequence(rng.normal(size=(n_frames, dim)).astype(dtype), n_frames)


@pytest.fixture
def tiny_model():
    cfg = tiny_model_config()
    return cfg, init_model_params(cfg, seed=0)
