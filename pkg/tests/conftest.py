"""Shared fixtures: a tiny model, random traces, and a small trained pipeline.

Session-scoped fixtures keep the expensive pieces (corpus synthesis, a short
training run) to a single execution for the whole suite.
"""

import numpy as np
import pytest

from ecdkit.corpus import generate_corpus
from ecdkit.detector import DetectorBundle, LogisticConfig, train_logistic
from ecdkit.features import (FeatureExtractionConfig, build_schema,
                             fit_standardizer)
from ecdkit.model import Checkpoint, ForwardTrace, ModelConfig, init_model
from ecdkit.training import fit_model


@pytest.fixture(scope="session")
def tiny_mc() -> ModelConfig:
    return ModelConfig(
        vocab_size=24, n_layers=2, n_heads=2, d_model=16, d_ff=32,
        max_seq_len=48, n_visual_tokens=6, seed=5,
    )


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_mc) -> Checkpoint:
    return init_model(tiny_mc)


def random_trace(
    rng: np.random.Generator,
    n_layers: int = 4,
    n_heads: int = 4,
    vocab_size: int = 64,
    n_visual_tokens: int = 8,
    seq_len: int = 14,
    d_model: int = 8,
    zero_attn_prob: float = 0.1,
) -> ForwardTrace:
    """A structurally valid trace with random, properly normalized rows."""
    attn = rng.random((n_layers, n_heads, seq_len)) + 1e-3
    if zero_attn_prob > 0:
        mask = rng.random(attn.shape) < zero_attn_prob
        attn[mask] = 0.0
        # keep every row non-degenerate
        attn[:, :, 0] = np.maximum(attn[:, :, 0], 1e-3)
    attn /= attn.sum(axis=-1, keepdims=True)
    exits = rng.random((n_layers, vocab_size)) + 1e-4
    exits /= exits.sum(axis=-1, keepdims=True)
    return ForwardTrace(
        hidden_states=rng.normal(size=(n_layers + 1, d_model)),
        attention=attn,
        early_exit_dists=exits,
        final_dist=exits[-1].copy(),
        seq_len=seq_len,
        n_visual_tokens=n_visual_tokens,
    )


def random_history(rng: np.random.Generator, length: int, vocab_size: int):
    from ecdkit.features import GenerationHistory
    return GenerationHistory(
        token_ids=[int(t) for t in rng.integers(0, vocab_size, size=length)],
        chosen_logprobs=[float(v) for v in -rng.random(length) * 5.0],
    )


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(
        n_records=30, seed=3, n_objects=12, distractor_rate=0.4,
        eval_fraction=0.2, min_objects=2, max_objects=4,
    )


@pytest.fixture(scope="session")
def small_trained(small_corpus):
    """A briefly fitted model over the small corpus; enough to decode with."""
    config = ModelConfig(
        vocab_size=len(small_corpus.vocab), n_layers=2, n_heads=2, d_model=32,
        d_ff=64, max_seq_len=64, n_visual_tokens=small_corpus.n_visual_tokens(),
        seed=7,
    )
    from ecdkit.corpus import training_examples
    examples = training_examples(small_corpus, config, qa_per_record=1, seed=7)
    trained, _ = fit_model(init_model(config), examples, epochs=2, batch_size=16,
                           lr=3e-3, seed=7)
    return trained


@pytest.fixture(scope="session")
def toy_detector(tiny_mc):
    """Hand-assembled logistic bundle matching the tiny model's schema."""
    schema = build_schema(tiny_mc.n_layers, tiny_mc.n_heads)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(64, schema.dim))
    w_true = rng.normal(size=schema.dim)
    z = (x @ w_true + 0.2 * rng.normal(size=64) > 0).astype(int)
    stats = fit_standardizer(x)
    model = train_logistic(stats.apply(x), z, LogisticConfig(max_iter=50))
    return DetectorBundle(
        schema=schema,
        extraction=FeatureExtractionConfig(),
        standardizer=stats,
        model=model,
        training_meta={},
    )
