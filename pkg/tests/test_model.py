import numpy as np
import pytest

from ecdkit.errors import ConfigError, DataError
from ecdkit.model import (Checkpoint, ModelConfig, PromptState, default_config,
                          early_exit_distribution, forward_step, init_model,
                          parameter_schema)


def _state(mc: ModelConfig, n_text: int = 5, seed: int = 0) -> PromptState:
    rng = np.random.default_rng(seed)
    return PromptState(
        visual_prefix_ids=[int(v) for v in
                           rng.integers(0, mc.n_visual_tokens, mc.n_visual_tokens)],
        query_ids=[int(v) for v in rng.integers(0, mc.vocab_size, n_text)],
    )


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="d_model not divisible by n_heads"):
        ModelConfig(vocab_size=16, n_layers=1, n_heads=3, d_model=16, d_ff=8,
                    max_seq_len=16, n_visual_tokens=2).validate()
    with pytest.raises(ConfigError, match="vocab_size"):
        ModelConfig(vocab_size=2, n_layers=1, n_heads=1, d_model=4, d_ff=4,
                    max_seq_len=16, n_visual_tokens=2).validate()
    with pytest.raises(ConfigError, match="max_seq_len"):
        ModelConfig(vocab_size=16, n_layers=1, n_heads=1, d_model=4, d_ff=4,
                    max_seq_len=4, n_visual_tokens=8).validate()


def test_default_config_shape():
    mc = default_config()
    mc.validate()
    assert (mc.n_layers, mc.n_heads, mc.d_model) == (4, 4, 128)


def test_init_is_deterministic_and_float32(tiny_mc):
    a, b = init_model(tiny_mc), init_model(tiny_mc)
    for name, _ in parameter_schema(tiny_mc):
        assert a.params[name].dtype == np.float32
        assert np.array_equal(a.params[name], b.params[name])


def test_parameter_schema_covers_params(tiny_ckpt, tiny_mc):
    names = [n for n, _ in parameter_schema(tiny_mc)]
    assert names == list(tiny_ckpt.params.keys())
    for name, shape in parameter_schema(tiny_mc):
        assert tiny_ckpt.params[name].shape == shape
    assert tiny_ckpt.params["head_w"].shape == (tiny_mc.d_model, tiny_mc.vocab_size)


def test_trace_shapes_and_sums(tiny_ckpt, tiny_mc):
    st = _state(tiny_mc, n_text=7)
    tr = forward_step(tiny_ckpt, st)
    L = st.total_len
    assert tr.hidden_states.shape == (tiny_mc.n_layers + 1, tiny_mc.d_model)
    assert tr.attention.shape == (tiny_mc.n_layers, tiny_mc.n_heads, L)
    assert tr.early_exit_dists.shape == (tiny_mc.n_layers, tiny_mc.vocab_size)
    assert tr.final_dist.shape == (tiny_mc.vocab_size,)
    assert tr.seq_len == L and tr.n_visual_tokens == tiny_mc.n_visual_tokens
    assert np.allclose(tr.attention.sum(axis=-1), 1.0, atol=1e-9)
    assert np.allclose(tr.early_exit_dists.sum(axis=-1), 1.0, atol=1e-9)
    assert abs(tr.final_dist.sum() - 1.0) < 1e-9
    assert np.array_equal(tr.final_dist, tr.early_exit_dists[-1])


def test_forward_is_pure(tiny_ckpt, tiny_mc):
    st = _state(tiny_mc)
    a = forward_step(tiny_ckpt, st)
    b = forward_step(tiny_ckpt, st)
    assert np.array_equal(a.final_dist, b.final_dist)
    assert np.array_equal(a.attention, b.attention)
    assert np.array_equal(a.hidden_states, b.hidden_states)


def test_causal_mask_gives_exact_zeros(tiny_ckpt, tiny_mc):
    st = _state(tiny_mc, n_text=6)
    tr = forward_step(tiny_ckpt, st, capture_full_attention=True)
    L = st.total_len
    full = tr.full_attention
    assert full.shape == (tiny_mc.n_layers, tiny_mc.n_heads, L, L)
    for j in range(L):
        assert np.all(full[:, :, j, j + 1:] == 0.0)
        assert np.allclose(full[:, :, j, : j + 1].sum(axis=-1), 1.0, atol=1e-9)
    assert np.array_equal(full[:, :, -1, :], tr.attention)


def test_early_exit_recompute_matches_stored(tiny_ckpt, tiny_mc):
    st = _state(tiny_mc)
    tr = forward_step(tiny_ckpt, st)
    for layer in range(1, tiny_mc.n_layers + 1):
        recomputed = early_exit_distribution(tiny_ckpt, tr, layer)
        assert np.array_equal(recomputed, tr.early_exit_dists[layer - 1])
    assert np.array_equal(early_exit_distribution(tiny_ckpt, tr, tiny_mc.n_layers),
                          tr.final_dist)
    with pytest.raises(ConfigError):
        early_exit_distribution(tiny_ckpt, tr, 0)
    with pytest.raises(ConfigError):
        early_exit_distribution(tiny_ckpt, tr, tiny_mc.n_layers + 1)


def test_single_layer_forward_matches_dense_oracle():
    """Re-derive a 1-layer forward with freshly written dense math."""
    mc = ModelConfig(vocab_size=12, n_layers=1, n_heads=2, d_model=8, d_ff=16,
                     max_seq_len=16, n_visual_tokens=3, seed=9)
    cp = init_model(mc)
    st = PromptState(visual_prefix_ids=[0, 2, 1], query_ids=[1, 5, 7, 4])
    tr = forward_step(cp, st)

    def p(name):
        return cp.params[name].astype(np.float64)

    def ln(v, g, b):
        mu = v.mean(-1, keepdims=True)
        sd = np.sqrt(((v - mu) ** 2).mean(-1, keepdims=True) + 1e-5)
        return (v - mu) / sd * g + b

    L = 7
    x = np.concatenate([p("vis_emb")[[0, 2, 1]], p("tok_emb")[[1, 5, 7, 4]]])
    x = x + p("pos_emb")[:L]
    a = ln(x, p("layers.0.ln1_g"), p("layers.0.ln1_b"))
    q = a @ p("layers.0.w_q") + p("layers.0.b_q")
    k = a @ p("layers.0.w_k") + p("layers.0.b_k")
    v = a @ p("layers.0.w_v") + p("layers.0.b_v")
    hd = mc.d_model // mc.n_heads
    ctx = np.zeros((L, mc.d_model))
    att_last = np.zeros((mc.n_heads, L))
    for g in range(mc.n_heads):
        qg, kg, vg = (m[:, g * hd:(g + 1) * hd] for m in (q, k, v))
        for j in range(L):
            logits = qg[j] @ kg[: j + 1].T / np.sqrt(hd)
            w = np.exp(logits - logits.max())
            w = w / w.sum()
            ctx[j, g * hd:(g + 1) * hd] = w @ vg[: j + 1]
            if j == L - 1:
                att_last[g, : j + 1] = w
    x = x + ctx @ p("layers.0.w_o") + p("layers.0.b_o")
    m = ln(x, p("layers.0.ln2_g"), p("layers.0.ln2_b"))
    x = x + np.maximum(m @ p("layers.0.w_ff1") + p("layers.0.b_ff1"), 0.0) \
        @ p("layers.0.w_ff2") + p("layers.0.b_ff2")
    h = ln(x[-1], p("ln_f_g"), p("ln_f_b"))
    logits = h @ p("head_w")
    e = np.exp(logits - logits.max())
    want = e / e.sum()

    assert np.allclose(tr.final_dist, want, atol=1e-9)
    assert np.allclose(tr.attention[0], att_last, atol=1e-9)
    assert np.allclose(tr.hidden_states[1], h, atol=1e-9)


def test_visual_noise_override_changes_distribution(tiny_ckpt, tiny_mc):
    st = _state(tiny_mc)
    base = forward_step(tiny_ckpt, st).final_dist
    noisy = PromptState(
        visual_prefix_ids=st.visual_prefix_ids,
        query_ids=st.query_ids,
        visual_noise=np.random.default_rng(0).normal(
            0, 0.05, (tiny_mc.n_visual_tokens, tiny_mc.d_model)),
    )
    assert not np.allclose(forward_step(tiny_ckpt, noisy).final_dist, base)


def test_state_validation_errors(tiny_ckpt, tiny_mc):
    with pytest.raises(DataError, match="empty"):
        forward_step(tiny_ckpt, PromptState(visual_prefix_ids=[], query_ids=[]))
    too_long = PromptState(
        visual_prefix_ids=[0] * tiny_mc.n_visual_tokens,
        query_ids=[1] * tiny_mc.max_seq_len,
    )
    with pytest.raises(DataError, match="max_seq_len"):
        forward_step(tiny_ckpt, too_long)
    with pytest.raises(DataError, match="visual prefix"):
        forward_step(tiny_ckpt, PromptState(visual_prefix_ids=[0], query_ids=[1]))
    bad_tok = PromptState(
        visual_prefix_ids=[0] * tiny_mc.n_visual_tokens,
        query_ids=[tiny_mc.vocab_size],
    )
    with pytest.raises(DataError, match="out of range"):
        forward_step(tiny_ckpt, bad_tok)
    bad_noise = PromptState(
        visual_prefix_ids=[0] * tiny_mc.n_visual_tokens,
        query_ids=[1],
        visual_noise=np.zeros((2, 2)),
    )
    with pytest.raises(DataError, match="visual_noise"):
        forward_step(tiny_ckpt, bad_noise)


def test_extended_state_appends_token(tiny_mc):
    st = _state(tiny_mc, n_text=2)
    ext = st.extended(9)
    assert ext.generated_ids == [9]
    assert ext.total_len == st.total_len + 1
    assert st.generated_ids == []


def test_heads_shape_for_wide_config():
    mc = ModelConfig(vocab_size=16, n_layers=1, n_heads=8, d_model=16, d_ff=8,
                     max_seq_len=32, n_visual_tokens=4, seed=0)
    mc.validate()
    assert mc.head_dim == 2
    tr = forward_step(init_model(mc), _state(mc, n_text=3))
    assert tr.attention.shape[1] == 8
