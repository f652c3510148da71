"""Instrumented decoder-only transformer with a visual prefix.

The model is deliberately small and written directly in numpy so that every
intermediate the hallucination features need is exposed: per-layer hidden
states at the last position, per-layer per-head attention rows over the
current sequence, and early-exit next-token distributions obtained by
applying the vocabulary head to each layer's hidden state.

Architecture: learned token/position embeddings plus a learned embedding
table for visual-prefix slots, pre-norm blocks (LayerNorm -> causal
multi-head self-attention -> residual, LayerNorm -> ReLU MLP -> residual),
a final LayerNorm, and a bias-free vocabulary head. Hidden states recorded
in the trace are the final-norm-applied states the head reads, so early-exit
distributions are plain softmax(head @ state) of trace fields.

forward_step is a pure function of (checkpoint, state): same inputs give a
bit-identical trace, and nothing is mutated.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensorfile
from .errors import CheckpointError, ConfigError, DataError
from .numerics import softmax

CHECKPOINT_MAGIC = "ECDKIT-CKPT-1"

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
N_SPECIAL = len(SPECIAL_TOKENS)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    max_seq_len: int
    n_visual_tokens: int
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < N_SPECIAL:
            raise ConfigError(f"vocab_size must be >= {N_SPECIAL}, got {self.vocab_size}")
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_visual_tokens < 0:
            raise ConfigError(f"n_visual_tokens must be non-negative, got {self.n_visual_tokens}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model not divisible by n_heads")
        if self.n_visual_tokens + 2 > self.max_seq_len:
            raise ConfigError(
                f"n_visual_tokens ({self.n_visual_tokens}) plus two text tokens "
                f"exceeds max_seq_len ({self.max_seq_len})"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "n_visual_tokens": self.n_visual_tokens,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**{k: int(d[k]) for k in (
            "vocab_size", "n_layers", "n_heads", "d_model", "d_ff",
            "max_seq_len", "n_visual_tokens", "seed")})
        cfg.validate()
        return cfg


def default_config(vocab_size: int = 512, n_visual_tokens: int = 16, seed: int = 0) -> ModelConfig:
    """Desk-scale default: 4 layers, 4 heads, d_model 128."""
    return ModelConfig(
        vocab_size=vocab_size,
        n_layers=4,
        n_heads=4,
        d_model=128,
        d_ff=256,
        max_seq_len=128,
        n_visual_tokens=n_visual_tokens,
        seed=seed,
    )


def parameter_schema(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; fixes both init draw order and file layout."""
    d, dff = config.d_model, config.d_ff
    schema = [
        ("tok_emb", (config.vocab_size, d)),
        ("pos_emb", (config.max_seq_len, d)),
        ("vis_emb", (config.n_visual_tokens, d)),
    ]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        schema += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "w_q", (d, d)), (p + "b_q", (d,)),
            (p + "w_k", (d, d)), (p + "b_k", (d,)),
            (p + "w_v", (d, d)), (p + "b_v", (d,)),
            (p + "w_o", (d, d)), (p + "b_o", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "w_ff1", (d, dff)), (p + "b_ff1", (dff,)),
            (p + "w_ff2", (dff, d)), (p + "b_ff2", (d,)),
        ]
    schema += [
        ("ln_f_g", (d,)), ("ln_f_b", (d,)),
        ("head_w", (d, config.vocab_size)),
    ]
    return schema


@dataclass
class Checkpoint:
    """Model configuration plus float32 parameters, keyed by schema name."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    _f64: dict[str, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def p64(self, name: str) -> np.ndarray:
        # Forward math runs in float64; cache the upcast copies.
        if self._f64 is None:
            object.__setattr__(self, "_f64", {})
        if name not in self._f64:
            self._f64[name] = self.params[name].astype(np.float64)
        return self._f64[name]


def init_model(config: ModelConfig) -> Checkpoint:
    """Deterministic seeded initialization; equal configs give equal bytes."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_schema(config):
        base = name.rsplit(".", 1)[-1]
        if base in ("ln1_g", "ln2_g", "ln_f_g"):
            arr = np.ones(shape)
        elif base.startswith("b_") or base in ("ln1_b", "ln2_b", "ln_f_b"):
            arr = np.zeros(shape)
        elif base in ("tok_emb", "pos_emb", "vis_emb"):
            arr = rng.normal(0.0, 0.02, shape)
        else:
            fan_in = shape[0]
            arr = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
        params[name] = arr.astype(np.float32)
    return Checkpoint(config=config, params=params)


@dataclass
class PromptState:
    """A single sequence: visual prefix slots, then query text, then generated text.

    visual_noise, when set, is a (n_visual_tokens, d_model) float array that
    replaces the visual-prefix embedding rows for this state; it is the hook
    the distorted-input contrastive baseline uses.
    """

    visual_prefix_ids: list[int]
    query_ids: list[int]
    generated_ids: list[int] = field(default_factory=list)
    visual_noise: np.ndarray | None = None

    @property
    def total_len(self) -> int:
        return len(self.visual_prefix_ids) + len(self.query_ids) + len(self.generated_ids)

    def text_ids(self) -> list[int]:
        return list(self.query_ids) + list(self.generated_ids)

    def extended(self, token_id: int) -> "PromptState":
        return PromptState(
            visual_prefix_ids=list(self.visual_prefix_ids),
            query_ids=list(self.query_ids),
            generated_ids=list(self.generated_ids) + [int(token_id)],
            visual_noise=self.visual_noise,
        )


@dataclass
class ForwardTrace:
    """Everything the feature extractor needs from one next-token forward pass.

    hidden_states[0] is the embedding output at the last position;
    hidden_states[i] for i >= 1 is the final-norm-applied state after layer i,
    i.e. exactly what the vocabulary head reads. attention[i-1, g] is layer i
    head g's softmax row for the last position over all current positions.
    early_exit_dists[i-1] = softmax(head @ hidden_states[i]); the last row is
    final_dist.
    """

    hidden_states: np.ndarray      # (n_layers + 1, d_model)
    attention: np.ndarray          # (n_layers, n_heads, seq_len)
    early_exit_dists: np.ndarray   # (n_layers, vocab_size)
    final_dist: np.ndarray         # (vocab_size,)
    seq_len: int
    n_visual_tokens: int
    full_attention: np.ndarray | None = None  # (n_layers, n_heads, L, L) if captured


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _validate_state(config: ModelConfig, state: PromptState) -> None:
    if state.total_len == 0:
        raise DataError("prompt state is empty")
    if state.total_len > config.max_seq_len:
        raise DataError(
            f"sequence length {state.total_len} exceeds max_seq_len {config.max_seq_len}"
        )
    if len(state.visual_prefix_ids) != config.n_visual_tokens:
        raise DataError(
            f"visual prefix has {len(state.visual_prefix_ids)} slots, "
            f"model expects {config.n_visual_tokens}"
        )
    for s in state.visual_prefix_ids:
        if not 0 <= s < config.n_visual_tokens:
            raise DataError(f"visual slot id {s} out of range [0, {config.n_visual_tokens})")
    for t in state.text_ids():
        if not 0 <= t < config.vocab_size:
            raise DataError(f"token id {t} out of range [0, {config.vocab_size})")
    if state.visual_noise is not None:
        want = (config.n_visual_tokens, config.d_model)
        if tuple(state.visual_noise.shape) != want:
            raise DataError(
                f"visual_noise shape {tuple(state.visual_noise.shape)} != {want}"
            )


def forward_step(
    checkpoint: Checkpoint,
    state: PromptState,
    capture_full_attention: bool = False,
) -> ForwardTrace:
    """Run one next-token forward pass and return the instrumented trace."""
    cfg = checkpoint.config
    _validate_state(cfg, state)
    L = state.total_len
    n_vis = cfg.n_visual_tokens
    G, hd = cfg.n_heads, cfg.head_dim

    if n_vis > 0:
        if state.visual_noise is not None:
            vis = state.visual_noise.astype(np.float64)
        else:
            vis = checkpoint.p64("vis_emb")[np.asarray(state.visual_prefix_ids, dtype=np.int64)]
    else:
        vis = np.zeros((0, cfg.d_model))
    text_ids = np.asarray(state.text_ids(), dtype=np.int64)
    tok = checkpoint.p64("tok_emb")[text_ids]
    x = np.concatenate([vis, tok], axis=0) + checkpoint.p64("pos_emb")[:L]

    ln_f_g, ln_f_b = checkpoint.p64("ln_f_g"), checkpoint.p64("ln_f_b")
    head_w = checkpoint.p64("head_w")

    hidden = np.empty((cfg.n_layers + 1, cfg.d_model))
    hidden[0] = x[-1]
    att_rows = np.empty((cfg.n_layers, G, L))
    full_att = np.zeros((cfg.n_layers, G, L, L)) if capture_full_attention else None
    exits = np.empty((cfg.n_layers, cfg.vocab_size))

    # Causal mask: position j attends to keys 0..j only; masked logits are -inf
    # so masked attention weights are exact zeros.
    neg_inf_mask = np.triu(np.full((L, L), -np.inf), k=1)

    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = _layernorm(x, checkpoint.p64(p + "ln1_g"), checkpoint.p64(p + "ln1_b"))
        q = a @ checkpoint.p64(p + "w_q") + checkpoint.p64(p + "b_q")
        k = a @ checkpoint.p64(p + "w_k") + checkpoint.p64(p + "b_k")
        v = a @ checkpoint.p64(p + "w_v") + checkpoint.p64(p + "b_v")
        q = q.reshape(L, G, hd).transpose(1, 0, 2)
        k = k.reshape(L, G, hd).transpose(1, 0, 2)
        v = v.reshape(L, G, hd).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd) + neg_inf_mask
        att = softmax(scores, axis=-1)
        ctx = (att @ v).transpose(1, 0, 2).reshape(L, cfg.d_model)
        x = x + ctx @ checkpoint.p64(p + "w_o") + checkpoint.p64(p + "b_o")
        m = _layernorm(x, checkpoint.p64(p + "ln2_g"), checkpoint.p64(p + "ln2_b"))
        x = x + np.maximum(m @ checkpoint.p64(p + "w_ff1") + checkpoint.p64(p + "b_ff1"), 0.0) \
            @ checkpoint.p64(p + "w_ff2") + checkpoint.p64(p + "b_ff2")

        h_exit = _layernorm(x[-1], ln_f_g, ln_f_b)
        hidden[i + 1] = h_exit
        att_rows[i] = att[:, -1, :]
        if full_att is not None:
            full_att[i] = att
        exits[i] = softmax(h_exit @ head_w)

    return ForwardTrace(
        hidden_states=hidden,
        attention=att_rows,
        early_exit_dists=exits,
        final_dist=exits[-1].copy(),
        seq_len=L,
        n_visual_tokens=n_vis,
        full_attention=full_att,
    )


def timed_forward_step(checkpoint: Checkpoint, state: PromptState) -> tuple[ForwardTrace, int]:
    t0 = time.perf_counter_ns()
    trace = forward_step(checkpoint, state)
    return trace, time.perf_counter_ns() - t0


def early_exit_distribution(checkpoint: Checkpoint, trace: ForwardTrace, layer: int) -> np.ndarray:
    """softmax(head @ hidden_states[layer]) for layer in 1..n_layers."""
    n_layers = trace.early_exit_dists.shape[0]
    if not 1 <= layer <= n_layers:
        raise ConfigError(f"layer index {layer} out of range [1, {n_layers}]")
    return softmax(trace.hidden_states[layer] @ checkpoint.p64("head_w"))


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    cfg = checkpoint.config
    tensors = []
    for name, shape in parameter_schema(cfg):
        arr = checkpoint.params.get(name)
        if arr is None:
            raise CheckpointError(f"missing tensor {name!r}")
        if tuple(arr.shape) != shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, schema expects {shape}"
            )
        tensors.append((name, arr.astype(np.float32, copy=False)))
    meta = {"config": cfg.to_dict(), "train": checkpoint.meta.get("train", {})}
    tensorfile.write(path, CHECKPOINT_MAGIC, meta, tensors)


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = tensorfile.read(path, CHECKPOINT_MAGIC)
    if "config" not in meta:
        raise CheckpointError("checkpoint metadata lacks a config block")
    config = ModelConfig.from_dict(meta["config"])
    params = {}
    for name, shape in parameter_schema(config):
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        arr = tensors.pop(name)
        if tuple(arr.shape) != shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, config implies {shape}"
            )
        if arr.dtype != np.dtype("<f4"):
            raise CheckpointError(f"tensor {name!r} must be float32")
        params[name] = arr
    if tensors:
        raise CheckpointError(f"checkpoint has unexpected tensors: {sorted(tensors)}")
    return Checkpoint(config=config, params=params, meta={"train": meta.get("train", {})})
