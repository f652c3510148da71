"""Teacher-forced training for the toy model, written directly in numpy.

The batched forward here matches the instrumented single-sequence forward in
model.py operation for operation (same pre-norm blocks, masking, and final
norm); a unit test pins that equivalence. Gradients are hand-derived and
checked against finite differences. Training keeps a float64 master copy of
the parameters and casts back to float32 when producing the checkpoint.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import Checkpoint, ModelConfig, PAD_ID, parameter_schema

_NEG = -1e30  # additive mask; keeps exp() at exact zero without inf-inf traps


@dataclass
class TrainExample:
    visual_prefix_ids: list[int]
    query_ids: list[int]
    target_ids: list[int]


@dataclass
class Batch:
    ids: np.ndarray      # (B, L) slot ids at visual positions, token ids elsewhere
    is_vis: np.ndarray   # (B, L) bool
    real: np.ndarray     # (B, L) bool, False at padding
    labels: np.ndarray   # (B, L) int64, -1 where no loss
    n_labeled: int


def make_batch(config: ModelConfig, examples: list[TrainExample]) -> Batch:
    if not examples:
        raise DataError("empty batch")
    lengths = []
    for ex in examples:
        if len(ex.visual_prefix_ids) != config.n_visual_tokens:
            raise DataError(
                f"example visual prefix has {len(ex.visual_prefix_ids)} slots, "
                f"model expects {config.n_visual_tokens}"
            )
        n = len(ex.visual_prefix_ids) + len(ex.query_ids) + len(ex.target_ids)
        if n > config.max_seq_len:
            raise DataError(f"example length {n} exceeds max_seq_len {config.max_seq_len}")
        lengths.append(n)
    B, L = len(examples), max(lengths)
    ids = np.full((B, L), PAD_ID, dtype=np.int64)
    is_vis = np.zeros((B, L), dtype=bool)
    real = np.zeros((B, L), dtype=bool)
    labels = np.full((B, L), -1, dtype=np.int64)
    n_vis = config.n_visual_tokens
    for b, ex in enumerate(examples):
        text = list(ex.query_ids) + list(ex.target_ids)
        n = n_vis + len(text)
        ids[b, :n_vis] = ex.visual_prefix_ids
        is_vis[b, :n_vis] = True
        ids[b, n_vis:n] = text
        real[b, :n] = True
        t0 = n_vis + len(ex.query_ids)  # first target position
        for j in range(t0 - 1, n - 1):
            labels[b, j] = ids[b, j + 1]
    return Batch(ids=ids, is_vis=is_vis, real=real, labels=labels,
                 n_labeled=int((labels >= 0).sum()))


def _ln_forward(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(x, n_heads):
    B, L, d = x.shape
    return x.reshape(B, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, G, L, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, G * hd)


def forward_batch(params: dict, config: ModelConfig, batch: Batch):
    """Returns (logits, caches); logits are (B, L, V) next-token scores."""
    B, L = batch.ids.shape
    G, hd = config.n_heads, config.head_dim
    x = np.where(
        batch.is_vis[:, :, None],
        params["vis_emb"][np.minimum(batch.ids, config.n_visual_tokens - 1)]
        if config.n_visual_tokens > 0 else 0.0,
        params["tok_emb"][np.minimum(batch.ids, config.vocab_size - 1)],
    )
    x = x + params["pos_emb"][:L]

    causal = np.tril(np.ones((L, L), dtype=bool))
    key_ok = batch.real[:, None, None, :] | np.eye(L, dtype=bool)[None, None, :, :]
    mask_add = np.where(causal[None, None] & key_ok, 0.0, _NEG)

    caches = {"x0": x, "mask_add": mask_add}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        a, ln1c = _ln_forward(x, params[p + "ln1_g"], params[p + "ln1_b"])
        q = a @ params[p + "w_q"] + params[p + "b_q"]
        k = a @ params[p + "w_k"] + params[p + "b_k"]
        v = a @ params[p + "w_v"] + params[p + "b_v"]
        qh, kh, vh = _split_heads(q, G), _split_heads(k, G), _split_heads(v, G)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(hd) + mask_add
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(att @ vh)
        o = ctx @ params[p + "w_o"] + params[p + "b_o"]
        x_attn = x + o
        m, ln2c = _ln_forward(x_attn, params[p + "ln2_g"], params[p + "ln2_b"])
        u = m @ params[p + "w_ff1"] + params[p + "b_ff1"]
        r = np.maximum(u, 0.0)
        f = r @ params[p + "w_ff2"] + params[p + "b_ff2"]
        x_out = x_attn + f
        caches[i] = {
            "a": a, "ln1c": ln1c, "qh": qh, "kh": kh, "vh": vh,
            "att": att, "ctx": ctx, "x_attn": x_attn, "m": m, "ln2c": ln2c,
            "u": u, "r": r,
        }
        x = x_out
    h, lnfc = _ln_forward(x, params["ln_f_g"], params["ln_f_b"])
    caches["lnfc"] = lnfc
    caches["h"] = h
    logits = h @ params["head_w"]
    return logits, caches


def loss_and_grads(params: dict, config: ModelConfig, batch: Batch):
    """Mean cross-entropy over labeled positions, with gradients for every tensor."""
    logits, caches = forward_batch(params, config, batch)
    B, L, V = logits.shape
    G, hd = config.n_heads, config.head_dim

    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=-1, keepdims=True)
    labeled = batch.labels >= 0
    safe_labels = np.maximum(batch.labels, 0)
    picked = np.take_along_axis(probs, safe_labels[:, :, None], axis=-1)[:, :, 0]
    logp = np.log(np.maximum(picked, 1e-300))
    n = max(batch.n_labeled, 1)
    loss = float(-(logp * labeled).sum() / n)

    grads = {name: np.zeros_like(params[name]) for name, _ in parameter_schema(config)}
    dlogits = probs.copy()
    onehot_rows = np.zeros_like(probs)
    np.put_along_axis(onehot_rows, safe_labels[:, :, None], 1.0, axis=-1)
    dlogits -= onehot_rows
    dlogits *= (labeled[:, :, None] / n)

    h = caches["h"]
    grads["head_w"] = np.einsum("bld,blv->dv", h, dlogits)
    dh = dlogits @ params["head_w"].T
    dx, dg, db = _ln_backward(dh, caches["lnfc"], params["ln_f_g"])
    grads["ln_f_g"] = dg
    grads["ln_f_b"] = db

    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        c = caches[i]
        # MLP branch
        df = dx
        grads[p + "w_ff2"] = np.einsum("blf,bld->fd", c["r"], df)
        grads[p + "b_ff2"] = df.sum(axis=(0, 1))
        dr = df @ params[p + "w_ff2"].T
        du = dr * (c["u"] > 0.0)
        grads[p + "w_ff1"] = np.einsum("bld,blf->df", c["m"], du)
        grads[p + "b_ff1"] = du.sum(axis=(0, 1))
        dm = du @ params[p + "w_ff1"].T
        dx_attn, dg, db = _ln_backward(dm, c["ln2c"], params[p + "ln2_g"])
        grads[p + "ln2_g"] = dg
        grads[p + "ln2_b"] = db
        dx_attn = dx_attn + dx  # residual skip
        # attention branch
        do = dx_attn
        grads[p + "w_o"] = np.einsum("bld,ble->de", c["ctx"], do)
        grads[p + "b_o"] = do.sum(axis=(0, 1))
        dctx = _split_heads(do @ params[p + "w_o"].T, G)
        datt = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["att"].transpose(0, 1, 3, 2) @ dctx
        dscores = c["att"] * (datt - (datt * c["att"]).sum(axis=-1, keepdims=True))
        dscores /= np.sqrt(hd)
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
        dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
        a = c["a"]
        grads[p + "w_q"] = np.einsum("bld,ble->de", a, dq)
        grads[p + "b_q"] = dq.sum(axis=(0, 1))
        grads[p + "w_k"] = np.einsum("bld,ble->de", a, dk)
        grads[p + "b_k"] = dk.sum(axis=(0, 1))
        grads[p + "w_v"] = np.einsum("bld,ble->de", a, dv)
        grads[p + "b_v"] = dv.sum(axis=(0, 1))
        da = dq @ params[p + "w_q"].T + dk @ params[p + "w_k"].T + dv @ params[p + "w_v"].T
        dx_in, dg, db = _ln_backward(da, c["ln1c"], params[p + "ln1_g"])
        grads[p + "ln1_g"] = dg
        grads[p + "ln1_b"] = db
        dx = dx_in + dx_attn  # residual skip
    # embeddings
    vis_rows = batch.is_vis
    if config.n_visual_tokens > 0 and vis_rows.any():
        np.add.at(grads["vis_emb"], batch.ids[vis_rows], dx[vis_rows])
    np.add.at(grads["tok_emb"], batch.ids[~vis_rows], dx[~vis_rows])
    grads["pos_emb"][: batch.ids.shape[1]] += dx.sum(axis=0)
    return loss, grads


class AdamState:
    def __init__(self, params, lr=3e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def fit_model(
    checkpoint: Checkpoint,
    examples: list[TrainExample],
    epochs: int = 10,
    batch_size: int = 32,
    lr: float = 3e-3,
    seed: int = 0,
    log_fn=None,
) -> tuple[Checkpoint, list[float]]:
    """Returns a new trained checkpoint and the per-epoch mean loss curve."""
    if not examples:
        raise DataError("no training examples")
    config = checkpoint.config
    params = {k: v.astype(np.float64) for k, v in checkpoint.params.items()}
    adam = AdamState(params, lr=lr)
    rng = np.random.default_rng([seed, 7])
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(examples), batch_size):
            chunk = [examples[int(i)] for i in order[start: start + batch_size]]
            batch = make_batch(config, chunk)
            loss, grads = loss_and_grads(params, config, batch)
            adam.update(params, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if log_fn is not None:
            log_fn(f"epoch {epoch + 1}/{epochs}: loss {history[-1]:.4f}")
    trained = Checkpoint(
        config=config,
        params={k: v.astype(np.float32) for k, v in params.items()},
        meta={"train": {
            "epochs": epochs, "batch_size": batch_size, "lr": lr, "seed": seed,
            "n_examples": len(examples),
            "final_loss": history[-1] if history else None,
        }},
    )
    return trained, history
