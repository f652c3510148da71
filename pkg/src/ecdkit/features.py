"""Per-token hallucination features computed from a forward trace.

A feature vector describes one candidate token y at generation step t
(steps are 1-based). It concatenates, in schema order:

  baselines (10 + G values):
    position            t
    occurrence          count of y among generated tokens, current included
    img_attn_mean_h*    last-layer per-head mean attention on the visual prefix
    log_prob            log p(y) under the final distribution
    cum_log_prob        running sum of stepwise chosen log-probs, current included
    seq_score           cum_log_prob / t**length_penalty
    logprob_variance    variance of the clamped vocabulary log-probs
    entropy             Shannon entropy normalized by log |V|, in [0, 1]
    variation_ratio     1 - max p
    prob_margin         variation_ratio + second-largest p
    prob_diff           log p(argmax) - log p(y)
  nll_l* (N values)     -log p_i(y) for each early-exit distribution
  kl_l* (N - 1 values)  pointwise divergence p_N(y) * log(p_N(y) / p_i(y));
                        a full-distribution variant is available via kl_full
  attn_entropy_layers_h* (G values)  visual-attention entropy averaged over layers
  attn_entropy_heads_l*  (N values)  visual-attention entropy averaged over heads

Every log is clamped from below at EPS_PROB and 0 * log 0 counts as 0.
"""

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvariantError
from .model import ForwardTrace
from .numerics import EPS_STD, entropy_term, safe_log


@dataclass(frozen=True)
class FeatureSchema:
    n_layers: int
    n_heads: int
    names: tuple[str, ...]

    @property
    def dim(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict:
        return {"n_layers": self.n_layers, "n_heads": self.n_heads, "names": list(self.names)}

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def build_schema(n_layers: int, n_heads: int) -> FeatureSchema:
    if n_layers < 1 or n_heads < 1:
        raise DataError("schema needs at least one layer and one head")
    names = ["position", "occurrence"]
    names += [f"img_attn_mean_h{g}" for g in range(1, n_heads + 1)]
    names += ["log_prob", "cum_log_prob", "seq_score", "logprob_variance",
              "entropy", "variation_ratio", "prob_margin", "prob_diff"]
    names += [f"nll_l{i}" for i in range(1, n_layers + 1)]
    names += [f"kl_l{i}" for i in range(1, n_layers)]
    names += [f"attn_entropy_layers_h{g}" for g in range(1, n_heads + 1)]
    names += [f"attn_entropy_heads_l{i}" for i in range(1, n_layers + 1)]
    schema = FeatureSchema(n_layers=n_layers, n_heads=n_heads, names=tuple(names))
    expected = (10 + n_heads) + n_layers + (n_layers - 1) + n_heads + n_layers
    if schema.dim != expected:
        raise InvariantError(f"schema dimension {schema.dim} != expected {expected}")
    return schema


def schema_from_dict(d: dict) -> FeatureSchema:
    schema = build_schema(int(d["n_layers"]), int(d["n_heads"]))
    if list(schema.names) != list(d.get("names", [])):
        raise DataError("feature schema names do not match the canonical order")
    return schema


@dataclass(frozen=True)
class FeatureExtractionConfig:
    length_penalty: float = 1.0
    kl_full: bool = False

    def to_dict(self) -> dict:
        return {"length_penalty": self.length_penalty, "kl_full": self.kl_full}


@dataclass
class GenerationHistory:
    """Previously chosen tokens and their stepwise log-probabilities."""

    token_ids: list[int] = field(default_factory=list)
    chosen_logprobs: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)

    def append(self, token_id: int, logprob: float) -> None:
        self.token_ids.append(int(token_id))
        self.chosen_logprobs.append(float(logprob))


def _check_trace(schema: FeatureSchema, trace: ForwardTrace) -> None:
    n_layers, n_heads = trace.early_exit_dists.shape[0], trace.attention.shape[1]
    if (n_layers, n_heads) != (schema.n_layers, schema.n_heads):
        raise DataError(
            f"trace has {n_layers} layers / {n_heads} heads, "
            f"schema expects {schema.n_layers} / {schema.n_heads}"
        )
    if trace.n_visual_tokens == 0:
        raise DataError("trace has no visual-prefix positions; attention features undefined")


def nll_per_layer(trace: ForwardTrace, token_id: int) -> np.ndarray:
    return -safe_log(trace.early_exit_dists[:, token_id])


def kl_per_layer(trace: ForwardTrace, token_id: int, full: bool = False) -> np.ndarray:
    p_final = trace.final_dist
    earlier = trace.early_exit_dists[:-1]
    if full:
        ratio = safe_log(p_final)[None, :] - safe_log(earlier)
        return np.sum(p_final[None, :] * ratio, axis=1)
    p_y = p_final[token_id]
    return p_y * (safe_log(p_y) - safe_log(earlier[:, token_id]))


def attn_entropy_over_layers(trace: ForwardTrace) -> np.ndarray:
    """Per head: visual-attention entropy averaged over layers and positions."""
    _require_visual(trace)
    terms = entropy_term(trace.attention[:, :, : trace.n_visual_tokens])
    return terms.mean(axis=(0, 2))


def attn_entropy_over_heads(trace: ForwardTrace) -> np.ndarray:
    """Per layer: visual-attention entropy averaged over heads and positions."""
    _require_visual(trace)
    terms = entropy_term(trace.attention[:, :, : trace.n_visual_tokens])
    return terms.mean(axis=(1, 2))


def _require_visual(trace: ForwardTrace) -> None:
    if trace.n_visual_tokens == 0:
        raise DataError("trace has no visual-prefix positions; attention features undefined")


def baseline_features(
    trace: ForwardTrace,
    history: GenerationHistory,
    token_id: int,
    step: int,
    length_penalty: float = 1.0,
) -> np.ndarray:
    _require_visual(trace)
    p = trace.final_dist
    log_p = safe_log(p)
    occurrence = 1 + history.token_ids.count(int(token_id))
    attn_mean = trace.attention[-1, :, : trace.n_visual_tokens].mean(axis=-1)
    lp = log_p[token_id]
    cum = float(np.sum(history.chosen_logprobs)) + lp
    seq_score = cum / step ** length_penalty
    variance = float(np.var(log_p))
    ent = float(np.sum(entropy_term(p))) / np.log(p.shape[0])
    p_max = float(np.max(p))
    second = float(np.partition(p, -2)[-2]) if p.shape[0] > 1 else 0.0
    r = 1.0 - p_max
    margin = r + second
    diff = safe_log(p_max) - lp
    return np.concatenate([
        [float(step), float(occurrence)],
        attn_mean,
        [lp, cum, seq_score, variance, ent, r, margin, diff],
    ])


def assemble_features(
    schema: FeatureSchema,
    trace: ForwardTrace,
    history: GenerationHistory,
    token_id: int,
    step: int,
    config: FeatureExtractionConfig = FeatureExtractionConfig(),
) -> np.ndarray:
    """Full feature vector for one candidate token at one step."""
    _check_trace(schema, trace)
    if step < 1:
        raise DataError(f"step must be >= 1, got {step}")
    if len(history) != step - 1:
        raise DataError(f"history has {len(history)} entries, step {step} expects {step - 1}")
    if not 0 <= token_id < trace.final_dist.shape[0]:
        raise DataError(f"token id {token_id} out of range")
    vec = np.concatenate([
        baseline_features(trace, history, token_id, step, config.length_penalty),
        nll_per_layer(trace, token_id),
        kl_per_layer(trace, token_id, full=config.kl_full),
        attn_entropy_over_layers(trace),
        attn_entropy_over_heads(trace),
    ])
    if vec.shape[0] != schema.dim:
        raise InvariantError(f"feature vector has {vec.shape[0]} dims, schema has {schema.dim}")
    return vec


def features_for_candidates(
    schema: FeatureSchema,
    trace: ForwardTrace,
    history: GenerationHistory,
    candidate_ids: np.ndarray,
    step: int,
    config: FeatureExtractionConfig = FeatureExtractionConfig(),
) -> np.ndarray:
    """Vectorized assemble_features over a candidate set; one row per candidate."""
    _check_trace(schema, trace)
    if step < 1:
        raise DataError(f"step must be >= 1, got {step}")
    if len(history) != step - 1:
        raise DataError(f"history has {len(history)} entries, step {step} expects {step - 1}")
    cands = np.asarray(candidate_ids, dtype=np.int64)
    p = trace.final_dist
    log_p = safe_log(p)
    n_c = cands.shape[0]

    counts = np.zeros(p.shape[0])
    for t in history.token_ids:
        counts[t] += 1
    occurrence = 1.0 + counts[cands]

    attn_mean = trace.attention[-1, :, : trace.n_visual_tokens].mean(axis=-1)
    lp = log_p[cands]
    past = float(np.sum(history.chosen_logprobs))
    cum = past + lp
    seq_score = cum / step ** config.length_penalty
    variance = float(np.var(log_p))
    ent = float(np.sum(entropy_term(p))) / np.log(p.shape[0])
    p_max = float(np.max(p))
    second = float(np.partition(p, -2)[-2]) if p.shape[0] > 1 else 0.0
    r = 1.0 - p_max
    margin = r + second
    diff = safe_log(p_max) - lp

    nll = -safe_log(trace.early_exit_dists[:, cands]).T              # (C, N)
    earlier = trace.early_exit_dists[:-1]
    if config.kl_full:
        ratio = safe_log(p)[None, :] - safe_log(earlier)
        kl = np.tile(np.sum(p[None, :] * ratio, axis=1), (n_c, 1))   # (C, N-1)
    else:
        p_y = p[cands]
        kl = (p_y[None, :] * (safe_log(p_y)[None, :] - safe_log(earlier[:, cands]))).T

    e_layers = attn_entropy_over_layers(trace)
    e_heads = attn_entropy_over_heads(trace)

    out = np.empty((n_c, schema.dim))
    out[:, 0] = float(step)
    out[:, 1] = occurrence
    col = 2
    out[:, col: col + schema.n_heads] = attn_mean[None, :]
    col += schema.n_heads
    out[:, col] = lp
    out[:, col + 1] = cum
    out[:, col + 2] = seq_score
    out[:, col + 3] = variance
    out[:, col + 4] = ent
    out[:, col + 5] = r
    out[:, col + 6] = margin
    out[:, col + 7] = diff
    col += 8
    out[:, col: col + schema.n_layers] = nll
    col += schema.n_layers
    out[:, col: col + schema.n_layers - 1] = kl
    col += schema.n_layers - 1
    out[:, col: col + schema.n_heads] = e_layers[None, :]
    col += schema.n_heads
    out[:, col: col + schema.n_layers] = e_heads[None, :]
    col += schema.n_layers
    if col != schema.dim:
        raise InvariantError(f"filled {col} feature columns, schema has {schema.dim}")
    return out


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray  # bool mask; these dimensions map to 0 under apply

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        scale = np.where(self.degenerate, 0.0, 1.0 / np.where(self.degenerate, 1.0, self.std))
        return (x - self.mean) * scale

    def unapply(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return np.where(self.degenerate, self.mean, z * self.std + self.mean)


def fit_standardizer(x: np.ndarray) -> StandardizationStats:
    """Per-dimension mean/std over the training matrix (population std)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("standardizer needs a 2-D matrix with at least two rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    degenerate = std < EPS_STD
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} feature dimension(s) have near-zero variance "
            "and will be mapped to 0",
            stacklevel=2,
        )
    return StandardizationStats(mean=mean, std=std, degenerate=degenerate)


def write_schema_header(schema: FeatureSchema, config: FeatureExtractionConfig, path) -> None:
    payload = {"schema": schema.to_dict(), "extraction": config.to_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_schema_header(path) -> tuple[FeatureSchema, FeatureExtractionConfig]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    schema = schema_from_dict(payload["schema"])
    ext = payload.get("extraction", {})
    config = FeatureExtractionConfig(
        length_penalty=float(ext.get("length_penalty", 1.0)),
        kl_full=bool(ext.get("kl_full", False)),
    )
    return schema, config


def write_feature_dump(path, schema: FeatureSchema, rows) -> None:
    """rows: iterable of (step, token_id, label or None, values)."""
    with open(path, "w", encoding="utf-8") as fh:
        for step, token_id, label, values in rows:
            values = np.asarray(values, dtype=np.float64)
            if values.shape[0] != schema.dim:
                raise DataError(
                    f"feature row has {values.shape[0]} values, schema has {schema.dim}"
                )
            rec = {
                "step": int(step),
                "token_id": int(token_id),
                "label": None if label is None else int(label),
                "values": [float(v) for v in values],
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_feature_dump(path, schema: FeatureSchema):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{ln}: unparseable feature row: {exc}") from exc
            values = np.asarray(rec["values"], dtype=np.float64)
            if values.shape[0] != schema.dim:
                raise DataError(
                    f"{path}:{ln}: feature row has {values.shape[0]} values, "
                    f"schema has {schema.dim}"
                )
            label = rec.get("label")
            rows.append((int(rec["step"]), int(rec["token_id"]),
                         None if label is None else int(label), values))
    return rows
