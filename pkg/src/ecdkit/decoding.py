"""Decoding loops: regular, detector-contrastive, and dual-pass contrastive.

The detector-contrastive rule rescores the adaptive-plausibility candidate
set with

    p_out(y) = softmax_{y in V_head}[ (1 + alpha) * log p(y) - alpha * log p_f(y) ]

where p_f is the hallucination score of the meta-classifier; tokens outside
V_head get probability 0. V_head keeps every token whose model probability
is at least beta times the maximum. The dual-pass baseline contrasts the
model run on the original state against a run whose visual prefix is
replaced by noise; it costs a second forward pass per step, whereas the
detector adds only |V_head| classifier evaluations.

All sampling paths consume exactly one uniform draw per step, so runs with
matched seeds are comparable token for token across modes.
"""

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .detector import DetectorBundle
from .errors import ConfigError, UsageError
from .features import GenerationHistory, features_for_candidates
from .model import (Checkpoint, EOS_ID, ForwardTrace, PromptState,
                    forward_step)
from .numerics import EPS_SCORE, safe_log, softmax

MODES = ("regular", "ecd", "dual_pass_baseline")
STRATEGIES = ("greedy", "nucleus")


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "regular"
    strategy: str = "nucleus"
    alpha: float = 1.0
    beta: float = 0.1
    dual_gamma: float = 1.0
    top_p: float = 0.9
    temperature: float = 1.0
    max_length: int = 256
    min_length: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.dual_gamma < 0:
            raise ConfigError(f"dual_gamma must be >= 0, got {self.dual_gamma}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.max_length < 1:
            raise ConfigError(f"max_length must be >= 1, got {self.max_length}")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError(
                f"min_length must be in [1, max_length], got {self.min_length}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def apply_apc(p: np.ndarray, beta: float) -> np.ndarray:
    """Adaptive plausibility: token ids with p >= beta * max p, ascending.

    Never empty; beta = 0 keeps the whole vocabulary and beta = 1 keeps
    exactly the argmax tie set.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must be in [0, 1], got {beta}")
    p = np.asarray(p, dtype=np.float64)
    return np.nonzero(p >= beta * p.max())[0]


def apply_ecd(
    p: np.ndarray, p_f: np.ndarray, alpha: float, candidates: np.ndarray
) -> np.ndarray:
    """Contrast model probabilities against hallucination scores on candidates."""
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    p = np.asarray(p, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.shape[0] == 0:
        raise ConfigError("candidate set is empty")
    p_f = np.clip(np.asarray(p_f, dtype=np.float64), EPS_SCORE, 1.0 - EPS_SCORE)
    if p_f.shape != candidates.shape:
        raise ConfigError("need one hallucination score per candidate")
    logits = (1.0 + alpha) * safe_log(p[candidates]) - alpha * np.log(p_f)
    out = np.zeros_like(p)
    out[candidates] = softmax(logits)
    return out


def contrast_distribution(
    p_orig: np.ndarray, p_dist: np.ndarray, gamma: float, candidates: np.ndarray
) -> np.ndarray:
    """softmax[(1 + gamma) log p_orig - gamma log p_dist] over candidates."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.shape[0] == 0:
        raise ConfigError("candidate set is empty")
    logits = (1.0 + gamma) * safe_log(p_orig[candidates]) \
        - gamma * safe_log(p_dist[candidates])
    out = np.zeros_like(np.asarray(p_orig, dtype=np.float64))
    out[candidates] = softmax(logits)
    return out


def make_distorted_state(
    state: PromptState, checkpoint: Checkpoint, seed: int
) -> PromptState:
    """Same text, visual prefix replaced by seeded Gaussian noise embeddings."""
    cfg = checkpoint.config
    rng = np.random.default_rng([seed, 17])
    scale = float(checkpoint.params["vis_emb"].std()) if cfg.n_visual_tokens > 0 else 0.02
    noise = rng.normal(0.0, max(scale, 1e-8), (cfg.n_visual_tokens, cfg.d_model))
    return PromptState(
        visual_prefix_ids=list(state.visual_prefix_ids),
        query_ids=list(state.query_ids),
        generated_ids=list(state.generated_ids),
        visual_noise=noise,
    )


def dual_pass_baseline_step(
    checkpoint: Checkpoint,
    state: PromptState,
    distorted_state: PromptState,
    gamma: float,
    beta: float = 0.0,
) -> np.ndarray:
    """One contrastive step: forward both states, contrast on the APC set."""
    p_orig = forward_step(checkpoint, state).final_dist
    p_dist = forward_step(checkpoint, distorted_state).final_dist
    return contrast_distribution(p_orig, p_dist, gamma, apply_apc(p_orig, beta))


def score_candidates(
    bundle: DetectorBundle,
    trace: ForwardTrace,
    history: GenerationHistory,
    candidates: np.ndarray,
    step: int,
) -> np.ndarray:
    """Hallucination score p_f for each candidate token at this step."""
    feats = features_for_candidates(
        bundle.schema, trace, history, candidates, step, bundle.extraction
    )
    return np.atleast_1d(bundle.score(feats))


def _temper(p: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return p
    return softmax(safe_log(p) / temperature)


def _pick_greedy(p: np.ndarray) -> int:
    return int(np.argmax(p))


def _pick_nucleus(p: np.ndarray, top_p: float, rng: np.random.Generator) -> int:
    """Smallest top-probability set with mass >= top_p, inverse-CDF sampled.

    Ties sort by token id; zero-probability tokens are never chosen. Exactly
    one uniform draw is consumed per call.
    """
    order = np.lexsort((np.arange(p.shape[0]), -p))
    ps = p[order]
    cum = np.cumsum(ps)
    total = cum[-1]
    k = int(np.searchsorted(cum, top_p * total, side="left"))
    cum_set = cum[: k + 1]
    u = rng.random()
    j = int(np.searchsorted(cum_set, u * cum_set[-1], side="right"))
    return int(order[min(j, k)])


@dataclass
class StepRecord:
    step: int
    chosen_id: int
    chosen_logprob: float          # log p under the untempered model distribution
    model_ns: int
    classifier_ns: int
    n_forward_passes: int
    n_classifier_evals: int
    candidates: np.ndarray | None = None
    halluc_scores: np.ndarray | None = None
    original_dist: np.ndarray | None = None
    pool_dist: np.ndarray | None = None
    trace: ForwardTrace | None = None


@dataclass
class GenerationRecord:
    config: DecodeConfig
    visual_prefix_ids: list[int]
    query_ids: list[int]
    token_ids: list[int]
    text: str | None
    steps: list[StepRecord]
    n_forward_passes: int
    n_classifier_evals: int
    model_ns: int
    classifier_ns: int
    total_ns: int
    finish_reason: str
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def to_json_dict(self) -> dict:
        """Compact serializable form; wall-clock values live under 'timing'."""
        return {
            "config": self.config.to_dict(),
            "meta": self.meta,
            "prompt": {
                "visual_prefix_ids": list(self.visual_prefix_ids),
                "query_ids": list(self.query_ids),
            },
            "token_ids": list(self.token_ids),
            "text": self.text,
            "n_steps": self.n_steps,
            "finish_reason": self.finish_reason,
            "counters": {
                "n_forward_passes": self.n_forward_passes,
                "n_classifier_evals": self.n_classifier_evals,
            },
            "timing": {
                "model_ns": self.model_ns,
                "classifier_ns": self.classifier_ns,
                "total_ns": self.total_ns,
                "per_step_model_ns": [s.model_ns for s in self.steps],
                "per_step_classifier_ns": [s.classifier_ns for s in self.steps],
            },
        }


def generate(
    checkpoint: Checkpoint,
    state: PromptState,
    config: DecodeConfig,
    detector: DetectorBundle | None = None,
    vocab=None,
    keep_step_arrays: bool = False,
    keep_traces: bool = False,
    meta: dict | None = None,
) -> GenerationRecord:
    """Autoregressively extend the state until EOS or max_length tokens."""
    config.validate()
    if config.mode == "ecd" and detector is None:
        raise UsageError("mode 'ecd' requires a detector")
    cfg = checkpoint.config
    rng = np.random.default_rng(config.seed)
    history = GenerationHistory()
    cur = PromptState(
        visual_prefix_ids=list(state.visual_prefix_ids),
        query_ids=list(state.query_ids),
        generated_ids=list(state.generated_ids),
        visual_noise=state.visual_noise,
    )
    distorted = None
    if config.mode == "dual_pass_baseline":
        distorted = make_distorted_state(cur, checkpoint, config.seed)

    steps: list[StepRecord] = []
    token_ids: list[int] = []
    finish_reason = "max_length"
    t_start = time.perf_counter_ns()

    for t in range(1, config.max_length + 1):
        if cur.total_len > cfg.max_seq_len:
            finish_reason = "context_full"
            break
        t0 = time.perf_counter_ns()
        trace = forward_step(checkpoint, cur)
        n_fwd = 1
        p_dist = None
        if config.mode == "dual_pass_baseline":
            trace_d = forward_step(checkpoint, distorted)
            p_dist = _temper(trace_d.final_dist, config.temperature)
            n_fwd = 2
        model_ns = time.perf_counter_ns() - t0

        p_base = _temper(trace.final_dist, config.temperature)
        if t < config.min_length:
            p_base = p_base.copy()
            p_base[EOS_ID] = 0.0
            p_base = p_base / p_base.sum()

        candidates = None
        scores = None
        classifier_ns = 0
        n_evals = 0
        if config.mode == "regular":
            pool = p_base
        elif config.mode == "ecd":
            candidates = apply_apc(p_base, config.beta)
            c0 = time.perf_counter_ns()
            scores = score_candidates(detector, trace, history, candidates, t)
            classifier_ns = time.perf_counter_ns() - c0
            n_evals = int(candidates.shape[0])
            pool = apply_ecd(p_base, scores, config.alpha, candidates)
        else:
            candidates = apply_apc(p_base, config.beta)
            pool = contrast_distribution(p_base, p_dist, config.dual_gamma, candidates)

        if config.strategy == "greedy":
            chosen = _pick_greedy(pool)
        else:
            chosen = _pick_nucleus(pool, config.top_p, rng)

        chosen_logprob = float(safe_log(trace.final_dist[chosen]))
        rec = StepRecord(
            step=t,
            chosen_id=chosen,
            chosen_logprob=chosen_logprob,
            model_ns=model_ns,
            classifier_ns=classifier_ns,
            n_forward_passes=n_fwd,
            n_classifier_evals=n_evals,
        )
        if keep_step_arrays:
            rec.candidates = candidates
            rec.halluc_scores = scores
            rec.original_dist = p_base.copy()
            rec.pool_dist = pool.copy()
        if keep_traces:
            rec.trace = trace
        steps.append(rec)

        history.append(chosen, chosen_logprob)
        token_ids.append(chosen)
        cur = cur.extended(chosen)
        if distorted is not None:
            distorted = distorted.extended(chosen)
        if chosen == EOS_ID:
            finish_reason = "eos"
            break

    total_ns = time.perf_counter_ns() - t_start
    text = vocab.decode_text(token_ids) if vocab is not None else None
    return GenerationRecord(
        config=config,
        visual_prefix_ids=list(state.visual_prefix_ids),
        query_ids=list(state.query_ids),
        token_ids=token_ids,
        text=text,
        steps=steps,
        n_forward_passes=sum(s.n_forward_passes for s in steps),
        n_classifier_evals=sum(s.n_classifier_evals for s in steps),
        model_ns=sum(s.model_ns for s in steps),
        classifier_ns=sum(s.classifier_ns for s in steps),
        total_ns=total_ns,
        finish_reason=finish_reason,
        meta=meta or {},
    )


@dataclass
class ModeStats:
    mode: str
    n_prompts: int
    n_tokens: int
    n_forward_passes: int
    n_classifier_evals: int
    per_token_mean_ns: float
    per_token_median_ns: float
    per_response_mean_ns: float
    per_response_median_ns: float
    model_ns: int
    classifier_ns: int
    classifier_share: float
    model_per_step_ns: float
    classifier_per_step_ns: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchmarkReport:
    config: DecodeConfig
    modes: dict[str, ModeStats]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "modes": {k: v.to_dict() for k, v in self.modes.items()},
        }

    def table_rows(self) -> list[list[str]]:
        rows = []
        for name, s in self.modes.items():
            rows.append([
                name,
                str(s.n_prompts),
                str(s.n_tokens),
                str(s.n_forward_passes),
                str(s.n_classifier_evals),
                f"{s.per_token_mean_ns / 1e6:.3f}",
                f"{s.per_token_median_ns / 1e6:.3f}",
                f"{s.per_response_mean_ns / 1e6:.3f}",
                f"{s.classifier_share:.4f}",
            ])
        return rows


BENCH_TABLE_HEADER = [
    "mode", "prompts", "tokens", "forwards", "clf_evals",
    "ms/token mean", "ms/token median", "ms/response mean", "clf share",
]


def benchmark_latency(
    checkpoint: Checkpoint,
    states: list[PromptState],
    config: DecodeConfig,
    detector: DetectorBundle | None = None,
    modes: tuple[str, ...] = MODES,
) -> BenchmarkReport:
    """Generate with each mode over the same prompts and compare step costs."""
    if len(states) < 10:
        raise UsageError(f"benchmark requires at least 10 prompts, got {len(states)}")
    out = {}
    for mode in modes:
        if mode not in MODES:
            raise UsageError(f"unknown mode {mode!r}")
        per_token = []
        per_response = []
        n_tokens = n_fwd = n_evals = 0
        model_ns = classifier_ns = 0
        model_steps = []
        clf_steps = []
        for i, st in enumerate(states):
            cfg_i = replace(config, mode=mode, seed=config.seed + i)
            rec = generate(checkpoint, st, cfg_i, detector=detector)
            n_tokens += rec.n_steps
            n_fwd += rec.n_forward_passes
            n_evals += rec.n_classifier_evals
            model_ns += rec.model_ns
            classifier_ns += rec.classifier_ns
            per_response.append(rec.total_ns)
            for s in rec.steps:
                per_token.append(s.model_ns + s.classifier_ns)
                model_steps.append(s.model_ns)
                clf_steps.append(s.classifier_ns)
        busy = model_ns + classifier_ns
        out[mode] = ModeStats(
            mode=mode,
            n_prompts=len(states),
            n_tokens=n_tokens,
            n_forward_passes=n_fwd,
            n_classifier_evals=n_evals,
            per_token_mean_ns=float(np.mean(per_token)),
            per_token_median_ns=float(np.median(per_token)),
            per_response_mean_ns=float(np.mean(per_response)),
            per_response_median_ns=float(np.median(per_response)),
            model_ns=model_ns,
            classifier_ns=classifier_ns,
            classifier_share=classifier_ns / busy if busy else 0.0,
            model_per_step_ns=float(np.mean(model_steps)) if model_steps else 0.0,
            classifier_per_step_ns=float(np.mean(clf_steps)) if clf_steps else 0.0,
        )
    return BenchmarkReport(config=config, modes=out)
