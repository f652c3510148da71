"""End-to-end acceptance gate.

Each criterion prints exactly one ACCEPTANCE <n> PASS or FAIL line and
enforces its runtime budget. The tolerances are contractual: loosening
one is a behavior change, not a cleanup.
"""

import json
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np

from conftest import random_history, random_trace
from oracles import oracle_auprc, oracle_auroc, oracle_features
from test_evalbench import SYN, _ten_caption_fixture

from ecdkit.cli import main
from ecdkit.decoding import (DecodeConfig, apply_apc, apply_ecd,
                             benchmark_latency, generate)
from ecdkit.detector import (BoostedTreesConfig, DetectorBundle, LogisticConfig,
                             predict_score, train_boosted_trees, train_logistic)
from ecdkit.evalbench import chair_metrics
from ecdkit.features import (FeatureExtractionConfig, assemble_features,
                             build_schema, fit_standardizer)
from ecdkit.metrics import auprc, auroc, crossval_report
from ecdkit.model import PromptState, default_config, forward_step, init_model


@contextmanager
def _criterion(n, budget_s=None):
    t0 = time.perf_counter()
    try:
        yield
        if budget_s is not None:
            elapsed = time.perf_counter() - t0
            assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:.0f}s"
    except BaseException:
        print(f"ACCEPTANCE {n} FAIL")
        raise
    print(f"ACCEPTANCE {n} PASS")


def _prompt(mc, n_text=5, seed=0):
    rng = np.random.default_rng(seed)
    return PromptState(
        visual_prefix_ids=[int(v) for v in
                           rng.integers(0, mc.n_visual_tokens, mc.n_visual_tokens)],
        query_ids=[int(v) for v in rng.integers(4, mc.vocab_size, n_text)],
    )


def test_criterion_1_reduction_identities(tiny_ckpt, tiny_mc, toy_detector):
    with _criterion(1, budget_s=10.0):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 65))
            p = rng.random(n) + 1e-9
            p /= p.sum()
            cands = apply_apc(p, 0.0)
            out = apply_ecd(p, rng.random(cands.shape[0]), 0.0, cands)
            assert np.max(np.abs(out - p)) <= 1e-9

        for k in (1, 2, 5):
            raw = rng.random(16) * 0.5
            idx = sorted(int(i) for i in rng.choice(16, size=k, replace=False))
            raw[idx] = 0.9
            p = raw / raw.sum()
            assert list(apply_apc(p, 1.0)) == idx

        st = _prompt(tiny_mc)
        for seed in range(5):
            reg = generate(tiny_ckpt, st,
                           DecodeConfig(mode="regular", strategy="nucleus",
                                        max_length=10, seed=seed))
            neutral = generate(tiny_ckpt, st,
                               DecodeConfig(mode="ecd", strategy="nucleus",
                                            alpha=0.0, beta=0.0, max_length=10,
                                            seed=seed),
                               detector=toy_detector)
            assert neutral.token_ids == reg.token_ids


def test_criterion_2_monotone_suppression():
    with _criterion(2):
        rng = np.random.default_rng(1)
        violations = 0
        for _ in range(10000):
            n = int(rng.integers(2, 41))
            p = rng.random(n) + 1e-6
            p /= p.sum()
            p_f = rng.uniform(0.02, 0.95, n)
            alpha = float(rng.uniform(0.05, 6.0))
            j = int(rng.integers(n))
            bumped = p_f.copy()
            bumped[j] = min(bumped[j] + float(rng.uniform(0.005, 0.04)), 0.999)
            cands = np.arange(n)
            before = apply_ecd(p, p_f, alpha, cands)
            after = apply_ecd(p, bumped, alpha, cands)
            if not after[j] < before[j]:
                violations += 1
        assert violations == 0


def test_criterion_3_feature_extraction_matches_brute_force():
    with _criterion(3):
        schema = build_schema(4, 4)
        cfg = FeatureExtractionConfig()
        i_nll_last = schema.names.index("nll_l4")
        i_logp = schema.names.index("log_prob")
        rng = np.random.default_rng(7)
        for _ in range(100):
            trace = random_trace(rng, n_layers=4, n_heads=4, vocab_size=64,
                                 n_visual_tokens=8)
            hist = random_history(rng, int(rng.integers(0, 6)), 64)
            token = int(rng.integers(64))
            step = len(hist.token_ids) + 1
            vec = assemble_features(schema, trace, hist, token, step, cfg)
            want = np.asarray(oracle_features(
                trace.attention, trace.early_exit_dists, 8,
                hist.token_ids, hist.chosen_logprobs, token, step))
            assert np.max(np.abs(vec - want)) <= 1e-9
            assert vec[i_nll_last] == -vec[i_logp]  # bitwise, not approximate


def test_criterion_4_metrics_match_exhaustive_oracles():
    with _criterion(4):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(2, 51))
            scores = rng.random(n)
            if rng.random() < 0.5:
                scores = np.round(scores, 1)  # force heavy ties
            labels = rng.integers(0, 2, n)
            while labels.sum() in (0, n):
                labels = rng.integers(0, 2, n)
            assert abs(auroc(scores, labels) - oracle_auroc(scores, labels)) <= 1e-9
            assert abs(auprc(scores, labels) - oracle_auprc(scores, labels)) <= 1e-9

        assert auroc(np.array([0.1, 0.4, 0.35, 0.8]),
                     np.array([0, 0, 1, 1])) == 0.75

        rep = chair_metrics(_ten_caption_fixture(), SYN)
        assert rep.chair_i == 4 / 15
        assert rep.chair_s == 3 / 10
        assert rep.coverage == 11 / 19


def _standardized_lr(x_tr, z_tr):
    stats = fit_standardizer(x_tr)
    return stats, train_logistic(stats.apply(x_tr), z_tr, LogisticConfig(l2=1e-3))


def _standardized_gb(x_tr, z_tr):
    stats = fit_standardizer(x_tr)
    cfg = BoostedTreesConfig(n_trees=80, max_depth=2, learning_rate=0.3)
    return stats, train_boosted_trees(stats.apply(x_tr), z_tr, cfg)


def _fitted_score(fitted, x_val):
    stats, model = fitted
    return predict_score(model, stats.apply(x_val))


def test_criterion_5_planted_signal_is_recovered():
    with _criterion(5, budget_s=120.0):
        schema = build_schema(4, 4)
        rng = np.random.default_rng(42)
        n = 600
        z = (rng.random(n) < 0.35).astype(np.int64)
        x = rng.normal(size=(n, schema.dim))
        nll_cols = [schema.names.index(f"nll_l{i}") for i in range(1, 5)]
        for c in nll_cols:
            x[:, c] += 1.2 * z  # hallucinated rows sit higher on every exit nll
        prevalence = float(z.mean())

        rep = crossval_report(x, z, _standardized_lr, _fitted_score,
                              k_splits=10, seed=0, classifier="logistic")
        assert rep.mean["auroc"] >= 0.90, rep.mean
        assert rep.mean["auprc"] >= prevalence + 0.30, rep.mean

        # interaction-only labels: linear scores stay near chance,
        # trees recover the quadrant rule
        n2 = 400
        sx = rng.choice([-1.0, 1.0], size=n2)
        sy = rng.choice([-1.0, 1.0], size=n2)
        x2 = rng.normal(scale=0.1, size=(n2, 6))
        x2[:, 0] += sx
        x2[:, 1] += sy
        z2 = ((sx * sy) > 0).astype(np.int64)
        rep_lr = crossval_report(x2, z2, _standardized_lr, _fitted_score,
                                 k_splits=10, seed=0, classifier="logistic")
        rep_gb = crossval_report(x2, z2, _standardized_gb, _fitted_score,
                                 k_splits=10, seed=0, classifier="boosted_trees")
        assert rep_lr.mean["auroc"] <= 0.6, rep_lr.mean
        assert rep_gb.mean["auroc"] >= rep_lr.mean["auroc"], (rep_gb.mean,
                                                              rep_lr.mean)


def test_criterion_6_single_pass_latency_advantage():
    with _criterion(6, budget_s=120.0):
        mc = default_config()
        ckpt = init_model(mc)
        schema = build_schema(mc.n_layers, mc.n_heads)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, schema.dim))
        z = (rng.random(64) < 0.4).astype(np.int64)
        stats = fit_standardizer(x)
        model = train_logistic(stats.apply(x), z, LogisticConfig(l2=1e-2,
                                                                 max_iter=50))
        det = DetectorBundle(schema=schema, extraction=FeatureExtractionConfig(),
                             standardizer=stats, model=model, training_meta={})
        states = [_prompt(mc, n_text=6, seed=i) for i in range(10)]
        cfg = DecodeConfig(strategy="nucleus", max_length=16, beta=0.1, seed=0)
        report = benchmark_latency(ckpt, states, cfg, detector=det)
        reg = report.modes["regular"]
        ecd = report.modes["ecd"]
        dual = report.modes["dual_pass_baseline"]

        assert reg.n_forward_passes == reg.n_tokens
        assert ecd.n_forward_passes == ecd.n_tokens
        assert dual.n_forward_passes == 2 * dual.n_tokens
        assert ecd.n_classifier_evals > 0
        assert reg.n_classifier_evals == 0 and dual.n_classifier_evals == 0

        assert ecd.per_token_mean_ns <= 0.75 * dual.per_token_mean_ns, (
            ecd.per_token_mean_ns, dual.per_token_mean_ns)
        assert ecd.classifier_per_step_ns <= 0.25 * ecd.model_per_step_ns, (
            ecd.classifier_per_step_ns, ecd.model_per_step_ns)


def test_criterion_7_cli_pipeline_reduces_hallucination(tmp_path):
    with _criterion(7, budget_s=300.0):
        corpus = str(tmp_path / "corpus")
        model = str(tmp_path / "model.ckpt")
        detector = str(tmp_path / "detector.bin")
        assert main(["make-corpus", "--out", corpus, "--n-records", "120",
                     "--n-objects", "12", "--seed", "0"]) == 0
        assert main(["train-model", "--corpus", corpus, "--out", model,
                     "--epochs", "8", "--batch-size", "32", "--lr", "0.003",
                     "--n-layers", "4", "--n-heads", "4", "--d-model", "64",
                     "--d-ff", "128", "--max-seq-len", "96",
                     "--qa-per-record", "2", "--seed", "0"]) == 0
        assert main(["train-detector", "--corpus", corpus, "--model", model,
                     "--out", detector, "--seed", "0"]) == 0

        chair = {"regular": [], "ecd": []}
        for mode in ("regular", "ecd"):
            for s in range(5):
                gen = str(tmp_path / f"gen_{mode}_{s}.jsonl")
                argv = ["generate", "--model", model, "--corpus", corpus,
                        "--task", "caption", "--split", "eval",
                        "--mode", mode, "--strategy", "nucleus",
                        "--max-length", "24", "--seed", str(1000 * s),
                        "--out", gen]
                if mode == "ecd":
                    argv += ["--detector", detector]
                assert main(argv) == 0
                outdir = str(tmp_path / f"chair_{mode}_{s}")
                assert main(["evaluate", "--records", gen, "--corpus", corpus,
                             "--benchmark", "chair", "--out", outdir]) == 0
                with open(f"{outdir}/chair.json", encoding="utf-8") as fh:
                    chair[mode].append(json.load(fh)["chair_i"])
        mean_reg = float(np.mean(chair["regular"]))
        mean_ecd = float(np.mean(chair["ecd"]))
        assert mean_ecd < mean_reg, (chair["ecd"], chair["regular"])

        pope_gen = str(tmp_path / "gen_pope.jsonl")
        assert main(["generate", "--model", model, "--corpus", corpus,
                     "--task", "pope", "--k-per-image", "2", "--split", "eval",
                     "--mode", "ecd", "--detector", detector,
                     "--max-length", "6", "--seed", "0",
                     "--out", pope_gen]) == 0
        pope_out = str(tmp_path / "pope")
        assert main(["evaluate", "--records", pope_gen, "--corpus", corpus,
                     "--benchmark", "pope", "--out", pope_out]) == 0
        with open(f"{pope_out}/pope.json", encoding="utf-8") as fh:
            pope = json.load(fh)
        assert pope["tp"] + pope["fp"] + pope["tn"] + pope["fn"] == \
            pope["n_questions"]

        again = str(tmp_path / "again.jsonl")
        assert main(["generate", "--model", model, "--corpus", corpus,
                     "--task", "caption", "--split", "eval",
                     "--mode", "regular", "--strategy", "nucleus",
                     "--max-length", "24", "--seed", "0",
                     "--out", again]) == 0

        def lines_sans_timing(path):
            with open(path, encoding="utf-8") as fh:
                rows = [json.loads(line) for line in fh if line.strip()]
            for row in rows:
                row.pop("timing")
            return rows

        assert lines_sans_timing(again) == \
            lines_sans_timing(str(tmp_path / "gen_regular_0.jsonl"))


def test_criterion_8_distribution_and_finiteness_invariants(tiny_ckpt, tiny_mc,
                                                            toy_detector):
    with _criterion(8):
        for i in range(10):
            trace = forward_step(tiny_ckpt, _prompt(tiny_mc, seed=i))
            assert np.all(np.abs(trace.attention.sum(axis=-1) - 1.0) <= 1e-6)
            assert np.all(np.abs(trace.early_exit_dists.sum(axis=-1) - 1.0) <= 1e-6)
            assert abs(trace.final_dist.sum() - 1.0) <= 1e-6

        st = _prompt(tiny_mc)
        for mode in ("regular", "ecd", "dual_pass_baseline"):
            rec = generate(tiny_ckpt, st,
                           DecodeConfig(mode=mode, strategy="nucleus",
                                        max_length=6, beta=0.2, seed=3),
                           detector=toy_detector if mode == "ecd" else None,
                           keep_step_arrays=True, keep_traces=True)
            for s in rec.steps:
                assert abs(s.original_dist.sum() - 1.0) <= 1e-6
                assert abs(s.pool_dist.sum() - 1.0) <= 1e-6
                assert np.all(np.abs(s.trace.attention.sum(axis=-1) - 1.0) <= 1e-6)
                assert np.all(
                    np.abs(s.trace.early_exit_dists.sum(axis=-1) - 1.0) <= 1e-6)
                if mode == "ecd":
                    assert np.all(np.isfinite(s.halluc_scores))

        schema = build_schema(4, 4)
        cfg = FeatureExtractionConfig()
        rng = np.random.default_rng(21)
        for _ in range(200):
            trace = random_trace(rng, n_layers=4, n_heads=4, vocab_size=32,
                                 n_visual_tokens=8, zero_attn_prob=0.4)
            hist = random_history(rng, int(rng.integers(0, 5)), 32)
            token = int(rng.integers(32))
            vec = assemble_features(schema, trace, hist, token,
                                    len(hist.token_ids) + 1, cfg)
            assert np.all(np.isfinite(vec))

        # adversarial trace: one-hot exits, so most tokens carry exact zeros
        trace = random_trace(rng, n_layers=4, n_heads=4, vocab_size=32,
                             n_visual_tokens=8)
        trace.early_exit_dists[:] = 0.0
        trace.early_exit_dists[:, 0] = 1.0
        trace.final_dist[:] = trace.early_exit_dists[-1]
        hist = random_history(rng, 3, 32)
        for token in (0, 5):  # certain token and impossible token
            vec = assemble_features(schema, trace, hist, token, 4, cfg)
            assert np.all(np.isfinite(vec))
