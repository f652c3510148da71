"""Command-line interface.

Subcommands: make-corpus, train-model, train-detector, generate, evaluate,
benchmark. Every value can come from --config (a flat JSON object keyed by
the flag names with underscores); explicit flags win over the file, the
file wins over built-in defaults. Report paths write JSON, a TSV table,
and PNG figures side by side. Exit codes: 0 success, 1 usage error,
2 data/file error, 3 internal invariant violation.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import corpus as corpus_mod
from . import evalbench, reporting
from .decoding import (DecodeConfig, MODES, benchmark_latency, generate)
from .detector import (BoostedTreesConfig, DetectorBundle, LogisticConfig,
                       load_detector, predict_score, save_detector,
                       train_boosted_trees, train_logistic)
from .errors import DataError, EcdkitError, InvariantError, UsageError
from .features import (FeatureExtractionConfig, GenerationHistory,
                       assemble_features, build_schema, fit_standardizer,
                       write_feature_dump, write_schema_header)
from .metrics import crossval_report
from .model import (ModelConfig, N_SPECIAL, init_model, load_checkpoint,
                    save_checkpoint)
from .training import fit_model


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ecdkit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat JSON file of defaults")
        return p

    p = add("make-corpus", "generate a synthetic annotated corpus")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-records", type=int, default=None)
    p.add_argument("--n-objects", type=int, default=None)
    p.add_argument("--distractor-rate", type=float, default=None)
    p.add_argument("--eval-fraction", type=float, default=None)
    p.add_argument(
        "--with-model", action=argparse.BooleanOptionalAction, default=None,
        help="also fit a small decoder on the fresh corpus (writes <out>/model.ckpt)",
    )

    p = add("train-model", "fit the toy captioning model on a corpus")
    p.add_argument("--corpus", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-layers", type=int, default=None)
    p.add_argument("--n-heads", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--max-seq-len", type=int, default=None)
    p.add_argument("--qa-per-record", type=int, default=None)

    p = add("train-detector", "fit a hallucination detector on model generations")
    p.add_argument("--corpus", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--report-dir", default=None)
    p.add_argument("--classifier", choices=("logistic", "boosted_trees"), default=None)
    p.add_argument("--splits", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-length", type=int, default=None)
    p.add_argument("--top-p", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--n-trees", type=int, default=None)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--length-penalty", type=float, default=None)
    p.add_argument("--kl-full", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--dump-features", action=argparse.BooleanOptionalAction, default=None)

    p = add("generate", "decode captions or yes/no answers over corpus prompts")
    p.add_argument("--model", default=None)
    p.add_argument("--detector", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--split", choices=("train", "eval"), default=None)
    p.add_argument("--task", choices=("caption", "pope", "mme"), default=None)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--strategy", choices=("greedy", "nucleus"), default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--dual-gamma", type=float, default=None)
    p.add_argument("--top-p", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-length", type=int, default=None)
    p.add_argument("--min-length", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--pope-strategy", choices=evalbench.POPE_STRATEGIES, default=None)
    p.add_argument("--k-per-image", type=int, default=None)
    p.add_argument("--out", default=None)

    p = add("evaluate", "score generation records against corpus annotations")
    p.add_argument("--records", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--benchmark", choices=("chair", "pope", "mme"), default=None)
    p.add_argument("--out", default=None)

    p = add("benchmark", "compare per-token decoding latency across modes")
    p.add_argument("--model", default=None)
    p.add_argument("--detector", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--n-prompts", type=int, default=None)
    p.add_argument("--modes", default=None, help="comma-separated subset of modes")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--dual-gamma", type=float, default=None)
    p.add_argument("--top-p", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-length", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    return parser


_DEFAULTS = {
    "make-corpus": {
        "out": None, "seed": 0, "n_records": 500, "n_objects": 40,
        "distractor_rate": 0.35, "eval_fraction": 0.2, "with_model": False,
    },
    "train-model": {
        "corpus": None, "out": None, "epochs": 10, "batch_size": 32, "lr": 3e-3,
        "seed": 0, "n_layers": 4, "n_heads": 4, "d_model": 128, "d_ff": 256,
        "max_seq_len": 128, "qa_per_record": 2,
    },
    "train-detector": {
        "corpus": None, "model": None, "out": None, "report_dir": None,
        "classifier": "logistic", "splits": 10, "seed": 0, "max_length": 24,
        "top_p": 0.9, "temperature": 1.0, "l2": 1e-3, "n_trees": 200,
        "max_depth": 3, "learning_rate": 0.1, "length_penalty": 1.0,
        "kl_full": False, "dump_features": False,
    },
    "generate": {
        "model": None, "detector": None, "corpus": None, "split": "eval",
        "task": "caption", "mode": "regular", "strategy": "nucleus",
        "alpha": 1.0, "beta": 0.1, "dual_gamma": 1.0, "top_p": 0.9,
        "temperature": 1.0, "max_length": 256, "min_length": 1, "seed": 0,
        "limit": 0, "pope_strategy": "random", "k_per_image": 3, "out": None,
    },
    "evaluate": {"records": None, "corpus": None, "benchmark": "chair", "out": None},
    "benchmark": {
        "model": None, "detector": None, "corpus": None, "n_prompts": 10,
        "modes": "regular,ecd,dual_pass_baseline", "alpha": 1.0, "beta": 0.1,
        "dual_gamma": 1.0, "top_p": 0.9, "temperature": 1.0, "max_length": 24,
        "seed": 0, "out": None,
    },
}


def _resolve(args) -> dict:
    defaults = _DEFAULTS[args.command]
    from_file = {}
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {args.config}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise UsageError(
                f"config file has unknown keys for {args.command}: {sorted(unknown)}"
            )
    out = {}
    for key, default in defaults.items():
        v = getattr(args, key, None)
        if v is None:
            v = from_file.get(key, default)
        out[key] = v
    return out


def _require(cfg: dict, *keys):
    for key in keys:
        if cfg[key] in (None, ""):
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _run_config(command: str, cfg: dict) -> dict:
    return {"command": command, **{k: cfg[k] for k in sorted(cfg)}}


def cmd_make_corpus(cfg: dict) -> int:
    _require(cfg, "out")
    bundle = corpus_mod.generate_corpus(
        n_records=cfg["n_records"], seed=cfg["seed"], n_objects=cfg["n_objects"],
        distractor_rate=cfg["distractor_rate"], eval_fraction=cfg["eval_fraction"],
    )
    bundle.meta["run_config"] = _run_config("make-corpus", cfg)
    corpus_mod.write_corpus(bundle, cfg["out"])
    print(
        f"wrote corpus to {cfg['out']}: {len(bundle.train_records)} train / "
        f"{len(bundle.eval_records)} eval records, |V| = {len(bundle.vocab)}"
    )
    if cfg["with_model"]:
        # Quick fixed profile; use train-model directly for full control.
        config = ModelConfig(
            vocab_size=len(bundle.vocab), n_layers=4, n_heads=4, d_model=64,
            d_ff=128, max_seq_len=96, n_visual_tokens=bundle.n_visual_tokens(),
            seed=cfg["seed"],
        )
        config.validate()
        examples = corpus_mod.training_examples(
            bundle, config, qa_per_record=2, seed=cfg["seed"]
        )
        trained, history = fit_model(
            init_model(config), examples, epochs=6, batch_size=32, lr=3e-3,
            seed=cfg["seed"], log_fn=print,
        )
        trained.meta["train"]["run_config"] = _run_config("make-corpus", cfg)
        ckpt_path = os.path.join(cfg["out"], "model.ckpt")
        save_checkpoint(trained, ckpt_path)
        reporting.loss_curve_figure(history, ckpt_path + ".loss.png")
        print(f"wrote checkpoint to {ckpt_path} (final loss {history[-1]:.4f})")
    return 0


def cmd_train_model(cfg: dict) -> int:
    _require(cfg, "corpus", "out")
    bundle = corpus_mod.load_corpus(cfg["corpus"])
    config = ModelConfig(
        vocab_size=len(bundle.vocab),
        n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"],
        d_model=cfg["d_model"],
        d_ff=cfg["d_ff"],
        max_seq_len=cfg["max_seq_len"],
        n_visual_tokens=bundle.n_visual_tokens(),
        seed=cfg["seed"],
    )
    config.validate()
    examples = corpus_mod.training_examples(
        bundle, config, qa_per_record=cfg["qa_per_record"], seed=cfg["seed"]
    )
    checkpoint = init_model(config)
    trained, history = fit_model(
        checkpoint, examples, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        lr=cfg["lr"], seed=cfg["seed"], log_fn=print,
    )
    trained.meta["train"]["run_config"] = _run_config("train-model", cfg)
    save_checkpoint(trained, cfg["out"])
    reporting.loss_curve_figure(history, cfg["out"] + ".loss.png")
    print(f"wrote checkpoint to {cfg['out']} (final loss {history[-1]:.4f})")
    return 0


def _detector_training_data(checkpoint, bundle, decode_cfg, schema, extraction):
    """Generate train-split captions and label object tokens against truth."""
    rows, labels, dump = [], [], []
    for idx, rec in enumerate(bundle.train_records):
        state = corpus_mod.caption_state(rec, bundle, checkpoint.config)
        gen = generate(
            checkpoint, state, replace(decode_cfg, seed=decode_cfg.seed + idx),
            keep_traces=True,
        )
        for k, step in enumerate(gen.steps):
            if step.chosen_id < N_SPECIAL:
                continue
            word = bundle.vocab.tokens[step.chosen_id]
            canon = bundle.synonyms.get(word)
            if canon is None:
                continue
            label = 0 if canon in rec.objects else 1
            history = GenerationHistory(
                token_ids=[s.chosen_id for s in gen.steps[:k]],
                chosen_logprobs=[s.chosen_logprob for s in gen.steps[:k]],
            )
            vec = assemble_features(schema, step.trace, history,
                                    step.chosen_id, step.step, extraction)
            rows.append(vec)
            labels.append(label)
            dump.append((step.step, step.chosen_id, label, vec))
    if not rows:
        raise DataError("generated captions contain no object tokens to label")
    x = np.vstack(rows)
    z = np.asarray(labels, dtype=np.int64)
    if z.sum() == 0 or z.sum() == z.shape[0]:
        raise DataError(
            "labeled generations are single-class "
            f"({int(z.sum())} hallucinated of {z.shape[0]}); cannot train a detector"
        )
    return x, z, dump


def cmd_train_detector(cfg: dict) -> int:
    _require(cfg, "corpus", "model", "out")
    bundle = corpus_mod.load_corpus(cfg["corpus"])
    checkpoint = load_checkpoint(cfg["model"])
    schema = build_schema(checkpoint.config.n_layers, checkpoint.config.n_heads)
    extraction = FeatureExtractionConfig(
        length_penalty=cfg["length_penalty"], kl_full=cfg["kl_full"]
    )
    decode_cfg = DecodeConfig(
        mode="regular", strategy="nucleus", top_p=cfg["top_p"],
        temperature=cfg["temperature"], max_length=cfg["max_length"], seed=cfg["seed"],
    )
    x, z, dump = _detector_training_data(checkpoint, bundle, decode_cfg, schema, extraction)
    print(f"labeled {x.shape[0]} object tokens, prevalence {z.mean():.3f}")

    if cfg["classifier"] == "logistic":
        clf_cfg = LogisticConfig(l2=cfg["l2"], seed=cfg["seed"])
    else:
        clf_cfg = BoostedTreesConfig(
            n_trees=cfg["n_trees"], max_depth=cfg["max_depth"],
            learning_rate=cfg["learning_rate"], seed=cfg["seed"],
        )

    def train_fn(x_tr, z_tr):
        stats = fit_standardizer(x_tr)
        if cfg["classifier"] == "logistic":
            model = train_logistic(stats.apply(x_tr), z_tr, clf_cfg)
        else:
            model = train_boosted_trees(stats.apply(x_tr), z_tr, clf_cfg)
        return stats, model

    def score_fn(fitted, x_val):
        stats, model = fitted
        return predict_score(model, stats.apply(x_val))

    report = crossval_report(
        x, z, train_fn, score_fn, k_splits=cfg["splits"], seed=cfg["seed"],
        classifier=cfg["classifier"],
    )
    stats, model = train_fn(x, z)
    bundle_out = DetectorBundle(
        schema=schema,
        extraction=extraction,
        standardizer=stats,
        model=model,
        training_meta={
            "run_config": _run_config("train-detector", cfg),
            "n_examples": int(z.shape[0]),
            "prevalence": float(z.mean()),
            "crossval_mean": report.mean,
            "crossval_std": report.std,
        },
    )
    save_detector(bundle_out, cfg["out"])

    report_dir = cfg["report_dir"] or cfg["out"] + ".report"
    os.makedirs(report_dir, exist_ok=True)
    payload = {"run_config": _run_config("train-detector", cfg), **report.to_dict()}
    reporting.write_json(os.path.join(report_dir, "report.json"), payload)
    reporting.write_tsv(
        os.path.join(report_dir, "report.tsv"),
        ["split", "acc", "auroc", "auprc"], report.table_rows(),
    )
    reporting.crossval_figure(report, os.path.join(report_dir, "crossval.png"))
    train_scores = bundle_out.score(x)
    reporting.detector_curves_figure(
        train_scores, z, os.path.join(report_dir, "curves_training_set.png")
    )
    if cfg["dump_features"]:
        write_schema_header(schema, extraction,
                            os.path.join(report_dir, "features_schema.json"))
        write_feature_dump(os.path.join(report_dir, "features.jsonl"), schema, dump)
    print(
        f"wrote detector to {cfg['out']} "
        f"(crossval auroc {report.mean['auroc']:.3f} +/- {report.std['auroc']:.3f}, "
        f"auprc {report.mean['auprc']:.3f})"
    )
    return 0


def _decode_config(cfg: dict) -> DecodeConfig:
    dc = DecodeConfig(
        mode=cfg.get("mode", "regular"),
        strategy=cfg.get("strategy", "nucleus"),
        alpha=cfg.get("alpha", 1.0),
        beta=cfg.get("beta", 0.1),
        dual_gamma=cfg.get("dual_gamma", 1.0),
        top_p=cfg.get("top_p", 0.9),
        temperature=cfg.get("temperature", 1.0),
        max_length=cfg.get("max_length", 256),
        min_length=cfg.get("min_length", 1),
        seed=cfg.get("seed", 0),
    )
    dc.validate()
    return dc


def cmd_generate(cfg: dict) -> int:
    _require(cfg, "model", "corpus", "out")
    bundle = corpus_mod.load_corpus(cfg["corpus"])
    checkpoint = load_checkpoint(cfg["model"])
    detector = load_detector(cfg["detector"]) if cfg["detector"] else None
    decode_cfg = _decode_config(cfg)
    records = bundle.eval_records if cfg["split"] == "eval" else bundle.train_records
    if cfg["limit"]:
        records = records[: cfg["limit"]]
    if not records:
        raise DataError(f"corpus split {cfg['split']!r} is empty")

    prompts = []
    if cfg["task"] == "caption":
        for rec in records:
            prompts.append((corpus_mod.caption_state(rec, bundle, checkpoint.config),
                            {"task": "caption", "record_id": rec.record_id}))
    elif cfg["task"] == "pope":
        questions = evalbench.build_pope_questions(
            records, bundle.objects, strategy=cfg["pope_strategy"],
            k_per_image=cfg["k_per_image"], seed=cfg["seed"],
        )
        by_id = evalbench.records_by_id(records)
        for q in questions:
            state = corpus_mod.question_state(
                by_id[q.record_id], bundle, checkpoint.config, q.object_name
            )
            prompts.append((state, {
                "task": "pope", "record_id": q.record_id, "object": q.object_name,
                "polarity": q.polarity, "strategy": q.strategy,
            }))
    else:
        pairs = evalbench.mme_build_pairs(records, bundle.objects, seed=cfg["seed"])
        by_id = evalbench.records_by_id(records)
        for q in pairs:
            state = corpus_mod.question_state(
                by_id[q.record_id], bundle, checkpoint.config, q.object_name
            )
            prompts.append((state, {
                "task": "mme", "record_id": q.record_id, "object": q.object_name,
                "polarity": q.polarity, "strategy": q.strategy,
            }))

    n_lines = 0
    with open(cfg["out"], "w", encoding="utf-8") as fh:
        for i, (state, meta) in enumerate(prompts):
            rec = generate(
                checkpoint, state, replace(decode_cfg, seed=decode_cfg.seed + i),
                detector=detector, vocab=bundle.vocab, meta=meta,
            )
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True,
                                separators=(",", ":")) + "\n")
            n_lines += 1
    print(f"wrote {n_lines} generation records to {cfg['out']}")
    return 0


def _read_generation_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{ln}: bad generation record: {exc}") from exc
    if not out:
        raise DataError(f"{path} holds no generation records")
    return out


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "records", "corpus", "out")
    bundle = corpus_mod.load_corpus(cfg["corpus"])
    raw = _read_generation_records(cfg["records"])
    by_id = evalbench.records_by_id(bundle.train_records + bundle.eval_records)
    os.makedirs(cfg["out"], exist_ok=True)
    bench = cfg["benchmark"]

    def rec_for(entry):
        meta = entry.get("meta", {})
        rid = meta.get("record_id")
        if rid not in by_id:
            raise DataError(f"generation record references unknown record id {rid!r}")
        return by_id[rid], meta

    if bench == "chair":
        items = []
        for entry in raw:
            record, meta = rec_for(entry)
            if meta.get("task") != "caption":
                raise DataError("chair evaluation needs caption-task records")
            tokens = bundle.vocab.decode([int(t) for t in entry["token_ids"]])
            items.append((record, tokens))
        report = evalbench.chair_metrics(items, bundle.synonyms)
        payload = {"run_config": _run_config("evaluate", cfg), **report.to_dict()}
        reporting.write_json(os.path.join(cfg["out"], "chair.json"), payload)
        reporting.write_tsv(
            os.path.join(cfg["out"], "chair.tsv"),
            ["metric", "value"],
            [["chair_i", f"{report.chair_i:.6f}"],
             ["chair_s", f"{report.chair_s:.6f}"],
             ["coverage", f"{report.coverage:.6f}"],
             ["n_captions", str(report.n_captions)],
             ["n_mentioned", str(report.n_mentioned)],
             ["n_hallucinated", str(report.n_hallucinated)]],
        )
        reporting.chair_figure(report, os.path.join(cfg["out"], "chair.png"))
        print(
            f"chair_i {report.chair_i:.4f}, chair_s {report.chair_s:.4f}, "
            f"coverage {report.coverage:.4f} over {report.n_captions} captions"
        )
    elif bench == "pope":
        questions, answers = [], []
        for entry in raw:
            record, meta = rec_for(entry)
            if meta.get("task") != "pope":
                raise DataError("pope evaluation needs pope-task records")
            questions.append(evalbench.PopeQuestion(
                record_id=record.record_id, object_name=meta["object"],
                polarity=int(meta["polarity"]), strategy=meta.get("strategy", "random"),
            ))
            answers.append(evalbench.parse_binary_answer(entry.get("text") or ""))
        report = evalbench.pope_evaluate(questions, answers)
        payload = {"run_config": _run_config("evaluate", cfg), **report.to_dict()}
        reporting.write_json(os.path.join(cfg["out"], "pope.json"), payload)
        reporting.write_tsv(
            os.path.join(cfg["out"], "pope.tsv"),
            ["metric", "value"],
            [[k, f"{getattr(report, k):.6f}"] for k in
             ("accuracy", "precision", "recall", "f1")]
            + [[k, str(getattr(report, k))] for k in ("tp", "fp", "tn", "fn")],
        )
        reporting.pope_figure(report, os.path.join(cfg["out"], "pope.png"))
        print(
            f"pope {report.strategy}: acc {report.accuracy:.4f}, "
            f"precision {report.precision:.4f}, recall {report.recall:.4f}, "
            f"f1 {report.f1:.4f}"
        )
    else:
        questions, answers = [], []
        for entry in raw:
            record, meta = rec_for(entry)
            if meta.get("task") != "mme":
                raise DataError("mme evaluation needs mme-task records")
            questions.append(evalbench.PopeQuestion(
                record_id=record.record_id, object_name=meta["object"],
                polarity=int(meta["polarity"]), strategy="mme",
            ))
            answers.append(evalbench.parse_binary_answer(entry.get("text") or ""))
        report = evalbench.mme_score(questions, answers)
        payload = {"run_config": _run_config("evaluate", cfg), **report.to_dict()}
        reporting.write_json(os.path.join(cfg["out"], "mme.json"), payload)
        reporting.write_tsv(
            os.path.join(cfg["out"], "mme.tsv"),
            ["metric", "value"],
            [["accuracy", f"{report.accuracy:.4f}"],
             ["accuracy_plus", f"{report.accuracy_plus:.4f}"],
             ["combined", f"{report.combined:.4f}"],
             ["n_images", str(report.n_images)]],
        )
        reporting.mme_figure(report, os.path.join(cfg["out"], "mme.png"))
        print(
            f"mme: accuracy {report.accuracy:.2f}, accuracy+ {report.accuracy_plus:.2f}, "
            f"combined {report.combined:.2f}"
        )
    return 0


def cmd_benchmark(cfg: dict) -> int:
    _require(cfg, "model", "corpus", "out")
    bundle = corpus_mod.load_corpus(cfg["corpus"])
    checkpoint = load_checkpoint(cfg["model"])
    detector = load_detector(cfg["detector"]) if cfg["detector"] else None
    modes = tuple(m.strip() for m in cfg["modes"].split(",") if m.strip())
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {MODES}")
    if "ecd" in modes and detector is None:
        raise UsageError("benchmarking mode 'ecd' requires --detector")
    records = bundle.eval_records[: cfg["n_prompts"]]
    states = [corpus_mod.caption_state(r, bundle, checkpoint.config) for r in records]
    decode_cfg = _decode_config({**cfg, "mode": "regular", "strategy": "nucleus",
                                 "min_length": 1})
    report = benchmark_latency(checkpoint, states, decode_cfg,
                               detector=detector, modes=modes)
    os.makedirs(cfg["out"], exist_ok=True)
    payload = {"run_config": _run_config("benchmark", cfg), **report.to_dict()}
    reporting.write_json(os.path.join(cfg["out"], "benchmark.json"), payload)
    from .decoding import BENCH_TABLE_HEADER
    reporting.write_tsv(os.path.join(cfg["out"], "benchmark.tsv"),
                        BENCH_TABLE_HEADER, report.table_rows())
    reporting.latency_figure(report, os.path.join(cfg["out"], "latency.png"))
    for row in report.table_rows():
        print("  ".join(row))
    return 0


_COMMANDS = {
    "make-corpus": cmd_make_corpus,
    "train-model": cmd_train_model,
    "train-detector": cmd_train_detector,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(args)
        return _COMMANDS[args.command](cfg)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (InvariantError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    except EcdkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
