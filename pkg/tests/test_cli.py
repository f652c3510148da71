import json
import os

import pytest

from ecdkit.cli import main
from ecdkit.corpus import load_corpus
from ecdkit.detector import load_detector
from ecdkit.model import load_checkpoint


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """End-to-end artifacts: corpus -> model -> detector -> generations."""
    root = tmp_path_factory.mktemp("cliws")
    corpus = str(root / "corpus")
    model = str(root / "model.ckpt")
    detector = str(root / "detector.bin")

    assert main(["make-corpus", "--out", corpus, "--n-records", "40",
                 "--n-objects", "8", "--eval-fraction", "0.3", "--seed", "5"]) == 0
    assert main(["train-model", "--corpus", corpus, "--out", model,
                 "--epochs", "2", "--batch-size", "16", "--n-layers", "2",
                 "--n-heads", "2", "--d-model", "32", "--d-ff", "64",
                 "--max-seq-len", "64", "--qa-per-record", "1", "--seed", "5"]) == 0
    assert main(["train-detector", "--corpus", corpus, "--model", model,
                 "--out", detector, "--splits", "3", "--max-length", "10",
                 "--seed", "5", "--dump-features"]) == 0

    gens = {}
    for name, extra in (
        ("regular", ["--mode", "regular"]),
        ("ecd", ["--mode", "ecd", "--detector", detector, "--alpha", "6.0"]),
    ):
        out = str(root / f"gen_{name}.jsonl")
        assert main(["generate", "--model", model, "--corpus", corpus,
                     "--task", "caption", "--split", "eval", "--limit", "4",
                     "--max-length", "8", "--seed", "2", "--out", out] + extra) == 0
        gens[name] = out
    for task, extra in (("pope", ["--k-per-image", "1"]), ("mme", [])):
        out = str(root / f"gen_{task}.jsonl")
        assert main(["generate", "--model", model, "--corpus", corpus,
                     "--task", task, "--split", "eval", "--limit", "3",
                     "--max-length", "6", "--seed", "2", "--out", out] + extra) == 0
        gens[task] = out
    return {"root": root, "corpus": corpus, "model": model,
            "detector": detector, "gens": gens}


def test_pipeline_artifacts(ws):
    bundle = load_corpus(ws["corpus"])
    assert bundle.meta["run_config"]["command"] == "make-corpus"
    assert bundle.meta["run_config"]["n_records"] == 40
    assert len(bundle.eval_records) == 12

    ckpt = load_checkpoint(ws["model"])
    assert ckpt.config.d_model == 32
    assert ckpt.meta["train"]["run_config"]["command"] == "train-model"
    assert os.path.exists(ws["model"] + ".loss.png")

    det = load_detector(ws["detector"])
    assert det.schema.n_layers == ckpt.config.n_layers
    assert det.training_meta["run_config"]["command"] == "train-detector"
    assert 0.0 < det.training_meta["prevalence"] < 1.0

    report_dir = ws["detector"] + ".report"
    for name in ("report.json", "report.tsv", "crossval.png",
                 "curves_training_set.png", "features_schema.json",
                 "features.jsonl"):
        assert os.path.exists(os.path.join(report_dir, name)), name
    with open(os.path.join(report_dir, "report.json"), encoding="utf-8") as fh:
        rep = json.load(fh)
    assert rep["run_config"]["splits"] == 3
    assert len(rep["splits"]) == 3
    with open(os.path.join(report_dir, "report.tsv"), encoding="utf-8") as fh:
        lines = fh.read().strip().split("\n")
    assert lines[0].split("\t") == ["split", "acc", "auroc", "auprc"]
    assert len(lines) == 1 + 3 + 1  # header, splits, mean (std)


def test_generation_records_parse(ws):
    bundle = load_corpus(ws["corpus"])
    ids = {r.record_id for r in bundle.eval_records}
    reg = _read_jsonl(ws["gens"]["regular"])
    assert len(reg) == 4
    for entry in reg:
        assert entry["config"]["mode"] == "regular"
        assert entry["meta"]["record_id"] in ids
        assert all(isinstance(t, int) for t in entry["token_ids"])
        assert entry["finish_reason"] in ("eos", "max_length", "context_full")

    ecd = _read_jsonl(ws["gens"]["ecd"])
    for entry in ecd:
        assert entry["config"]["mode"] == "ecd"
        assert entry["config"]["alpha"] == 6.0
        assert entry["counters"]["n_classifier_evals"] > 0

    pope = _read_jsonl(ws["gens"]["pope"])
    assert len(pope) == 3 * 2  # one positive and one negative per record
    assert {e["meta"]["polarity"] for e in pope} == {0, 1}

    mme = _read_jsonl(ws["gens"]["mme"])
    assert len(mme) == 3 * 2


def test_generate_rerun_is_deterministic_modulo_timing(ws, tmp_path):
    out = str(tmp_path / "again.jsonl")
    assert main(["generate", "--model", ws["model"], "--corpus", ws["corpus"],
                 "--task", "caption", "--split", "eval", "--limit", "4",
                 "--max-length", "8", "--seed", "2", "--out", out,
                 "--mode", "regular"]) == 0
    first = _read_jsonl(ws["gens"]["regular"])
    second = _read_jsonl(out)
    for a, b in zip(first, second):
        a.pop("timing"), b.pop("timing")
        assert a == b


def test_evaluate_chair(ws, tmp_path):
    out = str(tmp_path / "chair")
    assert main(["evaluate", "--records", ws["gens"]["regular"],
                 "--corpus", ws["corpus"], "--benchmark", "chair",
                 "--out", out]) == 0
    with open(os.path.join(out, "chair.json"), encoding="utf-8") as fh:
        rep = json.load(fh)
    assert rep["n_captions"] == 4
    assert 0.0 <= rep["chair_i"] <= 1.0
    assert rep["run_config"]["command"] == "evaluate"
    assert os.path.exists(os.path.join(out, "chair.tsv"))
    assert os.path.exists(os.path.join(out, "chair.png"))


def test_evaluate_pope(ws, tmp_path):
    out = str(tmp_path / "pope")
    assert main(["evaluate", "--records", ws["gens"]["pope"],
                 "--corpus", ws["corpus"], "--benchmark", "pope",
                 "--out", out]) == 0
    with open(os.path.join(out, "pope.json"), encoding="utf-8") as fh:
        rep = json.load(fh)
    assert rep["n_questions"] == 6
    assert rep["tp"] + rep["fp"] + rep["tn"] + rep["fn"] == 6
    assert os.path.exists(os.path.join(out, "pope.png"))


def test_evaluate_mme(ws, tmp_path):
    out = str(tmp_path / "mme")
    assert main(["evaluate", "--records", ws["gens"]["mme"],
                 "--corpus", ws["corpus"], "--benchmark", "mme",
                 "--out", out]) == 0
    with open(os.path.join(out, "mme.json"), encoding="utf-8") as fh:
        rep = json.load(fh)
    assert rep["n_images"] == 3
    assert rep["combined"] == rep["accuracy"] + rep["accuracy_plus"]
    assert os.path.exists(os.path.join(out, "mme.png"))


def test_evaluate_rejects_task_mismatch(ws, tmp_path):
    assert main(["evaluate", "--records", ws["gens"]["pope"],
                 "--corpus", ws["corpus"], "--benchmark", "chair",
                 "--out", str(tmp_path / "bad")]) == 2


def test_benchmark_command(ws, tmp_path):
    out = str(tmp_path / "bench")
    assert main(["benchmark", "--model", ws["model"], "--corpus", ws["corpus"],
                 "--detector", ws["detector"], "--n-prompts", "10",
                 "--max-length", "3", "--out", out]) == 0
    with open(os.path.join(out, "benchmark.json"), encoding="utf-8") as fh:
        rep = json.load(fh)
    assert set(rep["modes"]) == {"regular", "ecd", "dual_pass_baseline"}
    assert rep["modes"]["dual_pass_baseline"]["n_forward_passes"] == \
        2 * rep["modes"]["dual_pass_baseline"]["n_tokens"]
    assert os.path.exists(os.path.join(out, "benchmark.tsv"))
    assert os.path.exists(os.path.join(out, "latency.png"))


def test_benchmark_mode_subset(ws, tmp_path):
    out = str(tmp_path / "bench2")
    assert main(["benchmark", "--model", ws["model"], "--corpus", ws["corpus"],
                 "--n-prompts", "10", "--max-length", "2",
                 "--modes", "regular", "--out", out]) == 0
    with open(os.path.join(out, "benchmark.json"), encoding="utf-8") as fh:
        rep = json.load(fh)
    assert list(rep["modes"]) == ["regular"]


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["make-corpus"],                                     # missing --out
    ["generate", "--task", "nonsense"],
    ["evaluate", "--benchmark", "rouge"],
])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_ecd_without_detector_exits_1(ws, tmp_path):
    assert main(["generate", "--model", ws["model"], "--corpus", ws["corpus"],
                 "--mode", "ecd", "--limit", "1", "--max-length", "4",
                 "--out", str(tmp_path / "x.jsonl")]) == 1
    assert main(["benchmark", "--model", ws["model"], "--corpus", ws["corpus"],
                 "--modes", "ecd", "--out", str(tmp_path / "b")]) == 1
    assert main(["benchmark", "--model", ws["model"], "--corpus", ws["corpus"],
                 "--modes", "regular,warp", "--out", str(tmp_path / "b")]) == 1


def test_missing_inputs_exit_2(ws, tmp_path):
    missing = str(tmp_path / "nope")
    assert main(["train-model", "--corpus", missing,
                 "--out", str(tmp_path / "m.ckpt")]) == 2
    assert main(["generate", "--model", missing, "--corpus", ws["corpus"],
                 "--out", str(tmp_path / "g.jsonl")]) == 2
    assert main(["evaluate", "--records", missing, "--corpus", ws["corpus"],
                 "--out", str(tmp_path / "e")]) == 2


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert main(["generate", "--help"]) == 0
    capsys.readouterr()


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_records": 30, "seed": 9, "n_objects": 6}),
                   encoding="utf-8")
    out = str(tmp_path / "corpus")
    # flag beats file, file beats default
    assert main(["make-corpus", "--config", str(cfg), "--out", out,
                 "--n-records", "12"]) == 0
    bundle = load_corpus(out)
    assert bundle.meta["n_records"] == 12
    assert bundle.meta["seed"] == 9
    assert bundle.meta["n_objects"] == 6


def test_config_file_validation(tmp_path):
    bad_key = tmp_path / "bad.json"
    bad_key.write_text(json.dumps({"frobs": 3}), encoding="utf-8")
    assert main(["make-corpus", "--config", str(bad_key),
                 "--out", str(tmp_path / "c")]) == 1

    not_obj = tmp_path / "arr.json"
    not_obj.write_text("[1, 2]", encoding="utf-8")
    assert main(["make-corpus", "--config", str(not_obj),
                 "--out", str(tmp_path / "c")]) == 1

    garbled = tmp_path / "garbled.json"
    garbled.write_text("{nope", encoding="utf-8")
    assert main(["make-corpus", "--config", str(garbled),
                 "--out", str(tmp_path / "c")]) == 2

    assert main(["make-corpus", "--config", str(tmp_path / "absent.json"),
                 "--out", str(tmp_path / "c")]) == 2


def test_make_corpus_with_model(tmp_path):
    out = str(tmp_path / "corpus")
    assert main(["make-corpus", "--out", out, "--n-records", "10",
                 "--n-objects", "6", "--seed", "3", "--with-model"]) == 0
    ckpt = load_checkpoint(os.path.join(out, "model.ckpt"))
    bundle = load_corpus(out)
    assert ckpt.config.vocab_size == len(bundle.vocab)
    assert ckpt.config.n_visual_tokens == bundle.n_visual_tokens()
    assert os.path.exists(os.path.join(out, "model.ckpt.loss.png"))
