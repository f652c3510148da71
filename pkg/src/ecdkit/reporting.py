"""Report rendering: delimited tables plus matplotlib figures.

Every CLI report path writes machine-readable JSON, a TSV table, and PNG
figures side by side in the output directory.
"""

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import pr_curve_points, roc_curve_points  # noqa: E402


def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_tsv(path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def crossval_figure(report, path) -> None:
    names = ["acc", "auroc", "auprc"]
    means = [report.mean[n] for n in names]
    stds = [report.std[n] for n in names]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, means, yerr=stds, capsize=4, color=["#4878d0", "#ee854a", "#6acc64"])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("validation score")
    ax.set_title(f"{report.classifier} detector, {len(report.splits)} splits")
    for i, (m, s) in enumerate(zip(means, stds)):
        ax.text(i, m + s + 0.02, f"{m:.3f}", ha="center", fontsize=9)
    _save(fig, path)


def detector_curves_figure(scores, labels, path) -> None:
    fpr, tpr = roc_curve_points(scores, labels)
    recall, precision, _ = pr_curve_points(scores, labels)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.plot(fpr, tpr, marker=".", ms=3)
    ax1.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
    ax1.set_xlabel("false positive rate")
    ax1.set_ylabel("true positive rate")
    ax1.set_title("ROC")
    ax2.plot(recall, precision, marker=".", ms=3)
    ax2.set_xlabel("recall")
    ax2.set_ylabel("precision")
    ax2.set_ylim(0, 1.05)
    ax2.set_title("precision-recall")
    _save(fig, path)


def chair_figure(report, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = ["chair_i", "chair_s", "coverage"]
    vals = [report.chair_i, report.chair_s, report.coverage]
    ax.bar(names, vals, color=["#d65f5f", "#ee854a", "#6acc64"])
    ax.set_ylim(0, 1.05)
    ax.set_title(f"caption hallucination over {report.n_captions} captions")
    for i, v in enumerate(vals):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=9)
    _save(fig, path)


def chair_compare_figure(named_reports: dict, path) -> None:
    """Bar groups per decoding mode; named_reports maps label -> ChairReport."""
    names = list(named_reports)
    metrics = ["chair_i", "chair_s", "coverage"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(names), 1)
    for j, label in enumerate(names):
        rep = named_reports[label]
        vals = [rep.chair_i, rep.chair_s, rep.coverage]
        xs = [i + j * width for i in range(len(metrics))]
        ax.bar(xs, vals, width=width, label=label)
    ax.set_xticks([i + width * (len(names) - 1) / 2 for i in range(len(metrics))])
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    _save(fig, path)


def pope_figure(report, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = ["accuracy", "precision", "recall", "f1"]
    vals = [report.accuracy, report.precision, report.recall, report.f1]
    ax.bar(names, vals, color="#4878d0")
    ax.set_ylim(0, 1.05)
    ax.set_title(f"yes/no probing ({report.strategy}), {report.n_questions} questions")
    for i, v in enumerate(vals):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=9)
    _save(fig, path)


def mme_figure(report, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    names = ["accuracy", "accuracy+", "combined"]
    vals = [report.accuracy, report.accuracy_plus, report.combined]
    ax.bar(names, vals, color=["#4878d0", "#ee854a", "#6acc64"])
    ax.set_ylim(0, 205)
    ax.set_title(f"paired existence score over {report.n_images} images")
    for i, v in enumerate(vals):
        ax.text(i, v + 4, f"{v:.1f}", ha="center", fontsize=9)
    _save(fig, path)


def latency_figure(report, path) -> None:
    modes = list(report.modes)
    per_token_ms = [report.modes[m].per_token_mean_ns / 1e6 for m in modes]
    clf_ms = [report.modes[m].classifier_per_step_ns / 1e6 for m in modes]
    model_ms = [report.modes[m].model_per_step_ns / 1e6 for m in modes]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = range(len(modes))
    ax.bar(xs, model_ms, label="model", color="#4878d0")
    ax.bar(xs, clf_ms, bottom=model_ms, label="classifier", color="#ee854a")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(modes)
    ax.set_ylabel("ms per token (mean)")
    ax.legend(fontsize=8)
    for x, total in zip(xs, per_token_ms):
        ax.text(x, total * 1.02, f"{total:.2f}", ha="center", fontsize=9)
    _save(fig, path)


def loss_curve_figure(history: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(history) + 1), history, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    _save(fig, path)
