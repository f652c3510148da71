"""Caption and yes/no hallucination benchmarks over annotated records.

chair_metrics computes instance- and sentence-level hallucination rates:
an object mention counts once per caption, the instance rate is hallucinated
mentions over all mentions pooled across captions, the sentence rate is the
fraction of captions with at least one hallucinated mention, and coverage is
truth objects mentioned over truth objects labeled, pooled the same way.

Yes/no probing builds per-record questions whose negatives are chosen
uniformly (random), by global object frequency (popular), or by
co-occurrence with the record's objects (adversarial). The paired variant
scores existence questions per image: overall accuracy plus the fraction
of images with both questions right, combined into a 0-200 score.
"""

import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import AnnotatedRecord
from .errors import DataError, MetricUndefinedError

POPE_STRATEGIES = ("random", "popular", "adversarial")
_AFFIRMATIVE = ("yes",)
_NEGATIVE = ("no",)


def extract_objects(tokens, synonyms: dict[str, str]) -> list[str]:
    """Canonical objects mentioned, in first-mention order, once each."""
    seen = []
    for tok in tokens:
        canon = synonyms.get(str(tok).lower())
        if canon is not None and canon not in seen:
            seen.append(canon)
    return seen


def label_tokens(tokens, truth_objects, synonyms: dict[str, str]):
    """(index, token, canonical, label) for object-word tokens; label 1 = hallucinated."""
    truth = set(truth_objects)
    out = []
    for i, tok in enumerate(tokens):
        canon = synonyms.get(str(tok).lower())
        if canon is not None:
            out.append((i, str(tok), canon, 0 if canon in truth else 1))
    return out


@dataclass
class CaptionEval:
    record_id: str
    mentioned: list[str]
    hallucinated: list[str]
    matched: list[str]
    chair_i: float          # hallucinated / mentioned within this caption (0 if none mentioned)
    has_hallucination: bool
    coverage: float | None  # matched / truth, None when the record has no labels


@dataclass
class ChairReport:
    chair_i: float
    chair_s: float
    coverage: float
    n_captions: int
    n_mentioned: int
    n_hallucinated: int
    n_truth: int
    n_matched: int
    per_caption: list[CaptionEval]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "chair_i": self.chair_i,
            "chair_s": self.chair_s,
            "coverage": self.coverage,
            "n_captions": self.n_captions,
            "n_mentioned": self.n_mentioned,
            "n_hallucinated": self.n_hallucinated,
            "n_truth": self.n_truth,
            "n_matched": self.n_matched,
            "flags": self.flags,
            "per_caption": [
                {
                    "record_id": c.record_id,
                    "mentioned": c.mentioned,
                    "hallucinated": c.hallucinated,
                    "chair_i": c.chair_i,
                    "has_hallucination": c.has_hallucination,
                    "coverage": c.coverage,
                }
                for c in self.per_caption
            ],
        }


def chair_metrics(items, synonyms: dict[str, str]) -> ChairReport:
    """items: (AnnotatedRecord, caption_tokens) pairs."""
    if not items:
        raise MetricUndefinedError("no captions to score")
    per_caption = []
    n_mentioned = n_hall = n_truth = n_matched = n_hall_caps = 0
    for record, tokens in items:
        truth = set(record.objects)
        mentioned = extract_objects(tokens, synonyms)
        hallucinated = [m for m in mentioned if m not in truth]
        matched = [m for m in mentioned if m in truth]
        n_mentioned += len(mentioned)
        n_hall += len(hallucinated)
        n_truth += len(truth)
        n_matched += len(matched)
        n_hall_caps += bool(hallucinated)
        per_caption.append(CaptionEval(
            record_id=record.record_id,
            mentioned=mentioned,
            hallucinated=hallucinated,
            matched=matched,
            chair_i=len(hallucinated) / len(mentioned) if mentioned else 0.0,
            has_hallucination=bool(hallucinated),
            coverage=len(matched) / len(truth) if truth else None,
        ))
    flags = []
    if n_truth == 0:
        raise MetricUndefinedError("coverage undefined: no labeled objects in any record")
    if n_mentioned == 0:
        flags.append("no_object_mentions")
        chair_i = 0.0
    else:
        chair_i = n_hall / n_mentioned
    return ChairReport(
        chair_i=chair_i,
        chair_s=n_hall_caps / len(per_caption),
        coverage=n_matched / n_truth,
        n_captions=len(per_caption),
        n_mentioned=n_mentioned,
        n_hallucinated=n_hall,
        n_truth=n_truth,
        n_matched=n_matched,
        per_caption=per_caption,
        flags=flags,
    )


# ------------------------------------------------------------ yes/no probes


@dataclass
class PopeQuestion:
    record_id: str
    object_name: str
    polarity: int   # 1 = object present, expected answer yes
    strategy: str


def _corpus_stats(records):
    freq = Counter()
    cooc = Counter()
    for rec in records:
        objs = sorted(set(rec.objects))
        freq.update(objs)
        for i, a in enumerate(objs):
            for b in objs[i + 1:]:
                cooc[(a, b)] += 1
                cooc[(b, a)] += 1
    return freq, cooc


def build_pope_questions(
    records,
    all_objects,
    strategy: str = "random",
    k_per_image: int = 3,
    seed: int = 0,
) -> list[PopeQuestion]:
    """k positive and k negative questions per record, negatives by strategy."""
    if strategy not in POPE_STRATEGIES:
        raise DataError(f"strategy must be one of {POPE_STRATEGIES}, got {strategy!r}")
    if k_per_image < 1:
        raise DataError(f"k_per_image must be >= 1, got {k_per_image}")
    freq, cooc = _corpus_stats(records)
    rng = np.random.default_rng([seed, 11])
    questions = []
    short = 0
    for rec in records:
        present = sorted(set(rec.objects))
        absent = sorted(o for o in all_objects if o not in rec.objects)
        n_pos = min(k_per_image, len(present))
        n_neg = min(k_per_image, len(absent))
        if n_pos < k_per_image or n_neg < k_per_image:
            short += 1
        pos = [present[int(i)] for i in rng.choice(len(present), size=n_pos, replace=False)] \
            if present else []
        if strategy == "random":
            neg = [absent[int(i)] for i in rng.choice(len(absent), size=n_neg, replace=False)] \
                if absent else []
        elif strategy == "popular":
            ranked = sorted(absent, key=lambda o: (-freq[o], o))
            neg = ranked[:n_neg]
        else:
            ranked = sorted(
                absent,
                key=lambda o: (-sum(cooc[(o, p)] for p in present), -freq[o], o),
            )
            neg = ranked[:n_neg]
        for obj in pos:
            questions.append(PopeQuestion(rec.record_id, obj, 1, strategy))
        for obj in neg:
            questions.append(PopeQuestion(rec.record_id, obj, 0, strategy))
    if short:
        warnings.warn(
            f"{short} record(s) had fewer than {k_per_image} available objects "
            "on one side; emitted as many questions as possible",
            stacklevel=2,
        )
    return questions


@dataclass
class PopeReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_questions: int
    strategy: str
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "n_questions": self.n_questions,
            "flags": self.flags,
        }


def pope_evaluate(questions: list[PopeQuestion], answers_yes: list[bool]) -> PopeReport:
    """Score yes/no answers against question polarity ("yes" is the positive class)."""
    if len(questions) != len(answers_yes):
        raise DataError(
            f"{len(questions)} questions but {len(answers_yes)} answers"
        )
    if not questions:
        raise MetricUndefinedError("no questions to score")
    tp = fp = tn = fn = 0
    for q, yes in zip(questions, answers_yes):
        if yes and q.polarity == 1:
            tp += 1
        elif yes and q.polarity == 0:
            fp += 1
        elif not yes and q.polarity == 0:
            tn += 1
        else:
            fn += 1
    flags = []
    accuracy = (tp + tn) / len(questions)
    if tp + fp == 0:
        precision = 0.0
        flags.append("no_positive_predictions")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("no_positive_questions")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0.0:
        f1 = 0.0
        flags.append("f1_undefined")
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    strategy = questions[0].strategy
    return PopeReport(
        accuracy=accuracy, precision=precision, recall=recall, f1=f1,
        tp=tp, fp=fp, tn=tn, fn=fn, n_questions=len(questions),
        strategy=strategy, flags=flags,
    )


@dataclass
class MmeReport:
    accuracy: float        # percent of questions answered correctly, 0-100
    accuracy_plus: float   # percent of images with both questions correct, 0-100
    combined: float        # accuracy + accuracy_plus, 0-200
    n_images: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "accuracy_plus": self.accuracy_plus,
            "combined": self.combined,
            "n_images": self.n_images,
        }


def mme_build_pairs(records, all_objects, seed: int = 0) -> list[PopeQuestion]:
    """One present and one absent existence question per record."""
    rng = np.random.default_rng([seed, 13])
    out = []
    for rec in records:
        present = sorted(set(rec.objects))
        absent = sorted(o for o in all_objects if o not in rec.objects)
        if not present or not absent:
            raise DataError(
                f"record {rec.record_id} cannot form a question pair "
                "(needs at least one present and one absent object)"
            )
        out.append(PopeQuestion(rec.record_id, present[int(rng.integers(len(present)))],
                                1, "mme"))
        out.append(PopeQuestion(rec.record_id, absent[int(rng.integers(len(absent)))],
                                0, "mme"))
    return out


def mme_score(questions: list[PopeQuestion], answers_yes: list[bool]) -> MmeReport:
    if len(questions) != len(answers_yes):
        raise DataError(f"{len(questions)} questions but {len(answers_yes)} answers")
    if not questions:
        raise MetricUndefinedError("no question pairs to score")
    by_record: dict[str, dict[int, bool]] = {}
    for q, yes in zip(questions, answers_yes):
        slot = by_record.setdefault(q.record_id, {})
        if q.polarity in slot:
            raise DataError(f"record {q.record_id} has duplicate polarity {q.polarity}")
        slot[q.polarity] = (yes == (q.polarity == 1))
    n_correct = 0
    n_both = 0
    for record_id, slot in by_record.items():
        if set(slot) != {0, 1}:
            raise DataError(
                f"record {record_id} does not have exactly one present and one absent question"
            )
        n_correct += slot[0] + slot[1]
        n_both += slot[0] and slot[1]
    n_images = len(by_record)
    accuracy = 100.0 * n_correct / (2 * n_images)
    accuracy_plus = 100.0 * n_both / n_images
    return MmeReport(
        accuracy=accuracy,
        accuracy_plus=accuracy_plus,
        combined=accuracy + accuracy_plus,
        n_images=n_images,
    )


def parse_binary_answer(tokens) -> bool:
    """First yes/no word wins; anything else counts as no."""
    if isinstance(tokens, str):
        tokens = tokens.split()
    for tok in tokens:
        w = str(tok).lower()
        if w in _AFFIRMATIVE:
            return True
        if w in _NEGATIVE:
            return False
    return False


def records_by_id(records) -> dict[str, AnnotatedRecord]:
    return {rec.record_id: rec for rec in records}
