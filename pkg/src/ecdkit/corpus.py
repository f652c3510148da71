"""Synthetic annotated corpus: images as object-presence visual prefixes.

Each record is an "image" given by a set of canonical objects drawn from a
40-entry lexicon under a Zipf-like popularity distribution, plus a seed for
image-specific noise slots. The reference caption lists the objects through
randomly chosen surface forms. Training-split captions sometimes mention
one extra popularity-weighted absent object; the annotation keeps only the
true objects, so a language model fit on these captions acquires a
measurable hallucination bias while the labels stay clean.

The visual prefix encodes presence channel-wise: position k carries slot id
k when object k is present and the shared blank slot otherwise; positions
past the object channels carry seeded noise slots.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .model import BOS_ID, EOS_ID, ModelConfig, PromptState
from .tokenizer import Vocabulary, build_vocabulary, load_vocabulary, save_vocabulary
from .training import TrainExample

# canonical name -> surface forms (the first one is used in question text)
OBJECT_LEXICON: list[tuple[str, tuple[str, ...]]] = [
    ("dog", ("dog", "puppy")),
    ("cat", ("cat", "kitten")),
    ("car", ("car", "automobile")),
    ("tree", ("tree", "trees")),
    ("person", ("person", "man", "woman")),
    ("house", ("house", "home")),
    ("bicycle", ("bicycle", "bike")),
    ("bus", ("bus",)),
    ("truck", ("truck", "lorry")),
    ("flower", ("flower", "blossom")),
    ("table", ("table", "desk")),
    ("chair", ("chair", "seat")),
    ("cup", ("cup", "mug")),
    ("bottle", ("bottle",)),
    ("plate", ("plate", "dish")),
    ("fork", ("fork",)),
    ("knife", ("knife",)),
    ("spoon", ("spoon",)),
    ("book", ("book",)),
    ("phone", ("phone", "telephone")),
    ("computer", ("computer", "laptop")),
    ("television", ("television", "tv")),
    ("lamp", ("lamp",)),
    ("clock", ("clock",)),
    ("window", ("window",)),
    ("door", ("door",)),
    ("bird", ("bird",)),
    ("horse", ("horse", "pony")),
    ("cow", ("cow",)),
    ("sheep", ("sheep",)),
    ("boat", ("boat", "ship")),
    ("plane", ("plane", "airplane")),
    ("train", ("train",)),
    ("bench", ("bench",)),
    ("umbrella", ("umbrella",)),
    ("bag", ("bag", "backpack")),
    ("hat", ("hat", "cap")),
    ("ball", ("ball",)),
    ("pizza", ("pizza",)),
    ("apple", ("apple",)),
]

CAPTION_OPENERS = (("there", "is"), ("the", "image", "shows"), ("a", "photo", "with"))
CAPTION_QUERY = ("describe", "the", "image", ".")
QUESTION_PREFIX = ("is", "there", "a")
QUESTION_SUFFIX = ("in", "the", "image", "?")
EXTRA_WORDS = ("and", "a", ",", ".", "yes", "no")


@dataclass
class AnnotatedRecord:
    record_id: str
    visual_seed: int
    objects: tuple[str, ...]   # canonical, sorted; the ground truth
    caption: tuple[str, ...]   # reference caption tokens

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "visual_seed": self.visual_seed,
            "objects": list(self.objects),
            "caption": list(self.caption),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotatedRecord":
        return cls(
            record_id=str(d["record_id"]),
            visual_seed=int(d["visual_seed"]),
            objects=tuple(d["objects"]),
            caption=tuple(d["caption"]),
        )


@dataclass
class CorpusBundle:
    objects: list[str]
    synonyms: dict[str, str]           # surface -> canonical
    vocab: Vocabulary
    train_records: list[AnnotatedRecord]
    eval_records: list[AnnotatedRecord]
    meta: dict = field(default_factory=dict)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def n_visual_tokens(self) -> int:
        # object channels + blank slot + three noise slots
        return self.n_objects + 4

    def record_by_id(self, record_id: str) -> AnnotatedRecord:
        for rec in self.train_records + self.eval_records:
            if rec.record_id == record_id:
                return rec
        raise DataError(f"unknown record id {record_id!r}")


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def _render_caption(rng, surfaces_of, objs, distractor=None) -> list[str]:
    tokens = list(CAPTION_OPENERS[int(rng.integers(len(CAPTION_OPENERS)))])
    mention = list(objs)
    if distractor is not None:
        mention.append(distractor)
    parts = []
    for obj in mention:
        forms = surfaces_of[obj]
        parts.append(forms[int(rng.integers(len(forms)))])
    for i, surf in enumerate(parts):
        if i == 0:
            tokens += ["a", surf]
        elif i == len(parts) - 1:
            tokens += ["and", "a", surf]
        else:
            tokens += [",", "a", surf]
    tokens.append(".")
    return tokens


def generate_corpus(
    n_records: int = 500,
    seed: int = 0,
    n_objects: int = 40,
    distractor_rate: float = 0.35,
    zipf_exponent: float = 1.1,
    eval_fraction: float = 0.2,
    min_objects: int = 2,
    max_objects: int = 5,
) -> CorpusBundle:
    """Deterministic: equal arguments give byte-identical corpus files."""
    if not 2 <= n_objects <= len(OBJECT_LEXICON):
        raise ConfigError(f"n_objects must be in [2, {len(OBJECT_LEXICON)}], got {n_objects}")
    if n_records < 5:
        raise ConfigError(f"n_records must be >= 5, got {n_records}")
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    if not 1 <= min_objects <= max_objects <= n_objects:
        raise ConfigError(
            f"need 1 <= min_objects <= max_objects <= n_objects, "
            f"got {min_objects}, {max_objects}, {n_objects}"
        )
    if not 0.0 <= distractor_rate <= 1.0:
        raise ConfigError(f"distractor_rate must be in [0, 1], got {distractor_rate}")

    lexicon = OBJECT_LEXICON[:n_objects]
    objects = [name for name, _ in lexicon]
    surfaces_of = {name: forms for name, forms in lexicon}
    weights = _zipf_weights(n_objects, zipf_exponent)

    draw_rng = np.random.default_rng([seed, 1])
    drawn = []
    for idx in range(n_records):
        n_obj = int(draw_rng.integers(min_objects, max_objects + 1))
        picks = draw_rng.choice(n_objects, size=n_obj, replace=False, p=weights)
        visual_seed = int(draw_rng.integers(0, 2**31 - 1))
        drawn.append(([objects[int(k)] for k in picks], visual_seed))

    split_rng = np.random.default_rng([seed, 2])
    n_eval = max(1, int(round(n_records * eval_fraction)))
    if n_eval >= n_records:
        raise ConfigError("eval_fraction leaves no training records")
    eval_ids = set(int(i) for i in split_rng.permutation(n_records)[:n_eval])

    train_records, eval_records = [], []
    for idx, (objs, visual_seed) in enumerate(drawn):
        cap_rng = np.random.default_rng([seed, 3, idx])
        is_eval = idx in eval_ids
        distractor = None
        if not is_eval and cap_rng.random() < distractor_rate:
            absent = [o for o in objects if o not in objs]
            if absent:
                w = np.array([weights[objects.index(o)] for o in absent])
                distractor = absent[int(cap_rng.choice(len(absent), p=w / w.sum()))]
        caption = _render_caption(cap_rng, surfaces_of, objs, distractor)
        rec = AnnotatedRecord(
            record_id=f"r{idx:05d}",
            visual_seed=visual_seed,
            objects=tuple(sorted(objs)),
            caption=tuple(caption),
        )
        (eval_records if is_eval else train_records).append(rec)

    synonyms = {}
    for name, forms in lexicon:
        for surf in forms:
            synonyms[surf] = name
    words = set()
    for _, forms in lexicon:
        words.update(forms)
    for opener in CAPTION_OPENERS:
        words.update(opener)
    words.update(CAPTION_QUERY)
    words.update(QUESTION_PREFIX)
    words.update(QUESTION_SUFFIX)
    words.update(EXTRA_WORDS)
    vocab = build_vocabulary(words)

    meta = {
        "n_records": n_records,
        "seed": seed,
        "n_objects": n_objects,
        "distractor_rate": distractor_rate,
        "zipf_exponent": zipf_exponent,
        "eval_fraction": eval_fraction,
        "min_objects": min_objects,
        "max_objects": max_objects,
        "n_train": len(train_records),
        "n_eval": len(eval_records),
        "objects": objects,
    }
    return CorpusBundle(
        objects=objects,
        synonyms=synonyms,
        vocab=vocab,
        train_records=train_records,
        eval_records=eval_records,
        meta=meta,
    )


# --------------------------------------------------------------- file io


def _write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def _read_records(path) -> list[AnnotatedRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(AnnotatedRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}:{ln}: bad record: {exc}") from exc
    return out


def save_synonyms(synonyms: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for surface in sorted(synonyms):
            fh.write(f"{surface}\t{synonyms[surface]}\n")


def load_synonyms(path) -> dict[str, str]:
    synonyms = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{ln}: expected 'surface<TAB>canonical'")
            synonyms[parts[0].lower()] = parts[1].lower()
    for canonical in set(synonyms.values()):
        if synonyms.get(canonical) != canonical:
            raise DataError(f"canonical name {canonical!r} must map to itself")
    return synonyms


def write_corpus(bundle: CorpusBundle, outdir) -> None:
    os.makedirs(outdir, exist_ok=True)
    _write_records(os.path.join(outdir, "train.jsonl"), bundle.train_records)
    _write_records(os.path.join(outdir, "eval.jsonl"), bundle.eval_records)
    save_synonyms(bundle.synonyms, os.path.join(outdir, "synonyms.tsv"))
    save_vocabulary(bundle.vocab, os.path.join(outdir, "vocab.txt"))
    with open(os.path.join(outdir, "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump(bundle.meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_corpus(dirpath) -> CorpusBundle:
    meta_path = os.path.join(dirpath, "corpus.json")
    if not os.path.exists(meta_path):
        raise DataError(f"{dirpath} is not a corpus directory (no corpus.json)")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    objects = list(meta.get("objects", []))
    if not objects:
        raise DataError("corpus.json lacks the object list")
    synonyms = load_synonyms(os.path.join(dirpath, "synonyms.tsv"))
    vocab = load_vocabulary(os.path.join(dirpath, "vocab.txt"))
    train_records = _read_records(os.path.join(dirpath, "train.jsonl"))
    eval_records = _read_records(os.path.join(dirpath, "eval.jsonl"))
    train_ids = {r.record_id for r in train_records}
    overlap = train_ids & {r.record_id for r in eval_records}
    if overlap:
        raise DataError(f"train/eval splits overlap: {sorted(overlap)[:3]}")
    return CorpusBundle(
        objects=objects,
        synonyms=synonyms,
        vocab=vocab,
        train_records=train_records,
        eval_records=eval_records,
        meta=meta,
    )


# -------------------------------------------------------- prompt building


def visual_prefix_ids(
    record: AnnotatedRecord, objects: list[str], n_visual_tokens: int
) -> list[int]:
    """Presence channels for each object, blank elsewhere, noise at the tail."""
    n_obj = len(objects)
    if n_visual_tokens < n_obj + 1:
        raise DataError(
            f"model needs n_visual_tokens >= {n_obj + 1} "
            f"(object channels + blank), got {n_visual_tokens}"
        )
    present = set(record.objects)
    blank = n_obj
    ids = [k if objects[k] in present else blank for k in range(n_obj)]
    rng = np.random.default_rng(record.visual_seed)
    for _ in range(n_obj, n_visual_tokens):
        ids.append(int(rng.integers(n_obj, n_visual_tokens)))
    return ids


def caption_state(
    record: AnnotatedRecord, bundle: CorpusBundle, config: ModelConfig
) -> PromptState:
    return PromptState(
        visual_prefix_ids=visual_prefix_ids(record, bundle.objects, config.n_visual_tokens),
        query_ids=[BOS_ID] + bundle.vocab.encode(list(CAPTION_QUERY)),
    )


def question_state(
    record: AnnotatedRecord, bundle: CorpusBundle, config: ModelConfig, surface: str
) -> PromptState:
    query = list(QUESTION_PREFIX) + [surface] + list(QUESTION_SUFFIX)
    return PromptState(
        visual_prefix_ids=visual_prefix_ids(record, bundle.objects, config.n_visual_tokens),
        query_ids=[BOS_ID] + bundle.vocab.encode(query),
    )


def training_examples(
    bundle: CorpusBundle,
    config: ModelConfig,
    qa_per_record: int = 2,
    seed: int = 0,
) -> list[TrainExample]:
    """Caption plus yes/no question examples over the training split."""
    rng = np.random.default_rng([seed, 4])
    out = []
    for rec in bundle.train_records:
        prefix = visual_prefix_ids(rec, bundle.objects, config.n_visual_tokens)
        cap_query = [BOS_ID] + bundle.vocab.encode(list(CAPTION_QUERY))
        cap_target = bundle.vocab.encode(list(rec.caption)) + [EOS_ID]
        out.append(TrainExample(prefix, cap_query, cap_target))
        present = list(rec.objects)
        absent = [o for o in bundle.objects if o not in rec.objects]
        n_pos = min(qa_per_record, len(present))
        n_neg = min(qa_per_record, len(absent))
        pos = [present[int(i)] for i in rng.choice(len(present), size=n_pos, replace=False)]
        neg = [absent[int(i)] for i in rng.choice(len(absent), size=n_neg, replace=False)]
        for obj, answer in [(o, "yes") for o in pos] + [(o, "no") for o in neg]:
            query = [BOS_ID] + bundle.vocab.encode(
                list(QUESTION_PREFIX) + [obj] + list(QUESTION_SUFFIX)
            )
            target = bundle.vocab.encode([answer, "."]) + [EOS_ID]
            out.append(TrainExample(prefix, query, target))
    return out
