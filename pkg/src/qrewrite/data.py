"""Dataset model, ingestion, synthetic corpus generation, and persistence.

Covers SQuAD-2.0-format JSON in, augmented JSONL out, a deterministic
templated micro-corpus for desk-scale end-to-end runs, and the versioned
binary checkpoint format shared by the guide and the autoencoder.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .guide import ANSWERABLE, LABEL_NAMES, UNANSWERABLE
from .textproc import (TokenSeq, Vocab, normalize_answer, seq_from_tokens,
                       tokenize, tokenize_with_offsets)


class DatasetError(ValueError):
    """Malformed or unusable dataset input."""


@dataclass(frozen=True)
class DataTuple:
    """One (question, paragraph, span, label) training example."""
    id: str
    q: TokenSeq
    d: TokenSeq
    s: int | None
    e: int | None
    t: int
    d_id: str
    answers: tuple[str, ...] = ()

    def __post_init__(self):
        if self.t == ANSWERABLE:
            if self.s is None or self.e is None or not (0 <= self.s <= self.e < len(self.d)):
                raise DatasetError(f"tuple {self.id}: invalid span ({self.s}, {self.e})")
        elif self.s is not None or self.e is not None:
            raise DatasetError(f"tuple {self.id}: unanswerable tuples carry a null span")

    def span_text(self) -> str:
        if self.t != ANSWERABLE:
            return ""
        return " ".join(self.d.tokens[self.s:self.e + 1])

    def gold_answers(self) -> tuple[str, ...]:
        if self.t != ANSWERABLE:
            return ()
        return self.answers if self.answers else (self.span_text(),)


@dataclass
class Dataset:
    tuples: list[DataTuple]
    paragraphs: dict[str, TokenSeq]
    vocab: Vocab
    split_tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = set()
        for tup in self.tuples:
            if tup.id in ids:
                raise DatasetError(f"duplicate tuple id {tup.id}")
            ids.add(tup.id)
            if tup.d_id not in self.paragraphs:
                raise DatasetError(f"tuple {tup.id}: unresolved paragraph {tup.d_id}")

    def subset(self, tag: str) -> list[DataTuple]:
        return [t for t in self.tuples if self.split_tags.get(t.id, "train") == tag]

    def answerable(self, tag: str | None = None) -> list[DataTuple]:
        pool = self.tuples if tag is None else self.subset(tag)
        return [t for t in pool if t.t == ANSWERABLE]


# -- synthetic micro-corpus --------------------------------------------------

_ATTRIBUTES = (
    "color size shape taste smell weight height texture sound temperature "
    "age speed price origin material purpose mood style flavor density "
    "length width depth volume brightness hardness rarity quality tone pattern"
).split()

_ENTITIES = (
    "falcon teapot lantern marble cactus violin anchor beacon candle dolphin "
    "engine feather goblet hammer island jacket kettle ladder magnet needle "
    "orchard pebble quilt ribbon saddle telescope umbrella vessel wagon whistle "
    "yacht bridge castle desert forest garden harbor meadow tunnel compass"
).split()

_VALUES = (
    "red blue green yellow purple orange silver golden crimson amber "
    "tiny huge narrow wide shallow deep light heavy soft rigid "
    "smooth rough warm cold sweet bitter salty sour mild sharp "
    "quiet loud ancient modern swift slow cheap costly rare common "
    "wooden iron copper stone glass paper woolen velvet marbled brick "
    "round square oval curved straight twisted flat steep hollow solid "
    "bright dim pale vivid clear cloudy shiny dusty fresh stale "
    "northern southern eastern western coastal inland urban rural alpine tropical "
    "floral smoky earthy fruity spicy minty woody tangy creamy crisp "
    "sturdy fragile elastic brittle dense sparse damp arid glossy matte "
    "calm restless formal casual ornate plain festive somber brisk gentle "
    "early late inner outer upper lower single double triple quadruple"
).split()

_FUNCTION_WORDS = ("the", "of", "is", "what", ".", "?")

FACT_LEN = 7  # the <attr> of <entity> is <value> .
_VALUE_OFFSET = 5


def synthetic_vocab() -> Vocab:
    return Vocab(list(_FUNCTION_WORDS) + _ATTRIBUTES + _ENTITIES + _VALUES)


def gen_synthetic(seed: int, n_paragraphs: int,
                  facts_range: tuple[int, int] = (3, 6),
                  dev_every: int = 10) -> Dataset:
    """Deterministic templated corpus of attribute facts.

    Each paragraph concatenates facts "the <attribute> of <entity> is
    <value> ."; every paragraph yields two answerable questions (gold span
    = the value token) and one unanswerable question referencing an
    attribute or entity absent from the paragraph, for a 2:1 label balance.
    Every ``dev_every``-th paragraph is tagged as the dev split.
    """
    if n_paragraphs <= 0:
        raise DatasetError("gen_synthetic: n_paragraphs must be positive")
    lo, hi = facts_range
    if not (2 <= lo <= hi):
        raise DatasetError("gen_synthetic: facts range must satisfy 2 <= lo <= hi")
    vocab = synthetic_vocab()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    paragraphs: dict[str, TokenSeq] = {}
    tuples: list[DataTuple] = []
    split_tags: dict[str, str] = {}

    for pi in range(n_paragraphs):
        d_id = f"p{pi:05d}"
        n_facts = int(rng.integers(lo, hi + 1))
        ents = [str(x) for x in rng.choice(_ENTITIES, size=int(rng.integers(2, 4)),
                                           replace=False)]
        attrs = [str(x) for x in rng.choice(_ATTRIBUTES, size=n_facts, replace=False)]
        values = [str(x) for x in rng.choice(_VALUES, size=n_facts, replace=False)]
        facts = [(attrs[k], ents[int(rng.integers(len(ents)))], values[k])
                 for k in range(n_facts)]
        tokens: list[str] = []
        for attr, ent, val in facts:
            tokens += ["the", attr, "of", ent, "is", val, "."]
        d = seq_from_tokens(tokens, vocab)
        paragraphs[d_id] = d
        tag = "dev" if pi % dev_every == dev_every - 1 else "train"

        def question(attr: str, ent: str) -> TokenSeq:
            return seq_from_tokens(["what", "is", "the", attr, "of", ent, "?"], vocab)

        fact_ids = rng.choice(n_facts, size=2, replace=False)
        for j, k in enumerate(fact_ids):
            attr, ent, val = facts[int(k)]
            pos = int(k) * FACT_LEN + _VALUE_OFFSET
            tid = f"{d_id}-q{j}"
            tuples.append(DataTuple(tid, question(attr, ent), d, pos, pos,
                                    ANSWERABLE, d_id, (val,)))
            split_tags[tid] = tag

        if rng.random() < 0.5:
            absent = [a for a in _ATTRIBUTES if a not in attrs]
            attr = absent[int(rng.integers(len(absent)))]
            ent = ents[int(rng.integers(len(ents)))]
        else:
            attr = attrs[int(rng.integers(len(attrs)))]
            absent = [x for x in _ENTITIES if x not in ents]
            ent = absent[int(rng.integers(len(absent)))]
        tid = f"{d_id}-q2"
        tuples.append(DataTuple(tid, question(attr, ent), d, None, None,
                                UNANSWERABLE, d_id))
        split_tags[tid] = tag

    return Dataset(tuples, paragraphs, vocab, split_tags)


# -- SQuAD-2.0 JSON ----------------------------------------------------------

def _char_span_to_tokens(offsets: list[tuple[str, int, int]], start: int,
                         end: int) -> tuple[int, int] | None:
    s = e = None
    for i, (_, t_start, t_end) in enumerate(offsets):
        if t_end > start and s is None:
            s = i
        if t_start < end:
            e = i
    if s is None or e is None or s > e:
        return None
    return s, e


def load_squad_json(path, vocab: Vocab | None = None,
                    split: str = "train") -> Dataset:
    """Load a SQuAD-2.0-format file into the internal data model.

    Character-offset answers are converted to token spans; answerable
    entries whose span cannot be aligned (or whose aligned text does not
    match any gold answer under SQuAD normalization) are dropped and
    counted in ``dataset.dropped``.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON at line {exc.lineno}, "
                           f"column {exc.colno}: {exc.msg}") from exc
    articles = raw.get("data")
    if not articles:
        raise DatasetError(f"{path}: empty or missing 'data' array")

    parsed = []
    all_tokens: list[str] = []
    for article in articles:
        for para in article.get("paragraphs", []):
            context = para.get("context", "")
            offsets = tokenize_with_offsets(context)
            all_tokens.extend(tok for tok, _, _ in offsets)
            for qa in para.get("qas", []):
                all_tokens.extend(t for t, _, _ in
                                  tokenize_with_offsets(qa.get("question", "")))
            parsed.append((context, offsets, para.get("qas", [])))

    if vocab is None:
        vocab = Vocab(all_tokens)

    paragraphs: dict[str, TokenSeq] = {}
    tuples: list[DataTuple] = []
    split_tags: dict[str, str] = {}
    dropped = 0
    for pi, (context, offsets, qas) in enumerate(parsed):
        d_id = f"d{pi:05d}"
        d = seq_from_tokens([tok for tok, _, _ in offsets], vocab)
        paragraphs[d_id] = d
        for qa in qas:
            q = tokenize(qa.get("question", ""), vocab)
            qid = str(qa.get("id", f"{d_id}-{len(tuples)}"))
            if qa.get("is_impossible", False):
                tuples.append(DataTuple(qid, q, d, None, None, UNANSWERABLE, d_id))
                split_tags[qid] = split
                continue
            answers = qa.get("answers", [])
            golds = tuple(a.get("text", "") for a in answers)
            placed = None
            for ans in answers:
                text = ans.get("text", "")
                start = ans.get("answer_start")
                if start is None or not text:
                    continue
                span = _char_span_to_tokens(offsets, start, start + len(text))
                if span is None:
                    continue
                span_text = " ".join(d.tokens[span[0]:span[1] + 1])
                if normalize_answer(span_text) == normalize_answer(text):
                    placed = span
                    break
            if placed is None:
                dropped += 1
                continue
            tuples.append(DataTuple(qid, q, d, placed[0], placed[1],
                                    ANSWERABLE, d_id, golds))
            split_tags[qid] = split

    if not tuples:
        raise DatasetError(f"{path}: no usable tuples")
    ds = Dataset(tuples, paragraphs, vocab, split_tags)
    ds.dropped = dropped  # type: ignore[attr-defined]
    return ds


def write_squad_json(dataset: Dataset, path, tuples: Sequence[DataTuple] | None = None) -> None:
    """Emit tuples in SQuAD-2.0 format (token-joined contexts/questions)."""
    pool = list(dataset.tuples) if tuples is None else list(tuples)
    by_pid: dict[str, list[DataTuple]] = {}
    for tup in pool:
        by_pid.setdefault(tup.d_id, []).append(tup)
    out_paragraphs = []
    for pid in sorted(by_pid):
        d = dataset.paragraphs[pid]
        context = " ".join(d.tokens)
        starts = []
        pos = 0
        for tok in d.tokens:
            starts.append(pos)
            pos += len(tok) + 1
        qas = []
        for tup in by_pid[pid]:
            entry = {"id": tup.id, "question": " ".join(tup.q.tokens),
                     "is_impossible": tup.t == UNANSWERABLE}
            if tup.t == ANSWERABLE:
                entry["answers"] = [{"text": tup.span_text(),
                                     "answer_start": starts[tup.s]}]
            else:
                entry["answers"] = []
            qas.append(entry)
        out_paragraphs.append({"context": context, "qas": qas})
    doc = {"version": "v2.0",
           "data": [{"title": "corpus", "paragraphs": out_paragraphs}]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


# -- augmented records -------------------------------------------------------

@dataclass(frozen=True)
class AugmentedRecord:
    """A rewritten question with provenance and acceptance statistics."""
    id: str
    source_id: str
    q_hat: TokenSeq
    d_id: str
    span: tuple[int, int] | None
    target_label: int
    p_target: float
    jaccard: float
    eta_init: float
    step_index: int
    eta_index: int = 0
    plausible_span: tuple[int, int] | None = None

    def __post_init__(self):
        if (self.span is None) != (self.target_label == UNANSWERABLE):
            raise ValueError(f"record {self.id}: span must be null iff unanswerable")


_JSONL_FIELDS = ("id", "source_id", "question", "paragraph_id", "target_label",
                 "span_start", "span_end", "jaccard", "p_target", "eta_init",
                 "step_index")


def write_augmented(records: Sequence[AugmentedRecord], path) -> None:
    """Newline-delimited JSON, one record per line, stable field order."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {
                "id": rec.id,
                "source_id": rec.source_id,
                "question": " ".join(rec.q_hat.tokens),
                "paragraph_id": rec.d_id,
                "target_label": LABEL_NAMES[rec.target_label],
                "span_start": None if rec.span is None else rec.span[0],
                "span_end": None if rec.span is None else rec.span[1],
                "jaccard": rec.jaccard,
                "p_target": rec.p_target,
                "eta_init": rec.eta_init,
                "step_index": rec.step_index,
            }
            fh.write(json.dumps(row) + "\n")


def read_augmented(path, vocab: Vocab) -> list[AugmentedRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{line_no}: bad JSONL row: {exc.msg}") from exc
            missing = [f for f in _JSONL_FIELDS if f not in row]
            if missing:
                raise DatasetError(f"{path}:{line_no}: missing fields {missing}")
            label = LABEL_NAMES.index(row["target_label"])
            span = None
            if row["span_start"] is not None:
                span = (int(row["span_start"]), int(row["span_end"]))
            records.append(AugmentedRecord(
                id=row["id"], source_id=row["source_id"],
                q_hat=tokenize(row["question"], vocab),
                d_id=row["paragraph_id"], span=span, target_label=label,
                p_target=float(row["p_target"]), jaccard=float(row["jaccard"]),
                eta_init=float(row["eta_init"]), step_index=int(row["step_index"])))
    return records


def merge_for_training(original: Dataset, augmented_path,
                       mode: str = "both") -> Dataset:
    """Materialize augmented records as tuples appended to the original.

    ``mode`` selects which target labels to keep: "ans", "unans", or "both".
    """
    if mode not in ("ans", "unans", "both"):
        raise ValueError(f"merge_for_training: unknown mode {mode!r}")
    records = read_augmented(augmented_path, original.vocab)
    if mode == "ans":
        records = [r for r in records if r.target_label == ANSWERABLE]
    elif mode == "unans":
        records = [r for r in records if r.target_label == UNANSWERABLE]
    dangling = sorted({r.d_id for r in records} - set(original.paragraphs))
    if dangling:
        raise DatasetError(f"augmented records reference unknown paragraphs: "
                           f"{', '.join(dangling)}")
    tuples = list(original.tuples)
    split_tags = dict(original.split_tags)
    for rec in records:
        d = original.paragraphs[rec.d_id]
        s, e = rec.span if rec.span is not None else (None, None)
        tup = DataTuple(rec.id, rec.q_hat, d, s, e, rec.target_label, rec.d_id)
        tuples.append(tup)
        split_tags[rec.id] = "train"
    return Dataset(tuples, original.paragraphs, original.vocab, split_tags)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"CRQD"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Structurally invalid checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Format version is not supported by this build."""


class VocabMismatchError(CheckpointError):
    """Checkpoint was produced against a different vocabulary."""


def write_checkpoint(path, kind: str, meta: dict,
                     tensors: dict[str, np.ndarray], vocab_hash: str) -> None:
    """Binary checkpoint: magic, version, JSON metadata, named tensor blobs."""
    header = dict(meta)
    header["kind"] = kind
    header["vocab_hash"] = vocab_hash
    meta_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh, size: int, what: str) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def read_checkpoint(path, expected_vocab_hash: str | None = None
                    ) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: version {version} unsupported (expected {CHECKPOINT_VERSION})")
        meta_len, = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        n_tensors, = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            name_len, = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
            if code not in _DTYPE_BY_CODE:
                raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor shape"))
            dt = _DTYPE_BY_CODE[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            data = np.frombuffer(_read_exact(fh, nbytes, f"tensor {name} data"), dtype=dt)
            tensors[name] = data.reshape(shape).astype(dt.newbyteorder("="), copy=True)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after tensor blobs")
    kind = meta.get("kind", "")
    if expected_vocab_hash is not None and meta.get("vocab_hash") != expected_vocab_hash:
        raise VocabMismatchError(
            f"{path}: checkpoint vocab hash {meta.get('vocab_hash')!r} does not "
            f"match the provided vocabulary")
    return kind, meta, tensors
