"""MRC guide model: shared embedding layer, transformer body, answerability
and span heads, training, prediction, and gradients with respect to the
question embedding.

The guide consumes a question/paragraph pair packed as ``[CLS] q [SEP]``
and ``d [SEP]`` row blocks in one shared embedding space. The answerability
head is a two-logit softmax over the [CLS] state; the span heads are
independent per-position sigmoids over the paragraph states, with the
[CLS] state standing in as the null span position for unanswerable pairs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (Adam, TransformerLayer, accumulate_grads, linear_init,
                 scale_grads, set_requires_grad, transformer_block,
                 transformer_layer_init)
from .textproc import CLS_ID, SEP_ID, TokenSeq

UNANSWERABLE = 0
ANSWERABLE = 1
LABEL_NAMES = ("unanswerable", "answerable")


@dataclass(frozen=True)
class GuideConfig:
    vocab_size: int
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_size: int = 256
    max_seq_len: int = 128
    lambda_weight: float = 1.0
    max_span_len: int = 16
    init_std: float = 0.1
    qk_init_gain: float = 1.0    # identity bias on Q/K projections at init
    rel_pos_radius: int = 8      # radius of the relative attention bias table
    span_head: str = "softmax"   # "softmax" over positions, or per-position "sigmoid"
    dtype: str = "float32"

    def __post_init__(self):
        if self.span_head not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown span_head {self.span_head!r}")

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class GuideParams:
    """All trainable state of the guide. Frozen (requires_grad off) outside
    of training; the embedding tables are the single shared source for the
    autoencoder as well."""
    token_emb: Tensor
    seg_emb: Tensor
    pos_emb: Tensor
    ln_in_g: Tensor      # normalization of the embedding sum, first body op
    ln_in_b: Tensor
    layers: list[TransformerLayer]
    w_c: Tensor
    b_c: Tensor
    w_s: Tensor
    b_s: Tensor
    w_e: Tensor
    b_e: Tensor
    config: GuideConfig

    def embedding_tables(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.token_emb, self.seg_emb, self.pos_emb)

    def named(self) -> dict[str, Tensor]:
        out = {"token_emb": self.token_emb, "seg_emb": self.seg_emb,
               "pos_emb": self.pos_emb, "ln_in_g": self.ln_in_g,
               "ln_in_b": self.ln_in_b,
               "w_c": self.w_c, "b_c": self.b_c, "w_s": self.w_s,
               "b_s": self.b_s, "w_e": self.w_e, "b_e": self.b_e}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}"))
        return out

    def all_tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def content_hash(self) -> str:
        return tensors_hash(self.named())

    def embedding_hash(self) -> str:
        return tensors_hash({"token_emb": self.token_emb,
                             "seg_emb": self.seg_emb,
                             "pos_emb": self.pos_emb})


def tensors_hash(named: dict[str, Tensor]) -> str:
    """Order-stable content hash over named tensors (shape and bytes)."""
    h = hashlib.sha256()
    for name in sorted(named):
        t = named[name]
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(str(t.data.dtype).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def init_guide(config: GuideConfig, seed: int = 0) -> GuideParams:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dt = config.np_dtype()
    h = config.hidden_size
    std = config.init_std
    emb = lambda rows: Tensor(rng.normal(0.0, std, size=(rows, h)).astype(dt))
    ln_in_g = Tensor(np.ones((1, h), dtype=dt))
    ln_in_b = Tensor(np.zeros((1, h), dtype=dt))
    layers = [transformer_layer_init(rng, h, config.ffn_size, config.num_heads,
                                     dt, std, config.qk_init_gain,
                                     config.rel_pos_radius)
              for _ in range(config.num_layers)]
    w_c, b_c = linear_init(rng, h, 2, dt, std)
    w_s, b_s = linear_init(rng, h, 1, dt, std)
    w_e, b_e = linear_init(rng, h, 1, dt, std)
    return GuideParams(emb(config.vocab_size), emb(2), emb(config.max_seq_len),
                       ln_in_g, ln_in_b, layers, w_c, b_c, w_s, b_s, w_e, b_e,
                       config)


# -- packing and forward ---------------------------------------------------

@dataclass
class PackedInput:
    """Question rows [CLS] q [SEP] and paragraph rows d [SEP], embedded."""
    e_q: Tensor
    e_d: Tensor
    n: int               # question token count (rows are n + 2)
    m: int               # paragraph token count after truncation
    truncated: bool
    q_ids: np.ndarray
    d_ids: np.ndarray


def _ids(x) -> list[int]:
    return list(x.ids) if isinstance(x, TokenSeq) else list(x)


def embed_rows(ids: Sequence[int], segment: int, pos_offset: int,
               tables: tuple[Tensor, Tensor, Tensor]) -> Tensor:
    """Sum token, segment, and position embeddings for a run of token ids.

    Single code path for the guide and the autoencoder token entry point,
    so both produce bit-identical rows for the same ids. ``tables`` is the
    (token, segment, position) triple.
    """
    token_emb, seg_emb, pos_emb = tables
    idx = np.asarray(ids, dtype=np.int64)
    tok = ad.embedding(token_emb, idx)
    seg = ad.embedding(seg_emb, np.full(len(idx), segment, dtype=np.int64))
    pos = ad.embedding(pos_emb,
                       np.arange(pos_offset, pos_offset + len(idx), dtype=np.int64))
    return ad.add(ad.add(tok, seg), pos)


def embed(q, d, params: GuideParams) -> PackedInput:
    """Pack a (question, paragraph) pair into the shared embedding space.

    Overlong inputs truncate the paragraph, never the question; the result
    carries a truncation flag.
    """
    q_ids = _ids(q)
    d_ids = _ids(d)
    cfg = params.config
    n = len(q_ids)
    budget = cfg.max_seq_len - (n + 2) - 1  # question rows plus trailing [SEP]
    if budget < 0:
        raise ValueError(f"question of {n} tokens exceeds max_seq_len {cfg.max_seq_len}")
    truncated = len(d_ids) > budget
    if truncated:
        d_ids = d_ids[:budget]
    q_full = np.asarray([CLS_ID] + q_ids + [SEP_ID], dtype=np.int64)
    d_full = np.asarray(d_ids + [SEP_ID], dtype=np.int64)
    tables = params.embedding_tables()
    e_q = embed_rows(q_full, 0, 0, tables)
    e_d = embed_rows(d_full, 1, len(q_full), tables)
    return PackedInput(e_q, e_d, n, len(d_ids), truncated, q_full, d_full)


@dataclass
class GuideOutput:
    """Final states and head outputs for one packed pair.

    Span scores cover the m paragraph positions; the [CLS] state doubles as
    the null span slot. With the softmax span head the probabilities are
    normalized over the null slot plus the paragraph; with the sigmoid head
    each position is scored independently.
    """
    c: Tensor                 # (1, h) [CLS] state
    t_q: Tensor               # (n+2, h) question-side states
    t_d: Tensor               # (m, h) paragraph states, trailing [SEP] excluded
    answer_logits: Tensor     # (1, 2)
    p_answerable: Tensor      # (1, 2) softmax, [unanswerable, answerable]
    start_full: Tensor        # (1, m+1) logits, null slot first
    end_full: Tensor          # (1, m+1)
    span_head: str

    @property
    def start_logits(self) -> np.ndarray:
        return self.start_full.data[0, 1:]

    @property
    def end_logits(self) -> np.ndarray:
        return self.end_full.data[0, 1:]

    @property
    def p_start(self) -> np.ndarray:
        return _span_probs_np(self.start_full.data[0], self.span_head)

    @property
    def p_end(self) -> np.ndarray:
        return _span_probs_np(self.end_full.data[0], self.span_head)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _span_probs_np(full_logits: np.ndarray, span_head: str) -> np.ndarray:
    """Per-position span probabilities over the paragraph (null slot dropped)."""
    if span_head == "sigmoid":
        return _sigmoid_np(full_logits[1:])
    z = full_logits - full_logits.max()
    e = np.exp(z)
    return (e / e.sum())[1:]


def forward(packed: PackedInput, params: GuideParams) -> GuideOutput:
    x = ad.concat([packed.e_q, packed.e_d], axis=0)
    x = ad.layer_norm(x, params.ln_in_g, params.ln_in_b)
    for layer in params.layers:
        x = transformer_block(x, layer)
    q_rows = packed.n + 2
    c = x[0:1]
    t_q = x[0:q_rows]
    t_d = x[q_rows:q_rows + packed.m]
    answer_logits = ad.add(ad.matmul(c, params.w_c), params.b_c)
    p_answerable = ad.softmax(answer_logits, axis=-1)
    spans_in = ad.concat([c, t_d], axis=0)          # null slot first
    start_full = ad.transpose(ad.add(ad.matmul(spans_in, params.w_s), params.b_s))
    end_full = ad.transpose(ad.add(ad.matmul(spans_in, params.w_e), params.b_e))
    return GuideOutput(c, t_q, t_d, answer_logits, p_answerable,
                       start_full, end_full, params.config.span_head)


@dataclass
class LossParts:
    loss_a: Tensor
    loss_s: Tensor
    loss_e: Tensor
    total: Tensor


def guide_loss(out: GuideOutput, s: int | None, e: int | None, t: int,
               lam: float) -> LossParts:
    """Combined loss: lam * answerability NLL plus start/end span NLLs.

    Answerable pairs require 0 <= s <= e < m; unanswerable pairs use the
    null sentinel (s = e = None) and charge the span losses at the [CLS]
    slot. Each component is -log P under the configured span head.
    """
    m = out.start_full.shape[1] - 1
    loss_a = ad.cross_entropy(out.answer_logits, [t], reduction="sum")
    if t == ANSWERABLE:
        if s is None or e is None or not (0 <= s <= e < m):
            raise ValueError(f"span ({s}, {e}) out of range for paragraph of {m} tokens")
        gold_s, gold_e = s + 1, e + 1   # shift past the null slot
    else:
        if s is not None or e is not None:
            raise ValueError("unanswerable tuples carry a null span")
        gold_s = gold_e = 0
    if out.span_head == "softmax":
        ls = ad.cross_entropy(out.start_full, [gold_s], reduction="sum")
        le = ad.cross_entropy(out.end_full, [gold_e], reduction="sum")
    else:
        ls = -ad.tensor_sum(ad.log_sigmoid(out.start_full[:, gold_s:gold_s + 1]))
        le = -ad.tensor_sum(ad.log_sigmoid(out.end_full[:, gold_e:gold_e + 1]))
    total = ad.add(ad.add(ad.mul(loss_a, lam), ls), le)
    return LossParts(loss_a, ls, le, total)


# -- prediction -------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    label: int
    s: int | None
    e: int | None
    p_answerable: float   # probability assigned to the answerable label


def _log_sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                    x - np.log1p(np.exp(-np.abs(x))))


def _span_log_probs(full_logits: np.ndarray, span_head: str) -> np.ndarray:
    """Per-paragraph-position log P under the configured span head."""
    x = full_logits.astype(np.float64)
    if span_head == "sigmoid":
        return _log_sigmoid_np(x[1:])
    z = x - x.max()
    return (z - np.log(np.exp(z).sum()))[1:]


def best_span(out: GuideOutput, max_span_len: int) -> tuple[int, int]:
    """Argmax over s <= e < s + max_span_len of P_s(s) * P_e(e), computed in
    log space so near-saturated probabilities still break ties."""
    ls = _span_log_probs(out.start_full.data[0], out.span_head)
    le = _span_log_probs(out.end_full.data[0], out.span_head)
    m = ls.shape[0]
    scores = ls[:, None] + le[None, :]
    valid = np.triu(np.ones((m, m), dtype=bool))
    if max_span_len < m:
        valid &= ~np.triu(np.ones((m, m), dtype=bool), k=max_span_len)
    scores = np.where(valid, scores, -np.inf)
    flat = int(np.argmax(scores))
    return flat // m, flat % m


def predict(q, d, params: GuideParams) -> Prediction:
    packed = embed(q, d, params)
    out = forward(packed, params)
    probs = out.p_answerable.data[0]
    label = int(np.argmax(probs))
    if label == UNANSWERABLE:
        return Prediction(UNANSWERABLE, None, None, float(probs[ANSWERABLE]))
    s, e = best_span(out, params.config.max_span_len)
    return Prediction(ANSWERABLE, s, e, float(probs[ANSWERABLE]))


# -- gradients w.r.t. the question embedding --------------------------------

@dataclass(frozen=True)
class LossSpec:
    """Which loss drives a revision step.

    ``answerability_only`` charges only the answerability NLL at
    ``target_label``; otherwise the full combined loss with ``span`` and
    ``lambda_weight`` is used.
    """
    target_label: int
    answerability_only: bool = True
    span: tuple[int, int] | None = None
    lambda_weight: float = 1.0


def rewrite_loss(out: GuideOutput, spec: LossSpec) -> Tensor:
    if spec.answerability_only:
        return ad.cross_entropy(out.answer_logits, [spec.target_label],
                                reduction="sum")
    s, e = spec.span if spec.span is not None else (None, None)
    return guide_loss(out, s, e, spec.target_label, spec.lambda_weight).total


def grad_wrt_question(e_q: np.ndarray, packed: PackedInput, spec: LossSpec,
                      params: GuideParams) -> tuple[np.ndarray, float]:
    """Gradient of the specified loss w.r.t. the question embedding rows.

    ``e_q`` supplies the current (possibly revised) question rows; the
    paragraph rows come from ``packed``. Parameters receive no gradient and
    are untouched.
    """
    if e_q.shape != packed.e_q.shape:
        raise ValueError(f"e_q shape {e_q.shape} does not match packed "
                         f"{packed.e_q.shape}")
    leaf = Tensor(np.array(e_q, copy=True), requires_grad=True)
    probe = replace(packed, e_q=leaf)
    out = forward(probe, params)
    loss = rewrite_loss(out, spec)
    grads = ad.backward(loss)
    return grads[leaf], loss.item()


def answerability_probability(q_ids, d, target_label: int,
                              params: GuideParams) -> float:
    """P_a(target) for a (question, paragraph) token pair, full round trip."""
    packed = embed(q_ids, d, params)
    out = forward(packed, params)
    return float(out.p_answerable.data[0, target_label])


# -- training ----------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 3e-4
    warmup_frac: float = 0.1
    seed: int = 0
    target_accuracy: float | None = None   # early stop once both targets hold
    target_span_em: float | None = None


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_accuracy: float | None = None
    dev_span_em: float | None = None


def _dev_scores(params: GuideParams, dev_tuples) -> tuple[float, float]:
    correct = 0
    span_hits = 0
    span_total = 0
    for tup in dev_tuples:
        pred = predict(tup.q, tup.d, params)
        correct += int(pred.label == tup.t)
        if tup.t == ANSWERABLE:
            span_total += 1
            span_hits += int(pred.label == ANSWERABLE
                             and pred.s == tup.s and pred.e == tup.e)
    acc = correct / len(dev_tuples)
    em = span_hits / span_total if span_total else 0.0
    return acc, em


def train_guide(train_tuples, config: GuideConfig, settings: TrainSettings,
                dev_tuples=None,
                log_fn: Callable[[EpochLog], None] | None = None) -> GuideParams:
    """Mini-batch Adam training of the combined loss; returns frozen params.

    Aborts with a diagnostic if the loss goes non-finite. Optionally stops
    early once the dev targets in ``settings`` are met.
    """
    if not train_tuples:
        raise ValueError("train_guide: empty dataset")
    params = init_guide(config, settings.seed)
    tensors = params.all_tensors()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=settings.seed,
                                                       spawn_key=(1,)))
    steps_per_epoch = int(np.ceil(len(train_tuples) / settings.batch_size))
    warmup = max(1, int(settings.warmup_frac * settings.epochs * steps_per_epoch))
    opt = Adam(tensors, lr=settings.learning_rate, warmup_steps=warmup)
    try:
        for epoch in range(settings.epochs):
            set_requires_grad(tensors, True)
            order = rng.permutation(len(train_tuples))
            total_loss = 0.0
            for start in range(0, len(order), settings.batch_size):
                batch = order[start:start + settings.batch_size]
                acc: dict[Tensor, np.ndarray] = {}
                for idx in batch:
                    tup = train_tuples[int(idx)]
                    packed = embed(tup.q, tup.d, params)
                    s, e = tup.s, tup.e
                    if packed.truncated and tup.t == ANSWERABLE and e is not None \
                            and e >= packed.m:
                        continue  # span truncated away; skip example
                    out = forward(packed, params)
                    parts = guide_loss(out, s, e, tup.t, config.lambda_weight)
                    if not np.isfinite(parts.total.data):
                        raise ad.NumericError(
                            f"training diverged at epoch {epoch}: loss is not finite")
                    total_loss += parts.total.item()
                    accumulate_grads(acc, ad.backward(parts.total))
                opt.step(scale_grads(acc, 1.0 / max(1, len(batch))))
            set_requires_grad(tensors, False)
            log = EpochLog(epoch, total_loss / len(order))
            if dev_tuples:
                log.dev_accuracy, log.dev_span_em = _dev_scores(params, dev_tuples)
            if log_fn:
                log_fn(log)
            if (settings.target_accuracy is not None and dev_tuples
                    and log.dev_accuracy is not None
                    and log.dev_accuracy >= settings.target_accuracy
                    and (settings.target_span_em is None
                         or (log.dev_span_em or 0.0) >= settings.target_span_em)):
                break
    finally:
        set_requires_grad(tensors, False)
    return params
