"""Transformer autoencoder over the shared question embedding space.

Encode a question embedding sequence, pool the encoder states through a
GRU with sum pooling into a single latent vector, and decode the question
autoregressively from that vector alone. The embedding tables are the
guide's, frozen; the encoder accepts raw embedding sequences so revised
question embeddings can flow in directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .guide import TrainSettings, embed_rows, tensors_hash
from .nn import (Adam, GruParams, TransformerLayer, accumulate_grads,
                 causal_mask, gru_init, gru_sum_pool, linear_init,
                 scale_grads, set_requires_grad, transformer_block,
                 transformer_layer_init)
from .textproc import BOS_ID, CLS_ID, EOS_ID, MASK_ID, SEP_ID, TokenSeq, Vocab, seq_from_ids


@dataclass(frozen=True)
class AeConfig:
    vocab_size: int
    hidden_size: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_heads: int = 4
    ffn_size: int = 256
    max_decode_len: int = 24
    dtype: str = "float32"

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class AeParams:
    """Autoencoder weights plus a reference to the shared frozen tables."""
    token_emb: Tensor   # shared with the guide, never trained here
    seg_emb: Tensor
    pos_emb: Tensor
    enc_layers: list[TransformerLayer]
    gru: GruParams
    w_z: Tensor
    b_z: Tensor
    dec_layers: list[TransformerLayer]
    w_out: Tensor
    b_out: Tensor
    config: AeConfig

    def embedding_tables(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.token_emb, self.seg_emb, self.pos_emb)

    def named_own(self) -> dict[str, Tensor]:
        """Tensors owned by the autoencoder (shared tables excluded)."""
        out = {"w_z": self.w_z, "b_z": self.b_z,
               "w_out": self.w_out, "b_out": self.b_out}
        out.update(self.gru.named("gru"))
        for i, layer in enumerate(self.enc_layers):
            out.update(layer.named(f"enc{i}"))
        for i, layer in enumerate(self.dec_layers):
            out.update(layer.named(f"dec{i}"))
        return out

    def trainable(self) -> list[Tensor]:
        return list(self.named_own().values())

    def content_hash(self) -> str:
        return tensors_hash(self.named_own())

    def embedding_hash(self) -> str:
        return tensors_hash({"token_emb": self.token_emb,
                             "seg_emb": self.seg_emb,
                             "pos_emb": self.pos_emb})


def init_autoencoder(config: AeConfig,
                     shared_tables: tuple[Tensor, Tensor, Tensor],
                     seed: int = 0) -> AeParams:
    token_emb, seg_emb, pos_emb = shared_tables
    if token_emb.shape != (config.vocab_size, config.hidden_size):
        raise ValueError(f"shared token table {token_emb.shape} does not match "
                         f"config ({config.vocab_size}, {config.hidden_size})")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dt = config.np_dtype()
    h = config.hidden_size
    enc = [transformer_layer_init(rng, h, config.ffn_size, config.num_heads, dt)
           for _ in range(config.encoder_layers)]
    gru = gru_init(rng, h, h, dt)
    w_z, b_z = linear_init(rng, h, h, dt)
    dec = [transformer_layer_init(rng, h, config.ffn_size, config.num_heads, dt)
           for _ in range(config.decoder_layers)]
    w_out, b_out = linear_init(rng, h, config.vocab_size, dt)
    return AeParams(token_emb, seg_emb, pos_emb, enc, gru, w_z, b_z, dec,
                    w_out, b_out, config)


# -- forward paths -----------------------------------------------------------

def embed_question(q_ids: Sequence[int], params: AeParams) -> Tensor:
    """Token entry point: [CLS] q [SEP] rows through the shared tables,
    question segment, positions from zero. Matches the guide's question
    block bit for bit."""
    ids = [CLS_ID] + list(q_ids) + [SEP_ID]
    return embed_rows(ids, 0, 0, params.embedding_tables())


def encode(e_q: Tensor, params: AeParams) -> Tensor:
    """Encoder states for an embedding sequence (embed-bypass entry point)."""
    x = e_q
    for layer in params.enc_layers:
        x = transformer_block(x, layer)
    return x


def pool(h_enc: Tensor, params: AeParams) -> Tensor:
    """Latent vector: sum of GRU hidden states run over the encoder rows."""
    if h_enc.shape[0] == 0:
        raise ValueError("pool: empty encoder state sequence")
    return gru_sum_pool(h_enc, params.gru, params.config.hidden_size)


def _decoder_states(z: Tensor, dec_ids: np.ndarray, params: AeParams) -> Tensor:
    """Run the decoder on input ids with the projected latent added to
    every input row; the latent is the only encoder information used."""
    t = len(dec_ids)
    tok = ad.embedding(params.token_emb, dec_ids)
    pos = ad.embedding(params.pos_emb, np.arange(t, dtype=np.int64))
    zproj = ad.add(ad.matmul(z, params.w_z), params.b_z)
    x = ad.add(ad.add(tok, pos), zproj)
    mask = causal_mask(t, x.data.dtype)
    for layer in params.dec_layers:
        x = transformer_block(x, layer, mask)
    return x


def reconstruction_loss(z: Tensor, target_ids: Sequence[int],
                        params: AeParams) -> Tensor:
    """Teacher-forced cross-entropy of decoding ``target_ids`` + [EOS]."""
    targets = np.asarray(list(target_ids) + [EOS_ID], dtype=np.int64)
    dec_in = np.asarray([BOS_ID] + list(target_ids), dtype=np.int64)
    states = _decoder_states(z, dec_in, params)
    logits = ad.add(ad.matmul(states, params.w_out), params.b_out)
    return ad.cross_entropy(logits, targets, reduction="mean")


def decode_ids(z, params: AeParams, max_len: int | None = None
               ) -> tuple[list[int], bool]:
    """Greedy decoding from the latent; returns (ids, hit_max_len)."""
    if max_len is None:
        max_len = params.config.max_decode_len
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    if zt.shape != (1, params.config.hidden_size):
        raise ValueError(f"decode: latent must be (1, {params.config.hidden_size}), "
                         f"got {zt.shape}")
    ids: list[int] = []
    for _ in range(max_len):
        dec_in = np.asarray([BOS_ID] + ids, dtype=np.int64)
        states = _decoder_states(zt, dec_in, params)
        logits = ad.add(ad.matmul(states[len(ids):len(ids) + 1], params.w_out),
                        params.b_out)
        nxt = int(np.argmax(logits.data[0]))
        if nxt == EOS_ID:
            return ids, False
        ids.append(nxt)
    return ids, True


def decode(z, params: AeParams, vocab: Vocab,
           max_len: int | None = None) -> TokenSeq:
    ids, _ = decode_ids(z, params, max_len)
    return seq_from_ids(ids, vocab)


def reconstruct(q, params: AeParams, vocab: Vocab) -> TokenSeq:
    """decode(pool(encode(embed(q)))) for a token-level question."""
    q_ids = list(q.ids) if isinstance(q, TokenSeq) else list(q)
    h = encode(embed_question(q_ids, params), params)
    return decode(pool(h, params), params, vocab)


# -- training ----------------------------------------------------------------

def train_autoencoder(corpus, config: AeConfig,
                      shared_tables: tuple[Tensor, Tensor, Tensor],
                      settings: TrainSettings, mask_rate: float = 0.0,
                      log_fn: Callable[[int, float, float | None], None] | None = None,
                      eval_sample: int = 128) -> AeParams:
    """Train reconstruction with frozen shared embeddings.

    ``corpus`` is a list of questions (TokenSeq or id lists). With
    ``mask_rate`` > 0, encoder-input tokens are independently replaced by
    [MASK]; targets are unchanged. Early-stops when the exact-reconstruction
    rate on a fixed sample reaches ``settings.target_accuracy``.
    """
    if not corpus:
        raise ValueError("train_autoencoder: empty corpus")
    if not (0.0 <= mask_rate < 1.0):
        raise ValueError("train_autoencoder: mask_rate must be in [0, 1)")
    ids_corpus = [list(q.ids) if isinstance(q, TokenSeq) else list(q) for q in corpus]
    params = init_autoencoder(config, shared_tables, settings.seed)
    trainable = params.trainable()
    frozen_hash = params.embedding_hash()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=settings.seed,
                                                       spawn_key=(2,)))
    steps_per_epoch = int(np.ceil(len(ids_corpus) / settings.batch_size))
    warmup = max(1, int(settings.warmup_frac * settings.epochs * steps_per_epoch))
    opt = Adam(trainable, lr=settings.learning_rate, warmup_steps=warmup)
    sample_idx = list(range(0, len(ids_corpus), max(1, len(ids_corpus) // eval_sample)))
    try:
        for epoch in range(settings.epochs):
            set_requires_grad(trainable, True)
            order = rng.permutation(len(ids_corpus))
            total_loss = 0.0
            for start in range(0, len(order), settings.batch_size):
                batch = order[start:start + settings.batch_size]
                acc: dict[Tensor, np.ndarray] = {}
                for idx in batch:
                    q_ids = ids_corpus[int(idx)]
                    enc_ids = list(q_ids)
                    if mask_rate > 0.0:
                        keep = rng.random(len(enc_ids)) >= mask_rate
                        enc_ids = [t if k else MASK_ID for t, k in zip(enc_ids, keep)]
                    e = embed_rows([CLS_ID] + enc_ids + [SEP_ID], 0, 0,
                                   params.embedding_tables())
                    z = pool(encode(e, params), params)
                    loss = reconstruction_loss(z, q_ids, params)
                    if not np.isfinite(loss.data):
                        raise ad.NumericError(
                            f"autoencoder diverged at epoch {epoch}: loss not finite")
                    total_loss += loss.item()
                    accumulate_grads(acc, ad.backward(loss))
                opt.step(scale_grads(acc, 1.0 / max(1, len(batch))))
            set_requires_grad(trainable, False)
            exact = None
            if settings.target_accuracy is not None or log_fn:
                hits = sum(decode_ids(pool(encode(embed_question(
                    ids_corpus[i], params), params), params), params)[0] == ids_corpus[i]
                    for i in sample_idx)
                exact = hits / len(sample_idx)
            if log_fn:
                log_fn(epoch, total_loss / len(order), exact)
            if (settings.target_accuracy is not None and exact is not None
                    and exact >= settings.target_accuracy):
                break
    finally:
        set_requires_grad(trainable, False)
    if params.embedding_hash() != frozen_hash:
        raise RuntimeError("shared embedding tables changed during training")
    return params
