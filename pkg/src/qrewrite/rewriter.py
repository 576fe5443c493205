"""Iterative gradient-based revision of question embeddings.

For each initial step size, the question embedding is revised along the
negative gradient of the guide loss for the target label, decoded through
the autoencoder, and kept when the guide assigns the target label enough
probability and the unigram overlap with the source question falls inside
the acceptance window. A Gaussian-noise variant replaces the gradient term
and serves as the contrast baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .autoencoder import AeParams, decode, encode, pool
from .data import AugmentedRecord, DataTuple
from .guide import (ANSWERABLE, UNANSWERABLE, GuideParams, LossSpec,
                    PackedInput, embed, forward, grad_wrt_question,
                    rewrite_loss)
from .textproc import TokenSeq, Vocab, jaccard_unigram


@dataclass(frozen=True)
class RewriteConfig:
    """Knobs of the revision loop; defaults follow the reference settings
    (decay 0.9, probability threshold 0.5, overlap window [0.5, 0.99],
    five steps per initial step size)."""
    step_sizes: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    beta_s: float = 0.9
    beta_t: float = 0.5
    beta_a: float = 0.5
    beta_b: float = 0.99
    max_steps: int = 5
    lambda_weight: float = 1.0
    mode: str = "to-unanswerable"
    dedup: bool = True
    accept_on: str = "roundtrip"      # or "embedding": score the revised rows
    freeze_special_rows: bool = False
    noise_sigma: float = 1.0          # used by the noise baseline only
    max_decode_len: int | None = None

    def __post_init__(self):
        if not self.step_sizes or any(s <= 0 for s in self.step_sizes):
            raise ValueError("step_sizes must be positive")
        if not (0.0 < self.beta_s <= 1.0):
            raise ValueError("beta_s must be in (0, 1]")
        if not (0.0 <= self.beta_a < self.beta_b <= 1.0):
            raise ValueError("overlap window requires 0 <= beta_a < beta_b <= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.mode not in ("to-unanswerable", "to-answerable", "both"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.accept_on not in ("roundtrip", "embedding"):
            raise ValueError(f"unknown accept_on {self.accept_on!r}")


def revise_step(e_q: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    """One revision: e_q - eta * grad, inputs untouched."""
    if e_q.shape != grad.shape:
        raise ValueError(f"revise_step: shapes {e_q.shape} and {grad.shape} differ")
    if eta < 0:
        raise ValueError("revise_step: eta must be >= 0")
    return e_q - eta * grad


def accept(q: TokenSeq, q_hat: TokenSeq, p_target: float,
           cfg: RewriteConfig) -> bool:
    """Acceptance predicate: target probability above beta_t and unigram
    overlap inside [beta_a, beta_b]."""
    j = jaccard_unigram(q, q_hat)
    return p_target > cfg.beta_t and cfg.beta_a <= j <= cfg.beta_b


def _loss_spec(direction: int, tup: DataTuple, cfg: RewriteConfig) -> LossSpec:
    if direction == UNANSWERABLE:
        return LossSpec(UNANSWERABLE, answerability_only=True)
    return LossSpec(ANSWERABLE, answerability_only=False,
                    span=(tup.s, tup.e), lambda_weight=cfg.lambda_weight)


def loss_at(e_q: np.ndarray, packed: PackedInput, spec: LossSpec,
            params: GuideParams) -> float:
    """Guide loss value at the given question rows, no gradients."""
    probe = replace(packed, e_q=Tensor(np.array(e_q, copy=True)))
    return rewrite_loss(forward(probe, params), spec).item()


def _probability(e_q: np.ndarray, q_hat: TokenSeq, packed: PackedInput,
                 target: int, cfg: RewriteConfig, guide: GuideParams,
                 tup: DataTuple) -> float:
    if cfg.accept_on == "embedding":
        probe = replace(packed, e_q=Tensor(np.array(e_q, copy=True)))
        out = forward(probe, guide)
        return float(out.p_answerable.data[0, target])
    rt = embed(q_hat, tup.d, guide)
    out = forward(rt, guide)
    return float(out.p_answerable.data[0, target])


def _directions(cfg: RewriteConfig) -> tuple[int, ...]:
    if cfg.mode == "to-unanswerable":
        return (UNANSWERABLE,)
    if cfg.mode == "to-answerable":
        return (ANSWERABLE,)
    return (UNANSWERABLE, ANSWERABLE)


def _check_models(guide: GuideParams, ae: AeParams) -> None:
    if guide is None or ae is None:
        raise ValueError("rewrite requires trained guide and autoencoder")
    if ae.token_emb is not guide.token_emb:
        raise ValueError("guide and autoencoder must share the embedding tables")


def _run_loop(tup: DataTuple, direction: int, cfg: RewriteConfig,
              guide: GuideParams, ae: AeParams, vocab: Vocab,
              noise_rng: np.random.Generator | None,
              trace: list | None) -> list[AugmentedRecord]:
    packed = embed(tup.q, tup.d, guide)
    e0 = np.array(packed.e_q.data, copy=True)
    spec = _loss_spec(direction, tup, cfg)
    records: list[AugmentedRecord] = []
    tag = "u" if direction == UNANSWERABLE else "a"
    for eta_idx, eta0 in enumerate(cfg.step_sizes):
        e_cur = e0
        eta = float(eta0)
        for step in range(cfg.max_steps):
            if noise_rng is None:
                grad, _ = grad_wrt_question(e_cur, packed, spec, guide)
            else:
                grad = -noise_rng.normal(0.0, cfg.noise_sigma,
                                         size=e_cur.shape).astype(e_cur.dtype)
            if cfg.freeze_special_rows:
                grad = grad.copy()
                grad[0] = 0.0
                grad[-1] = 0.0
            e_cur = revise_step(e_cur, grad, eta)
            z = pool(encode(Tensor(e_cur), ae), ae)
            q_hat = decode(z, ae, vocab, cfg.max_decode_len)
            p_target = _probability(e_cur, q_hat, packed, direction, cfg,
                                    guide, tup)
            j = jaccard_unigram(tup.q, q_hat)
            ok = p_target > cfg.beta_t and cfg.beta_a <= j <= cfg.beta_b
            if trace is not None:
                trace.append({"source_id": tup.id, "direction": tag,
                              "eta_index": eta_idx, "step_index": step,
                              "p_target": p_target, "jaccard": j,
                              "flipped": p_target > 0.5, "accepted": ok})
            if ok:
                span = None if direction == UNANSWERABLE else (tup.s, tup.e)
                plausible = (tup.s, tup.e) if direction == UNANSWERABLE else None
                records.append(AugmentedRecord(
                    id=f"{tup.id}:{tag}:e{eta_idx}:s{step}",
                    source_id=tup.id, q_hat=q_hat, d_id=tup.d_id, span=span,
                    target_label=direction, p_target=p_target, jaccard=j,
                    eta_init=float(eta0), step_index=step, eta_index=eta_idx,
                    plausible_span=plausible))
            eta *= cfg.beta_s
    if cfg.dedup:
        seen: set[tuple[int, tuple[str, ...]]] = set()
        unique = []
        for rec in records:
            key = (rec.target_label, rec.q_hat.tokens)
            if key not in seen:
                seen.add(key)
                unique.append(rec)
        records = unique
    return records


def rewrite(tup: DataTuple, cfg: RewriteConfig, guide: GuideParams,
            ae: AeParams, vocab: Vocab,
            trace: list | None = None) -> list[AugmentedRecord]:
    """Gradient-guided rewriting of one answerable source tuple.

    Runs the full step-size ladder with per-iteration decay, decoding and
    testing every candidate; model parameters are read-only throughout.
    """
    _check_models(guide, ae)
    if tup.t != ANSWERABLE:
        raise ValueError(f"rewrite: source tuple {tup.id} must be answerable")
    out: list[AugmentedRecord] = []
    for direction in _directions(cfg):
        out.extend(_run_loop(tup, direction, cfg, guide, ae, vocab, None, trace))
    return out


def noise_rewrite(tup: DataTuple, sigma: float, cfg: RewriteConfig,
                  guide: GuideParams, ae: AeParams, vocab: Vocab,
                  rng: np.random.Generator | None = None,
                  trace: list | None = None) -> list[AugmentedRecord]:
    """Noise baseline: the revision adds Gaussian noise with std sigma*eta
    in place of the gradient term; the acceptance predicate is unchanged."""
    _check_models(guide, ae)
    if sigma <= 0:
        raise ValueError("noise_rewrite: sigma must be positive")
    if tup.t != ANSWERABLE:
        raise ValueError(f"noise_rewrite: source tuple {tup.id} must be answerable")
    if rng is None:
        rng = np.random.default_rng(0)
    run_cfg = replace(cfg, noise_sigma=sigma)
    out: list[AugmentedRecord] = []
    for direction in _directions(cfg):
        out.extend(_run_loop(tup, direction, run_cfg, guide, ae, vocab, rng, trace))
    return out


def rewrite_dataset(tuples: Sequence[DataTuple], cfg: RewriteConfig,
                    guide: GuideParams, ae: AeParams, vocab: Vocab,
                    seed: int = 0, noise: bool = False,
                    trace: list | None = None) -> list[AugmentedRecord]:
    """Rewrite every answerable tuple; deterministic record order by
    (source position, direction, step-size index, step index)."""
    records: list[AugmentedRecord] = []
    for i, tup in enumerate(tuples):
        if tup.t != ANSWERABLE:
            continue
        if noise:
            rng = np.random.default_rng(np.random.SeedSequence(
                entropy=seed, spawn_key=(i,)))
            records.extend(noise_rewrite(tup, cfg.noise_sigma, cfg, guide, ae,
                                         vocab, rng, trace))
        else:
            records.extend(rewrite(tup, cfg, guide, ae, vocab, trace))
    return records


def descent_eta(tup: DataTuple, cfg: RewriteConfig, guide: GuideParams,
                direction: int = UNANSWERABLE,
                max_halvings: int = 20) -> tuple[float, int] | None:
    """Find a step size, halving from min(step_sizes), whose single revision
    strictly decreases the target loss. Returns (eta, halvings) or None."""
    packed = embed(tup.q, tup.d, guide)
    e0 = np.array(packed.e_q.data, copy=True)
    spec = _loss_spec(direction, tup, cfg)
    grad, loss0 = grad_wrt_question(e0, packed, spec, guide)
    eta = float(min(cfg.step_sizes))
    for k in range(max_halvings + 1):
        if loss_at(revise_step(e0, grad, eta), packed, spec, guide) < loss0:
            return eta, k
        eta *= 0.5
    return None
