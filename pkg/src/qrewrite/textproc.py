"""Tokenization, vocabulary, and string-level metrics.

Word-level tokenizer (lowercase, punctuation split), a vocabulary with
seven fixed reserved symbols, and the metrics the pipeline needs: unigram
Jaccard overlap, BLEU-4, ROUGE-L, and SQuAD-style EM/F1.
"""

from __future__ import annotations

import hashlib
import re
import string
from collections import Counter
from dataclasses import dataclass
from math import exp, log
from typing import Iterable, Sequence

RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID, BOS_ID, EOS_ID = range(7)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Vocab:
    """Bijective token<->id map; ids 0..6 are the reserved symbols."""

    def __init__(self, tokens: Iterable[str]):
        seen = dict.fromkeys(t for t in tokens if t not in RESERVED_TOKENS)
        self._id_to_token = list(RESERVED_TOKENS) + list(seen)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._id_to_token[idx]

    def tokens(self) -> tuple[str, ...]:
        """Non-reserved tokens in id order."""
        return tuple(self._id_to_token[len(RESERVED_TOKENS):])

    def content_hash(self) -> str:
        return hashlib.sha256(self._serialize().encode("utf-8")).hexdigest()

    def _serialize(self) -> str:
        body = "\n".join(self.tokens())
        return body + "\n" if body else ""

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self._serialize())

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


@dataclass(frozen=True)
class TokenSeq:
    """A tokenized string: surface form plus normalized tokens and ids."""
    tokens: tuple[str, ...]
    ids: tuple[int, ...]
    surface: str

    def __len__(self) -> int:
        return len(self.tokens)

    def text(self) -> str:
        return " ".join(self.tokens)


def tokenize(text: str, vocab: Vocab) -> TokenSeq:
    """Lowercase, split words and punctuation; out-of-vocab maps to [UNK]."""
    tokens = tuple(_TOKEN_RE.findall(text.lower()))
    return TokenSeq(tokens, tuple(vocab.id(t) for t in tokens), text)


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Lowercased tokens with (start, end) character offsets in ``text``."""
    return [(m.group(0).lower(), m.start(), m.end())
            for m in _TOKEN_RE.finditer(text)]


def seq_from_tokens(tokens: Sequence[str], vocab: Vocab) -> TokenSeq:
    toks = tuple(tokens)
    return TokenSeq(toks, tuple(vocab.id(t) for t in toks), " ".join(toks))


def seq_from_ids(ids: Sequence[int], vocab: Vocab) -> TokenSeq:
    toks = tuple(vocab.token(i) for i in ids)
    return TokenSeq(toks, tuple(ids), " ".join(toks))


def detokenize(seq: TokenSeq) -> str:
    return seq.text()


def _tokens(x) -> tuple[str, ...]:
    return x.tokens if isinstance(x, TokenSeq) else tuple(x)


# -- metrics ---------------------------------------------------------------

def jaccard_unigram(q, q_hat) -> float:
    """Unigram type overlap |A∩B|/|A∪B|; both empty counts as identical."""
    a, b = set(_tokens(q)), set(_tokens(q_hat))
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(reference, candidate) -> float:
    """BLEU-4 with brevity penalty and add-one smoothing on zero counts.

    Orders longer than the candidate contribute a neutral precision of 1;
    a candidate sharing no unigrams with the reference scores 0.
    """
    ref, cand = _tokens(reference), _tokens(candidate)
    if not cand:
        return 0.0
    log_precisions = []
    for n in range(1, 5):
        cand_ngrams = _ngrams(cand, n)
        total = sum(cand_ngrams.values())
        if total == 0:
            continue
        ref_ngrams = _ngrams(ref, n)
        matched = sum(min(c, ref_ngrams[g]) for g, c in cand_ngrams.items())
        if matched == 0:
            if n == 1:
                return 0.0
            log_precisions.append(log(1.0 / (total + 1)))
        else:
            log_precisions.append(log(matched / total))
    bp = 1.0 if len(cand) >= len(ref) else exp(1.0 - len(ref) / len(cand))
    return bp * exp(sum(log_precisions) / 4.0)


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(reference, candidate, beta: float = 1.2) -> float:
    """ROUGE-L F-measure over the longest common subsequence."""
    ref, cand = _tokens(reference), _tokens(candidate)
    if not ref and not cand:
        return 1.0
    lcs = _lcs_len(ref, cand)
    if lcs == 0:
        return 0.0
    recall = lcs / len(ref)
    precision = lcs / len(cand)
    b2 = beta * beta
    return (1.0 + b2) * recall * precision / (recall + b2 * precision)


_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """SQuAD answer normalization: case, punctuation, articles, whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def _token_f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2.0 * precision * recall / (precision + recall)


def squad_em_f1(pred_answer: str, gold_answers: Sequence[str]) -> tuple[int, float]:
    """Exact match and token F1, maximized over gold answers.

    An empty gold list means unanswerable: full credit iff the prediction
    normalizes to the empty string.
    """
    pred = normalize_answer(pred_answer)
    golds = [normalize_answer(g) for g in gold_answers]
    golds = [g for g in golds if g]
    if not golds:
        hit = int(pred == "")
        return hit, float(hit)
    em = max(int(pred == g) for g in golds)
    f1 = max(_token_f1(pred.split(), g.split()) for g in golds)
    return em, f1
