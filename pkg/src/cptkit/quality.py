"""N-gram language model scoring for perplexity-based corpus filtering.

The model is an interpolated Kneser-Ney smoothed n-gram LM:

* highest order n::

      P(w | h) = max(c(hw) - D_n, 0) / c(h.)
               + D_n * N1+(h.) / c(h.) * P(w | h')

  where ``c(h.)`` sums the observed continuations of ``h``, ``N1+(h.)`` is
  the number of distinct continuations, and ``h'`` drops the leftmost token.

* lower orders use continuation counts ``N1+(.u)`` (the number of distinct
  single-token left extensions of ``u``) in place of raw counts, with
  denominator ``N1+(.h.) = sum_x N1+(.hx)``.

* the unigram level interpolates with the uniform distribution over the
  prediction vocabulary, so every conditional probability is strictly
  positive, including the unknown token.

Per-order discounts are estimated from counts-of-counts as
``D = n1 / (n1 + 2 * n2)`` over the count table in use at that level,
falling back to 0.75 when ``n1`` or ``n2`` is zero.  A context whose
denominator is zero (never observed) backs off entirely to the next lower
order.  These choices make the conditional distributions sum to one exactly,
which the test suite checks directly.

Documents are scored as token sequences padded with ``<s>`` context and a
final ``</s>`` event; perplexity is ``exp(-mean(log P))`` over the scored
events.  Out-of-vocabulary tokens map to ``<unk>``.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (
    DegenerateOrderError,
    EmptyCorpusError,
    EmptyDocumentError,
    EmptyScoresError,
    InvalidParameterError,
)

UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"

DEFAULT_ORDER = 5
FALLBACK_DISCOUNT = 0.75

_MODEL_MAGIC = b"CPTQNG1\n"


class NgramModel:
    """Trained model state; immutable once built, safe for concurrent scoring."""

    def __init__(self, order: int, vocab: dict[str, int], counts: list[dict[tuple, int]]):
        self.order = order
        self.vocab = vocab
        self.tokens = [None] * len(vocab)
        for tok, idx in vocab.items():
            self.tokens[idx] = tok
        self.counts = counts  # counts[k-1]: k-gram id-tuples -> raw count
        self._finalize()

    # -- derived tables -----------------------------------------------------

    def _finalize(self) -> None:
        n = self.order
        top = self.counts[n - 1]
        self.top_ctx_total: dict[tuple, int] = {}
        self.top_follow_types: dict[tuple, int] = {}
        for gram, count in top.items():
            ctx = gram[:-1]
            self.top_ctx_total[ctx] = self.top_ctx_total.get(ctx, 0) + count
            self.top_follow_types[ctx] = self.top_follow_types.get(ctx, 0) + 1

        # continuation tables for levels 1..n-1, keyed by gram length
        self.cont_counts: list[dict[tuple, int]] = [dict() for _ in range(n)]
        self.cont_ctx_total: list[dict[tuple, int]] = [dict() for _ in range(n)]
        self.cont_follow_types: list[dict[tuple, int]] = [dict() for _ in range(n)]
        for k in range(1, n):
            table = self.cont_counts[k - 1]
            for gram in self.counts[k]:  # (k+1)-grams
                u = gram[1:]
                table[u] = table.get(u, 0) + 1
            ctx_total = self.cont_ctx_total[k - 1]
            follow = self.cont_follow_types[k - 1]
            for u, c in table.items():
                ctx = u[:-1]
                ctx_total[ctx] = ctx_total.get(ctx, 0) + c
                follow[ctx] = follow.get(ctx, 0) + 1

        self.discounts = [0.0] * (n + 1)  # indexed by level, 1-based
        for level in range(1, n + 1):
            if level == n:
                table = self.counts[n - 1]
            else:
                table = self.cont_counts[level - 1]
            self.discounts[level] = _estimate_discount(table.values())

        self.unigram_total = sum(self.counts[0].values())
        # unigram denominator: raw token count for an order-1 model, total
        # distinct bigram types otherwise
        if n == 1:
            self.uni_denom = self.unigram_total
        else:
            self.uni_denom = sum(self.cont_counts[0].values())

    # -- vocabulary ---------------------------------------------------------

    def token_id(self, token: str) -> int:
        return self.vocab.get(token, self.vocab[UNK])

    def prediction_vocab(self) -> list[str]:
        """Every token the model can predict (all but ``<s>``)."""
        return [t for t in self.tokens if t != BOS]

    @property
    def prediction_vocab_size(self) -> int:
        return len(self.vocab) - 1

    # -- probabilities ------------------------------------------------------

    def prob(self, token: str, context: Sequence[str] = ()) -> float:
        """P(token | context); context longer than order-1 is truncated."""
        w = self.token_id(token)
        if self.order == 1:
            ctx: tuple = ()
        else:
            ctx = tuple(self.token_id(t) for t in context)[-(self.order - 1) :]
        return self._p(ctx, w)

    def logprob(self, token: str, context: Sequence[str] = ()) -> float:
        return math.log(self.prob(token, context))

    def _p(self, ctx: tuple, w: int) -> float:
        level = len(ctx) + 1
        if level == 1:
            return self._p_unigram(w)
        if level == self.order:
            denom = self.top_ctx_total.get(ctx)
            if not denom:
                return self._p(ctx[1:], w)
            d = self.discounts[level]
            num = self.counts[self.order - 1].get(ctx + (w,), 0)
            lam = d * self.top_follow_types[ctx] / denom
            return max(num - d, 0.0) / denom + lam * self._p(ctx[1:], w)
        table = self.cont_counts[level - 1]
        denom = self.cont_ctx_total[level - 1].get(ctx)
        if not denom:
            return self._p(ctx[1:], w)
        d = self.discounts[level]
        num = table.get(ctx + (w,), 0)
        lam = d * self.cont_follow_types[level - 1][ctx] / denom
        return max(num - d, 0.0) / denom + lam * self._p(ctx[1:], w)

    def _p_unigram(self, w: int) -> float:
        d = self.discounts[1]
        table = self.counts[0] if self.order == 1 else self.cont_counts[0]
        num = table.get((w,), 0)
        lam = d * len(table) / self.uni_denom
        return max(num - d, 0.0) / self.uni_denom + lam / self.prediction_vocab_size

    # -- digest / serialization ----------------------------------------------

    def digest(self) -> str:
        return hashlib.sha256(serialize_model(self)).hexdigest()


def _estimate_discount(counts: Iterable[int]) -> float:
    n1 = n2 = 0
    for c in counts:
        if c == 1:
            n1 += 1
        elif c == 2:
            n2 += 1
    if n1 == 0 or n2 == 0:
        return FALLBACK_DISCOUNT
    return n1 / (n1 + 2.0 * n2)


def train_ngram(corpus: Iterable[Sequence[str]], order: int = DEFAULT_ORDER) -> NgramModel:
    """Count k-grams (k = 1..order) over the corpus and build the model.

    Each corpus item is one token sequence (a document or sentence); it is
    padded with ``k-1`` leading ``<s>`` symbols and one trailing ``</s>``
    before counting k-grams.
    """
    if order < 1:
        raise DegenerateOrderError(f"order must be >= 1, got {order}")
    docs = [list(doc) for doc in corpus if len(doc) > 0]
    if not docs:
        raise EmptyCorpusError("training corpus has no tokens")

    vocab: dict[str, int] = {UNK: 0, BOS: 1, EOS: 2}
    encoded = []
    for doc in docs:
        ids = []
        for tok in doc:
            idx = vocab.get(tok)
            if idx is None:
                idx = len(vocab)
                vocab[tok] = idx
            ids.append(idx)
        encoded.append(ids)

    bos, eos = vocab[BOS], vocab[EOS]
    counts: list[dict[tuple, int]] = [dict() for _ in range(order)]
    for ids in encoded:
        for k in range(1, order + 1):
            padded = [bos] * (k - 1) + ids + [eos]
            table = counts[k - 1]
            for i in range(len(padded) - k + 1):
                gram = tuple(padded[i : i + k])
                table[gram] = table.get(gram, 0) + 1
    return NgramModel(order=order, vocab=vocab, counts=counts)


def perplexity(model: NgramModel, doc: Sequence[str]) -> float:
    """Document perplexity: tokens scored left to right plus the ``</s>`` event."""
    tokens = list(doc)
    if not tokens:
        raise EmptyDocumentError("cannot score an empty document")
    return corpus_perplexity(model, [tokens])


def corpus_perplexity(model: NgramModel, sentences: Iterable[Sequence[str]]) -> float:
    """Pooled perplexity over several sentences (per-line scoring mode)."""
    history_len = model.order - 1
    total_log = 0.0
    events = 0
    for sent in sentences:
        tokens = list(sent)
        if not tokens:
            continue
        context = [BOS] * history_len
        for tok in tokens + [EOS]:
            total_log += model.logprob(tok, context[-history_len:] if history_len else ())
            context.append(tok)
            events += 1
    if events == 0:
        raise EmptyDocumentError("cannot score an empty document")
    return math.exp(-total_log / events)


# ---------------------------------------------------------------------------
# Quartile selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QualityManifest:
    model_digest: str
    scores: tuple[tuple[str, float], ...]
    selected: tuple[str, ...]
    threshold: float | None
    quartile: float

    def selected_set(self) -> frozenset[str]:
        return frozenset(self.selected)


def quartile_filter(
    scores: Sequence[tuple[str, float]],
    quartile: float = 0.25,
    model_digest: str = "",
) -> QualityManifest:
    """Keep the ``floor(N * quartile)`` lowest-perplexity documents.

    Ties at the threshold are broken by ascending document id, so the
    selection is a pure function of the score list.
    """
    if not scores:
        raise EmptyScoresError("no scores to filter")
    if not 0 < quartile <= 1:
        raise InvalidParameterError("quartile must lie in (0, 1]")
    ordered = sorted(scores, key=lambda item: (item[1], item[0]))
    n_select = int(len(ordered) * quartile)
    chosen = ordered[:n_select]
    return QualityManifest(
        model_digest=model_digest,
        scores=tuple((i, float(p)) for i, p in scores),
        selected=tuple(sorted(i for i, _ in chosen)),
        threshold=chosen[-1][1] if chosen else None,
        quartile=quartile,
    )


def quartile_filter_by_group(
    scores: Sequence[tuple[str, float, str]],
    quartile: float = 0.25,
    model_digest: str = "",
) -> QualityManifest:
    """Per-group variant: the quartile is taken inside each group separately.

    Useful when documents come from several crawl snapshots and each should
    contribute its own bottom slice.  The manifest records no single
    threshold since each group has its own.
    """
    if not scores:
        raise EmptyScoresError("no scores to filter")
    by_group: dict[str, list[tuple[str, float]]] = {}
    for doc_id, ppl, group in scores:
        by_group.setdefault(group, []).append((doc_id, ppl))
    selected: list[str] = []
    for group in sorted(by_group):
        selected.extend(quartile_filter(by_group[group], quartile).selected)
    return QualityManifest(
        model_digest=model_digest,
        scores=tuple((i, float(p)) for i, p, _ in scores),
        selected=tuple(sorted(selected)),
        threshold=None,
        quartile=quartile,
    )


# ---------------------------------------------------------------------------
# Model serialization: versioned binary table dump
# ---------------------------------------------------------------------------


def serialize_model(model: NgramModel) -> bytes:
    out = [_MODEL_MAGIC, struct.pack("<II", model.order, len(model.vocab))]
    for token in model.tokens:
        raw = token.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
    for k in range(1, model.order + 1):
        table = model.counts[k - 1]
        out.append(struct.pack("<Q", len(table)))
        for gram in sorted(table):
            out.append(struct.pack(f"<{k}I", *gram))
            out.append(struct.pack("<Q", table[gram]))
    return b"".join(out)


def deserialize_model(blob: bytes) -> NgramModel:
    if not blob.startswith(_MODEL_MAGIC):
        raise InvalidParameterError("not a serialized n-gram model")
    off = len(_MODEL_MAGIC)
    order, vocab_size = struct.unpack_from("<II", blob, off)
    off += 8
    vocab: dict[str, int] = {}
    for idx in range(vocab_size):
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        vocab[blob[off : off + ln].decode("utf-8")] = idx
        off += ln
    counts: list[dict[tuple, int]] = []
    for k in range(1, order + 1):
        (n_entries,) = struct.unpack_from("<Q", blob, off)
        off += 8
        table: dict[tuple, int] = {}
        for _ in range(n_entries):
            gram = struct.unpack_from(f"<{k}I", blob, off)
            off += 4 * k
            (count,) = struct.unpack_from("<Q", blob, off)
            off += 8
            table[gram] = count
        counts.append(table)
    return NgramModel(order=order, vocab=vocab, counts=counts)


def save_model(model: NgramModel, path: str) -> str:
    """Write the model; returns its digest."""
    blob = serialize_model(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_model(path: str) -> NgramModel:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
