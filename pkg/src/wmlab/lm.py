"""Deterministic n-gram language models that stand in for LLMs.

Counts are stored as sorted flat arrays (one segment per context length) so
that the generation kernel can binary-search them without Python overhead.
Probabilities use add-k smoothing on the longest context that was seen in
training and back off to shorter contexts otherwise, so every distribution
is exactly normalized and strictly positive.
"""
from __future__ import annotations

import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from wmlab import kernels
from wmlab.errors import CorpusTooSmall, InvalidInput, InvalidParameter

BOS = "<s>"
UNK = "<unk>"
BOS_ID = 0
UNK_ID = 1
MAGIC = b"WMLAB-NGRAM-1"
MAX_VOCAB = 1 << 16
MAX_ORDER = 4


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Frequency-ranked token table with reserved ids 0 (BOS) and 1 (UNK)."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [BOS, UNK]:
            raise InvalidParameter("vocabulary must start with the BOS and UNK entries")
        if len(set(tokens)) != len(tokens):
            raise InvalidParameter("vocabulary tokens must be distinct")
        if len(tokens) > MAX_VOCAB:
            raise InvalidParameter(f"vocabulary larger than {MAX_VOCAB}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, words: Iterable[str], cap: int = 5000) -> "Vocabulary":
        if cap < 3:
            raise InvalidParameter("vocabulary cap must be at least 3")
        counts = Counter(w for w in words if w not in (BOS, UNK))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([BOS, UNK] + [w for w, _ in ranked[: cap - 2]])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def index_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def lookup(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, words: Iterable[str]) -> np.ndarray:
        return np.fromiter((self.index.get(w, UNK_ID) for w in words), dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    source_model: str = "external"

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64).reshape(-1))

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def validate(self, vocab_size: int) -> None:
        if len(self) and (self.ids.min() < 0 or self.ids.max() >= vocab_size):
            raise InvalidInput("token id outside vocabulary")


@dataclass(eq=False)
class NGramModel:
    """Add-k smoothed n-gram model with back-off.

    ``ctx_keys`` holds packed contexts (16 bits per token, oldest first) for
    every context length 0..order-1; ``level_start[L]:level_start[L+1]`` is
    the sorted segment for length L. Row r owns ``next_ids/next_counts``
    entries ``offsets[r]:offsets[r+1]``, sorted by token id.
    """

    order: int
    vocab: Vocabulary
    smoothing_k: float
    model_id: str
    ctx_keys: np.ndarray
    level_start: np.ndarray
    offsets: np.ndarray
    next_ids: np.ndarray
    next_counts: np.ndarray
    totals: np.ndarray = field(repr=False)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @cached_property
    def counts(self) -> dict[tuple[int, ...], dict[int, int]]:
        """Full-order counts as ``{context tuple: {next id: count}}``."""
        return self.level_counts(self.order - 1)

    def level_counts(self, length: int) -> dict[tuple[int, ...], dict[int, int]]:
        out = {}
        for row in range(self.level_start[length], self.level_start[length + 1]):
            ctx = unpack_context(int(self.ctx_keys[row]), length)
            a, b = self.offsets[row], self.offsets[row + 1]
            out[ctx] = {int(t): int(c) for t, c in zip(self.next_ids[a:b], self.next_counts[a:b])}
        return out

    @cached_property
    def _pair_keys(self) -> np.ndarray:
        rows = np.repeat(np.arange(len(self.totals), dtype=np.int64), np.diff(self.offsets))
        return rows * MAX_VOCAB + self.next_ids

    def find_rows(self, contexts: np.ndarray) -> np.ndarray:
        """Row of the longest seen suffix for each context (oldest first).

        ``contexts`` has shape (m, order-1), already padded with BOS.
        """
        m = contexts.shape[0]
        rows = np.full(m, -1, dtype=np.int64)
        for L in range(self.order - 1, -1, -1):
            todo = rows < 0
            if not todo.any():
                break
            lo, hi = int(self.level_start[L]), int(self.level_start[L + 1])
            seg = self.ctx_keys[lo:hi]
            sub = contexts[todo, contexts.shape[1] - L:] if L else np.zeros((int(todo.sum()), 0), np.int64)
            keys = np.zeros(sub.shape[0], dtype=np.int64)
            for j in range(L):
                keys |= sub[:, j] << (16 * j)
            pos = np.searchsorted(seg, keys)
            posc = np.minimum(pos, max(len(seg) - 1, 0))
            hit = (pos < len(seg)) & (seg[posc] == keys) if len(seg) else np.zeros(len(keys), bool)
            found = np.where(hit, posc + lo, -1)
            ok = found >= 0
            ok[ok] = self.totals[found[ok]] > 0
            idx = np.nonzero(todo)[0]
            rows[idx[ok]] = found[ok]
        return rows

    def contexts_for(self, ids: np.ndarray, prefix: np.ndarray | None = None) -> np.ndarray:
        """Context matrix for predicting every token of ``ids``."""
        n = self.order - 1
        pre = np.zeros(n, dtype=np.int64)
        if prefix is not None and len(prefix) and n:
            tail = np.asarray(prefix, dtype=np.int64)[-n:]
            pre[n - len(tail):] = tail
        seq = np.concatenate([pre, np.asarray(ids, dtype=np.int64)])
        if n == 0:
            return np.zeros((len(ids), 0), dtype=np.int64)
        return np.lib.stride_tricks.sliding_window_view(seq, n)[: len(ids)].copy()

    def token_counts(self, rows: np.ndarray, toks: np.ndarray) -> np.ndarray:
        keys = rows * MAX_VOCAB + toks
        pk = self._pair_keys
        pos = np.searchsorted(pk, keys)
        posc = np.minimum(pos, len(pk) - 1)
        hit = (pos < len(pk)) & (pk[posc] == keys)
        return np.where(hit, self.next_counts[posc], 0.0)

    def score_contexts(self, contexts: np.ndarray, toks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(log-prob, 1-based rank) of each token given its context row.

        Ranks: ties share the best rank; unseen tokens rank after every seen one.
        """
        toks = np.asarray(toks, dtype=np.int64)
        rows = self.find_rows(contexts)
        c = self.token_counts(rows, toks)
        lp = np.log((c + self.smoothing_k) / (self.totals[rows] + self.smoothing_k * self.vocab_size))
        pos = np.searchsorted(self._rank_keys, rows * (1 << 32) + c.astype(np.int64), side="right")
        return lp, (1 + self.offsets[rows + 1] - pos).astype(np.float64)

    def token_log_probs(self, ids, prefix=None) -> np.ndarray:
        return self.score_contexts(self.contexts_for(ids, prefix), ids)[0]

    @cached_property
    def _rank_keys(self) -> np.ndarray:
        # per row, counts sorted ascending, tagged with the row index
        rows = np.repeat(np.arange(len(self.totals), dtype=np.int64), np.diff(self.offsets))
        order = np.lexsort((self.next_counts, rows))
        return rows[order] * (1 << 32) + self.next_counts[order].astype(np.int64)

    def token_ranks(self, ids, prefix=None) -> np.ndarray:
        """1-based rank of each token in its predictive distribution."""
        return self.score_contexts(self.contexts_for(ids, prefix), ids)[1]

    def save(self, path) -> None:
        header = {
            "order": self.order,
            "vocab_size": self.vocab_size,
            "k": self.smoothing_k,
            "model_id": self.model_id,
        }
        buf = io.BytesIO()
        np.savez_compressed(
            buf,
            vocab=np.array(self.vocab.tokens, dtype=object).astype(str),
            ctx_keys=self.ctx_keys,
            level_start=self.level_start,
            offsets=self.offsets,
            next_ids=self.next_ids,
            next_counts=self.next_counts,
            totals=self.totals,
        )
        with open(path, "wb") as fh:
            fh.write(MAGIC + b"\n")
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "NGramModel":
        with open(path, "rb") as fh:
            magic = fh.readline().rstrip(b"\n")
            if magic != MAGIC:
                raise InvalidInput(f"{path}: not a {MAGIC.decode()} model file")
            header = json.loads(fh.readline())
            arrays = np.load(io.BytesIO(fh.read()), allow_pickle=False)
            vocab = Vocabulary([str(t) for t in arrays["vocab"]])
            if len(vocab) != header["vocab_size"]:
                raise InvalidInput(f"{path}: vocabulary size mismatch")
            return cls(
                order=int(header["order"]),
                vocab=vocab,
                smoothing_k=float(header["k"]),
                model_id=str(header["model_id"]),
                ctx_keys=arrays["ctx_keys"],
                level_start=arrays["level_start"],
                offsets=arrays["offsets"],
                next_ids=arrays["next_ids"],
                next_counts=arrays["next_counts"],
                totals=arrays["totals"],
            )


def unpack_context(key: int, length: int) -> tuple[int, ...]:
    return tuple((key >> (16 * j)) & 0xFFFF for j in range(length))


def train_ngram(
    corpus: Sequence[int] | np.ndarray,
    order: int,
    smoothing_k: float,
    model_id: str,
    vocab: Vocabulary,
) -> NGramModel:
    """Count every context length 0..order-1 over ``corpus``.

    The corpus is left-padded with order-1 BOS ids.
    """
    if order < 1 or order > MAX_ORDER:
        raise InvalidParameter(f"order must be in [1, {MAX_ORDER}], got {order}")
    if not smoothing_k > 0:
        raise InvalidParameter("smoothing_k must be positive")
    ids = np.asarray(corpus, dtype=np.int64).reshape(-1)
    if len(ids) == 0 or len(ids) < order:
        raise CorpusTooSmall(f"corpus has {len(ids)} tokens, need at least {order}")
    V = len(vocab)
    if ids.min() < 0 or ids.max() >= V:
        raise InvalidInput("corpus id outside vocabulary")

    n = order - 1
    padded = np.concatenate([np.zeros(n, dtype=np.int64), ids])
    keys_all, starts, offs, nids, ncnt, tots = [], [0], [0], [], [], []
    for L in range(order):
        ctx = np.zeros(len(ids), dtype=np.int64)
        for j in range(L):
            ctx |= padded[n - L + j : n - L + j + len(ids)] << (16 * j)
        pair = ctx * MAX_VOCAB + ids if L < 3 else None
        if pair is not None:
            uniq, cnt = np.unique(pair, return_counts=True)
            u_ctx, u_next = uniq // MAX_VOCAB, uniq % MAX_VOCAB
        else:
            # 48-bit contexts do not fit beside a 16-bit id in int64
            stacked = np.stack([ctx, ids], axis=1)
            uniq, cnt = np.unique(stacked, axis=0, return_counts=True)
            u_ctx, u_next = uniq[:, 0], uniq[:, 1]
        ctx_vals, first = np.unique(u_ctx, return_index=True)
        bounds = np.append(first, len(u_ctx))
        keys_all.append(ctx_vals)
        starts.append(starts[-1] + len(ctx_vals))
        base = offs[-1]
        offs.extend((base + bounds[1:]).tolist())
        nids.append(u_next)
        ncnt.append(cnt.astype(np.float64))
        tots.append(np.add.reduceat(cnt, first).astype(np.float64))
    return NGramModel(
        order=order,
        vocab=vocab,
        smoothing_k=float(smoothing_k),
        model_id=model_id,
        ctx_keys=np.concatenate(keys_all).astype(np.int64),
        level_start=np.array(starts, dtype=np.int64),
        offsets=np.array(offs, dtype=np.int64),
        next_ids=np.concatenate(nids).astype(np.int64),
        next_counts=np.concatenate(ncnt),
        totals=np.concatenate(tots),
    )


def next_token_distribution(model: NGramModel, context) -> np.ndarray:
    ids = context.ids if isinstance(context, TokenSequence) else np.asarray(context, dtype=np.int64)
    n = model.order - 1
    ctx = np.zeros((1, n), dtype=np.int64)
    if n and len(ids):
        tail = ids[-n:]
        ctx[0, n - len(tail):] = tail
    row = int(model.find_rows(ctx)[0])
    V = model.vocab_size
    w = np.full(V, model.smoothing_k)
    a, b = model.offsets[row], model.offsets[row + 1]
    w[model.next_ids[a:b]] += model.next_counts[a:b]
    return w / (model.totals[row] + model.smoothing_k * V)


SAMPLERS = {"multinomial": kernels.SAMPLER_MULTINOMIAL, "greedy": kernels.SAMPLER_GREEDY}


def run_kernel(model: NGramModel, history, length: int, gen_seed: int, sampler: str = "multinomial",
               mode: int = kernels.MODE_NONE, secret: int = 0, width: int = 0, green_count: int = 0,
               mult_plus: float = 1.0, mult_minus: float = 1.0, class_of=None, num_classes: int = 0,
               exp_n: int = 1, exp_shift: int = 0, record: bool = False):
    if sampler not in SAMPLERS:
        raise InvalidParameter(f"unknown sampler {sampler!r}; choose from {sorted(SAMPLERS)}")
    if class_of is None:
        class_of = np.zeros(1, dtype=np.int64)
    return kernels.generate(
        model.ctx_keys, model.level_start, model.offsets, model.next_ids, model.next_counts,
        model.totals, model.order, model.vocab_size, model.smoothing_k,
        np.asarray(history, dtype=np.int64), int(length), int(gen_seed) & kernels.MASK64,
        SAMPLERS[sampler], mode, int(secret) & kernels.MASK64, int(width), int(green_count),
        float(mult_plus), float(mult_minus), np.asarray(class_of, dtype=np.int64),
        int(num_classes), int(exp_n), int(exp_shift), bool(record),
    )


def generate(model: NGramModel, prompt, length: int, sampler: str = "multinomial",
             rng_seed: int = 0) -> TokenSequence:
    if length < 0:
        raise InvalidParameter("length must be non-negative")
    ids = prompt.ids if isinstance(prompt, TokenSequence) else np.asarray(prompt, dtype=np.int64)
    out, _ = run_kernel(model, ids, length, kernels.derive_seed(rng_seed), sampler)
    return TokenSequence(out, model.model_id)


def perplexity(model: NGramModel, text, prompt=None) -> float:
    ids = text.ids if isinstance(text, TokenSequence) else np.asarray(text, dtype=np.int64)
    if len(ids) == 0:
        raise InvalidInput("perplexity of an empty text is undefined")
    pre = None
    if prompt is not None:
        pre = prompt.ids if isinstance(prompt, TokenSequence) else np.asarray(prompt, dtype=np.int64)
    lp = model.token_log_probs(ids, pre)
    return math.exp(-float(lp.mean()))


def load_corpus(path, vocab: Vocabulary | None = None, cap: int = 5000):
    """Read a UTF-8 text file; returns (vocabulary, id array, per-line id arrays)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    words = [tokenize(line) for line in lines]
    if vocab is None:
        vocab = Vocabulary.build((w for line in words for w in line), cap=cap)
    docs = [vocab.encode(line) for line in words if line]
    flat = np.concatenate(docs) if docs else np.zeros(0, dtype=np.int64)
    return vocab, flat, docs
