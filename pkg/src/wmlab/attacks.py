"""Token-level watermark attacks: substitution, windowed paraphrase, removal.

All edits are same-class substitutions (plus reordering for paraphrase), so
every attack preserves length. The synonym table is the one SIR-lite uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np

from wmlab.detector import DetectionResult
from wmlab.errors import InvalidInput, InvalidParameter
from wmlab.lm import NGramModel, TokenSequence

DEFAULT_BUCKET = 4


class SynonymTable:
    """Partition of the vocabulary into synonym classes."""

    def __init__(self, class_of):
        cls = np.asarray(class_of, dtype=np.int64)
        if cls.ndim != 1 or len(cls) == 0:
            raise InvalidParameter("class table must be a non-empty vector")
        if cls.min() < 0:
            raise InvalidParameter("class ids must be non-negative")
        uniq = np.unique(cls)
        if not np.array_equal(uniq, np.arange(len(uniq))):
            raise InvalidParameter("class ids must be contiguous from 0")
        self.class_of = cls
        order = np.argsort(cls, kind="stable")
        self._flat = order
        self._start = np.searchsorted(cls[order], np.arange(len(uniq)))
        self._size = np.bincount(cls, minlength=len(uniq))

    @classmethod
    def frequency_buckets(cls, vocab_size: int, bucket: int = DEFAULT_BUCKET) -> "SynonymTable":
        """BOS and UNK are singletons; other ids grouped by frequency rank."""
        if bucket < 1:
            raise InvalidParameter("bucket size must be >= 1")
        ids = np.arange(vocab_size, dtype=np.int64)
        return cls(np.where(ids < 2, ids, 2 + (ids - 2) // bucket))

    @classmethod
    def singletons(cls, vocab_size: int) -> "SynonymTable":
        return cls(np.arange(vocab_size, dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return len(self._size)

    @property
    def vocab_size(self) -> int:
        return len(self.class_of)

    @property
    def members(self) -> dict[int, list[int]]:
        return {c: self.members_of(c).tolist() for c in range(self.num_classes)}

    def members_of(self, c: int) -> np.ndarray:
        s = self._start[c]
        return self._flat[s : s + self._size[c]]

    def class_size(self, tokens) -> np.ndarray:
        return self._size[self.class_of[tokens]]

    def random_member(self, tokens: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Uniform same-class token for each of ``tokens`` driven by u in [0, 1)."""
        c = self.class_of[tokens]
        pick = np.minimum((u * self._size[c]).astype(np.int64), self._size[c] - 1)
        return self._flat[self._start[c] + pick]

    def mean_class_size(self) -> float:
        """Mean class size seen by a uniformly chosen token."""
        return float(np.mean(self._size[self.class_of]))


class AttackKind(str, Enum):
    SUBSTITUTION = "SUBSTITUTION"
    PARAPHRASE = "PARAPHRASE"
    REMOVAL = "REMOVAL"


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind
    edit_rate: float = 0.3
    window: int = 8
    perplexity_budget: float = 2.0
    rng_seed: int = 0
    name: str = ""

    def __post_init__(self):
        kind = AttackKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not self.name:
            object.__setattr__(self, "name", kind.value.lower())
        if kind in (AttackKind.SUBSTITUTION, AttackKind.PARAPHRASE) and not 0.0 <= self.edit_rate <= 1.0:
            raise InvalidParameter(f"edit_rate must lie in [0, 1], got {self.edit_rate}")
        if kind is AttackKind.PARAPHRASE and self.window < 2:
            raise InvalidParameter(f"window must be >= 2, got {self.window}")
        if kind is AttackKind.REMOVAL and not self.perplexity_budget >= 1.0:
            raise InvalidParameter(f"perplexity_budget must be >= 1, got {self.perplexity_budget}")

    @classmethod
    def default(cls, kind, rng_seed: int = 0) -> "AttackConfig":
        kind = AttackKind(kind)
        if kind is AttackKind.PARAPHRASE:
            return cls(kind, edit_rate=0.5, window=8, rng_seed=rng_seed)
        return cls(kind, rng_seed=rng_seed)


def _ids(text) -> np.ndarray:
    return text.ids if isinstance(text, TokenSequence) else np.asarray(text, dtype=np.int64)


def _wrap(text, ids: np.ndarray) -> TokenSequence:
    src = text.source_model if isinstance(text, TokenSequence) else "external"
    return TokenSequence(ids, src)


def substitution_attack(text, table: SynonymTable, edit_rate: float, rng_seed: int) -> TokenSequence:
    if not 0.0 <= edit_rate <= 1.0:
        raise InvalidParameter(f"edit_rate must lie in [0, 1], got {edit_rate}")
    ids = _ids(text).copy()
    rng = np.random.default_rng(rng_seed)
    hit = rng.random(len(ids)) < edit_rate
    u = rng.random(len(ids))
    if hit.any():
        ids[hit] = table.random_member(ids[hit], u[hit])
    return _wrap(text, ids)


def paraphrase_attack(text, window: int, edit_rate: float, table: SynonymTable,
                      rng_seed: int) -> TokenSequence:
    """Shuffle each window with probability edit_rate, then substitute at edit_rate / 2."""
    if window < 2:
        raise InvalidParameter(f"window must be >= 2, got {window}")
    if not 0.0 <= edit_rate <= 1.0:
        raise InvalidParameter(f"edit_rate must lie in [0, 1], got {edit_rate}")
    ids = _ids(text).copy()
    rng = np.random.default_rng(rng_seed)
    for s in range(0, len(ids), window):
        if rng.random() < edit_rate:
            ids[s : s + window] = rng.permutation(ids[s : s + window])
    sub_seed = int(rng.integers(0, 2**63))
    return substitution_attack(_wrap(text, ids), table, edit_rate / 2.0, sub_seed)


@lru_cache(maxsize=8)
def _row_entropy(model: NGramModel) -> np.ndarray:
    """Entropy (nats) of the predictive distribution of every count row."""
    V, k = model.vocab_size, model.smoothing_k
    denom = model.totals + k * V
    rows = np.repeat(np.arange(len(model.totals)), np.diff(model.offsets))
    p_seen = (model.next_counts + k) / denom[rows]
    seen_part = np.bincount(rows, weights=-p_seen * np.log(p_seen), minlength=len(model.totals))
    unseen = V - np.diff(model.offsets)
    p0 = k / denom
    return seen_part - unseen * p0 * np.log(p0)


def proxy_terms(model: NGramModel, ids: np.ndarray, prefix=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (log-prob, |surprisal - expected surprisal|) under ``model``.

    Biased sampling leaves tokens whose surprisal disagrees with the entropy
    of their context; the sum of the deviations is the key-free proxy.
    """
    return _terms(model, model.contexts_for(ids, prefix), np.asarray(ids, dtype=np.int64))


def _terms(model: NGramModel, contexts: np.ndarray, toks: np.ndarray):
    rows = model.find_rows(contexts)
    c = model.token_counts(rows, toks)
    lp = np.log((c + model.smoothing_k) / (model.totals[rows] + model.smoothing_k * model.vocab_size))
    return lp, np.abs(-lp - _row_entropy(model)[rows])


def removal_proxy(text, reference_lm: NGramModel, prefix=None) -> float:
    return float(proxy_terms(reference_lm, _ids(text), prefix)[1].sum())


def removal_attack(text, reference_lm: NGramModel, table: SynonymTable, perplexity_budget: float,
                   rng_seed: int, prefix=None) -> TokenSequence:
    """Greedy key-free scrubbing with a reference-LM perplexity budget.

    Visits positions in random order; at each, tries every other same-class
    token and keeps the one that lowers the proxy the most, provided the
    text's reference perplexity stays within budget x the original.
    """
    if not perplexity_budget >= 1.0:
        raise InvalidParameter(f"perplexity_budget must be >= 1, got {perplexity_budget}")
    ids = _ids(text).copy()
    T = len(ids)
    if T == 0:
        return _wrap(text, ids)
    lp, dev = proxy_terms(reference_lm, ids, prefix)
    # perplexity <= budget * ppl0  <=>  sum log p >= sum0 - T log budget
    floor = lp.sum() - T * math.log(perplexity_budget) if math.isfinite(perplexity_budget) else -math.inf
    total_lp = lp.sum()
    span = reference_lm.order  # tokens i .. i+order-1 see position i
    pre = np.zeros(0, np.int64) if prefix is None else np.asarray(_ids(prefix), dtype=np.int64)
    rng = np.random.default_rng(rng_seed)
    for i in rng.permutation(T):
        cands = table.members_of(int(table.class_of[ids[i]]))
        cands = cands[cands != ids[i]]
        if len(cands) == 0:
            continue
        lo, hi = i, min(T, i + span)
        m, w = len(cands), hi - lo
        full = np.concatenate([pre, ids])
        off = len(pre)
        n = reference_lm.order - 1
        # contexts of positions lo..hi-1 for each candidate, oldest first
        ctx = np.zeros((m, w, n), dtype=np.int64)
        toks = np.tile(ids[lo:hi], (m, 1))
        toks[:, 0] = cands
        for q in range(w):
            for j in range(n):
                src = lo + q - n + j
                if src == i:
                    ctx[:, q, j] = cands
                elif src >= -off:
                    ctx[:, q, j] = full[off + src]
        seg_lp, seg_dev = _terms(reference_lm, ctx.reshape(m * w, n), toks.reshape(-1))
        seg_lp, seg_dev = seg_lp.reshape(m, w), seg_dev.reshape(m, w)
        gain = dev[lo:hi].sum() - seg_dev.sum(axis=1)
        new_lp = total_lp - lp[lo:hi].sum() + seg_lp.sum(axis=1)
        ok = (gain > 1e-12) & (new_lp >= floor - 1e-9)
        if not ok.any():
            continue
        best = int(np.argmax(np.where(ok, gain, -np.inf)))
        ids[i] = cands[best]
        lp[lo:hi], dev[lo:hi] = seg_lp[best], seg_dev[best]
        total_lp = new_lp[best]
    return _wrap(text, ids)


def apply_attack(text, cfg: AttackConfig, table: SynonymTable, reference_lm: NGramModel | None = None,
                 prefix=None) -> TokenSequence:
    if cfg.kind is AttackKind.SUBSTITUTION:
        return substitution_attack(text, table, cfg.edit_rate, cfg.rng_seed)
    if cfg.kind is AttackKind.PARAPHRASE:
        return paraphrase_attack(text, cfg.window, cfg.edit_rate, table, cfg.rng_seed)
    if reference_lm is None:
        raise InvalidParameter("removal attack needs a reference language model")
    return removal_attack(text, reference_lm, table, cfg.perplexity_budget, cfg.rng_seed, prefix)


def attack_success_rate(pre: Sequence[DetectionResult], post: Sequence[DetectionResult]) -> float:
    """Share of pre-attack detections that the attack turned into misses."""
    pre, post = list(pre), list(post)
    if len(pre) != len(post):
        raise InvalidInput(f"pre/post lengths differ ({len(pre)} vs {len(post)})")
    was = sum(1 for a in pre if a.is_watermarked)
    if was == 0:
        return 0.0
    flipped = sum(1 for a, b in zip(pre, post) if a.is_watermarked and not b.is_watermarked)
    return flipped / was
