"""IP checkers: green-fraction z-tests, EXP alignment permutation tests and
model-level flagging."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from wmlab import kernels
from wmlab.errors import InsufficientText, InvalidInput, InvalidParameter
from wmlab.lm import BOS_ID, TokenSequence
from wmlab.watermark import SchemeConfig, SchemeKind, WatermarkKey, green_count

DEFAULT_Z_THRESHOLD = 4.0
DEFAULT_ALPHA = 0.01
DEFAULT_BAND = 8


@dataclass(frozen=True)
class DetectionResult:
    statistic: float
    p_value: float
    threshold: float
    is_watermarked: bool
    tokens_scored: int
    scheme: str = ""
    test: str = "z"

    def to_record(self) -> dict:
        d = asdict(self)
        d["verdict"] = d.pop("is_watermarked")
        return d


@dataclass(frozen=True)
class ModelVerdict:
    outputs_tested: int
    outputs_flagged: int
    flag_rate: float
    model_flagged: bool
    flag_rate_threshold: float


def _ids(text) -> np.ndarray:
    return text.ids if isinstance(text, TokenSequence) else np.asarray(text, dtype=np.int64)


def _rolling_context_hashes(ids: np.ndarray, width: int, start: int) -> np.ndarray:
    """context_hash(ids[i-width:i]) for i in [start, len(ids)), BOS-padded."""
    n = len(ids) - start
    h = np.full(n, kernels.context_hash(()), dtype=np.uint64)
    padded = np.concatenate([np.full(width, BOS_ID, dtype=np.int64), ids])
    for j in range(width):
        col = padded[start + j : start + j + n].astype(np.uint64)
        h = kernels.mix64(h ^ col)
    return h


def green_hits(text, scheme: SchemeConfig, vocab_size: int) -> tuple[np.ndarray, float]:
    """Per scored position: 1 if the token got the positive bias. Returns (hits, gamma)."""
    ids = _ids(text)
    if scheme.kind in (SchemeKind.KGW, SchemeKind.UNIGRAM):
        h = scheme.context_width
        if len(ids) < h + 1:
            raise InsufficientText(f"need at least {h + 1} tokens, got {len(ids)}")
        ctx = _rolling_context_hashes(ids, h, h)
        seeds = kernels.prf(scheme.key.secret, ctx, np.uint64(kernels.SALT_GREEN))
        perm = kernels.feistel(seeds, ids[h:], vocab_size)
        return (perm < green_count(scheme.gamma, vocab_size)).astype(np.int64), scheme.gamma
    if scheme.kind is SchemeKind.SIRLITE:
        if len(ids) < 1:
            raise InsufficientText("need at least 1 token")
        cls = scheme.classes(vocab_size)[ids]
        toks = kernels.mix64((cls.astype(np.uint64) ^ np.uint64(kernels.SALT_CLASS)))
        with np.errstate(over="ignore"):
            ms = np.concatenate([[np.uint64(0)], np.cumsum(toks, dtype=np.uint64)[:-1]])
        keyed = ms ^ np.uint64(kernels.SALT_SIR)
        bits = kernels.prf(scheme.key.secret, keyed, cls.astype(np.uint64)) & np.uint64(1)
        return bits.astype(np.int64), 0.5
    raise InvalidParameter("green-fraction test needs a KGW, UNIGRAM or SIRLITE scheme")


def z_statistic(hits: int, scored: int, gamma: float) -> float:
    return (hits - gamma * scored) / math.sqrt(scored * gamma * (1.0 - gamma))


def green_fraction_test(text, scheme: SchemeConfig, vocab_size: int,
                        z_threshold: float = DEFAULT_Z_THRESHOLD) -> DetectionResult:
    hits, gamma = green_hits(text, scheme, vocab_size)
    T = len(hits)
    if T < 1:
        raise InsufficientText("no scorable tokens")
    z = z_statistic(int(hits.sum()), T, gamma)
    return DetectionResult(
        statistic=z,
        p_value=float(ndtr(-z)),
        threshold=z_threshold,
        is_watermarked=bool(z >= z_threshold),
        tokens_scored=T,
        scheme=scheme.name,
        test="z",
    )


@lru_cache(maxsize=None)
def calibrated_edit_penalty(samples: int = 20000, seed: int = 20240601) -> float:
    """Mean per-token alignment cost of random text against a random key."""
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, 2**63, size=samples, dtype=np.uint64)
    rows = rng.integers(0, 1 << 16, size=samples, dtype=np.uint64)
    toks = rng.integers(0, 1 << 16, size=samples, dtype=np.uint64)
    costs = [-math.log(kernels.unit(kernels.prf(int(k), int(r), int(t)))) for k, r, t in zip(keys, rows, toks)]
    return float(np.mean(costs))


def alignment_cost(ids, key: int, n: int, shift: int = 0, edit_tolerant: bool = True,
                   band: int = DEFAULT_BAND, penalty: float | None = None) -> float:
    if edit_tolerant:
        lam = calibrated_edit_penalty() if penalty is None else penalty
        return kernels.exp_edit_cost(ids, key, n, shift, band, lam)
    return kernels.exp_cost(ids, key, n, shift)


def decoy_keys(rng_seed: int, count: int) -> np.ndarray:
    return np.random.default_rng(rng_seed).integers(0, 2**63, size=count, dtype=np.uint64)


def exp_alignment_test(text, key: WatermarkKey, n: int, num_permutations: int = 100,
                       rng_seed: int = 0, alpha: float = DEFAULT_ALPHA,
                       edit_tolerant: bool = True, band: int = DEFAULT_BAND,
                       penalty: float | None = None, shift: int = 0,
                       scheme_name: str = "EXP") -> DetectionResult:
    """Permutation test of the key-alignment cost against decoy keys.

    p = (1 + #{decoy cost <= true cost}) / (num_permutations + 1).
    """
    ids = _ids(text)
    if len(ids) < 1:
        raise InsufficientText("need at least 1 token")
    if num_permutations < 20:
        raise InvalidParameter("num_permutations must be >= 20")
    if n < 1:
        raise InvalidParameter("key length must be >= 1")
    if edit_tolerant and band < 0:
        raise InvalidParameter("band must be >= 0")
    true_cost = alignment_cost(ids, key.secret, n, shift, edit_tolerant, band, penalty)
    hits = 0
    for k in decoy_keys(rng_seed, num_permutations):
        if alignment_cost(ids, int(k), n, shift, edit_tolerant, band, penalty) <= true_cost:
            hits += 1
    p = (1 + hits) / (num_permutations + 1)
    return DetectionResult(
        statistic=true_cost,
        p_value=p,
        threshold=alpha,
        is_watermarked=bool(p <= alpha),
        tokens_scored=len(ids),
        scheme=scheme_name,
        test="permutation",
    )


def exp_z_score(text, key: WatermarkKey, n: int, shift: int = 0) -> float:
    """Unit-variance score of the straight alignment cost.

    Under the null each -log(xi) term is Exp(1), so (T - cost) / sqrt(T) is
    approximately standard normal.
    """
    ids = _ids(text)
    T = len(ids)
    return (T - kernels.exp_cost(ids, key.secret, n, shift)) / math.sqrt(T)


def detect(text, scheme: SchemeConfig, vocab_size: int, z_threshold: float = DEFAULT_Z_THRESHOLD,
           alpha: float = DEFAULT_ALPHA, num_permutations: int = 100, rng_seed: int = 0) -> DetectionResult:
    if scheme.kind is SchemeKind.EXP:
        return exp_alignment_test(text, scheme.key, scheme.exp_key_length, num_permutations,
                                  rng_seed, alpha, shift=scheme.exp_shift, scheme_name=scheme.name)
    return green_fraction_test(text, scheme, vocab_size, z_threshold)


def _concat(texts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened ids, start offset of each text and the text index of each token."""
    arrs = [_ids(t) for t in texts]
    lens = np.array([len(a) for a in arrs], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]]).astype(np.int64)
    flat = np.concatenate(arrs) if arrs else np.zeros(0, np.int64)
    owner = np.repeat(np.arange(len(arrs)), lens)
    return flat, starts, owner


def scheme_scores(texts, scheme: SchemeConfig, vocab_size: int) -> np.ndarray:
    """``scheme_score`` for many texts at once (one vectorized pass)."""
    texts = list(texts)
    if scheme.kind is SchemeKind.EXP:
        return np.array([exp_z_score(t, scheme.key, scheme.exp_key_length, scheme.exp_shift) for t in texts])
    flat, starts, owner = _concat(texts)
    pos = np.arange(len(flat)) - starts[owner]
    if scheme.kind is SchemeKind.SIRLITE:
        gamma, h = 0.5, 0
        cls = scheme.classes(vocab_size)[flat]
        toks = kernels.mix64(cls.astype(np.uint64) ^ np.uint64(kernels.SALT_CLASS))
        with np.errstate(over="ignore"):
            run = np.concatenate([[np.uint64(0)], np.cumsum(toks, dtype=np.uint64)])
            ms = run[:-1] - run[starts[owner]]
        keyed = ms ^ np.uint64(kernels.SALT_SIR)
        hits = kernels.prf(scheme.key.secret, keyed, cls.astype(np.uint64)) & np.uint64(1)
    elif scheme.kind in (SchemeKind.KGW, SchemeKind.UNIGRAM):
        gamma, h = scheme.gamma, scheme.context_width
        ctx = np.full(len(flat), kernels.context_hash(()), dtype=np.uint64)
        for j in range(h):
            prev = np.roll(flat, h - j).astype(np.uint64)  # flat[g - h + j]
            ctx = kernels.mix64(ctx ^ prev)
        seeds = kernels.prf(scheme.key.secret, ctx, np.uint64(kernels.SALT_GREEN))
        perm = kernels.feistel(seeds, flat, vocab_size)
        hits = perm < green_count(gamma, vocab_size)
    else:
        raise InvalidParameter(f"unsupported scheme {scheme.kind}")
    scored = pos >= h
    n = np.bincount(owner[scored], minlength=len(texts))
    if (n < 1).any():
        raise InsufficientText(f"every text needs at least {h + 1} tokens")
    g = np.bincount(owner[scored], weights=hits[scored].astype(np.float64), minlength=len(texts))
    return (g - gamma * n) / np.sqrt(n * gamma * (1.0 - gamma))


def scheme_score(text, scheme: SchemeConfig, vocab_size: int) -> float:
    """Cheap scalar watermark score: green-fraction z, or EXP alignment z."""
    return float(scheme_scores([text], scheme, vocab_size)[0])


def flag_model(results: Sequence[DetectionResult], flag_rate_threshold: float = 0.25) -> ModelVerdict:
    results = list(results)
    if not results:
        raise InvalidInput("no detection results to aggregate")
    flagged = sum(1 for r in results if r.is_watermarked)
    rate = flagged / len(results)
    return ModelVerdict(
        outputs_tested=len(results),
        outputs_flagged=flagged,
        flag_rate=rate,
        model_flagged=rate >= flag_rate_threshold,
        flag_rate_threshold=flag_rate_threshold,
    )
