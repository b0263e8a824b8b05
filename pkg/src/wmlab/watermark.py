"""Watermark generators: KGW and Unigram green lists, SIR-lite, EXP.

Every keyed decision goes through one 64-bit mixer (splitmix64 finalizer,
see ``wmlab._core_py``):

    prf(secret, a, b) = mix64(mix64(mix64(secret) ^ a) ^ b)

* green lists: ``seed = prf(secret, context_hash(last h ids), SALT_GREEN)``;
  a token is green when a seeded Feistel permutation of the vocabulary maps
  it below ``round(gamma * |V|)``, which makes the green-list size exact.
  Unigram is the same code path with h = 0.
* SIR-lite: a class gets +delta when ``prf(secret, H ^ SALT_SIR, class)`` is
  odd, where H is an order-free sum of per-class hashes over the preceding
  completion tokens.
* EXP: ``xi[row][token] = unit(prf(secret, row, token))``; position i of a
  completion uses row (i + shift) mod n.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from wmlab import kernels
from wmlab.errors import InvalidInput, InvalidParameter
from wmlab.lm import BOS_ID, NGramModel, TokenSequence, run_kernel


class SchemeKind(str, Enum):
    KGW = "KGW"
    UNIGRAM = "UNIGRAM"
    SIRLITE = "SIRLITE"
    EXP = "EXP"


REPORT_NAMES = {
    SchemeKind.KGW: "KGW",
    SchemeKind.UNIGRAM: "Unigram",
    SchemeKind.SIRLITE: "SIR-lite",
    SchemeKind.EXP: "EXP",
}


@dataclass(frozen=True)
class WatermarkKey:
    secret: int

    def __post_init__(self):
        object.__setattr__(self, "secret", int(self.secret) & kernels.MASK64)

    def __repr__(self) -> str:
        return "WatermarkKey(<hidden>)"


@dataclass(frozen=True, eq=False)
class SchemeConfig:
    kind: SchemeKind
    key: WatermarkKey
    gamma: float = 0.25
    delta: float = 2.0
    context_width: int = 1
    exp_key_length: int = 256
    exp_shift: int = 0
    num_synonym_classes: int = 0
    class_of: np.ndarray | None = field(default=None, repr=False)
    name: str = ""

    def __post_init__(self):
        kind = SchemeKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not isinstance(self.key, WatermarkKey):
            object.__setattr__(self, "key", WatermarkKey(self.key))
        if not self.name:
            object.__setattr__(self, "name", REPORT_NAMES[kind])
        if kind is SchemeKind.EXP:
            if self.exp_key_length < 1:
                raise InvalidParameter("exp_key_length must be >= 1")
            return
        if not 0.0 < self.gamma < 1.0:
            raise InvalidParameter(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.delta < 0:
            raise InvalidParameter(f"delta must be >= 0, got {self.delta}")
        if kind is SchemeKind.KGW and self.context_width < 1:
            raise InvalidParameter("KGW requires context_width >= 1")
        if kind is SchemeKind.UNIGRAM:
            object.__setattr__(self, "context_width", 0)
        if kind is SchemeKind.SIRLITE:
            if self.class_of is not None:
                cls = np.asarray(self.class_of, dtype=np.int64)
                object.__setattr__(self, "class_of", cls)
                object.__setattr__(self, "num_synonym_classes", int(cls.max()) + 1)
            if self.num_synonym_classes < 2:
                raise InvalidParameter("SIR-lite needs at least 2 synonym classes")
            object.__setattr__(self, "context_width", 0)

    @property
    def report_name(self) -> str:
        return REPORT_NAMES[self.kind]

    def with_key(self, key) -> "SchemeConfig":
        return replace(self, key=key if isinstance(key, WatermarkKey) else WatermarkKey(key))

    def classes(self, vocab_size: int) -> np.ndarray:
        if self.class_of is not None:
            if len(self.class_of) != vocab_size:
                raise InvalidParameter("class table does not cover the vocabulary")
            return self.class_of
        return np.arange(vocab_size, dtype=np.int64) % self.num_synonym_classes

    def public_dict(self) -> dict:
        """Serializable description; never includes the secret."""
        d = {"name": self.name, "kind": self.kind.value}
        if self.kind is SchemeKind.EXP:
            d.update(exp_key_length=self.exp_key_length, exp_shift=self.exp_shift)
        else:
            d.update(gamma=self.gamma, delta=self.delta, context_width=self.context_width)
        if self.kind is SchemeKind.SIRLITE:
            d["num_synonym_classes"] = self.num_synonym_classes
        return d


def green_count(gamma: float, vocab_size: int) -> int:
    """round(gamma * |V|), halves rounded up."""
    return int(math.floor(gamma * vocab_size + 0.5))


@dataclass(frozen=True, eq=False)
class GreenPartition:
    mask: np.ndarray
    gamma: float

    @property
    def green(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.mask).tolist())

    @property
    def red(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(~self.mask).tolist())

    def __len__(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, GreenPartition) and np.array_equal(self.mask, other.mask)

    def __hash__(self):
        return hash(self.mask.tobytes())


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise InvalidParameter(f"gamma must lie in (0, 1), got {gamma}")


def partition_from_seed(seed: int, gamma: float, vocab_size: int) -> GreenPartition:
    perm = kernels.feistel(np.uint64(seed), np.arange(vocab_size, dtype=np.int64), vocab_size)
    return GreenPartition(perm < green_count(gamma, vocab_size), gamma)


def padded_context(context, width: int) -> list[int]:
    ids = [int(t) for t in (context.ids if isinstance(context, TokenSequence) else context)]
    tail = ids[len(ids) - width:] if width else []
    return [BOS_ID] * (width - len(tail)) + tail


def kgw_partition(key: WatermarkKey, context, gamma: float, vocab_size: int,
                  width: int = 1) -> GreenPartition:
    """Green list seeded by the last ``width`` context ids (BOS-padded)."""
    _check_gamma(gamma)
    ctx = padded_context(context, width)
    seed = kernels.green_seed(key.secret, kernels.context_hash(ctx))
    return partition_from_seed(seed, gamma, vocab_size)


def unigram_partition(key: WatermarkKey, gamma: float, vocab_size: int) -> GreenPartition:
    return kgw_partition(key, (), gamma, vocab_size, width=0)


def multiset_hash(context, class_of: np.ndarray) -> int:
    ids = context.ids if isinstance(context, TokenSequence) else np.asarray(context, dtype=np.int64)
    h = 0
    for t in ids:
        h = (h + kernels.class_token(int(class_of[int(t)]))) & kernels.MASK64
    return h


def sirlite_bias_vector(key: WatermarkKey, context, num_classes: int, delta: float,
                        vocab_size: int, class_of: np.ndarray | None = None) -> np.ndarray:
    """+delta / -delta per token; constant within a synonym class."""
    if num_classes < 2:
        raise InvalidParameter("num_classes must be >= 2")
    if class_of is None:
        class_of = np.arange(vocab_size, dtype=np.int64) % num_classes
    signs = kernels.sirlite_signs(key.secret, multiset_hash(context, class_of), num_classes)
    return np.where(signs[class_of] == 1, delta, -delta).astype(np.float64)


def bias_logits(logits, partition_or_bias, delta: float = 0.0) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if isinstance(partition_or_bias, GreenPartition):
        if len(partition_or_bias.mask) != len(logits):
            raise InvalidInput("logits and partition lengths differ")
        return logits + delta * partition_or_bias.mask
    bias = np.asarray(partition_or_bias, dtype=np.float64)
    if bias.shape != logits.shape:
        raise InvalidInput("logits and bias vector lengths differ")
    return logits + bias


class ExpKeySequence:
    """n x |V| pseudo-random matrix in (0, 1), computed row by row on demand."""

    def __init__(self, key: WatermarkKey, n: int, vocab_size: int, shift: int = 0):
        if n < 1:
            raise InvalidParameter("key length must be >= 1")
        self.key = key
        self.n = n
        self.vocab_size = vocab_size
        self.shift = shift

    def row_index(self, position: int) -> int:
        return (position + self.shift) % self.n

    def row(self, r: int) -> np.ndarray:
        toks = np.arange(self.vocab_size, dtype=np.uint64)
        return kernels.xi_values(self.key.secret, np.full(self.vocab_size, r % self.n, dtype=np.uint64), toks)

    def value(self, r: int, token: int) -> float:
        return kernels.unit(kernels.prf(self.key.secret, r % self.n, token))

    @property
    def entries(self) -> np.ndarray:
        return np.stack([self.row(r) for r in range(self.n)])


def exp_sample(probabilities, xi_row) -> int:
    """argmax_v xi[v] ** (1 / p[v]) over tokens with p[v] > 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    xi = np.asarray(xi_row, dtype=np.float64)
    if p.shape != xi.shape:
        raise InvalidInput("probability and key row lengths differ")
    live = p > 0
    if not live.any():
        raise InvalidInput("all-zero probability vector")
    score = np.full(p.shape, -np.inf)
    score[live] = np.log(xi[live]) / p[live]
    return int(np.argmax(score))


@dataclass
class GenerationTrace:
    """Per-step watermark seeds recorded during generation (for round-trip tests)."""

    seeds: np.ndarray


def watermarked_generate(model: NGramModel, prompt, scheme: SchemeConfig | None, length: int,
                         rng_seed: int = 0, sampler: str = "multinomial",
                         record: bool = False):
    if length < 0:
        raise InvalidParameter("length must be non-negative")
    ids = prompt.ids if isinstance(prompt, TokenSequence) else np.asarray(prompt, dtype=np.int64)
    gen_seed = kernels.derive_seed(rng_seed)
    V = model.vocab_size
    if scheme is None:
        out, seeds = run_kernel(model, ids, length, gen_seed, sampler, record=record)
    elif scheme.kind in (SchemeKind.KGW, SchemeKind.UNIGRAM):
        out, seeds = run_kernel(
            model, ids, length, gen_seed, sampler, mode=kernels.MODE_GREEN,
            secret=scheme.key.secret, width=scheme.context_width,
            green_count=green_count(scheme.gamma, V), mult_plus=math.exp(scheme.delta),
            record=record,
        )
    elif scheme.kind is SchemeKind.SIRLITE:
        out, seeds = run_kernel(
            model, ids, length, gen_seed, sampler, mode=kernels.MODE_SIRLITE,
            secret=scheme.key.secret, mult_plus=math.exp(scheme.delta),
            mult_minus=math.exp(-scheme.delta), class_of=scheme.classes(V),
            num_classes=scheme.num_synonym_classes, record=record,
        )
    else:
        out, seeds = run_kernel(
            model, ids, length, gen_seed, sampler, mode=kernels.MODE_EXP,
            secret=scheme.key.secret, exp_n=scheme.exp_key_length,
            exp_shift=scheme.exp_shift, record=record,
        )
    seq = TokenSequence(out, model.model_id)
    if record:
        return seq, GenerationTrace(seeds)
    return seq
