"""Model stealing by n-gram distillation, and the key holder's radioactivity check."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from wmlab import kernels
from wmlab.detector import DetectionResult, ModelVerdict, detect, flag_model
from wmlab.errors import InsufficientPrompts, InvalidParameter
from wmlab.lm import NGramModel, TokenSequence, generate, train_ngram
from wmlab.watermark import SchemeConfig, watermarked_generate


@dataclass(frozen=True)
class StealingConfig:
    num_queries: int
    prompts: Sequence = field(repr=False)
    surrogate_order: int = 2
    surrogate_smoothing: float = 0.001
    victim_scheme: SchemeConfig | None = None
    completion_length: int = 200

    def __post_init__(self):
        if self.num_queries < 1:
            raise InvalidParameter("num_queries must be >= 1")
        if self.completion_length < 1:
            raise InvalidParameter("completion_length must be >= 1")


def query_victim(victim: NGramModel, cfg: StealingConfig, rng_seed: int) -> list[TokenSequence]:
    """The attacker's N query/response pairs (responses only)."""
    if cfg.num_queries > len(cfg.prompts):
        raise InsufficientPrompts(f"{cfg.num_queries} queries requested, {len(cfg.prompts)} prompts available")
    return [
        watermarked_generate(victim, cfg.prompts[j], cfg.victim_scheme, cfg.completion_length,
                             rng_seed=kernels.derive_seed(rng_seed, j))
        for j in range(cfg.num_queries)
    ]


def distill(responses: Sequence[TokenSequence], victim: NGramModel, order: int, smoothing: float,
            model_id: str = "surrogate") -> NGramModel:
    corpus = np.concatenate([r.ids for r in responses])
    return train_ngram(corpus, order, smoothing, model_id, victim.vocab)


def steal(victim: NGramModel, cfg: StealingConfig, rng_seed: int = 0) -> NGramModel:
    responses = query_victim(victim, cfg, rng_seed)
    return distill(responses, victim, cfg.surrogate_order, cfg.surrogate_smoothing,
                   f"surrogate-of-{victim.model_id}")


def radioactivity_check(surrogate: NGramModel, scheme: SchemeConfig, num_probe_generations: int,
                        flag_rate_threshold: float = 0.25, rng_seed: int = 0, prompts: Sequence | None = None,
                        length: int = 200, num_permutations: int = 100) -> tuple[ModelVerdict, list[DetectionResult]]:
    """Sample plain (unwatermarked) probes from the surrogate and test each."""
    if num_probe_generations < 10:
        raise InvalidParameter("need at least 10 probe generations")
    if prompts is not None and len(prompts) < num_probe_generations:
        raise InsufficientPrompts("fewer probe prompts than probe generations")
    results = []
    for j in range(num_probe_generations):
        prompt = prompts[j] if prompts is not None else np.zeros(0, dtype=np.int64)
        seed = kernels.derive_seed(rng_seed, j, 0x9B0BE)
        text = generate(surrogate, prompt, length, rng_seed=seed)
        results.append(detect(text, scheme, surrogate.vocab_size, num_permutations=num_permutations,
                              rng_seed=seed & 0xFFFFFFFF))
    return flag_model(results, flag_rate_threshold), results
