"""Decoding strategies over a generic next-token distribution provider.

A provider is any callable mapping a context token sequence to a valid
probability vector.  Greedy, beam, top-k and nucleus search therefore run
identically over a single exit, a contrastive distribution, or a replayed
logit stream.  Sampling uses a named, explicitly seeded generator (PCG64)
so results reproduce across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np

from .stream import StreamExhausted

RNG_NAME = "pcg64"

STRATEGIES = ("greedy", "beam", "top_k", "top_p")


@runtime_checkable
class DistributionProvider(Protocol):
    def __call__(self, context: Sequence[int]) -> np.ndarray: ...


@dataclass
class GenerationConfig:
    strategy: str = "greedy"
    max_new_tokens: int = 100
    beam_width: int = 5
    k: int = 50
    p: float = 0.95
    seed: int = 0
    stop_token: int | None = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.beam_width < 1 or self.k < 1:
            raise ValueError("beam_width and k must be >= 1")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("p must be in (0, 1]")


@dataclass
class GenerationResult:
    prompt: list[int]
    continuation: list[int]
    step_probs: list[float]
    metadata: dict = field(default_factory=dict)


class ProviderStepError(RuntimeError):
    """Provider failed; carries the decoding step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"provider failed at step {step}: {cause}")
        self.step = step
        self.cause = cause


def _call_provider(provider, context, step):
    try:
        return np.asarray(provider(context), dtype=np.float64)
    except StreamExhausted:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with step context
        raise ProviderStepError(step, exc) from exc


def _metadata(cfg: GenerationConfig, **extra) -> dict:
    meta = {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "rng": RNG_NAME,
        "max_new_tokens": cfg.max_new_tokens,
        "stop_token": cfg.stop_token,
    }
    meta.update(extra)
    return meta


def decode_greedy(
    provider: DistributionProvider, prompt: Sequence[int], cfg: GenerationConfig
) -> GenerationResult:
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    context = list(prompt)
    continuation: list[int] = []
    probs: list[float] = []
    for step in range(cfg.max_new_tokens):
        try:
            dist = _call_provider(provider, context, step)
        except StreamExhausted:
            break
        token = int(np.argmax(dist))
        continuation.append(token)
        probs.append(float(dist[token]))
        context.append(token)
        if token == cfg.stop_token:
            break
    return GenerationResult(prompt, continuation, probs, _metadata(cfg))


def decode_beam(
    provider: DistributionProvider, prompt: Sequence[int], cfg: GenerationConfig
) -> GenerationResult:
    """Beam search maximizing raw summed log-probability.

    No length normalization; hypotheses that emit the stop token are held
    aside as finished.  Ties are broken by the lexicographically smaller
    token sequence.
    """
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")

    # (tokens, logprob sum, per-step provider probs)
    beams: list[tuple[tuple[int, ...], float, tuple[float, ...]]] = [((), 0.0, ())]
    finished: list[tuple[tuple[int, ...], float, tuple[float, ...]]] = []

    for step in range(cfg.max_new_tokens):
        candidates = []
        exhausted = False
        for tokens, score, probs in beams:
            try:
                dist = _call_provider(provider, prompt + list(tokens), step)
            except StreamExhausted:
                exhausted = True
                break
            with np.errstate(divide="ignore"):
                logp = np.log(dist)
            # top beam_width extensions per hypothesis suffice for an exact
            # global top beam_width
            order = np.lexsort((np.arange(dist.size), -dist))[: cfg.beam_width]
            for token in order:
                candidates.append(
                    (
                        tokens + (int(token),),
                        score + float(logp[token]),
                        probs + (float(dist[token]),),
                    )
                )
        if exhausted or not candidates:
            break
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = []
        for cand in candidates:
            if cfg.stop_token is not None and cand[0][-1] == cfg.stop_token:
                finished.append(cand)
            else:
                beams.append(cand)
            if len(beams) == cfg.beam_width:
                break
        if not beams:
            break

    pool = finished if finished else beams
    if not pool:
        return GenerationResult(prompt, [], [], _metadata(cfg, beam_width=cfg.beam_width))
    best = min(pool, key=lambda c: (-c[1], c[0]))
    return GenerationResult(
        prompt,
        list(best[0]),
        list(best[2]),
        _metadata(cfg, beam_width=cfg.beam_width, log_prob=best[1]),
    )


def _sampling_decode(
    provider, prompt, cfg: GenerationConfig, truncate: Callable[[np.ndarray], np.ndarray]
) -> tuple[list[int], list[float]]:
    """Shared loop: truncate returns candidate ids in keep order."""
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    context = list(prompt)
    continuation: list[int] = []
    probs: list[float] = []
    for step in range(cfg.max_new_tokens):
        try:
            dist = _call_provider(provider, context, step)
        except StreamExhausted:
            break
        keep = truncate(dist)
        renorm = dist[keep] / dist[keep].sum()
        token = int(rng.choice(keep, p=renorm))
        continuation.append(token)
        probs.append(float(dist[token]))
        context.append(token)
        if token == cfg.stop_token:
            break
    return continuation, probs


def decode_top_k(
    provider: DistributionProvider, prompt: Sequence[int], cfg: GenerationConfig
) -> GenerationResult:
    def truncate(dist: np.ndarray) -> np.ndarray:
        # ties at the k boundary: lower token id wins
        order = np.lexsort((np.arange(dist.size), -dist))
        return order[: cfg.k]

    continuation, probs = _sampling_decode(provider, prompt, cfg, truncate)
    return GenerationResult(list(prompt), continuation, probs, _metadata(cfg, k=cfg.k))


def decode_top_p(
    provider: DistributionProvider, prompt: Sequence[int], cfg: GenerationConfig
) -> GenerationResult:
    def truncate(dist: np.ndarray) -> np.ndarray:
        order = np.lexsort((np.arange(dist.size), -dist))
        cum = np.cumsum(dist[order])
        # smallest prefix whose mass reaches p
        cut = int(np.searchsorted(cum, cfg.p)) + 1
        return order[:cut]

    continuation, probs = _sampling_decode(provider, prompt, cfg, truncate)
    return GenerationResult(list(prompt), continuation, probs, _metadata(cfg, p=cfg.p))


_DECODERS = {
    "greedy": decode_greedy,
    "beam": decode_beam,
    "top_k": decode_top_k,
    "top_p": decode_top_p,
}


def decode(
    provider: DistributionProvider, prompt: Sequence[int], cfg: GenerationConfig
) -> GenerationResult:
    return _DECODERS[cfg.strategy](provider, prompt, cfg)
