"""Evaluation metrics: n-gram diversity, prompt/continuation coherence,
perplexity, and a synthetic long-range recall task.

The coherence embedder is pluggable.  The default is a mean-pooled bag of a
model's input embeddings; absolute coherence values are therefore only
comparable within a run, never across embedders.  Every report carries that
caveat.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .contrast import PROB_FLOOR

NGRAM_ORDERS = (2, 3, 4)

EMBEDDER_CAVEAT = (
    "coherence values depend on the embedder and are only comparable "
    "within a single run"
)


@dataclass(frozen=True)
class DiversityReport:
    ratios: dict[int, float]  # n -> unique/total n-gram ratio
    aggregate: float

    def __post_init__(self) -> None:
        expected = float(np.prod([self.ratios[n] for n in sorted(self.ratios)]))
        if abs(expected - self.aggregate) > 1e-9:
            raise ValueError("aggregate must be the product of the per-n ratios")


@dataclass(frozen=True)
class CoherenceScore:
    value: float
    embedder_id: str
    caveat: str = EMBEDDER_CAVEAT


# An embedder maps a token sequence to a fixed-length vector.
Embedder = Callable[[Sequence[int]], np.ndarray]


def ngram_diversity(tokens: Sequence[int]) -> DiversityReport:
    """Product over n in {2,3,4} of (# distinct n-grams) / (# n-grams)."""
    tokens = list(tokens)
    if len(tokens) < max(NGRAM_ORDERS):
        raise ValueError(
            f"need at least {max(NGRAM_ORDERS)} tokens, got {len(tokens)}"
        )
    ratios = {}
    for n in NGRAM_ORDERS:
        grams = [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
        ratios[n] = len(set(grams)) / len(grams)
    aggregate = float(np.prod([ratios[n] for n in NGRAM_ORDERS]))
    return DiversityReport(ratios=ratios, aggregate=aggregate)


def coherence(
    prompt: Sequence[int],
    continuation: Sequence[int],
    embedder: Embedder,
    embedder_id: str = "custom",
) -> CoherenceScore:
    """Cosine similarity between embeddings of prompt and continuation."""
    if not len(prompt) or not len(continuation):
        raise ValueError("prompt and continuation must be non-empty")
    a = np.asarray(embedder(prompt), dtype=np.float64)
    b = np.asarray(embedder(continuation), dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("embedder produced a zero vector; cannot take cosine")
    return CoherenceScore(value=float(a @ b / (na * nb)), embedder_id=embedder_id)


def one_hot_bag_embedder(vocab_size: int) -> Embedder:
    """Bag of one-hot token vectors; useful for tests and tiny vocabularies."""

    def embed(tokens: Sequence[int]) -> np.ndarray:
        out = np.zeros(vocab_size)
        for t in tokens:
            out[t] += 1.0
        return out

    return embed


def model_embedding_bag(model) -> Embedder:
    """Default embedder: mean-pooled rows of the model's input embedding."""
    table = model.tok_emb.weight.detach().cpu().numpy().astype(np.float64)

    def embed(tokens: Sequence[int]) -> np.ndarray:
        return table[np.asarray(list(tokens), dtype=int)].mean(axis=0)

    return embed


def vector_file_embedder(path: str) -> Embedder:
    """Embedder backed by an external token->vector table (.npy, rows=tokens)."""
    table = np.load(path)

    def embed(tokens: Sequence[int]) -> np.ndarray:
        return table[np.asarray(list(tokens), dtype=int)].mean(axis=0)

    return embed


@dataclass
class PerplexityReport:
    token_ppl: float
    word_ppl: float | None
    total_nll: float
    n_tokens: int
    n_floored: int  # target tokens whose probability hit the floor


def perplexity(
    provider,
    corpus: Sequence[Sequence[int]],
    word_counts: Sequence[int] | None = None,
) -> PerplexityReport:
    """Geometric-mean inverse probability of each next token under the provider.

    Scores positions 1..len-1 of every sequence (the first token has no
    context).  With ``word_counts`` (one count per sequence, tokenizer
    dependent and caller supplied) a word-level perplexity is also computed:
    exp(total NLL / total words).
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if word_counts is not None and len(word_counts) != len(corpus):
        raise ValueError("need one word count per corpus sequence")
    total_nll = 0.0
    n_tokens = 0
    n_floored = 0
    for seq in corpus:
        seq = list(seq)
        if len(seq) < 2:
            raise ValueError("each sequence needs at least 2 tokens")
        for t in range(1, len(seq)):
            dist = np.asarray(provider(seq[:t]), dtype=np.float64)
            p = float(dist[seq[t]])
            if p < PROB_FLOOR:
                p = PROB_FLOOR
                n_floored += 1
            total_nll += -np.log(p)
            n_tokens += 1
    token_ppl = float(np.exp(total_nll / n_tokens))
    word_ppl = None
    if word_counts is not None:
        total_words = int(sum(word_counts))
        if total_words <= 0:
            raise ValueError("word counts must sum to a positive total")
        exponent = total_nll / total_words
        word_ppl = float(np.exp(exponent)) if exponent < 700 else float("inf")
    return PerplexityReport(
        token_ppl=token_ppl,
        word_ppl=word_ppl,
        total_nll=float(total_nll),
        n_tokens=n_tokens,
        n_floored=n_floored,
    )


# ------------------------------------------------------------ recall task


@dataclass(frozen=True)
class RecallTaskInstance:
    """Context with one rare answer token planted early and a trailing cue;
    the correct next token is the planted answer."""

    context: tuple[int, ...]
    target: int

    def check(self, min_gap: int = 32) -> None:
        occurrences = [i for i, t in enumerate(self.context) if t == self.target]
        if len(occurrences) != 1:
            raise ValueError(
                f"target must occur exactly once in the context, found "
                f"{len(occurrences)} times"
            )
        if occurrences[0] > len(self.context) - 1 - min_gap:
            raise ValueError(
                f"answer at position {occurrences[0]} is closer than {min_gap} "
                f"tokens to the end"
            )


# token-space layout used by the generator: the top id is the cue, the upper
# half (minus the cue) holds answers, the lower half holds filler
def _recall_ranges(vocab: int) -> tuple[int, range, range]:
    cue = vocab - 1
    answers = range(vocab // 2, vocab - 1)
    filler = range(0, vocab // 2)
    return cue, answers, filler


def make_recall_tasks(
    seed: int, n: int, vocab: int, context_len: int
) -> list[RecallTaskInstance]:
    """Deterministic synthetic recall instances.

    Layout: filler, cue, answer, filler, cue.  The answer is drawn from a
    reserved range that never appears as filler, so recalling the token that
    followed the early cue is the only way to resolve the trailing cue.
    """
    if context_len < 64:
        raise ValueError("context_len must be at least 64")
    if vocab < 16:
        raise ValueError("vocab must be at least 16 to keep answers rare")
    cue, answers, _filler = _recall_ranges(vocab)
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n):
        answer = int(rng.choice(list(answers)))
        # answer sits in the first part of the context, >= 32 tokens from end
        answer_pos = int(rng.integers(2, context_len - 34))
        context = rng.integers(0, vocab // 2, size=context_len).tolist()
        context[answer_pos - 1] = cue
        context[answer_pos] = answer
        context[-1] = cue
        tasks.append(RecallTaskInstance(context=tuple(context), target=answer))
    return tasks


def make_recall_corpus(
    seed: int, n: int, vocab: int, context_len: int
) -> list[list[int]]:
    """Training sequences for the recall pattern: each instance's context with
    the answer appended as the final (predictable) token."""
    tasks = make_recall_tasks(seed, n, vocab, context_len)
    return [list(t.context) + [t.target] for t in tasks]


def recall_accuracy(provider, tasks: Sequence[RecallTaskInstance]) -> float:
    """Fraction of tasks where the provider's argmax equals the target."""
    if not tasks:
        raise ValueError("no tasks supplied")
    hits = 0
    for task in tasks:
        dist = np.asarray(provider(list(task.context)), dtype=np.float64)
        hits += int(np.argmax(dist) == task.target)
    return hits / len(tasks)
