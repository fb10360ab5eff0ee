"""Corpus handling: byte-level tokenization, corpus file loading, and a
deterministic generator of English-like text for desk-scale experiments.

The generator composes sentences from an embedded vocabulary with
Zipf-weighted word choice and per-paragraph topic words, so the output has
the statistical texture of natural prose (long-tail word frequencies, local
topical repetition) without any external dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

BYTE_VOCAB = 256

_NOUNS = """
time year people way day man thing woman life child world school state family
student group country problem hand part place case week company system program
question work government number night point home water room mother area money
story fact month lot right study book eye job word business issue side kind
head house service friend father power hour game line end member law car city
community name president team minute idea body information back parent face
others level office door health person art war history party result change
morning reason research girl guy moment air teacher force education foot boy
age policy process music market sense nation plan college interest death
experience effect use class control care field development role effort rate
heart drug show leader light voice wife whole police mind price report
decision son view relationship town road arm difference value building action
model season society tax director position player record paper space ground
form event official matter center couple site project activity star table
need court american oil situation cost industry figure street image phase
river mountain harbor garden engine signal bridge island forest village
captain doctor farmer sailor letter journey winter summer evening window
""".split()

_VERBS = """
said made went took came saw knew got gave found thought told became showed
left felt put brought began kept held wrote stood heard let meant set met ran
paid sat spoke lay led read grew lost fell sent built understood drew broke
spent cut rose drove bought wore chose entered carried covered reached joined
watched followed stopped created opened walked offered remembered loved
considered appeared waited served died expected stayed passed required
reported decided pulled returned explained hoped developed turned started
moved lived believed happened played helped talked called asked needed
""".split()

_ADJECTIVES = """
good new first last long great little own other old right big high different
small large next early young important few public bad same able free low late
hard major better economic strong possible whole real certain personal open
red difficult available likely short single medical current wrong private
past foreign fine common poor natural significant similar hot dead central
happy serious ready simple left physical general environmental financial
blue democratic dark various entire close legal religious cold final main
green nice huge popular traditional cultural quiet bright ancient silver
distant narrow gentle steep broad rusty golden silent heavy
""".split()

_ADVERBS = """
quickly slowly carefully quietly suddenly finally usually probably certainly
together almost often never always sometimes rarely eventually gradually
barely nearly clearly simply mostly
""".split()

_PREPOSITIONS = "of in to for with on at from by about over after under between through across near".split()
_DETERMINERS = ["the", "the", "the", "a", "a", "this", "that", "every", "some", "no", "each", "another"]
_CONJUNCTIONS = ["and", "but", "while", "because", "although", "before", "after", "until", "so"]
_NAMES = """
Anna Marcus Elena Tobias Clara Jonas Maria Victor Sofia Adrian Laura Felix
Irene Oscar Nadia Ruben Alice Hugo Vera Leon
""".split()


def _zipf_weights(n: int) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = 1.0 / ranks
    return w / w.sum()


class TextGenerator:
    """Deterministic English-like prose generator."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def _pick(self, words, weights=None):
        if weights is None:
            return str(self.rng.choice(words))
        return str(self.rng.choice(words, p=weights))

    def _noun_phrase(self, topic_nouns):
        parts = [self._pick(_DETERMINERS)]
        if self.rng.random() < 0.45:
            parts.append(self._pick(_ADJECTIVES, _zipf_weights(len(_ADJECTIVES))))
        pool = topic_nouns if self.rng.random() < 0.6 else _NOUNS
        weights = _zipf_weights(len(pool)) if pool is _NOUNS else None
        parts.append(self._pick(pool, weights))
        return " ".join(parts)

    def _clause(self, topic_nouns):
        subject = (
            self._pick(_NAMES)
            if self.rng.random() < 0.2
            else self._noun_phrase(topic_nouns)
        )
        verb = self._pick(_VERBS, _zipf_weights(len(_VERBS)))
        parts = [subject, verb]
        if self.rng.random() < 0.3:
            parts.insert(1, self._pick(_ADVERBS))
        parts.append(self._noun_phrase(topic_nouns))
        if self.rng.random() < 0.5:
            parts.append(self._pick(_PREPOSITIONS))
            parts.append(self._noun_phrase(topic_nouns))
        return " ".join(parts)

    def sentence(self, topic_nouns):
        text = self._clause(topic_nouns)
        while self.rng.random() < 0.25:
            joiner = self._pick(_CONJUNCTIONS)
            text = f"{text}, {joiner} {self._clause(topic_nouns)}"
        text = text[0].upper() + text[1:]
        return text + "."

    def paragraph(self):
        # a handful of topic nouns recur within the paragraph
        idx = self.rng.choice(len(_NOUNS), size=5, replace=False)
        topic = [_NOUNS[i] for i in idx]
        n_sentences = int(self.rng.integers(3, 8))
        return " ".join(self.sentence(topic) for _ in range(n_sentences))


def generate_text(seed: int, n_bytes: int) -> str:
    """Deterministic English-like text of at least n_bytes bytes."""
    gen = TextGenerator(seed)
    parts = []
    total = 0
    while total < n_bytes:
        p = gen.paragraph()
        parts.append(p)
        total += len(p.encode("utf-8")) + 2
    return "\n\n".join(parts)


# --------------------------------------------------------------- tokenization


def text_to_tokens(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def tokens_to_text(tokens) -> str:
    return bytes(int(t) % 256 for t in tokens).decode("utf-8", errors="replace")


def load_corpus(path: str | Path, fmt: str = "bytes") -> list[list[int]]:
    """Load a training corpus.

    ``bytes``: the file's raw bytes as one token sequence (byte tokenizer).
    ``tokens``: newline-delimited, space-separated integer sequences.
    """
    path = Path(path)
    if fmt == "bytes":
        return [list(path.read_bytes())]
    if fmt == "tokens":
        out = []
        for line in path.read_text().splitlines():
            line = line.strip()
            if line:
                out.append([int(x) for x in line.split()])
        return out
    raise ValueError(f"unknown corpus format {fmt!r}")


def first_words(text: str, n_words: int) -> str:
    return " ".join(text.split()[:n_words])
