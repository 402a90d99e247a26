"""Small synthetic corpora for overfitting, dependency and fine-tuning runs."""

from __future__ import annotations

import itertools

import numpy as np

_DET = ["the", "a", "every", "one"]
_ADJ = ["quiet", "bright", "heavy", "small", "golden", "rapid", "silent", "curious"]
_NOUN = ["river", "engine", "garden", "teacher", "window", "signal", "market", "planet"]
_VERB = ["follows", "reaches", "carries", "watches", "breaks", "answers", "measures", "holds"]
_OBJ = ["lantern", "bridge", "letter", "mountain", "circuit", "harbor", "pattern", "winter"]


def toy_corpus(count: int = 64, seed: int = 0) -> list[str]:
    """Distinct five-to-six word sentences from a fixed template."""
    rng = np.random.default_rng(seed)
    space = list(itertools.product(_DET, _ADJ, _NOUN, _VERB, _OBJ))
    picks = rng.choice(len(space), size=count, replace=False)
    out = []
    for i in picks:
        det, adj, noun, verb, obj = space[i]
        words = [det, adj, noun, verb, "the", obj] if i % 2 else [det, noun, verb, "the", adj, obj]
        out.append(" ".join(words))
    return out


# Each pair is a deterministic bigram: the second word only ever follows the first.
BIGRAM_PAIRS = (("a", "b"), ("c", "d"), ("e", "f"), ("g", "h"))
FILLERS = tuple("pqrstuvwxyz")


def bigram_corpus(count: int, seed: int = 0, length: int = 6, slot: int = 2) -> list[str]:
    """Single-letter sentences with one bigram pair at a fixed slot.

    Fillers are uniform and independent of the pair, so the second word of
    the pair is only predictable from the first.
    """
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(count):
        words = list(rng.choice(FILLERS, size=length))
        first, second = BIGRAM_PAIRS[rng.integers(len(BIGRAM_PAIRS))]
        words[slot], words[slot + 1] = first, second
        lines.append(" ".join(words))
    return lines


POSITIVE_CUES = ("good", "great", "fine")
NEGATIVE_CUES = ("bad", "poor", "awful")


def classification_task(count: int, seed: int = 0) -> list[tuple[str, str]]:
    """Binary ``(label, text)`` pairs; the label is set by one cue word.

    Context words come from the toy corpus lexicon, so a model pre-trained
    on :func:`toy_corpus` has seen them.
    """
    rng = np.random.default_rng(seed)
    lexicon = _ADJ + _NOUN + _OBJ
    rows = []
    for i in range(count):
        label = "pos" if i % 2 == 0 else "neg"
        cue = rng.choice(POSITIVE_CUES if label == "pos" else NEGATIVE_CUES)
        words = list(rng.choice(lexicon, size=5))
        words.insert(int(rng.integers(0, 6)), cue)
        rows.append((label, " ".join(words)))
    order = rng.permutation(count)
    return [rows[i] for i in order]
