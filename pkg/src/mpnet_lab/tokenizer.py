"""Toy byte-pair vocabulary, word-aware encoding, and row packing."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

PAD, MASK, UNK, CLS, SEP = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[UNK]", "[CLS]", "[SEP]")
NUM_SPECIAL = len(SPECIAL_TOKENS)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)
    max_token_len: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", index)
        plain = self.tokens[NUM_SPECIAL:]
        object.__setattr__(self, "max_token_len", max((len(t) for t in plain), default=1))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


@dataclass
class TokenizedSentence:
    ids: list[int]
    word_start: list[bool]

    def __post_init__(self):
        if len(self.ids) != len(self.word_start):
            raise ValueError("ids and word_start differ in length")

    def __len__(self) -> int:
        return len(self.ids)


def _merge_word(word: tuple[str, ...], a: str, b: str) -> tuple[str, ...]:
    out: list[str] = []
    i = 0
    while i < len(word):
        if i + 1 < len(word) and word[i] == a and word[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def build_vocab(lines: Iterable[str], target_size: int = 1024) -> Vocab:
    """Learn a deterministic byte-pair vocabulary from whitespace words.

    The vocabulary is the reserved tokens, then every character seen in the
    corpus (sorted), then merged symbols in merge order until
    ``target_size`` is reached or no adjacent pair remains. The most
    frequent pair wins; ties go to the lexicographically smallest pair.
    """
    if target_size < NUM_SPECIAL + 1:
        raise ValueError(f"target_size must be at least {NUM_SPECIAL + 1}")
    words = Counter(w for line in lines for w in line.split())
    if not words:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    tokens = list(SPECIAL_TOKENS) + sorted({ch for w in words for ch in w})
    known = set(tokens)
    segmented = {tuple(w): n for w, n in words.items()}
    while len(tokens) < target_size:
        pairs: Counter = Counter()
        for word, n in segmented.items():
            for a, b in zip(word, word[1:]):
                pairs[a, b] += n
        if not pairs:
            break
        best = max(pairs.values())
        a, b = min(p for p, n in pairs.items() if n == best)
        if a + b not in known:
            tokens.append(a + b)
            known.add(a + b)
        merged: Counter = Counter()
        for word, n in segmented.items():
            merged[_merge_word(word, a, b)] += n
        segmented = dict(merged)
    return Vocab(tuple(tokens))


def encode(vocab: Vocab, text: str) -> TokenizedSentence:
    """Greedy longest-match segmentation of each whitespace word."""
    ids: list[int] = []
    starts: list[bool] = []
    longest = vocab.max_token_len
    for word in text.split():
        i = 0
        first = True
        while i < len(word):
            for j in range(min(len(word), i + longest), i, -1):
                tid = vocab.index.get(word[i:j])
                if tid is not None and tid >= NUM_SPECIAL:
                    break
            else:
                tid, j = UNK, i + 1
            ids.append(tid)
            starts.append(first)
            first = False
            i = j
    return TokenizedSentence(ids, starts)


def decode(vocab: Vocab, sentence: TokenizedSentence) -> str:
    """Join subwords back into whitespace-separated words (PAD dropped)."""
    words: list[str] = []
    for tid, start in zip(sentence.ids, sentence.word_start):
        if tid == PAD:
            continue
        piece = vocab.tokens[tid]
        if start or not words or tid < NUM_SPECIAL:
            words.append(piece)
        else:
            words[-1] += piece
    return " ".join(words)


def read_corpus(path: Union[str, Path]) -> list[str]:
    """One sentence per line; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


@dataclass
class Batch:
    ids: np.ndarray         # (B, max_len) int64, PAD-filled
    word_start: np.ndarray  # (B, max_len) bool
    valid: np.ndarray       # (B, max_len) bool, False on padding

    def rows(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield each row's unpadded (ids, word_start)."""
        for ids, ws, ok in zip(self.ids, self.word_start, self.valid):
            yield ids[ok], ws[ok]


def pack_rows(sentences: Sequence[TokenizedSentence], max_len: int,
              add_special: bool = True) -> list[TokenizedSentence]:
    """Pack consecutive sentences into rows of at most ``max_len`` tokens.

    A sentence that would overflow the current row starts a new one;
    sentences longer than ``max_len`` on their own are truncated.
    """
    if max_len < 8:
        raise ValueError("max_len must be at least 8")
    rows: list[TokenizedSentence] = []
    cur_ids: list[int] = []
    cur_ws: list[bool] = []
    for sent in sentences:
        if not len(sent):
            continue
        ids, ws = list(sent.ids), list(sent.word_start)
        if add_special:
            ids = [CLS] + ids[: max_len - 2] + [SEP]
            ws = [False] + ws[: max_len - 2] + [False]
        else:
            ids, ws = ids[:max_len], ws[:max_len]
        if cur_ids and len(cur_ids) + len(ids) > max_len:
            rows.append(TokenizedSentence(cur_ids, cur_ws))
            cur_ids, cur_ws = [], []
        cur_ids += ids
        cur_ws += ws
    if cur_ids:
        rows.append(TokenizedSentence(cur_ids, cur_ws))
    return rows


def collate(rows: Sequence[TokenizedSentence], max_len: int) -> Batch:
    ids = np.full((len(rows), max_len), PAD, dtype=np.int64)
    ws = np.zeros((len(rows), max_len), dtype=bool)
    valid = np.zeros((len(rows), max_len), dtype=bool)
    for r, row in enumerate(rows):
        n = len(row)
        ids[r, :n] = row.ids
        ws[r, :n] = row.word_start
        valid[r, :n] = True
    return Batch(ids, ws, valid)


def batch_iter(sentences: Sequence[TokenizedSentence], max_len: int = 128, batch_size: int = 16,
               seed: Union[int, Sequence[int]] = 0, add_special: bool = True) -> Iterator[Batch]:
    """One epoch of packed, shuffled, PAD-filled batches.

    The row order is a deterministic function of ``seed``.
    """
    rows = pack_rows(sentences, max_len, add_special)
    order = np.random.default_rng(seed).permutation(len(rows))
    for lo in range(0, len(rows), batch_size):
        yield collate([rows[i] for i in order[lo:lo + batch_size]], max_len)
