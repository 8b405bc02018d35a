"""Byte-pair encoding with an ``@@`` continuation marker, plus vocabularies."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

BPE_HEADER = "bpe-v1"


@dataclass
class BpeModel:
    merges: list[tuple[str, str]] = field(default_factory=list)
    marker: str = "@@"

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        if len(self._ranks) != len(self.merges):
            raise ValueError("duplicate merge pair in BPE model")
        self._cache: dict[str, tuple[str, ...]] = {}

    def segment(self, word: str) -> tuple[str, ...]:
        """Split one word into subword symbols (no markers)."""
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        symbols = self._continue_from(list(word), 0)
        out = tuple(symbols)
        self._cache[word] = out
        return out

    def _continue_from(self, symbols: list[str], start: int) -> list[str]:
        # equivalent to applying every merge once, in rank order
        while len(symbols) > 1:
            best = None
            for p in zip(symbols, symbols[1:]):
                r = self._ranks.get(p)
                if r is not None and r >= start and (best is None or r < best):
                    best = r
            if best is None:
                break
            symbols = _merge_word(symbols, self.merges[best])
            start = best + 1
        return symbols

    def save(self, path: str | Path) -> None:
        lines = [f"{BPE_HEADER} {self.marker}"] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty BPE model file")
        head = lines[0].split(" ")
        if len(head) != 2 or head[0] != BPE_HEADER:
            raise ValueError(f"{path}: bad BPE header {lines[0]!r}")
        merges = []
        for n, line in enumerate(lines[1:], start=2):
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{path}:{n}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges=merges, marker=head[1])


def _merge_word(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i < len(symbols) - 1 and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_learn(corpus: Iterable[str], num_ops: int, marker: str = "@@",
              min_frequency: int = 2) -> BpeModel:
    """Greedy most-frequent-pair merging; ties go to the lexicographically smaller pair."""
    if num_ops < 0:
        raise ValueError("num_ops must be >= 0")
    word_freq = Counter(w for line in corpus for w in line.split())
    if not word_freq:
        raise ValueError("cannot learn BPE from an empty corpus")
    words = {w: list(w) for w in word_freq}
    merges: list[tuple[str, str]] = []
    while len(merges) < num_ops:
        pairs: Counter = Counter()
        for w, syms in words.items():
            f = word_freq[w]
            for p in zip(syms, syms[1:]):
                pairs[p] += f
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < min_frequency:
            break
        pair = best[0]
        merges.append(pair)
        for w, syms in words.items():
            if len(syms) > 1:
                words[w] = _merge_word(syms, pair)
    return BpeModel(merges=merges, marker=marker)


def bpe_encode(model: BpeModel, text: str) -> list[str]:
    out = []
    for word in text.split():
        syms = model.segment(word)
        out.extend(s + model.marker for s in syms[:-1])
        out.append(syms[-1])
    return out


def bpe_decode(tokens: Sequence[str], marker: str = "@@") -> str:
    words = []
    cur = ""
    for tok in tokens:
        if tok.endswith(marker):
            cur += tok[: -len(marker)]
        else:
            words.append(cur + tok)
            cur = ""
    if cur:
        words.append(cur)
    return " ".join(words)


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def lookup(self, tok: str) -> int:
        return self.stoi.get(tok, UNK)

    def encode(self, tokens: Sequence[str], add_bos_eos: bool = False) -> list[int]:
        ids = [self.stoi.get(t, UNK) for t in tokens]
        return [BOS] + ids + [EOS] if add_bos_eos else ids

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.itos)), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        rows = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            tok, _, idx = line.rpartition("\t")
            if not _ or not idx.isdigit():
                raise ValueError(f"{path}:{n}: expected 'token<TAB>id'")
            rows.append((int(idx), tok))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not a contiguous range from 0")
        return cls([t for _, t in rows])


def build_vocab(encoded: Iterable[Sequence[str]], min_freq: int = 1) -> Vocab:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter(t for line in encoded for t in line)
    for s in SPECIALS:
        counts.pop(s, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept)
