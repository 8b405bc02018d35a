"""Parallel corpora, deterministic splits and batches, and the synthetic task."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tokenization import PAD


class CorpusError(ValueError):
    pass


@dataclass
class ParallelCorpus:
    domain_id: str
    pairs: list[tuple[str, str]]
    dropped: int = 0

    def report(self) -> dict:
        return {"domain": self.domain_id, "pairs": len(self.pairs), "dropped": self.dropped}


@dataclass
class DomainDataset:
    domain_id: str
    train: list
    dev: list
    test: list

    def __post_init__(self):
        for name in ("train", "dev", "test"):
            if not getattr(self, name):
                raise CorpusError(f"{self.domain_id}: {name} split is empty")


def load_parallel(src_file: str | Path, tgt_file: str | Path, domain_id: str) -> ParallelCorpus:
    src = Path(src_file).read_text(encoding="utf-8").splitlines()
    tgt = Path(tgt_file).read_text(encoding="utf-8").splitlines()
    if len(src) != len(tgt):
        raise CorpusError(f"line count mismatch: {src_file} has {len(src)}, {tgt_file} has {len(tgt)}")
    pairs, dropped = [], 0
    for s, t in zip(src, tgt):
        s, t = " ".join(s.split()), " ".join(t.split())
        if not s or not t:
            dropped += 1
            continue
        pairs.append((s, t))
    return ParallelCorpus(domain_id, pairs, dropped)


def save_parallel(corpus: ParallelCorpus, prefix: str | Path) -> None:
    prefix = str(prefix)
    Path(prefix + ".src").write_text("".join(s + "\n" for s, _ in corpus.pairs), encoding="utf-8")
    Path(prefix + ".tgt").write_text("".join(t + "\n" for _, t in corpus.pairs), encoding="utf-8")


def split_dataset(corpus: ParallelCorpus, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> DomainDataset:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(corpus.pairs)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_dev = int(round(ratios[1] * n))
    if n_train == 0 or n_dev == 0 or n - n_train - n_dev <= 0:
        raise CorpusError(f"{corpus.domain_id}: {n} pairs cannot fill splits {tuple(ratios)}")
    pick = [corpus.pairs[i] for i in order]
    return DomainDataset(corpus.domain_id, pick[:n_train], pick[n_train:n_train + n_dev],
                         pick[n_train + n_dev:])


def make_batches(split: Sequence[tuple[Sequence[int], Sequence[int]]], batch_size: int,
                 pad_id: int = PAD, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Length-bucketed, padded batches covering every pair exactly once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(split))
    order = sorted(order, key=lambda i: (len(split[i][0]), len(split[i][1])))
    chunks = [order[k:k + batch_size] for k in range(0, len(order), batch_size)]
    batches = []
    for k in rng.permutation(len(chunks)):
        idx = chunks[k]
        batches.append((_pad([split[i][0] for i in idx], pad_id), _pad([split[i][1] for i in idx], pad_id)))
    return batches


def _pad(seqs, pad_id):
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def token_frequencies(lines: Sequence[Sequence[str]], external: dict[str, int] | None = None) -> list[tuple[str, int]]:
    counts = Counter(t for line in lines for t in line)
    if external:
        counts.update(external)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


# -- synthetic multi-domain task -------------------------------------------------


@dataclass
class SyntheticTaskSpec:
    n_domains: int = 5
    shared_vocab: int = 40
    exclusive_vocab: int = 8
    polysemy: int = 8
    min_len: int = 4
    max_len: int = 10
    pairs: int | list[int] = 500
    zipf: float = 1.0
    seed: int = 0
    swap_noise: float = 0.0

    def __post_init__(self):
        counts = self.pair_counts()
        if min(self.shared_vocab, self.exclusive_vocab, self.polysemy, self.n_domains) < 0:
            raise ValueError("sizes must be >= 0")
        if self.polysemy > self.shared_vocab:
            raise ValueError("polysemy set must be a subset of the shared vocabulary")
        if any(c < 10 for c in counts):
            raise ValueError("every domain needs at least 10 pairs")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.shared_vocab + self.exclusive_vocab == 0:
            raise ValueError("empty vocabulary")

    def pair_counts(self) -> list[int]:
        if isinstance(self.pairs, int):
            return [self.pairs] * self.n_domains
        if len(self.pairs) != self.n_domains:
            raise ValueError("need one pair count per domain")
        return list(self.pairs)

    def to_dict(self) -> dict:
        return asdict(self)


def domain_names(n: int) -> list[str]:
    return [f"d{i}" for i in range(n)]


def _polysemy_set(spec: SyntheticTaskSpec) -> list[int]:
    rng = np.random.default_rng([spec.seed, 7])
    return sorted(rng.choice(spec.shared_vocab, size=spec.polysemy, replace=False).tolist())


def synth_ciphers(spec: SyntheticTaskSpec) -> list[dict[str, str]]:
    """Per-domain source-token -> target-token substitution tables."""
    poly = set(_polysemy_set(spec))
    out = []
    for i in range(spec.n_domains):
        table = {}
        for k in range(spec.shared_vocab):
            table[f"s{k}"] = f"p{k}d{i}" if k in poly else f"t{k}"
        for k in range(spec.exclusive_vocab):
            table[f"x{i}w{k}"] = f"y{i}w{k}"
        out.append(table)
    return out


def domain_source_vocab(spec: SyntheticTaskSpec, i: int) -> list[str]:
    return [f"s{k}" for k in range(spec.shared_vocab)] + [f"x{i}w{k}" for k in range(spec.exclusive_vocab)]


def synth_generate(spec: SyntheticTaskSpec) -> list[ParallelCorpus]:
    ciphers = synth_ciphers(spec)
    corpora = []
    for i, (name, n_pairs) in enumerate(zip(domain_names(spec.n_domains), spec.pair_counts())):
        rng = np.random.default_rng([spec.seed, i])
        vocab = domain_source_vocab(spec, i)
        ranked = [vocab[j] for j in rng.permutation(len(vocab))]
        weights = 1.0 / np.arange(1, len(ranked) + 1) ** spec.zipf
        probs = weights / weights.sum()
        pairs = []
        for _ in range(n_pairs):
            L = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = [ranked[j] for j in rng.choice(len(ranked), size=L, p=probs)]
            tgt = [ciphers[i][w] for w in src]
            if spec.swap_noise > 0:
                for k in range(len(tgt) - 1):
                    if rng.random() < spec.swap_noise:
                        tgt[k], tgt[k + 1] = tgt[k + 1], tgt[k]
            pairs.append((" ".join(src), " ".join(tgt)))
        corpora.append(ParallelCorpus(name, pairs))
    return corpora


def apply_cipher(cipher: dict[str, str], text: str) -> str:
    return " ".join(cipher.get(w, w) for w in text.split())
