"""Glue between text corpora, tokenizers and models, shared by the CLI and the experiment harness."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DomainDataset, ParallelCorpus, load_parallel, token_frequencies
from .model import ModelConfig, TransformerModel
from .tokenization import BOS, EOS, BpeModel, Vocab, bpe_encode
from .transmission import load_embeddings, select_base_words

GENERAL = "general"
SYSTEMS = ("Transformer", "+Fine Tune", "MetaMT", "-enc-proj", "-dec-proj")
SPLITS = ("train", "dev", "test")


class Codec:
    """BPE + vocabulary for both sides."""

    def __init__(self, src_bpe: BpeModel, tgt_bpe: BpeModel, src_vocab: Vocab, tgt_vocab: Vocab):
        self.src_bpe, self.tgt_bpe = src_bpe, tgt_bpe
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab

    @classmethod
    def load(cls, src_bpe, tgt_bpe, src_vocab, tgt_vocab) -> "Codec":
        return cls(BpeModel.load(src_bpe), BpeModel.load(tgt_bpe), Vocab.load(src_vocab), Vocab.load(tgt_vocab))

    def encode_pairs(self, pairs: Sequence[tuple[str, str]], max_len: int) -> tuple[list, int]:
        """Source ``ids + </s>``, target ``<s> ids </s>``; over-long pairs are skipped and counted."""
        out, skipped = [], 0
        for s, t in pairs:
            src = self.src_vocab.encode(bpe_encode(self.src_bpe, s)) + [EOS]
            tgt = [BOS] + self.tgt_vocab.encode(bpe_encode(self.tgt_bpe, t)) + [EOS]
            if len(src) > max_len or len(tgt) - 1 > max_len:
                skipped += 1
                continue
            out.append((src, tgt))
        return out, skipped


def split_path(data_dir: str | Path, domain: str, split: str, side: str) -> Path:
    return Path(data_dir) / f"{domain}.{split}.{side}"


def load_text_splits(data_dir: str | Path, domain: str) -> dict[str, ParallelCorpus]:
    return {s: load_parallel(split_path(data_dir, domain, s, "src"), split_path(data_dir, domain, s, "tgt"), domain)
            for s in SPLITS}


def encode_dataset(texts: dict[str, ParallelCorpus], codec: Codec, domain_id: str, max_len: int) -> DomainDataset:
    enc = {s: codec.encode_pairs(texts[s].pairs, max_len)[0] for s in SPLITS}
    return DomainDataset(domain_id, enc["train"], enc["dev"], enc["test"])


def merge_general(datasets: Sequence[DomainDataset]) -> DomainDataset:
    """Union of several domains under the single id ``general`` (the baseline setting)."""
    return DomainDataset(GENERAL, [p for d in datasets for p in d.train], [p for d in datasets for p in d.dev],
                         [p for d in datasets for p in d.test])


def system_label(mode: str, enc_proj: bool, dec_proj: bool, finetuned: bool) -> str:
    if mode == "baseline":
        return "+Fine Tune" if finetuned else "Transformer"
    if enc_proj and dec_proj:
        return "MetaMT"
    if dec_proj:
        return "-enc-proj"
    if enc_proj:
        return "-dec-proj"
    return "MetaMT-no-proj"


def resolve_domain(model: TransformerModel, domain: str) -> str:
    """A merged-domain model answers for every domain."""
    if domain not in model.domains and model.domains == [GENERAL]:
        return GENERAL
    return domain


def read_frequency_file(path: str | Path) -> dict[str, int]:
    out = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{no}: expected 'token count'")
        out[parts[0]] = out.get(parts[0], 0) + int(parts[1])
    return out


def pretrained_side(vocab: Vocab, emb_path: str, train_tokens: Sequence[Sequence[str]], n_base: int,
                    emb_dim: int, normalize: bool, external: dict[str, int] | None = None,
                    need_base: bool = True):
    """Vocabulary-aligned pretrained table (NaN rows where uncovered) and base-word ids."""
    table, dim = load_embeddings(emb_path)
    if dim != emb_dim:
        raise ValueError(f"{emb_path}: embeddings have dimension {dim}, config wants {emb_dim}")
    rows = np.full((len(vocab), dim), np.nan)
    for tok, idx in vocab.stoi.items():
        if tok in table:
            rows[idx] = table[tok]
    if not need_base:
        return rows, None
    freqs = token_frequencies(train_tokens, external)
    covered = {w: table[w] for w in vocab.stoi if w in table}
    base = select_base_words(covered, freqs, n_base, normalize)
    return rows, [vocab.stoi[w] for w in base.base_words]


def build_model(model_cfg: ModelConfig, domains: Sequence[str], codec: Codec | None = None,
                src_embeddings: str = "", tgt_embeddings: str = "", train_pairs: Sequence[tuple[str, str]] = (),
                frequency_file: str = "") -> TransformerModel:
    kw = {}
    external = read_frequency_file(frequency_file) if frequency_file else None
    for side, path, proj in (("src", src_embeddings, model_cfg.enc_proj), ("tgt", tgt_embeddings, model_cfg.dec_proj)):
        if not path:
            continue
        vocab = codec.src_vocab if side == "src" else codec.tgt_vocab
        bpe = codec.src_bpe if side == "src" else codec.tgt_bpe
        tokens = [bpe_encode(bpe, s if side == "src" else t) for s, t in train_pairs]
        dim = model_cfg.emb_dim if proj else model_cfg.d_model
        rows, base_ids = pretrained_side(vocab, path, tokens, model_cfg.n_base, dim, model_cfg.normalize_base,
                                         external, need_base=proj)
        kw[f"{side}_pretrained"] = rows
        if proj:
            kw[f"{side}_base_ids"] = base_ids
    return TransformerModel(model_cfg, domains=list(domains), **kw)
