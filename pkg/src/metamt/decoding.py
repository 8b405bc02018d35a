"""Beam search and corpus translation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .tokenization import BOS, EOS, PAD, BpeModel, Vocab, bpe_decode, bpe_encode


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float = 0.0
    finished: bool = False
    steps: list[float] = field(default_factory=list)


def _key(h: BeamHypothesis, length_norm: bool):
    s = h.logprob / max(len(h.tokens) - 1, 1) if length_norm else h.logprob
    return (-s, h.tokens)


def beam_search_fn(step_logprobs: Callable[[list[list[int]]], np.ndarray], beam: int, max_len: int,
                   bos: int = BOS, eos: int = EOS, banned: Sequence[int] = (),
                   length_norm: bool = False) -> BeamHypothesis:
    """Generic beam search.

    ``step_logprobs`` maps a list of prefixes to a ``[len(prefixes), V]`` array
    of next-token log-probabilities.  Finished hypotheses stay in the beam and
    compete with extensions; search stops once every slot is finished or
    ``max_len`` tokens have been generated.  Ties go to the smaller token ids.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    banned = set(banned)
    hyps = [BeamHypothesis([bos])]
    for _ in range(max_len):
        live = [h for h in hyps if not h.finished]
        if not live:
            break
        lp = np.asarray(step_logprobs([h.tokens for h in live]), dtype=np.float64)
        allowed = np.array([t not in banned for t in range(lp.shape[1])])
        cands = [h for h in hyps if h.finished]
        for h, row in zip(live, lp):
            scores = h.logprob + row
            toks = np.flatnonzero(allowed & np.isfinite(row))
            order = toks[np.lexsort((toks, -scores[toks]))][:beam] if not length_norm else toks
            for t in order:
                t = int(t)
                cands.append(BeamHypothesis(h.tokens + [t], float(scores[t]), t == eos,
                                            h.steps + [float(row[t])]))
        cands.sort(key=lambda h: _key(h, length_norm))
        hyps = cands[:beam]
    finished = [h for h in hyps if h.finished]
    return min(finished or hyps, key=lambda h: _key(h, length_norm))


def greedy_decode(step_logprobs, max_len: int, bos: int = BOS, eos: int = EOS,
                  banned: Sequence[int] = ()) -> list[int]:
    toks = [bos]
    for _ in range(max_len):
        row = np.asarray(step_logprobs([toks])[0], dtype=np.float64).copy()
        row[list(banned)] = -np.inf
        t = int(np.argmax(row))
        toks.append(t)
        if t == eos:
            break
    return toks


def model_step_fn(model, src: Sequence[int], domain_id: str):
    """Wrap a model as a prefix -> next-token log-prob function."""
    src_arr = np.asarray([list(src)], dtype=np.int64)
    model.eval()
    with nx.no_tape():
        memory = model.encode(src_arr, domain_id)

    def step(prefixes: list[list[int]]) -> np.ndarray:
        k = len(prefixes)
        pre = np.asarray(prefixes, dtype=np.int64)
        with nx.no_tape():
            mem = nx.Tensor(np.repeat(memory.data, k, axis=0))
            logits = model.decode(mem, np.repeat(src_arr, k, axis=0), pre, domain_id)
            last = logits.data[:, -1, :].astype(np.float64)
        z = last - last.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    return step


def beam_search(model, src: Sequence[int], domain_id: str, beam: int = 5, max_len: int | None = None,
                length_norm: bool = False) -> tuple[list[int], float]:
    cap = model.config.max_len
    max_len = min(max_len if max_len is not None else 2 * len(src) + 10, cap)
    best = beam_search_fn(model_step_fn(model, src, domain_id), beam, max_len,
                          banned=(PAD, BOS), length_norm=length_norm)
    return best.tokens, best.logprob


def translate_corpus(model, lines: Sequence[str], domain_id: str, src_bpe: BpeModel, src_vocab: Vocab,
                     tgt_vocab: Vocab, beam: int = 5, marker: str = "@@",
                     max_len: int | None = None, length_norm: bool = False) -> list[str]:
    out = []
    for line in lines:
        ids = src_vocab.encode(bpe_encode(src_bpe, line)) + [EOS]
        ids = ids[: model.config.max_len]
        toks, _ = beam_search(model, ids, domain_id, beam=beam, max_len=max_len, length_norm=length_norm)
        out.append(bpe_decode(tgt_vocab.decode(toks), marker))
    return out
