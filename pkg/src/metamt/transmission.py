"""Domain-invariant word representation.

A word vector ``w`` from domain ``i`` is scored against every base-word
embedding through a per-domain ``d x d`` matrix ``A_i``::

    a_j = w . A_i . E_G[j]
    out = sum_j a_j * E_G[j]

``E_G`` (``n x d``) is built from the ``n`` most frequent words of a general
embedding table and is kept frozen; only the ``A_i`` are trained.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor

SCORE_MODES = ("none", "softmax", "scale_by_n")
INIT_POLICIES = ("identity", "average", "random", "reuse")


class EmbeddingFormatError(ValueError):
    pass


class UnknownDomainError(KeyError):
    pass


def load_embeddings(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    """Read a text embedding file (``count dim`` header, then ``word v1 .. vd``)."""
    table: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2 or not all(h.isdigit() for h in header):
            raise EmbeddingFormatError(f"{path}:1: header must be 'count dim'")
        count, dim = int(header[0]), int(header[1])
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            if len(parts) != dim + 1:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dim} values for {parts[0]!r}, got {len(parts) - 1}")
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from None
            table[parts[0]] = vec
    if len(table) != count:
        raise EmbeddingFormatError(f"{path}: header declares {count} rows, found {len(table)}")
    return table, dim


def save_embeddings(path: str | Path, table: Mapping[str, np.ndarray]) -> None:
    dim = len(next(iter(table.values()))) if table else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table)} {dim}\n")
        for word, vec in table.items():
            fh.write(word + " " + " ".join(repr(float(v)) for v in vec) + "\n")


@dataclass
class BaseSpace:
    E_G: np.ndarray
    base_words: list[str]

    @property
    def n(self) -> int:
        return self.E_G.shape[0]

    @property
    def d(self) -> int:
        return self.E_G.shape[1]


def select_base_words(table: Mapping[str, np.ndarray], frequencies: Sequence[tuple[str, int]],
                      n: int, normalize: bool = True) -> BaseSpace:
    """Stack the ``n`` most frequent words that have an embedding.

    ``frequencies`` is a list of ``(word, count)``; order among equal counts
    follows the word string.
    """
    ranked = sorted(((w, c) for w, c in frequencies if w in table), key=lambda wc: (-wc[1], wc[0]))
    if n > len(ranked):
        raise ValueError(f"requested {n} base words but only {len(ranked)} are covered")
    words = [w for w, _ in ranked[:n]]
    rows = np.stack([np.asarray(table[w], dtype=np.float64) for w in words]) if words else np.zeros((0, 0))
    if normalize and n:
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        rows = rows / np.where(norms > 0, norms, 1.0)
    return BaseSpace(E_G=rows.astype(nx.get_dtype()), base_words=words)


class TransmissionLayer:
    """Per-side collection of domain projections over one frozen base space."""

    def __init__(self, side: str, base: BaseSpace, score_normalization: str = "none",
                 prefix: str | None = None, seed: int = 0):
        if side not in ("src", "tgt"):
            raise ValueError("side must be 'src' or 'tgt'")
        if score_normalization not in SCORE_MODES:
            raise ValueError(f"score_normalization must be one of {SCORE_MODES}")
        self.side = side
        self.prefix = prefix if prefix is not None else f"transmission.{side}."
        self.score_normalization = score_normalization
        self.base_words = list(base.base_words)
        self.base = Parameter(self.prefix + "base", base.E_G, trainable=False)
        self.projections: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(seed)

    @property
    def d(self) -> int:
        return self.base.shape[1]

    @property
    def n(self) -> int:
        return self.base.shape[0]

    def path_for(self, domain_id: str) -> str:
        return f"{self.prefix}A.{domain_id}"

    def register_domain(self, domain_id: str, init_policy: str = "identity") -> Parameter:
        if init_policy not in INIT_POLICIES:
            raise ValueError(f"init_policy must be one of {INIT_POLICIES}")
        if domain_id in self.projections:
            if init_policy == "reuse":
                return self.projections[domain_id]
            raise ValueError(f"domain {domain_id!r} is already registered")
        d = self.d
        dtype = nx.get_dtype()
        if init_policy == "average" and self.projections:
            A = np.mean(np.stack([p.data for p in self.projections.values()]), axis=0)
        elif init_policy == "random":
            A = self._rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        else:
            A = np.eye(d)
        param = Parameter(self.path_for(domain_id), A.astype(dtype))
        self.projections[domain_id] = param
        return param

    def parameters(self) -> list[Parameter]:
        return [self.base] + [self.projections[k] for k in self.projections]

    def project(self, w: Tensor, domain_id: str) -> Tensor:
        """Map ``[..., d]`` vectors into the span of the base words."""
        A = self.projections.get(domain_id)
        if A is None:
            raise UnknownDomainError(f"domain {domain_id!r} is not registered on the {self.side} side")
        return project(w, A, self.base, self.score_normalization)


def project(w: Tensor, A: Tensor, E_G: Tensor, mode: str = "none") -> Tensor:
    if w.shape[-1] != A.shape[0]:
        raise nx.ShapeError(f"vector width {w.shape[-1]} does not match A of side {A.shape[0]}")
    if w.ndim == 1:
        return nx.reshape(project(nx.reshape(w, (1, -1)), A, E_G, mode), (-1,))
    E_t = nx.transpose(E_G)
    scores = nx.matmul(nx.matmul(w, A), E_t)
    if mode == "softmax":
        scores = nx.softmax(scores, axis=-1)
    elif mode == "scale_by_n":
        scores = nx.mul(scores, 1.0 / E_G.shape[0])
    return nx.matmul(scores, E_G)


def project_closed_form(w: np.ndarray, A: np.ndarray, E_G: np.ndarray) -> np.ndarray:
    return w @ A @ (E_G.T @ E_G)
