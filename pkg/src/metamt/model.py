"""Transformer encoder-decoder with per-domain transmission layers.

Parameter paths are grouped by prefix:

* ``transmission.src.`` / ``transmission.tgt.`` - per-domain word tables,
  domain matrices ``A``, the frozen base space and the optional width adapter
* ``encoder.`` / ``decoder.`` - the transformer stacks (plus plain embedding
  tables when a side runs without projection)
* ``output.`` - the target-vocabulary projection

Pre-norm residual blocks are used throughout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor
from .tokenization import BOS, EOS, PAD
from .transmission import BaseSpace, TransmissionLayer

META_PREFIXES = ("transmission.src.", "transmission.tgt.", "encoder.")
ALL_PREFIXES = ("transmission.src.", "transmission.tgt.", "encoder.", "decoder.", "output.")
EMBED_POLICIES = ("average", "general")


class SequenceTooLongError(ValueError):
    pass


@dataclass
class ModelConfig:
    src_vocab: int = 64
    tgt_vocab: int = 64
    d_model: int = 32
    n_layers: int = 1
    n_heads: int = 2
    ffn_dim: int = 64
    dropout: float = 0.1
    max_len: int = 64
    emb_dim: int = 32
    n_base: int = 32
    enc_proj: bool = True
    dec_proj: bool = True
    score_normalization: str = "none"
    normalize_base: bool = True
    init_policy: str = "identity"
    embed_init: str = "average"
    label_smoothing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.embed_init not in EMBED_POLICIES:
            raise ValueError(f"embed_init must be one of {EMBED_POLICIES}")

    @classmethod
    def paper_scale(cls, src_vocab: int, tgt_vocab: int, **kw) -> "ModelConfig":
        """Sizes reported for the full-scale En-Es experiments."""
        base = dict(src_vocab=src_vocab, tgt_vocab=tgt_vocab, d_model=512, n_layers=4, n_heads=8,
                    ffn_dim=2048, dropout=0.3, max_len=256, emb_dim=300, n_base=10000)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class TransformerModel:
    def __init__(self, config: ModelConfig, domains: Sequence[str] = ("general",),
                 src_base_ids: Sequence[int] | None = None, tgt_base_ids: Sequence[int] | None = None,
                 src_pretrained: np.ndarray | None = None, tgt_pretrained: np.ndarray | None = None):
        self.config = c = config
        self.params: dict[str, Parameter] = {}
        self.domains: list[str] = []
        self.train_mode = True
        ss = np.random.SeedSequence(c.seed)
        init_seed, drop_seed = ss.spawn(2)
        self._init_rng = np.random.default_rng(init_seed)
        self.dropout_rng = np.random.default_rng(drop_seed)
        self.pe = nx.sinusoidal_positions(c.max_len + 1, c.d_model)

        self.src_layer = self._build_side("src", c.src_vocab, c.enc_proj, src_base_ids, src_pretrained)
        self._build_stack("encoder", decoder=False)
        self.tgt_layer = self._build_side("tgt", c.tgt_vocab, c.dec_proj, tgt_base_ids, tgt_pretrained)
        self._build_stack("decoder", decoder=True)
        self._add("output.w", self._xavier(c.d_model, c.tgt_vocab))
        self._add("output.b", np.zeros(c.tgt_vocab))
        for dom in domains:
            self.register_domain(dom, initial=True)

    # -- construction -------------------------------------------------------------

    def _add(self, path: str, value, trainable: bool = True) -> Parameter:
        if path in self.params:
            raise ValueError(f"duplicate parameter path {path}")
        p = Parameter(path, np.asarray(value), trainable=trainable)
        self.params[path] = p
        return p

    def _xavier(self, fan_in: int, fan_out: int) -> np.ndarray:
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return self._init_rng.uniform(-lim, lim, size=(fan_in, fan_out))

    def _general_table(self, vocab: int, dim: int, pretrained: np.ndarray | None) -> np.ndarray:
        table = self._init_rng.uniform(-0.1, 0.1, size=(vocab, dim))
        if pretrained is not None:
            pretrained = np.asarray(pretrained, dtype=np.float64)
            if pretrained.shape != (vocab, dim):
                raise ValueError(f"pretrained table must be {(vocab, dim)}, got {pretrained.shape}")
            covered = np.isfinite(pretrained).all(axis=1)
            table[covered] = pretrained[covered]
        return table

    def _build_side(self, side: str, vocab: int, use_proj: bool, base_ids, pretrained):
        c = self.config
        stack = "encoder" if side == "src" else "decoder"
        if not use_proj:
            self._add(f"{stack}.embed", self._general_table(vocab, c.d_model, pretrained))
            return None
        prefix = f"transmission.{side}."
        general = self._general_table(vocab, c.emb_dim, pretrained)
        if base_ids is None:
            # vocab ids after the specials are frequency-sorted
            base_ids = list(range(4, min(vocab, 4 + c.n_base)))
        base_ids = list(base_ids)
        if len(base_ids) != c.n_base:
            raise ValueError(f"{side}: need {c.n_base} base words, vocabulary only covers {len(base_ids)}")
        rows = general[base_ids]
        if c.normalize_base:
            rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        base = BaseSpace(E_G=rows.astype(nx.get_dtype()), base_words=[str(i) for i in base_ids])
        layer = TransmissionLayer(side, base, c.score_normalization, prefix=prefix,
                                  seed=int(self._init_rng.integers(2**31)))
        self.params[layer.base.path] = layer.base
        self._add(prefix + "general", general, trainable=False)
        if c.emb_dim != c.d_model:
            self._add(prefix + "adapter.w", self._xavier(c.emb_dim, c.d_model))
            self._add(prefix + "adapter.b", np.zeros(c.d_model))
        return layer

    def _build_stack(self, name: str, decoder: bool) -> None:
        c = self.config
        d = c.d_model
        for i in range(c.n_layers):
            pre = f"{name}.layer{i}."
            blocks = ["self_attn", "cross_attn"] if decoder else ["self_attn"]
            for k, blk in enumerate(blocks):
                for w in ("wq", "wk", "wv", "wo"):
                    self._add(f"{pre}{blk}.{w}", self._xavier(d, d))
                    self._add(f"{pre}{blk}.b{w[1]}", np.zeros(d))
                self._add(f"{pre}ln{k + 1}.gamma", np.ones(d))
                self._add(f"{pre}ln{k + 1}.beta", np.zeros(d))
            self._add(f"{pre}ffn.w1", self._xavier(d, c.ffn_dim))
            self._add(f"{pre}ffn.b1", np.zeros(c.ffn_dim))
            self._add(f"{pre}ffn.w2", self._xavier(c.ffn_dim, d))
            self._add(f"{pre}ffn.b2", np.zeros(d))
            n_ln = len(blocks) + 1
            self._add(f"{pre}ln{n_ln}.gamma", np.ones(d))
            self._add(f"{pre}ln{n_ln}.beta", np.zeros(d))
        self._add(f"{name}.ln_f.gamma", np.ones(d))
        self._add(f"{name}.ln_f.beta", np.zeros(d))

    def register_domain(self, domain_id: str, init_policy: str | None = None,
                        embed_init: str | None = None, initial: bool = False) -> None:
        """Add a domain to both transmission layers (no-op on sides without projection)."""
        if domain_id in self.domains:
            if init_policy == "reuse":
                return
            raise ValueError(f"domain {domain_id!r} is already registered")
        if "." in domain_id or not domain_id:
            raise ValueError(f"invalid domain id {domain_id!r}")
        c = self.config
        policy = init_policy or c.init_policy
        embed = embed_init or c.embed_init
        for layer in (self.src_layer, self.tgt_layer):
            if layer is None:
                continue
            if initial and policy != "random":
                A = layer.register_domain(domain_id, "identity")
            else:
                A = layer.register_domain(domain_id, policy)
            self.params[A.path] = A
            existing = [self.params[f"{layer.prefix}emb.{d}"].data for d in self.domains]
            if initial or embed == "general" or not existing:
                table = self.params[layer.prefix + "general"].data.copy()
            else:
                table = np.mean(np.stack(existing), axis=0)
            self._add(f"{layer.prefix}emb.{domain_id}", table)
        self.domains.append(domain_id)

    # -- parameter views ------------------------------------------------------------

    def parameters(self, prefixes: Sequence[str] | None = None, trainable_only: bool = False) -> list[Parameter]:
        out = []
        for path, p in self.params.items():
            if prefixes is not None and not path.startswith(tuple(prefixes)):
                continue
            if trainable_only and not p.trainable:
                continue
            out.append(p)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {path: p.data.copy() for path, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"snapshot lacks {sorted(missing)[0]}")
        for path, p in self.params.items():
            np.copyto(p.data, state[path])

    def zero_grad(self) -> None:
        nx.zero_grads(self.params.values())

    def train(self) -> "TransformerModel":
        self.train_mode = True
        return self

    def eval(self) -> "TransformerModel":
        self.train_mode = False
        return self

    # -- forward --------------------------------------------------------------------

    def _p(self, path: str) -> Parameter:
        return self.params[path]

    def _drop(self, x: Tensor) -> Tensor:
        return nx.dropout(x, self.config.dropout, self.dropout_rng, self.train_mode)

    def embed(self, ids: np.ndarray, side: str, domain_id: str) -> Tensor:
        """Token vectors (after transmission, if enabled) plus positions."""
        c = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] > c.max_len:
            raise SequenceTooLongError(f"sequence length {ids.shape[-1]} exceeds max_len={c.max_len}")
        layer = self.src_layer if side == "src" else self.tgt_layer
        stack = "encoder" if side == "src" else "decoder"
        if layer is None:
            x = nx.embedding(self._p(f"{stack}.embed"), ids)
        else:
            if domain_id not in layer.projections:
                from .transmission import UnknownDomainError
                raise UnknownDomainError(f"domain {domain_id!r} is not registered")
            w = nx.embedding(self._p(f"{layer.prefix}emb.{domain_id}"), ids)
            x = layer.project(w, domain_id)
            if c.emb_dim != c.d_model:
                x = nx.linear(x, self._p(layer.prefix + "adapter.w"), self._p(layer.prefix + "adapter.b"))
        return nx.add(x, self.pe[: ids.shape[-1]])

    def _attention(self, pre: str, xq: Tensor, xkv: Tensor, mask: np.ndarray) -> Tensor:
        c = self.config
        B, Lq, D = xq.shape
        Lk = xkv.shape[1]
        h = c.n_heads
        dk = D // h

        def heads(x, w, L):
            y = nx.linear(x, self._p(pre + "w" + w), self._p(pre + "b" + w))
            return nx.transpose(nx.reshape(y, (B, L, h, dk)), (0, 2, 1, 3))

        q, k, v = heads(xq, "q", Lq), heads(xkv, "k", Lk), heads(xkv, "v", Lk)
        s = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        s = nx.add(s, mask)
        p = self._drop(nx.softmax(s, axis=-1))
        o = nx.reshape(nx.transpose(nx.matmul(p, v), (0, 2, 1, 3)), (B, Lq, D))
        return nx.linear(o, self._p(pre + "wo"), self._p(pre + "bo"))

    def _ffn(self, pre: str, x: Tensor) -> Tensor:
        hdn = nx.relu(nx.linear(x, self._p(pre + "w1"), self._p(pre + "b1")))
        return nx.linear(self._drop(hdn), self._p(pre + "w2"), self._p(pre + "b2"))

    def _ln(self, pre: str, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self._p(pre + ".gamma"), self._p(pre + ".beta"))

    @staticmethod
    def key_mask(ids: np.ndarray) -> np.ndarray:
        m = np.where(np.asarray(ids) == PAD, nx.MASK_VALUE, 0.0).astype(nx.get_dtype())
        return m[:, None, None, :]

    def encode(self, src: np.ndarray, domain_id: str) -> Tensor:
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        x = self._drop(self.embed(src, "src", domain_id))
        mask = self.key_mask(src)
        for i in range(self.config.n_layers):
            pre = f"encoder.layer{i}."
            h = self._ln(pre + "ln1", x)
            x = nx.add(x, self._drop(self._attention(pre + "self_attn.", h, h, mask)))
            x = nx.add(x, self._drop(self._ffn(pre + "ffn.", self._ln(pre + "ln2", x))))
        return self._ln("encoder.ln_f", x)

    def decode(self, memory: Tensor, src: np.ndarray, tgt_in: np.ndarray, domain_id: str) -> Tensor:
        """Logits ``[B, T, V]`` for every position of ``tgt_in``."""
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        T = tgt_in.shape[1]
        causal = np.triu(np.full((T, T), nx.MASK_VALUE), k=1).astype(nx.get_dtype())
        self_mask = self.key_mask(tgt_in) + causal[None, None]
        cross_mask = self.key_mask(src)
        y = self._drop(self.embed(tgt_in, "tgt", domain_id))
        for i in range(self.config.n_layers):
            pre = f"decoder.layer{i}."
            h = self._ln(pre + "ln1", y)
            y = nx.add(y, self._drop(self._attention(pre + "self_attn.", h, h, self_mask)))
            h = self._ln(pre + "ln2", y)
            y = nx.add(y, self._drop(self._attention(pre + "cross_attn.", h, memory, cross_mask)))
            y = nx.add(y, self._drop(self._ffn(pre + "ffn.", self._ln(pre + "ln3", y))))
        y = self._ln("decoder.ln_f", y)
        return nx.linear(y, self._p("output.w"), self._p("output.b"))

    def logits(self, src: np.ndarray, tgt_in: np.ndarray, domain_id: str) -> Tensor:
        return self.decode(self.encode(src, domain_id), src, tgt_in, domain_id)

    def forward_loss(self, src: np.ndarray, tgt: np.ndarray, domain_id: str) -> Tensor:
        """Teacher-forced cross-entropy; ``tgt`` rows are ``<s> ... </s>`` (+ pads)."""
        tgt = np.atleast_2d(np.asarray(tgt, dtype=np.int64))
        if not np.all(tgt[:, 0] == BOS):
            raise ValueError("target sequences must start with <s>")
        logits = self.logits(src, tgt[:, :-1], domain_id)
        B, T, V = logits.shape
        return nx.cross_entropy(nx.reshape(logits, (B * T, V)), tgt[:, 1:].reshape(-1), pad_id=PAD,
                                label_smoothing=self.config.label_smoothing)


def parameter_partition(model: TransformerModel) -> tuple[list[str], list[str]]:
    """(meta paths, all paths).  Meta = transmission layers + encoder."""
    full = list(model.params)
    meta = [p for p in full if p.startswith(META_PREFIXES)]
    return meta, full


def prefix_class(path: str) -> str:
    hits = [p for p in ALL_PREFIXES if path.startswith(p)]
    if len(hits) != 1:
        raise ValueError(f"path {path!r} matches {len(hits)} prefix classes")
    return hits[0]


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def as_target(ids: Sequence[int]) -> list[int]:
    return [BOS] + list(ids) + [EOS]


def as_source(ids: Sequence[int]) -> list[int]:
    return list(ids) + [EOS]
