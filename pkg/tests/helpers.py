"""Small encoded synthetic domains and tiny models shared by the training tests."""

from __future__ import annotations

from metamt.data import DomainDataset, SyntheticTaskSpec, split_dataset, synth_generate
from metamt.model import ModelConfig, TransformerModel
from metamt.tokenization import BOS, EOS, build_vocab
from metamt.training import TrainConfig


def encoded_domains(n_domains=2, pairs=60, seed=0, **spec_kw):
    spec = SyntheticTaskSpec(n_domains=n_domains, pairs=pairs, seed=seed, shared_vocab=12, exclusive_vocab=3,
                             polysemy=3, min_len=3, max_len=6, **spec_kw)
    corpora = synth_generate(spec)
    splits = [split_dataset(c, (0.6, 0.2, 0.2), seed=seed) for c in corpora]
    everything = [p for d in splits for p in d.train + d.dev + d.test]
    vs = build_vocab([s.split() for s, _ in everything])
    vt = build_vocab([t.split() for _, t in everything])

    def enc(pairs):
        return [(vs.encode(s.split()) + [EOS], [BOS] + vt.encode(t.split()) + [EOS]) for s, t in pairs]

    data = {d.domain_id: DomainDataset(d.domain_id, enc(d.train), enc(d.dev), enc(d.test)) for d in splits}
    return data, vs, vt, splits


def tiny_model(vs, vt, domains, seed=0, **kw):
    cfg = dict(src_vocab=len(vs.itos), tgt_vocab=len(vt.itos), d_model=16, n_layers=1, n_heads=2, ffn_dim=32,
               dropout=0.0, max_len=16, emb_dim=16, n_base=8, seed=seed)
    cfg.update(kw)
    return TransformerModel(ModelConfig(**cfg), domains=list(domains))


def quick_config(**kw):
    base = dict(lr=3e-3, meta_lr=0.1, batch_size=8, inner_steps=6, meta_steps=4, finetune_steps=10, patience=3,
                eval_every=2, epochs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)
