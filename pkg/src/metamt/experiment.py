"""The desk-scale five-system comparison on synthetic domains.

Four training domains and one held-out domain (200 fine-tune pairs).  Every
system gets the same pretraining step budget and the same fine-tune budget:

* Transformer   -- merged-domain baseline, no projection, scored as is
* +Fine Tune    -- the same model fine-tuned on the held-out domain
* MetaMT        -- alternating meta-training, then fine-tuning
* -enc-proj / -dec-proj -- MetaMT without the source / target projection
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .bleu import bleu4
from .config import RunConfig
from .data import DomainDataset, split_dataset, synth_generate
from .decoding import translate_corpus
from .model import TransformerModel
from .persistence import checkpoint_from, encode_checkpoint
from .tokenization import bpe_encode, bpe_learn, build_vocab
from .training import TrainState, fine_tune, run_meta_training, train_plain
from .workflow import GENERAL, SYSTEMS, Codec, merge_general

DESK = """\
data.n_domains=5
data.pairs=500,500,500,500,400
data.heldout=d4
data.heldout_split=0.5,0.125,0.375
transmission.n_base=32
train.lr=1e-3
train.meta_lr=0.01
train.inner_steps=20
train.meta_steps=10
train.epochs=10
train.finetune_steps=300
train.eval_every=20
train.patience=5
decode.beam=5
"""


def desk_config(seed: int = 0, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig.from_text(DESK, "desk")
    cfg.update({"train.seed": str(seed), "data.seed": str(seed), **(overrides or {})})
    return cfg


@dataclass
class Prepared:
    codec: Codec
    train: dict[str, DomainDataset]
    heldout: DomainDataset
    heldout_text: DomainDataset


def prepare(cfg: RunConfig) -> Prepared:
    """Generate, split, segment and encode; BPE and vocabularies cover every training split."""
    corpora = synth_generate(cfg.synth_spec())
    held = set(cfg["data.heldout"])
    texts = [split_dataset(c, cfg["data.heldout_split"] if c.domain_id in held else cfg["data.split"],
                           seed=cfg["data.seed"]) for c in corpora]
    pairs = [p for d in texts for p in d.train]
    marker = cfg["data.marker"]
    sb, tb = bpe_learn([s for s, _ in pairs], 10000, marker=marker), bpe_learn([t for _, t in pairs], 10000, marker=marker)
    sv = build_vocab([bpe_encode(sb, s) for s, _ in pairs])
    tv = build_vocab([bpe_encode(tb, t) for _, t in pairs])
    codec = Codec(sb, tb, sv, tv)
    max_len = cfg["model.max_len"]

    def enc(d):
        return DomainDataset(d.domain_id, *(codec.encode_pairs(getattr(d, s), max_len)[0]
                                            for s in ("train", "dev", "test")))

    train = {d.domain_id: enc(d) for d in texts if d.domain_id not in held}
    (held_text,) = [d for d in texts if d.domain_id in held]
    return Prepared(codec, train, enc(held_text), held_text)


@dataclass
class Comparison:
    seed: int
    bleu: dict[str, float]
    checkpoints: dict[str, bytes] = field(default_factory=dict)
    logs: dict[str, list] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)


def heldout_bleu(model: TransformerModel, prep: Prepared, domain: str, beam: int) -> float:
    t = prep.heldout_text
    hyps = translate_corpus(model, [s for s, _ in t.test], domain, prep.codec.src_bpe, prep.codec.src_vocab,
                            prep.codec.tgt_vocab, beam=beam)
    return bleu4(hyps, [r for _, r in t.test]).score


def _model(cfg: RunConfig, prep: Prepared, domains, **flags) -> TransformerModel:
    c = cfg.model_config(len(prep.codec.src_vocab), len(prep.codec.tgt_vocab))
    for k, v in flags.items():
        setattr(c, k, v)
    return TransformerModel(c, domains=list(domains))


ABLATIONS = (("MetaMT", {}), ("-enc-proj", {"enc_proj": False}), ("-dec-proj", {"dec_proj": False}))


def meta_state(cfg: RunConfig, prep: Prepared, label: str = "MetaMT") -> TrainState:
    """Fresh meta-training state for one of the projection variants."""
    return TrainState.fresh(_model(cfg, prep, prep.train, **dict(ABLATIONS)[label]), cfg.train_config())


def run_comparison(seed: int, systems=SYSTEMS, overrides: dict[str, str] | None = None,
                   prep: Prepared | None = None) -> Comparison:
    cfg = desk_config(seed, overrides)
    prep = prep or prepare(cfg)
    tc = cfg.train_config()
    beam = cfg["decode.beam"]
    held = cfg["data.heldout"][0]
    out = Comparison(seed, {})
    n = len(prep.train)
    budget = cfg["train.baseline_steps"] or tc.epochs * n * (n - 1) * tc.inner_steps

    if "Transformer" in systems or "+Fine Tune" in systems:
        t0 = time.time()
        model = _model(cfg, prep, [GENERAL], enc_proj=False, dec_proj=False)
        state = TrainState.fresh(model, tc)
        train_plain(state, merge_general(list(prep.train.values())), budget, patience=budget + 1)
        out.bleu["Transformer"] = heldout_bleu(model, prep, GENERAL, beam)
        out.checkpoints["Transformer pretrained"] = encode_checkpoint(checkpoint_from(model, state))
        out.logs["Transformer"] = state.log.records
        h = prep.heldout
        fine_tune(model, DomainDataset(GENERAL, h.train, h.dev, h.test), tc)
        out.bleu["+Fine Tune"] = heldout_bleu(model, prep, GENERAL, beam)
        out.checkpoints["+Fine Tune"] = encode_checkpoint(checkpoint_from(model))
        out.seconds["Transformer"] = time.time() - t0

    for label, _ in ABLATIONS:
        if label not in systems:
            continue
        t0 = time.time()
        state = meta_state(cfg, prep, label)
        model = state.model
        run_meta_training(state, prep.train)
        out.logs[label] = state.log.records
        out.checkpoints[label + " pretrained"] = encode_checkpoint(checkpoint_from(model, state))
        tuned = copy.deepcopy(model)
        fine_tune(tuned, DomainDataset(held, prep.heldout.train, prep.heldout.dev, prep.heldout.test), tc)
        out.bleu[label] = heldout_bleu(tuned, prep, held, beam)
        out.checkpoints[label] = encode_checkpoint(checkpoint_from(tuned))
        out.seconds[label] = time.time() - t0
    return out


def check_orderings(mean: dict[str, float], margin: float = 0.5, tie: float = 0.5) -> dict[str, bool]:
    """The directional claims, evaluated on seed-averaged BLEU."""
    return {
        "MetaMT > +Fine Tune (margin)": mean["MetaMT"] - mean["+Fine Tune"] >= margin,
        "+Fine Tune > Transformer": mean["+Fine Tune"] > mean["Transformer"],
        "MetaMT >= -enc-proj (tie band)": mean["MetaMT"] >= mean["-enc-proj"] - tie,
        "-enc-proj >= -dec-proj (tie band)": mean["-enc-proj"] >= mean["-dec-proj"] - tie,
    }


def mean_bleu(results: list[Comparison]) -> dict[str, float]:
    return {k: float(np.mean([r.bleu[k] for r in results])) for k in results[0].bleu}
