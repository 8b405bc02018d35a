"""Command-line interface.

Every failure ends with one JSON line on stderr, ``{"error": kind, "message": ...}``,
and a nonzero exit status: 2 usage, 3 configuration, 4 data, 5 checkpoint,
1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import numerics as nx
from .bleu import bleu4
from .config import ConfigError, RunConfig, parse_lines
from .data import CorpusError, ParallelCorpus, save_parallel, split_dataset, synth_ciphers, synth_generate
from .decoding import translate_corpus
from .persistence import CheckpointError, checkpoint_from, load_checkpoint, restore_model, restore_state, \
    save_checkpoint
from .report import ReportError, collect_runs, loss_curves, render
from .tokenization import BpeModel, bpe_encode, bpe_learn, build_vocab
from .training import MetaSchedule, TrainLog, TrainState, TrainingError, fine_tune, run_meta_training, \
    train_plain
from .workflow import GENERAL, Codec, build_model, encode_dataset, load_text_splits, merge_general, \
    resolve_domain, system_label

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_RUNTIME = 2, 3, 4, 5, 1
CHECKPOINT = "model.mtck"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _config(args, base_text: str | None = None) -> RunConfig:
    """Defaults (or a stored run config), then --config keys, then --set overrides."""
    cfg = RunConfig.from_text(base_text) if base_text is not None else RunConfig()
    if getattr(args, "config", None):
        cfg.update(parse_lines(Path(args.config).read_text(encoding="utf-8").splitlines(), args.config))
    overrides = getattr(args, "set", None) or []
    if overrides:
        cfg.update(parse_lines(overrides, "--set"))
    return cfg


def _codec(cfg: RunConfig) -> Codec:
    cfg.require("data.src_bpe", "data.tgt_bpe", "data.src_vocab", "data.tgt_vocab")
    return Codec.load(cfg["data.src_bpe"], cfg["data.tgt_bpe"], cfg["data.src_vocab"], cfg["data.tgt_vocab"])


def _write_run(run_dir: Path, **info) -> None:
    (run_dir / "run.json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# -- data preparation -------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    spec = cfg.synth_spec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    heldout = set(cfg["data.heldout"])
    for corpus in synth_generate(spec):
        ratios = cfg["data.heldout_split"] if corpus.domain_id in heldout else cfg["data.split"]
        ds = split_dataset(corpus, ratios, seed=cfg["data.seed"])
        for name in ("train", "dev", "test"):
            save_parallel(ParallelCorpus(corpus.domain_id, getattr(ds, name)), out / f"{corpus.domain_id}.{name}")
        _emit({"domain": corpus.domain_id, "train": len(ds.train), "dev": len(ds.dev), "test": len(ds.test)})
    (out / "ciphers.json").write_text(json.dumps(synth_ciphers(spec), indent=1, sort_keys=True), encoding="utf-8")
    (out / "synth.conf").write_text(cfg.to_text(), encoding="utf-8")
    return 0


def _read_lines(paths) -> list[str]:
    lines = []
    for p in paths:
        lines.extend(Path(p).read_text(encoding="utf-8").splitlines())
    return lines


def cmd_bpe_learn(args) -> int:
    model = bpe_learn(_read_lines(args.input), args.ops, marker=args.marker, min_frequency=args.min_frequency)
    model.save(args.out)
    _emit({"merges": len(model.merges), "out": args.out})
    return 0


def cmd_bpe_apply(args) -> int:
    model = BpeModel.load(args.model)
    lines = _read_lines([args.input])
    Path(args.out).write_text("".join(" ".join(bpe_encode(model, ln)) + "\n" for ln in lines), encoding="utf-8")
    _emit({"lines": len(lines), "out": args.out})
    return 0


def cmd_build_vocab(args) -> int:
    vocab = build_vocab([ln.split() for ln in _read_lines(args.input)], min_freq=args.min_freq)
    vocab.save(args.out)
    _emit({"size": len(vocab), "out": args.out})
    return 0


# -- training ---------------------------------------------------------------------------


def cmd_train_meta(args) -> int:
    run_dir = Path(args.run_dir)
    ck_path = run_dir / CHECKPOINT
    resume = args.resume and ck_path.exists()
    if resume:
        ck = load_checkpoint(ck_path)
        cfg = _config(args, ck.run_config)
        if cfg.to_text() != ck.run_config:
            raise ConfigError("resumed run must use the configuration stored in its checkpoint")
        if ck.counters.get("complete"):
            _emit({"run_dir": str(run_dir), "status": "already complete"})
            return 0
    else:
        cfg = _config(args)
    cfg.require("data.domains")
    domains, mode = cfg["data.domains"], cfg["train.mode"]
    if mode == "meta" and len(domains) < 2:
        raise ConfigError(f"meta training needs at least 2 domains, got {len(domains)}")
    if args.stop_after is not None and cfg["train.meta_aggregation"] == "epoch":
        raise ConfigError("--stop-after needs train.meta_aggregation=pair (epoch aggregation holds unsaved snapshots)")
    codec = _codec(cfg)
    max_len = cfg["model.max_len"]
    texts = {d: load_text_splits(cfg["data.dir"], d) for d in domains}
    datasets = {d: encode_dataset(texts[d], codec, d, max_len) for d in domains}
    run_dir.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text()
    log = TrainLog(run_dir / "train.jsonl")
    if resume:
        state = restore_state(ck, log)
        log.write(phase="resume", step=state.step, iteration=state.iteration)
    else:
        (run_dir / "train.jsonl").unlink(missing_ok=True)
        (run_dir / "config.txt").write_text(text, encoding="utf-8")
        log.write(phase="config", config=text)
        train_pairs = [p for d in domains for p in texts[d]["train"].pairs]
        model = build_model(cfg.model_config(len(codec.src_vocab), len(codec.tgt_vocab)),
                            [GENERAL] if mode == "baseline" else domains, codec,
                            cfg["transmission.src_embeddings"], cfg["transmission.tgt_embeddings"], train_pairs,
                            cfg["transmission.frequency_file"])
        state = TrainState.fresh(model, cfg.train_config(), log)
    mc = state.model.config
    label = system_label(mode, mc.enc_proj, mc.dec_proj, finetuned=False)

    def save(complete: bool) -> None:
        ck_new = checkpoint_from(state.model, state, text)
        ck_new.counters["complete"] = complete
        save_checkpoint(ck_path, ck_new)
        _write_run(run_dir, system=label, mode=mode, domains=domains, checkpoint=CHECKPOINT, complete=complete)

    stopped = False
    if mode == "baseline":
        steps = cfg["train.baseline_steps"] or (cfg["train.epochs"] * len(domains) * max(len(domains) - 1, 1)
                                                 * cfg["train.inner_steps"])
        train_plain(state, merge_general(list(datasets.values())), steps, patience=steps + 1)
    else:
        every_pair = cfg["train.checkpoint_every"] == "pair" and cfg["train.meta_aggregation"] == "pair"

        def on_iteration(st):
            nonlocal stopped
            if every_pair:
                save(False)
            if args.stop_after is not None and st.iteration >= args.stop_after:
                stopped = True
                return True
            return None

        run_meta_training(state, datasets, MetaSchedule(domains, cfg["train.epochs"], cfg["train.seed"]),
                          on_iteration=on_iteration, on_epoch=lambda st: save(False))
    if stopped:
        save(False)
        _emit({"run_dir": str(run_dir), "status": "stopped", "iteration": state.iteration})
        return 0
    save(True)
    _emit({"run_dir": str(run_dir), "system": label, "status": "complete", "step": state.step})
    return 0


def cmd_finetune(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = _config(args, ck.run_config)
    codec = _codec(cfg)
    model = restore_model(ck)
    domain = resolve_domain(model, args.domain) if GENERAL in model.domains else args.domain
    texts = load_text_splits(cfg["data.dir"], args.domain)
    dataset = encode_dataset(texts, codec, domain, model.config.max_len)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text()
    (run_dir / "config.txt").write_text(text, encoding="utf-8")
    (run_dir / "train.jsonl").unlink(missing_ok=True)
    log = TrainLog(run_dir / "train.jsonl")
    log.write(phase="config", config=text)
    tc = cfg.train_config()
    fine_tune(model, dataset, tc, steps=args.steps, log=log)
    new = checkpoint_from(model, None, text)
    new.train_config = tc.to_dict()
    new.counters = {"complete": True, "finetuned": args.domain}
    save_checkpoint(run_dir / CHECKPOINT, new)
    mode = cfg["train.mode"]
    label = system_label(mode, model.config.enc_proj, model.config.dec_proj, finetuned=True)
    _write_run(run_dir, system=label, mode=mode, domains=list(model.domains), checkpoint=CHECKPOINT,
               finetuned=args.domain, source=str(args.checkpoint), complete=True)
    _emit({"run_dir": str(run_dir), "system": label, "domain": args.domain})
    return 0


# -- inference and evaluation -----------------------------------------------------------


def cmd_translate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = _config(args, ck.run_config)
    codec = _codec(cfg)
    model = restore_model(ck)
    domain = resolve_domain(model, args.domain)
    if domain not in model.domains:
        raise ConfigError(f"domain {args.domain!r} is not registered in the checkpoint (have {model.domains})")
    lines = _read_lines([args.input])
    beam = args.beam if args.beam is not None else cfg["decode.beam"]
    hyps = translate_corpus(model, lines, domain, codec.src_bpe, codec.src_vocab, codec.tgt_vocab, beam=beam,
                            marker=cfg["data.marker"], max_len=cfg["decode.max_len"] or None,
                            length_norm=cfg["decode.length_norm"])
    Path(args.out).write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    _emit({"lines": len(hyps), "domain": domain, "beam": beam, "out": args.out})
    return 0


def cmd_evaluate(args) -> int:
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    if len(hyps) != len(refs):
        raise CorpusError(f"line count mismatch: {args.hyp} has {len(hyps)}, {args.ref} has {len(refs)}")
    rep = bleu4(hyps, refs)
    print(rep.summary(), flush=True)
    if args.run_dir:
        run_dir = Path(args.run_dir)
        system = args.system
        if system is None and (run_dir / "run.json").exists():
            system = json.loads((run_dir / "run.json").read_text(encoding="utf-8")).get("system")
        rec = {"system": system, "domain": args.domain, "bleu": rep.score, **rep.record()}
        with open(run_dir / "eval.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    info = {
        "checkpoint": args.checkpoint,
        "bytes": Path(args.checkpoint).stat().st_size,
        "model_config": ck.model_config,
        "train_config": ck.train_config,
        "domains": ck.domains,
        "parameters": sum(int(a.size) for a in ck.params.values()),
        "tensors": len(ck.params),
        "counters": ck.counters,
        "optimizer": None if ck.optimizer is None else {k: v for k, v in ck.optimizer.items() if k != "arrays"},
    }
    if args.params:
        info["shapes"] = {p: list(a.shape) for p, a in sorted(ck.params.items())}
    if args.show_config:
        info["run_config"] = ck.run_config
    print(json.dumps(info, indent=1, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    runs = collect_runs(args.log_dir)
    text = render(runs)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    curves = Path(args.curves) if args.curves else Path(args.log_dir) / "curves.json"
    curves.write_text(json.dumps(loss_curves(runs), sort_keys=True), encoding="utf-8")
    return 0


# -- dispatch ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metamt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    sp = sub.add_parser("synth-data", help="generate the synthetic multi-domain corpus")
    sp.add_argument("--out", required=True)
    with_config(sp)
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("bpe-learn", help="learn BPE merges")
    sp.add_argument("--input", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ops", type=int, default=10000)
    sp.add_argument("--marker", default="@@")
    sp.add_argument("--min-frequency", type=int, default=2)
    sp.set_defaults(fn=cmd_bpe_learn)

    sp = sub.add_parser("bpe-apply", help="segment a text file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_bpe_apply)

    sp = sub.add_parser("build-vocab", help="vocabulary from segmented files")
    sp.add_argument("--input", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-freq", type=int, default=1)
    sp.set_defaults(fn=cmd_build_vocab)

    sp = sub.add_parser("train-meta", help="meta-train (or train the merged baseline)")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after", type=int, default=None, help="stop after this many domain pairs")
    with_config(sp)
    sp.set_defaults(fn=cmd_train_meta)

    sp = sub.add_parser("finetune", help="fine-tune a checkpoint on one domain")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--domain", required=True)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--steps", type=int, default=None)
    with_config(sp)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("translate", help="beam-search translation of a text file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--domain", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--beam", type=int, default=None)
    with_config(sp)
    sp.set_defaults(fn=cmd_translate)

    sp = sub.add_parser("evaluate", help="corpus BLEU-4 of a hypothesis file")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--run-dir", default=None, help="append the score to RUN_DIR/eval.jsonl")
    sp.add_argument("--system", default=None)
    sp.add_argument("--domain", default=None)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("inspect-checkpoint", help="summarise a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--params", action="store_true", help="list every tensor shape")
    sp.add_argument("--show-config", action="store_true")
    sp.set_defaults(fn=cmd_inspect)

    sp = sub.add_parser("report", help="comparison table and loss curves for a log directory")
    sp.add_argument("--log-dir", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--curves", default=None)
    sp.set_defaults(fn=cmd_report)
    return p


_KINDS = [
    (UsageError, "usage", EXIT_USAGE),
    (ConfigError, "config", EXIT_CONFIG),
    (CheckpointError, "checkpoint", EXIT_CHECKPOINT),
    (CorpusError, "data", EXIT_DATA),
    (ReportError, "report", EXIT_DATA),
    (FileNotFoundError, "io", EXIT_DATA),
    (TrainingError, "training", EXIT_RUNTIME),
    (nx.NonFiniteError, "numerics", EXIT_RUNTIME),
]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        return args.fn(args)
    except Exception as exc:  # one machine-readable line, no traceback
        kind, code = "error", EXIT_RUNTIME
        for cls, k, c in _KINDS:
            if isinstance(exc, cls):
                kind, code = k, c
                break
        else:
            if isinstance(exc, ValueError):
                kind, code = "value", EXIT_RUNTIME
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(json.dumps({"error": kind, "message": msg}), file=sys.stderr, flush=True)
        return code
