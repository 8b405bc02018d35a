"""Alternating model / meta training over pairs of domains, then fine-tuning.

One iteration for an ordered pair ``(i, j)``:

1. model training: Adam on ``D_tr^i`` with early stopping on ``D_dev^i``,
   starting from the shared parameters; the result becomes the shared
   parameters.
2. meta training: a copy of those parameters is trained on 90% of
   ``D_dev^j`` (early stopping on the other 10%), updating only the
   transmission layers and the encoder.
3. meta update (first order): the gradient of the ``D_tr^i`` loss is taken
   at the meta-trained copy and applied to the shared parameters with SGD.

The meta update runs after every pair by default, or once per epoch over all
collected copies (``meta_aggregation="epoch"``).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import DomainDataset, make_batches
from .model import META_PREFIXES, TransformerModel
from .optim import Adam

PHASES = ("model", "meta", "meta-update", "finetune", "train", "eval")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    meta_lr: float = 0.1
    batch_size: int = 32
    inner_steps: int = 200
    meta_steps: int = 50
    finetune_steps: int = 300
    patience: int = 5
    eval_every: int = 20
    epochs: int = 1
    meta_aggregation: str = "pair"
    seed: int = 0

    def __post_init__(self):
        if self.meta_aggregation not in ("pair", "epoch"):
            raise ValueError("meta_aggregation must be 'pair' or 'epoch'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetaSchedule:
    domains: list[str]
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if len(self.domains) < 2:
            raise ValueError("meta training needs at least two domains")
        if len(set(self.domains)) != len(self.domains):
            raise ValueError("duplicate domain in schedule")

    def pairs(self) -> list[tuple[str, str]]:
        return [(a, b) for a, b in itertools.permutations(self.domains, 2)]

    def epoch_order(self, epoch: int) -> list[tuple[str, str]]:
        pairs = self.pairs()
        perm = np.random.default_rng([self.seed, 101, epoch]).permutation(len(pairs))
        return [pairs[k] for k in perm]


class TrainLog:
    """Structured training records, optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None

    def write(self, **rec) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def losses(self, phase: str) -> list[float]:
        return [r["loss"] for r in self.records if r.get("phase") == phase and "loss" in r]


@dataclass
class TrainState:
    model: TransformerModel
    config: TrainConfig
    optimizer: Adam
    log: TrainLog
    step: int = 0
    iteration: int = 0
    epoch: int = 0
    pair_index: int = 0
    epoch_start_dev: dict = field(default_factory=dict)
    pending: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: TransformerModel, config: TrainConfig, log: TrainLog | None = None) -> "TrainState":
        return cls(model, config, Adam(lr=config.lr), log or TrainLog())

    def counters(self) -> dict:
        return {"step": self.step, "iteration": self.iteration, "epoch": self.epoch,
                "pair_index": self.pair_index, "epoch_start_dev": self.epoch_start_dev}


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


_TAG = {"model": 1, "meta": 2, "meta-update": 3, "finetune": 4, "train": 5, "split": 6}


# -- basic loops -------------------------------------------------------------------


def loss_and_grad(model: TransformerModel, src: np.ndarray, tgt: np.ndarray, domain: str) -> float:
    model.zero_grad()
    with nx.Tape() as tape:
        loss = model.forward_loss(src, tgt, domain)
    tape.backward(loss)
    return loss.item()


def evaluate_loss(model: TransformerModel, split: Sequence, domain: str, batch_size: int = 64) -> float:
    """Token-weighted mean loss over a split, dropout off."""
    was = model.train_mode
    model.eval()
    total = count = 0.0
    with nx.no_tape():
        for src, tgt in make_batches(split, batch_size, seed=0):
            n = int((tgt[:, 1:] != 0).sum())
            total += model.forward_loss(src, tgt, domain).item() * n
            count += n
    model.train_mode = was
    return total / count


def _batch_stream(split: Sequence, batch_size: int, seed: int):
    for epoch in itertools.count():
        yield from make_batches(split, batch_size, seed=derived_seed(seed, epoch))


def train_loop(model: TransformerModel, optimizer, params: list, train: Sequence, dev: Sequence,
               domain: str, steps: int, patience: int, eval_every: int, batch_size: int, seed: int,
               log: TrainLog, phase: str, extra: dict | None = None, step_offset: int = 0) -> dict:
    """Optimise ``params`` on ``train``; return the best-dev snapshot of all parameters.

    The starting point is itself a candidate, so ``steps=0`` returns it unchanged.
    """
    extra = extra or {}
    best_state = model.state()
    if steps <= 0:
        return best_state
    best = evaluate_loss(model, dev, domain, batch_size)
    log.write(phase=phase, step=step_offset, event="dev", dev_loss=best, domain=domain, **extra)
    bad = 0
    model.train()
    stream = _batch_stream(train, batch_size, seed)
    for s in range(1, steps + 1):
        src, tgt = next(stream)
        try:
            loss = loss_and_grad(model, src, tgt, domain)
            optimizer.step(params)
        except nx.NonFiniteError as exc:
            raise TrainingError(f"{phase} on {domain} aborted at step {s}: {exc}") from exc
        log.write(phase=phase, step=step_offset + s, loss=loss, domain=domain, **extra)
        if s % eval_every == 0 or s == steps:
            dev_loss = evaluate_loss(model, dev, domain, batch_size)
            log.write(phase=phase, step=step_offset + s, event="dev", dev_loss=dev_loss, domain=domain, **extra)
            if dev_loss < best:
                best, best_state, bad = dev_loss, model.state(), 0
            else:
                bad += 1
                if bad >= patience:
                    break
    return best_state


# -- the three phases ----------------------------------------------------------------


def model_training_step(state: TrainState, train: Sequence, dev: Sequence, domain: str,
                        inner_steps: int | None = None, patience: int | None = None,
                        extra: dict | None = None) -> dict:
    """Train all parameters from the shared point; return the snapshot, leave the model as it was."""
    cfg = state.config
    if not train or not dev:
        raise TrainingError("model training needs non-empty train and dev splits")
    steps = cfg.inner_steps if inner_steps is None else inner_steps
    model = state.model
    start = model.state()
    snap = train_loop(model, state.optimizer, model.parameters(trainable_only=True), train, dev, domain,
                      steps, cfg.patience if patience is None else patience, cfg.eval_every,
                      cfg.batch_size, derived_seed(cfg.seed, _TAG["model"], state.iteration),
                      state.log, "model", extra, state.step)
    state.step += steps
    model.load_state(start)
    return snap


def split_meta_dev(dev: Sequence, seed: int) -> tuple[list, list]:
    if len(dev) < 10:
        raise TrainingError(f"meta training needs >= 10 dev pairs, got {len(dev)}")
    order = np.random.default_rng(seed).permutation(len(dev))
    n_fit = int(math.floor(0.9 * len(dev)))
    return [dev[k] for k in order[:n_fit]], [dev[k] for k in order[n_fit:]]


def meta_training_step(state: TrainState, theta_i: dict, dev_j: Sequence, domain_j: str,
                       meta_steps: int | None = None, extra: dict | None = None) -> dict:
    """Adapt only the meta parameters (transmission + encoder) on ``dev_j``."""
    cfg = state.config
    steps = cfg.meta_steps if meta_steps is None else meta_steps
    fit, hold = split_meta_dev(dev_j, derived_seed(cfg.seed, _TAG["split"], state.iteration))
    model = state.model
    saved = model.state()
    model.load_state(theta_i)
    params = model.parameters(prefixes=META_PREFIXES, trainable_only=True)
    snap = train_loop(model, Adam(lr=cfg.lr), params, fit, hold, domain_j, steps, cfg.patience,
                      cfg.eval_every, cfg.batch_size, derived_seed(cfg.seed, _TAG["meta"], state.iteration),
                      state.log, "meta", extra, 0)
    model.load_state(saved)
    return snap


def meta_update(model: TransformerModel, theta: dict, snapshots: Sequence[tuple[str, dict, Sequence]],
                meta_lr: float, batch_size: int, seed: int) -> tuple[dict, list[float]]:
    """theta - meta_lr * sum_i grad L(batch of D_tr^i; theta_i')."""
    if not snapshots:
        raise TrainingError("meta update needs at least one snapshot")
    trainable = [p for p in model.parameters(trainable_only=True)]
    total = {p.path: np.zeros_like(p.data) for p in trainable}
    losses = []
    for k, (domain, snap, train) in enumerate(snapshots):
        merged = dict(theta)
        merged.update({p: v for p, v in snap.items() if p in theta})
        model.load_state(merged)
        rng = np.random.default_rng(derived_seed(seed, k))
        idx = np.sort(rng.choice(len(train), size=min(batch_size, len(train)), replace=False))
        (src, tgt), = make_batches([train[t] for t in idx], len(idx), seed=0)
        model.train()
        losses.append(loss_and_grad(model, src, tgt, domain))
        for p in trainable:
            if p.path in snap:
                total[p.path] += p.grad
    nx.check_finite(list(total.values()), "meta gradients")
    new = dict(theta)
    for path, g in total.items():
        new[path] = theta[path] - g.dtype.type(meta_lr) * g
    model.load_state(new)
    return new, losses


def fine_tune(model: TransformerModel, dataset: DomainDataset, config: TrainConfig,
              steps: int | None = None, patience: int | None = None, log: TrainLog | None = None,
              init_policy: str | None = None) -> dict:
    """Train every parameter on the new domain; the model ends at the best-dev point."""
    if dataset.domain_id not in model.domains and (model.src_layer or model.tgt_layer):
        model.register_domain(dataset.domain_id, init_policy=init_policy)
    steps = config.finetune_steps if steps is None else steps
    snap = train_loop(model, Adam(lr=config.lr), model.parameters(trainable_only=True), dataset.train,
                      dataset.dev, dataset.domain_id, steps, config.patience if patience is None else patience,
                      config.eval_every, config.batch_size, derived_seed(config.seed, _TAG["finetune"]),
                      log or TrainLog(), "finetune")
    model.load_state(snap)
    return snap


def train_plain(state: TrainState, dataset: DomainDataset, steps: int, domain: str | None = None,
                patience: int | None = None) -> dict:
    """Ordinary training of all parameters (the baseline path)."""
    cfg = state.config
    domain = domain or dataset.domain_id
    snap = train_loop(state.model, state.optimizer, state.model.parameters(trainable_only=True),
                      dataset.train, dataset.dev, domain, steps,
                      cfg.patience if patience is None else patience, cfg.eval_every, cfg.batch_size,
                      derived_seed(cfg.seed, _TAG["train"], state.iteration), state.log, "train",
                      None, state.step)
    state.step += steps
    state.iteration += 1
    state.model.load_state(snap)
    return snap


# -- the full policy -----------------------------------------------------------------


def dev_losses(model: TransformerModel, datasets: dict[str, DomainDataset], batch_size: int) -> dict[str, float]:
    return {d: evaluate_loss(model, ds.dev, d, batch_size) for d, ds in datasets.items()}


def run_meta_training(state: TrainState, datasets: dict[str, DomainDataset],
                      schedule: MetaSchedule | None = None,
                      on_iteration: Callable[[TrainState], bool | None] | None = None,
                      on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run (or resume) the alternating policy.

    ``on_iteration`` is called after every completed pair; returning ``True``
    stops the run early (used for checkpoint/resume).
    """
    cfg = state.config
    schedule = schedule or MetaSchedule(list(datasets), cfg.epochs, cfg.seed)
    for d in schedule.domains:
        if d not in datasets:
            raise TrainingError(f"schedule names unknown domain {d!r}")
    model = state.model
    while state.epoch < schedule.epochs:
        order = schedule.epoch_order(state.epoch)
        if state.pair_index == 0:
            state.epoch_start_dev = dev_losses(model, datasets, cfg.batch_size)
            state.log.write(phase="eval", event="epoch-start", epoch=state.epoch, step=state.step,
                            dev_loss=state.epoch_start_dev)
        while state.pair_index < len(order):
            i, j = order[state.pair_index]
            tag = {"pair": [i, j], "epoch": state.epoch, "iteration": state.iteration}
            theta_i = model_training_step(state, datasets[i].train, datasets[i].dev, i, extra=tag)
            model.load_state(theta_i)
            theta_i_prime = meta_training_step(state, theta_i, datasets[j].dev, j, extra=tag)
            entry = (i, theta_i_prime, datasets[i].train)
            if cfg.meta_aggregation == "pair":
                _, losses = meta_update(model, theta_i, [entry], cfg.meta_lr, cfg.batch_size,
                                        derived_seed(cfg.seed, _TAG["meta-update"], state.iteration))
                state.log.write(phase="meta-update", step=state.step, loss=losses[0], **tag)
            else:
                state.pending.append(entry)
            state.iteration += 1
            state.pair_index += 1
            if on_iteration is not None and on_iteration(state):
                return state
        if state.pending:
            _, losses = meta_update(model, model.state(), state.pending, cfg.meta_lr, cfg.batch_size,
                                    derived_seed(cfg.seed, _TAG["meta-update"], state.iteration))
            state.log.write(phase="meta-update", step=state.step, loss=float(np.mean(losses)),
                            epoch=state.epoch, iteration=state.iteration)
            state.pending = []
        end = dev_losses(model, datasets, cfg.batch_size)
        state.log.write(phase="eval", event="epoch-end", epoch=state.epoch, step=state.step,
                        dev_loss=end, start_dev_loss=state.epoch_start_dev)
        state.epoch += 1
        state.pair_index = 0
        if on_epoch is not None:
            on_epoch(state)
    return state
