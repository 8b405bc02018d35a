"""Flat ``section.key=value`` run configuration.

Every key has a type and a default; unknown keys are rejected.  The resolved
configuration renders back to text deterministically (sorted by section, then
key), and that text re-parses to the identical configuration.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .data import SyntheticTaskSpec
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("data", "decode", "model", "train", "transmission")


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _strs(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


# key -> (parser, default text)
SCHEMA: dict[str, tuple] = {
    # model
    "model.d_model": (int, "32"),
    "model.n_layers": (int, "1"),
    "model.n_heads": (int, "2"),
    "model.ffn_dim": (int, "64"),
    "model.dropout": (float, "0.1"),
    "model.max_len": (int, "64"),
    "model.enc_proj": (_bool, "true"),
    "model.dec_proj": (_bool, "true"),
    "model.label_smoothing": (float, "0.0"),
    # transmission
    "transmission.n_base": (int, "32"),
    "transmission.emb_dim": (int, "32"),
    "transmission.score_normalization": (str, "none"),
    "transmission.normalize_base": (_bool, "true"),
    "transmission.init_policy": (str, "identity"),
    "transmission.embed_init": (str, "average"),
    "transmission.src_embeddings": (str, ""),
    "transmission.tgt_embeddings": (str, ""),
    "transmission.frequency_file": (str, ""),
    # training
    "train.mode": (str, "meta"),
    "train.lr": (float, "3e-4"),
    "train.meta_lr": (float, "0.1"),
    "train.batch_size": (int, "32"),
    "train.inner_steps": (int, "200"),
    "train.meta_steps": (int, "50"),
    "train.finetune_steps": (int, "300"),
    "train.patience": (int, "5"),
    "train.eval_every": (int, "20"),
    "train.epochs": (int, "1"),
    "train.meta_aggregation": (str, "pair"),
    "train.baseline_steps": (int, "0"),
    "train.checkpoint_every": (str, "pair"),
    "train.seed": (int, "0"),
    # data
    "data.dir": (str, "data"),
    "data.domains": (_strs, ""),
    "data.src_bpe": (str, ""),
    "data.tgt_bpe": (str, ""),
    "data.src_vocab": (str, ""),
    "data.tgt_vocab": (str, ""),
    "data.marker": (str, "@@"),
    "data.n_domains": (int, "5"),
    "data.shared_vocab": (int, "40"),
    "data.exclusive_vocab": (int, "8"),
    "data.polysemy": (int, "8"),
    "data.min_len": (int, "4"),
    "data.max_len": (int, "10"),
    "data.pairs": (_ints, "500"),
    "data.zipf": (float, "1.0"),
    "data.swap_noise": (float, "0.0"),
    "data.seed": (int, "0"),
    "data.split": (_floats, "0.8,0.1,0.1"),
    "data.heldout": (_strs, ""),
    "data.heldout_split": (_floats, "0.5,0.125,0.375"),
    # decoding
    "decode.beam": (int, "5"),
    "decode.max_len": (int, "0"),
    "decode.length_norm": (_bool, "false"),
}

_CHOICES = {
    "transmission.score_normalization": ("none", "softmax", "scale_by_n"),
    "transmission.init_policy": ("identity", "average", "random", "reuse"),
    "transmission.embed_init": ("average", "general"),
    "train.mode": ("meta", "baseline"),
    "train.meta_aggregation": ("pair", "epoch"),
    "train.checkpoint_every": ("pair", "epoch"),
}


def parse_lines(lines: Iterable[str], origin: str = "<config>") -> dict[str, str]:
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{no}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


class RunConfig:
    def __init__(self, raw: dict[str, str] | None = None):
        self.raw = {k: d for k, (_, d) in SCHEMA.items()}
        self.values: dict = {}
        self.update(raw or {})

    # -- construction ----------------------------------------------------------

    def update(self, raw: dict[str, str]) -> "RunConfig":
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        self.raw.update({k: str(v) for k, v in raw.items()})
        self._resolve()
        return self

    def _resolve(self) -> None:
        vals = {}
        for key, (parse, _) in SCHEMA.items():
            text = self.raw[key]
            try:
                vals[key] = parse(text)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            if key in _CHOICES and vals[key] not in _CHOICES[key]:
                raise ConfigError(f"{key} must be one of {list(_CHOICES[key])}, got {text!r}")
        self.values = vals

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "RunConfig":
        return cls(parse_lines(text.splitlines(), origin))

    @classmethod
    def load(cls, path: str | Path | None, overrides: Iterable[str] = ()) -> "RunConfig":
        raw = parse_lines(Path(path).read_text(encoding="utf-8").splitlines(), str(path)) if path else {}
        raw.update(parse_lines(overrides, "--set"))
        return cls(raw)

    def to_text(self) -> str:
        return "".join(f"{k}={self.raw[k]}\n" for k in sorted(self.raw))

    def __getitem__(self, key: str):
        return self.values[key]

    def require(self, *keys: str) -> None:
        for k in keys:
            if self.values[k] in ("", []):
                raise ConfigError(f"missing required config key {k}")

    # -- typed views -----------------------------------------------------------

    def model_config(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        v = self.values
        baseline = v["train.mode"] == "baseline"
        try:
            return ModelConfig(
                src_vocab=src_vocab, tgt_vocab=tgt_vocab, d_model=v["model.d_model"],
                n_layers=v["model.n_layers"], n_heads=v["model.n_heads"], ffn_dim=v["model.ffn_dim"],
                dropout=v["model.dropout"], max_len=v["model.max_len"],
                emb_dim=v["transmission.emb_dim"], n_base=v["transmission.n_base"],
                enc_proj=v["model.enc_proj"] and not baseline, dec_proj=v["model.dec_proj"] and not baseline,
                score_normalization=v["transmission.score_normalization"],
                normalize_base=v["transmission.normalize_base"], init_policy=v["transmission.init_policy"],
                embed_init=v["transmission.embed_init"], label_smoothing=v["model.label_smoothing"],
                seed=v["train.seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(lr=v["train.lr"], meta_lr=v["train.meta_lr"], batch_size=v["train.batch_size"],
                           inner_steps=v["train.inner_steps"], meta_steps=v["train.meta_steps"],
                           finetune_steps=v["train.finetune_steps"], patience=v["train.patience"],
                           eval_every=v["train.eval_every"], epochs=v["train.epochs"],
                           meta_aggregation=v["train.meta_aggregation"], seed=v["train.seed"])

    def synth_spec(self) -> SyntheticTaskSpec:
        v = self.values
        pairs = v["data.pairs"]
        try:
            return SyntheticTaskSpec(
                n_domains=v["data.n_domains"], shared_vocab=v["data.shared_vocab"],
                exclusive_vocab=v["data.exclusive_vocab"], polysemy=v["data.polysemy"],
                min_len=v["data.min_len"], max_len=v["data.max_len"],
                pairs=pairs[0] if len(pairs) == 1 else pairs, zipf=v["data.zipf"], seed=v["data.seed"],
                swap_noise=v["data.swap_noise"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
