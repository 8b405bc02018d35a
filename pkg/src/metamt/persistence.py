"""Single-file checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes  b"MTCK"
    version    u32      currently 1
    nsections  u32
    section*   tag (4 ASCII bytes) | length u64 | payload
    crc        u64      CRC-64/XZ of every preceding byte

Sections, in order:

    CONF  JSON: model config, train config, run-config text
    PARM  tensor records (see below), sorted by path
    OPTM  u32 JSON length | JSON optimizer header | tensor records
    RNGS  JSON: bit-generator state of the dropout stream
    DOMS  JSON: registered domains (registration order) and base words
    TRST  JSON: training counters

A tensor record is ``u16 path length | path (UTF-8) | u8 dtype (1=float32,
2=float64) | u8 trainable | u8 ndim | u32 dims... | raw data``.  The
record count precedes the records as a u32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MTCK"
VERSION = 1
SECTIONS = (b"CONF", b"PARM", b"OPTM", b"RNGS", b"DOMS", b"TRST")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class PathSetError(CheckpointError):
    pass


def _crc_table() -> list[int]:
    poly = 0xC96C5795D7870F42
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _crc_table()


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    table = _TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]
    domains: list[str]
    train_config: dict | None = None
    run_config: str = ""
    optimizer: dict | None = None
    rng: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    base_words: dict = field(default_factory=dict)


def _records(arrays: dict[str, np.ndarray], trainable: dict[str, bool] | None = None) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for path in sorted(arrays):
        arr = np.asarray(arrays[path])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointFormatError(f"{path}: unsupported dtype {arr.dtype}")
        name = path.encode("utf-8")
        out.append(struct.pack("<H", len(name)) + name)
        flag = 1 if (trainable or {}).get(path, True) else 0
        out.append(struct.pack("<BBB", code, flag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def _read_records(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, bool], int]:
    (count,) = struct.unpack_from("<I", buf, 0)
    pos = 4
    arrays, flags = {}, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        path = buf[pos:pos + n].decode("utf-8")
        pos += n
        code, flag, ndim = struct.unpack_from("<BBB", buf, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES.get(code)
        if dt is None:
            raise CheckpointFormatError(f"{path}: unknown dtype code {code}")
        size = int(np.prod(shape)) * dt.itemsize
        arrays[path] = np.frombuffer(buf[pos:pos + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        flags[path] = bool(flag)
        pos += size
    return arrays, flags, pos


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(ck: Checkpoint) -> bytes:
    opt = ck.optimizer or {"kind": "none", "arrays": {}}
    head = {k: v for k, v in opt.items() if k != "arrays"}
    hb = _json(head)
    payloads = [
        _json({"model": ck.model_config, "train": ck.train_config, "run_config": ck.run_config}),
        _records(ck.params, ck.trainable),
        struct.pack("<I", len(hb)) + hb + _records(opt.get("arrays", {})),
        _json(ck.rng),
        _json({"domains": ck.domains, "base_words": ck.base_words}),
        _json(ck.counters),
    ]
    body = [MAGIC, struct.pack("<II", VERSION, len(payloads))]
    for tag, p in zip(SECTIONS, payloads):
        body.append(tag + struct.pack("<Q", len(p)) + p)
    data = b"".join(body)
    return data + struct.pack("<Q", crc64(data))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (version, nsec) = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
    if crc64(data[:-8]) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    pos = 12
    sections = {}
    for _ in range(nsec):
        tag = data[pos:pos + 4]
        (n,) = struct.unpack_from("<Q", data, pos + 4)
        sections[tag] = data[pos + 12:pos + 12 + n]
        pos += 12 + n
    missing = [t.decode() for t in SECTIONS if t not in sections]
    if missing:
        raise CheckpointFormatError(f"missing sections {missing}")
    conf = json.loads(sections[b"CONF"])
    params, flags, _ = _read_records(sections[b"PARM"])
    ob = sections[b"OPTM"]
    (hl,) = struct.unpack_from("<I", ob, 0)
    opt = json.loads(ob[4:4 + hl])
    opt["arrays"], _, _ = _read_records(ob[4 + hl:])
    doms = json.loads(sections[b"DOMS"])
    return Checkpoint(model_config=conf["model"], params=params, trainable=flags, domains=doms["domains"],
                      train_config=conf["train"], run_config=conf["run_config"],
                      optimizer=None if opt.get("kind") == "none" else opt,
                      rng=json.loads(sections[b"RNGS"]), counters=json.loads(sections[b"TRST"]),
                      base_words=doms["base_words"])


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = encode_checkpoint(ck)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# -- model / training-state glue ---------------------------------------------------------


def checkpoint_from(model, state=None, run_config: str = "") -> Checkpoint:
    base_words = {}
    for layer in (model.src_layer, model.tgt_layer):
        if layer is not None:
            base_words[layer.side] = list(layer.base_words)
    return Checkpoint(
        model_config=model.config.to_dict(),
        params={p: v.data for p, v in model.params.items()},
        trainable={p: v.trainable for p, v in model.params.items()},
        domains=list(model.domains),
        train_config=state.config.to_dict() if state is not None else None,
        run_config=run_config,
        optimizer=state.optimizer.state_dict() if state is not None else None,
        rng={"dropout": model.dropout_rng.bit_generator.state},
        counters=state.counters() if state is not None else {},
        base_words=base_words,
    )


def restore_model(ck: Checkpoint):
    from .model import ModelConfig, TransformerModel

    model = TransformerModel(ModelConfig.from_dict(ck.model_config), domains=ck.domains)
    expected, found = set(model.params), set(ck.params)
    if expected != found:
        offender = sorted(expected ^ found)[0]
        where = "missing from checkpoint" if offender in expected else "not constructed by config"
        raise PathSetError(f"parameter path {offender!r} {where}")
    for path, p in model.params.items():
        arr = ck.params[path]
        if arr.shape != p.shape:
            raise PathSetError(f"parameter {path!r} has shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
        p.grad = np.zeros_like(p.data)
    for layer in (model.src_layer, model.tgt_layer):
        if layer is not None:
            layer.base = model.params[layer.base.path]
            for dom in layer.projections:
                layer.projections[dom] = model.params[layer.path_for(dom)]
            layer.base_words = list(ck.base_words.get(layer.side, layer.base_words))
    if "dropout" in ck.rng:
        model.dropout_rng.bit_generator.state = ck.rng["dropout"]
    return model


def restore_state(ck: Checkpoint, log=None):
    from .optim import Adam
    from .training import TrainConfig, TrainLog, TrainState

    model = restore_model(ck)
    config = TrainConfig.from_dict(ck.train_config)
    opt = Adam(lr=config.lr)
    if ck.optimizer is not None:
        opt.load_state_dict(ck.optimizer)
    state = TrainState(model, config, opt, log or TrainLog())
    c = ck.counters
    state.step, state.iteration = c.get("step", 0), c.get("iteration", 0)
    state.epoch, state.pair_index = c.get("epoch", 0), c.get("pair_index", 0)
    state.epoch_start_dev = c.get("epoch_start_dev", {})
    return state
