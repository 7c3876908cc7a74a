"""Versioned binary checkpoints.

Layout (all little-endian):

    magic "DFM1" | u32 version | u32 json_len | config JSON (utf-8)
    u32 n_params | records...  | u32 n_ema | records...

Each tensor record is: u16 name_len | name | u8 rank | u32 dims... |
float32 payload. The config JSON carries the network config, the training
config snapshot, the dataset quantiles, and an rng provenance note. Loading
validates magic, version, and that the file ends exactly where the records
end.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .datagen import DatasetQuantiles
from .exceptions import BadMagic, IoError, TruncatedFile, VersionMismatch
from .flow import TrainConfig
from .network import UNetConfig
from .tensor import Tensor

MAGIC = b"DFM1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Named parameters + EMA shadow + quantiles + config snapshot."""

    net_config: UNetConfig
    train_config: TrainConfig
    quantiles: DatasetQuantiles
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    rng_note: str = ""
    format_version: int = FORMAT_VERSION

    def param_tensors(self, use_ema: bool = False,
                      requires_grad: bool = False) -> dict[str, Tensor]:
        table = self.ema if use_ema else self.params
        return {k: Tensor(v.copy(), requires_grad=requires_grad)
                for k, v in table.items()}

    @classmethod
    def from_trainer(cls, trainer, quantiles: DatasetQuantiles,
                     rng_note: str = "") -> "Checkpoint":
        return cls(net_config=trainer.net_config, train_config=trainer.config,
                   quantiles=quantiles,
                   params={k: p.data.copy() for k, p in trainer.params.items()},
                   ema={k: v.copy() for k, v in trainer.ema.items()},
                   rng_note=rng_note)


def _write_table(buf: io.BytesIO, table: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(
                f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_table(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        payload = r.take(n * 4)
        table[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return table


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.format_version))
    config = {
        "unet": ckpt.net_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "quantiles": {"d2": ckpt.quantiles.d2, "d98": ckpt.quantiles.d98,
                      "fn_kind": ckpt.quantiles.fn_kind},
        "rng_note": ckpt.rng_note,
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    _write_table(buf, ckpt.params)
    _write_table(buf, ckpt.ema)
    try:
        with open(path, "wb") as f:
            f.write(buf.getvalue())
    except OSError as e:
        raise IoError(str(e)) from e


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(str(e)) from e
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, "
                              f"expected {FORMAT_VERSION}")
    (json_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(json_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TruncatedFile(f"{path}: config block unreadable: {e}") from e
    params = _read_table(r)
    ema = _read_table(r)
    if r.pos != len(data):
        raise TruncatedFile(
            f"{path}: {len(data) - r.pos} trailing bytes after records")
    q = config["quantiles"]
    return Checkpoint(
        net_config=UNetConfig.from_dict(config["unet"]),
        train_config=TrainConfig.from_dict(config["train"]),
        quantiles=DatasetQuantiles(q["d2"], q["d98"], q["fn_kind"]),
        params=params,
        ema=ema,
        rng_note=config.get("rng_note", ""),
        format_version=version,
    )
