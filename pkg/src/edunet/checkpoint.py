"""Binary checkpoint format.

Layout (little-endian)::

    b"EDUN" | u32 version | u32 len + UTF-8 JSON header
    tensor table:    u32 count, then per tensor
                     u32 len + UTF-8 name | u8 rank | u64 dims[rank] | f32 payload
    optimizer table: same encoding (m.<param>, v.<param>, step)
    rng table:       same encoding (rng.<stream>, PCG64 state in 16-bit chunks)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Tuple

import numpy as np

from .model import EDUNetConfig, init_params
from .optim import AdamState, PlateauState
from .params import ParamStore

MAGIC = b"EDUN"
VERSION = 1
_CHUNKS = 8  # 16-bit chunks per 128-bit PCG64 word


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_cfg: EDUNetConfig
    params: ParamStore
    train_cfg: dict = field(default_factory=dict)
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    plateau: Optional[PlateauState] = None
    rng: Dict[str, dict] = field(default_factory=dict)

    def clone(self) -> "Checkpoint":
        return Checkpoint(
            self.model_cfg,
            self.params.copy(),
            dict(self.train_cfg),
            self.epoch,
            AdamState(self.adam.step, {k: v.copy() for k, v in self.adam.m.items()}, {k: v.copy() for k, v in self.adam.v.items()}),
            None if self.plateau is None else PlateauState(**vars(self.plateau)),
            json.loads(json.dumps(self.rng)),
        )


# -- rng state <-> float32 chunks ------------------------------------------------


def _split(value: int, n: int) -> List[int]:
    return [(value >> (16 * i)) & 0xFFFF for i in range(n)]


def _join(chunks) -> int:
    return sum(int(c) << (16 * i) for i, c in enumerate(chunks))


def encode_rng_state(state: dict) -> np.ndarray:
    if state.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported bit generator {state.get('bit_generator')!r}")
    inner = state["state"]
    vals = _split(inner["state"], _CHUNKS) + _split(inner["inc"], _CHUNKS)
    vals += [int(state["has_uint32"])] + _split(int(state["uinteger"]), 2)
    return np.array(vals, dtype=np.float32)


def decode_rng_state(arr: np.ndarray) -> dict:
    v = [int(x) for x in np.asarray(arr).reshape(-1)]
    if len(v) != 2 * _CHUNKS + 3:
        raise CheckpointError(f"rng state has {len(v)} entries, expected {2 * _CHUNKS + 3}")
    return {
        "bit_generator": "PCG64",
        "state": {"state": _join(v[:_CHUNKS]), "inc": _join(v[_CHUNKS : 2 * _CHUNKS])},
        "has_uint32": v[2 * _CHUNKS],
        "uinteger": _join(v[2 * _CHUNKS + 1 :]),
    }


# -- table encoding ----------------------------------------------------------------


def _write_table(fh: BinaryIO, table: Dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(a.tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}Q") if rank else ()
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        return out


# -- public API -------------------------------------------------------------------


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "model": ckpt.model_cfg.to_dict(),
        "train": ckpt.train_cfg,
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam.step,
        "plateau": None if ckpt.plateau is None else vars(ckpt.plateau),
        "rng_streams": sorted(ckpt.rng),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(raw)))
    fh.write(raw)
    _write_table(fh, ckpt.params.state())
    opt = {}
    for name in ckpt.adam.m:
        opt[f"m.{name}"] = ckpt.adam.m[name]
        opt[f"v.{name}"] = ckpt.adam.v[name]
    opt["step"] = np.array(ckpt.adam.step, dtype=np.float32)
    _write_table(fh, opt)
    _write_table(fh, {f"rng.{k}": encode_rng_state(ckpt.rng[k]) for k in sorted(ckpt.rng)})
    return fh.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not an EDUN checkpoint")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    tensors = r.table()
    opt = r.table()
    rngs = r.table()
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after rng table")

    cfg = EDUNetConfig.from_dict(header["model"])
    params = init_params(cfg, np.random.default_rng(0))
    try:
        params.load_state(tensors)
    except ValueError as exc:
        raise CheckpointError(f"tensor table does not match config: {exc}") from exc

    adam = AdamState(int(header["adam_step"]))
    for key, arr in opt.items():
        if key == "step":
            continue
        kind, name = key.split(".", 1)
        if name not in params.params or params.params[name].shape != arr.shape:
            raise CheckpointError(f"optimizer entry {key!r} does not match a parameter")
        (adam.m if kind == "m" else adam.v)[name] = arr.copy()
    plateau = PlateauState(**header["plateau"]) if header.get("plateau") else None
    rng = {k.split(".", 1)[1]: decode_rng_state(v) for k, v in rngs.items()}
    return Checkpoint(cfg, params, header.get("train", {}), int(header["epoch"]), adam, plateau, rng)


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(buf)
