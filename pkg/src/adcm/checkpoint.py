"""Binary checkpoint format.

Little-endian throughout. Layout::

    header   magic "ADCM" | u32 version | u32 header_len | u32 header_crc
             | u8 schedule | u8 precond | u16 reserved
             | f64 sigma_data, t_min, t_max
             | u64 step | u64 grid_built_at | f64 lambda_used
             | u32 clamped_low, clamped_high, negative_steps
             | u64 optimizer_step | f64 ema_decay
             | u32 n_layers | n_layers * (u32 fan_in, u32 fan_out, u8 act, 3 pad)
             | u32 grid_len
    payload  parameters (W, b per layer, f64) | grid times | first moments
             | second moments | EMA shadow | rng state | u32 payload_crc

``header_crc`` is the CRC-32 of the header with the crc field zeroed.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .discretizer import SegmentationGrid
from .numerics import EmaState, Layer, MlpParams, OptimizerState
from .schedule import NoiseSchedule, Preconditioner

MAGIC = b"ADCM"
VERSION = 1

_SCHEDULES = ("ve", "fm")
_PRECONDS = ("edm", "rf", "identity")
_ACTS = ("tanh", "silu", "identity")

_FIXED = struct.Struct("<4sIII BBH ddd QQd III Qd I")
_LAYER = struct.Struct("<IIB3x")
_GRID_LEN = struct.Struct("<I")
_RNG = struct.Struct("<4Q2Q4QIII4x")
_CRC = struct.Struct("<I")


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointHeaderError(CheckpointError):
    """Header bytes are inconsistent."""


class BadMagicError(CheckpointHeaderError):
    pass


class VersionMismatchError(CheckpointHeaderError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointPayloadError(CheckpointError):
    pass


@dataclass
class TrainingSnapshot:
    """Everything needed to resume training bit-exactly."""

    params: MlpParams
    optimizer: OptimizerState
    ema: EmaState
    grid: SegmentationGrid
    step: int
    rng: np.random.Generator
    schedule: NoiseSchedule
    precond: Preconditioner


def _rng_bytes(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    if st["bit_generator"] != "Philox":
        raise CheckpointError("only Philox generators can be checkpointed")
    return _RNG.pack(
        *[int(v) for v in st["state"]["counter"]],
        *[int(v) for v in st["state"]["key"]],
        *[int(v) for v in st["buffer"]],
        int(st["buffer_pos"]),
        int(st["has_uint32"]),
        int(st["uinteger"]),
    )


def _rng_from_bytes(raw: bytes) -> np.random.Generator:
    vals = _RNG.unpack(raw)
    bg = np.random.Philox(0)
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(vals[0:4], dtype=np.uint64),
            "key": np.array(vals[4:6], dtype=np.uint64),
        },
        "buffer": np.array(vals[6:10], dtype=np.uint64),
        "buffer_pos": vals[10],
        "has_uint32": vals[11],
        "uinteger": vals[12],
    }
    return np.random.Generator(bg)


def encode(snap: TrainingSnapshot) -> bytes:
    params = snap.params
    layers = params.layers
    grid = snap.grid
    fixed = _FIXED.pack(
        MAGIC,
        VERSION,
        0,
        0,
        _SCHEDULES.index(snap.schedule.kind),
        _PRECONDS.index(snap.precond.kind),
        0,
        snap.precond.sigma_data,
        snap.schedule.t_min,
        snap.schedule.t_max,
        snap.step,
        grid.built_at_step,
        grid.lambda_used,
        grid.clamped_low,
        grid.clamped_high,
        grid.negative_steps,
        snap.optimizer.step_count,
        snap.ema.decay,
        len(layers),
    )
    table = b"".join(_LAYER.pack(l.fan_in, l.fan_out, _ACTS.index(l.activation)) for l in layers)
    header = bytearray(fixed + table + _GRID_LEN.pack(grid.times.size))
    struct.pack_into("<I", header, 8, len(header))
    struct.pack_into("<I", header, 12, zlib.crc32(bytes(header)))

    chunks = [a.astype("<f8").tobytes() for a in params.arrays()]
    chunks.append(grid.times.astype("<f8").tobytes())
    chunks += [a.astype("<f8").tobytes() for a in snap.optimizer.first_moment]
    chunks += [a.astype("<f8").tobytes() for a in snap.optimizer.second_moment]
    chunks += [a.astype("<f8").tobytes() for a in snap.ema.shadow.arrays()]
    chunks.append(_rng_bytes(snap.rng))
    payload = b"".join(chunks)
    return bytes(header) + payload + _CRC.pack(zlib.crc32(payload))


def save_checkpoint(path, snap: TrainingSnapshot) -> None:
    """Write atomically: a failed write never leaves a partial file at ``path``."""
    path = Path(path)
    data = encode(snap)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def decode(data: bytes, optimizer_hyper: dict | None = None) -> TrainingSnapshot:
    if len(data) < 16:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes, shorter than the header prefix")
    magic, version, header_len, header_crc = struct.unpack_from("<4sIII", data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    if header_len < _FIXED.size + _GRID_LEN.size:
        raise CheckpointHeaderError(f"implausible header length {header_len}")
    if header_len > len(data):
        raise CheckpointTruncatedError("file ends inside the header")
    header = bytearray(data[:header_len])
    struct.pack_into("<I", header, 12, 0)
    if zlib.crc32(bytes(header)) != header_crc:
        raise CheckpointHeaderError("header checksum mismatch")

    (
        _, _, _, _, sched_tag, precond_tag, _, sigma_data, t_min, t_max,
        step, built_at, lam, c_low, c_high, n_neg, opt_step, ema_decay, n_layers,
    ) = _FIXED.unpack_from(data, 0)
    expected_header = _FIXED.size + n_layers * _LAYER.size + _GRID_LEN.size
    if expected_header != header_len:
        raise CheckpointHeaderError("layer table does not match header length")
    if sched_tag >= len(_SCHEDULES) or precond_tag >= len(_PRECONDS):
        raise CheckpointHeaderError("unknown schedule or preconditioner tag")
    dims = []
    off = _FIXED.size
    for _ in range(n_layers):
        fan_in, fan_out, act = _LAYER.unpack_from(data, off)
        if act >= len(_ACTS):
            raise CheckpointHeaderError(f"unknown activation tag {act}")
        dims.append((fan_in, fan_out, _ACTS[act]))
        off += _LAYER.size
    (grid_len,) = _GRID_LEN.unpack_from(data, off)

    n_params = sum(i * o + o for i, o, _ in dims)
    payload_len = 8 * (4 * n_params + grid_len) + _RNG.size
    expected = header_len + payload_len + _CRC.size
    if len(data) < expected:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise CheckpointPayloadError(f"{len(data) - expected} trailing bytes")
    payload = data[header_len : header_len + payload_len]
    (crc,) = _CRC.unpack_from(data, header_len + payload_len)
    if zlib.crc32(payload) != crc:
        raise CheckpointPayloadError("payload checksum mismatch")

    floats = np.frombuffer(payload, dtype="<f8", count=4 * n_params + grid_len).astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = floats[pos : pos + size].reshape(shape).copy()
        pos += size
        return out

    def take_set():
        return [a for i, o, _ in dims for a in (take((o, i)), take((o,)))]

    arrays = take_set()
    params = MlpParams([Layer(arrays[2 * k], arrays[2 * k + 1], act) for k, (_, _, act) in enumerate(dims)])
    times = take((grid_len,))
    m1, m2, shadow = take_set(), take_set(), take_set()
    rng = _rng_from_bytes(payload[8 * pos :])

    try:
        grid = SegmentationGrid(times, built_at, lam, c_low, c_high, n_neg)
        schedule = NoiseSchedule(_SCHEDULES[sched_tag], t_min, t_max)
        precond = Preconditioner(_PRECONDS[precond_tag], sigma_data)
        ema = EmaState(params.with_arrays(shadow), ema_decay)
    except ValueError as exc:
        raise CheckpointHeaderError(f"inconsistent checkpoint contents: {exc}") from exc
    opt = OptimizerState(m1, m2, opt_step, **(optimizer_hyper or {}))
    return TrainingSnapshot(params, opt, ema, grid, step, rng, schedule, precond)


def load_checkpoint(path, optimizer_hyper: dict | None = None) -> TrainingSnapshot:
    return decode(Path(path).read_bytes(), optimizer_hyper)
