"""Binary and text file formats.

All binary payloads are little-endian float32 behind a small fixed header:

* shot / seismic records: ``"FWI1"``, u32 receivers, u32 time samples,
  u32 channels, then one row-major ``[receiver][time]`` block per channel;
* velocity models: ``"VEL1"``, u32 nz, u32 nx, f32 dx, then ``[nz][nx]``.

Text files (manifests, configs) are ``key = value`` lines; ``#`` starts a
comment.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .wavesim import Grid2D, ShotRecord, VelocityModel

SHOT_MAGIC = b"FWI1"
VEL_MAGIC = b"VEL1"
_SHOT_HEADER = struct.Struct("<4sIII")
_VEL_HEADER = struct.Struct("<4sIIf")


class FormatError(ValueError):
    pass


def write_channels(path, data: np.ndarray) -> None:
    """Write a ``(channels, receivers, time)`` array as an FWI1 file."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 3:
        raise FormatError(f"expected (channels, receivers, time), got shape {data.shape}")
    c, r, t = data.shape
    with open(path, "wb") as f:
        f.write(_SHOT_HEADER.pack(SHOT_MAGIC, r, t, c))
        f.write(np.ascontiguousarray(data).tobytes())


def read_channels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _SHOT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, r, t, c = _SHOT_HEADER.unpack_from(raw)
    if magic != SHOT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = np.frombuffer(raw, dtype="<f4", offset=_SHOT_HEADER.size)
    if body.size != r * t * c:
        raise FormatError(f"{path}: expected {r * t * c} samples, found {body.size}")
    return body.reshape(c, r, t).astype(np.float32)


def write_shot_record(path, record: ShotRecord) -> None:
    write_channels(path, record.stacked())


def read_shot_record(path, dt_out: float = 1e-3) -> ShotRecord:
    data = read_channels(path)
    if data.shape[0] != 2:
        raise FormatError(f"{path}: a shot record has 2 channels, found {data.shape[0]}")
    return ShotRecord(data[0].astype(np.float64), data[1].astype(np.float64), dt_out)


def write_seismic(path, seismic: np.ndarray) -> None:
    """Write a ``(receivers, time, channels)`` network input tensor."""
    write_channels(path, np.transpose(seismic, (2, 0, 1)))


def read_seismic(path) -> np.ndarray:
    return np.transpose(read_channels(path), (1, 2, 0)).copy()


def write_velocity(path, model: VelocityModel) -> None:
    g = model.grid
    with open(path, "wb") as f:
        f.write(_VEL_HEADER.pack(VEL_MAGIC, g.nz, g.nx, g.dx))
        f.write(model.v.astype("<f4").tobytes())


def read_velocity(path, pml_width: int = 10) -> VelocityModel:
    raw = Path(path).read_bytes()
    if len(raw) < _VEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, nz, nx, dx = _VEL_HEADER.unpack_from(raw)
    if magic != VEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = np.frombuffer(raw, dtype="<f4", offset=_VEL_HEADER.size)
    if body.size != nz * nx:
        raise FormatError(f"{path}: expected {nz * nx} values, found {body.size}")
    return VelocityModel(Grid2D(nz, nx, float(dx), pml_width), body.reshape(nz, nx).astype(np.float64))


def dump_kv(pairs: dict, header: str = "") -> str:
    lines = [f"# {header}"] if header else []
    for key, value in pairs.items():
        lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise FormatError(f"not a boolean: {text!r}")
