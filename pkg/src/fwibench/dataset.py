"""Synthetic (seismic, velocity) training pairs and their on-disk shards.

A sample's seismic tensor is ``(32 receivers, 1000 samples, 6 channels)``
with channels ``(2s, 2s+1)`` holding pressure and vertical particle velocity
of shot ``s``. Seismic values are divided by one global scale per recorded
field and clamped to [-1, 1]; labels map ``[v_min, v_max]`` linearly onto
[-1, 1].
"""

from __future__ import annotations

import os
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import formats
from .velmodel import GenConfig, gen_model
from .wavesim import (Acquisition, InstabilityError, SourceWavelet, VelocityModel,
                      ricker, simulate_shot)

N_SHOTS = 3
N_RECEIVERS = 32
N_TIME = 1000
N_CHANNELS = 2 * N_SHOTS
CALIBRATION_SAMPLES = 64
CALIBRATION_PERCENTILE = 99.9
SHARD_SIZE = 64
DESK_SPLITS = (600, 64, 64)

_SAMPLE_HEADER = struct.Struct("<4sIIIIIIff")
_SAMPLE_MAGIC = b"SMP1"


class SampleError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"sample {index}: {cause}")
        self.index = index


class CorruptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Normalization:
    p_scale: float
    vz_scale: float
    v_min: float
    v_max: float

    def label(self, v: np.ndarray) -> np.ndarray:
        return 2.0 * (v - self.v_min) / (self.v_max - self.v_min) - 1.0

    def velocity(self, label: np.ndarray) -> np.ndarray:
        return (np.asarray(label, dtype=np.float64) + 1.0) * 0.5 * (self.v_max - self.v_min) + self.v_min

    def seismic(self, raw: np.ndarray) -> np.ndarray:
        scale = np.tile([self.p_scale, self.vz_scale], N_SHOTS)
        return np.clip(raw / scale, -1.0, 1.0)


@dataclass
class Sample:
    seismic: np.ndarray
    label: np.ndarray
    family: str
    index: int
    v_min: float
    v_max: float

    def __post_init__(self):
        if self.seismic.shape != (N_RECEIVERS, N_TIME, N_CHANNELS):
            raise ValueError(f"seismic must be {(N_RECEIVERS, N_TIME, N_CHANNELS)}, got {self.seismic.shape}")


def default_acquisition(grid) -> Acquisition:
    return Acquisition.surface(grid, N_RECEIVERS, N_TIME, 1e-3)


def default_wavelet() -> SourceWavelet:
    # sampled finely so the solver's interpolation onto its own step is accurate
    return ricker(50.0, 0.02, 1e-4, 2000)


def simulate_gather(model: VelocityModel, acq: Acquisition, wavelet: SourceWavelet) -> np.ndarray:
    """Raw ``(receivers, time, 6)`` recordings of all shots."""
    if acq.n_shots != N_SHOTS or acq.n_receivers != N_RECEIVERS or acq.n_time_out != N_TIME:
        raise ValueError(f"acquisition must have {N_SHOTS} shots, {N_RECEIVERS} receivers and {N_TIME} samples")
    out = np.empty((N_RECEIVERS, N_TIME, N_CHANNELS))
    for s in range(N_SHOTS):
        rec = simulate_shot(model, acq, s, wavelet)
        out[:, :, 2 * s] = rec.pressure
        out[:, :, 2 * s + 1] = rec.vz
    return out


def build_sample(model: VelocityModel, acq: Acquisition, wavelet: SourceWavelet,
                 norm: Normalization, family: str = "", index: int = 0) -> Sample:
    try:
        raw = simulate_gather(model, acq, wavelet)
    except InstabilityError as exc:
        raise SampleError(index, exc) from exc
    return _make_sample(raw, model, norm, family, index)


def _make_sample(raw, model, norm, family, index) -> Sample:
    return Sample(norm.seismic(raw).astype(np.float32), norm.label(model.v).astype(np.float32),
                  family, index, norm.v_min, norm.v_max)


def calibrate(raws) -> tuple[float, float]:
    """Per-field 99.9th percentile of absolute amplitude over raw gathers."""
    stack = np.stack(list(raws))
    p = np.abs(stack[..., 0::2])
    vz = np.abs(stack[..., 1::2])
    p_scale = float(np.percentile(p, CALIBRATION_PERCENTILE))
    vz_scale = float(np.percentile(vz, CALIBRATION_PERCENTILE))
    if not (p_scale > 0 and vz_scale > 0):
        raise ValueError("calibration pass produced a zero amplitude scale")
    return p_scale, vz_scale


@dataclass
class DatasetManifest:
    n_total: int
    n_train: int
    n_val: int
    n_test: int
    gen_config: GenConfig
    acquisition: Acquisition
    wavelet_f0: float
    wavelet_t0: float
    normalization: Normalization
    shards: list[dict] = field(default_factory=list)
    splits: dict[str, list[int]] = field(default_factory=dict)
    root: Path | None = None

    @property
    def family(self) -> str:
        return self.gen_config.family

    @property
    def label_shape(self) -> tuple[int, int]:
        return (self.gen_config.nz, self.gen_config.nx)

    def to_text(self) -> str:
        pairs = {"format": 1, "n_total": self.n_total, "n_train": self.n_train,
                 "n_val": self.n_val, "n_test": self.n_test}
        for k, v in self.gen_config.to_dict().items():
            pairs[f"gen.{k}"] = v
        acq = self.acquisition
        pairs["acq.sources"] = ";".join(f"{z}:{x}" for z, x in acq.source_positions)
        pairs["acq.receivers"] = ";".join(f"{z}:{x}" for z, x in acq.receiver_positions)
        pairs["acq.n_time_out"] = acq.n_time_out
        pairs["acq.dt_out"] = float(acq.dt_out)
        pairs["wavelet.f0"] = float(self.wavelet_f0)
        pairs["wavelet.t0"] = float(self.wavelet_t0)
        norm = self.normalization
        pairs.update({"norm.p_scale": norm.p_scale, "norm.vz_scale": norm.vz_scale,
                      "norm.v_min": float(norm.v_min), "norm.v_max": float(norm.v_max)})
        pairs["shards"] = len(self.shards)
        for i, sh in enumerate(self.shards):
            pairs[f"shard.{i}.path"] = sh["path"]
            pairs[f"shard.{i}.crc32"] = sh["crc32"]
            pairs[f"shard.{i}.indices"] = sh["indices"]
        for name in ("train", "val", "test"):
            pairs[f"split.{name}"] = self.splits.get(name, [])
        return formats.dump_kv(pairs, "fwibench dataset manifest")

    @classmethod
    def from_text(cls, text: str, root=None) -> "DatasetManifest":
        kv = formats.parse_kv(text)
        gen = {}
        for f in fields(GenConfig):
            raw = kv[f"gen.{f.name}"]
            if f.name == "family":
                gen[f.name] = raw
            elif f.name in ("nz", "nx", "rng_seed"):
                gen[f.name] = int(raw)
            elif f.name in ("n_layers_range", "throw_range"):
                gen[f.name] = tuple(formats.parse_ints(raw))
            elif f.name.endswith("_range"):
                gen[f.name] = tuple(formats.parse_floats(raw))
            else:
                gen[f.name] = float(raw)

        def positions(s):
            return tuple(tuple(int(a) for a in p.split(":")) for p in s.split(";") if p)

        acq = Acquisition(positions(kv["acq.sources"]), positions(kv["acq.receivers"]),
                          int(kv["acq.n_time_out"]), float(kv["acq.dt_out"]))
        norm = Normalization(float(kv["norm.p_scale"]), float(kv["norm.vz_scale"]),
                             float(kv["norm.v_min"]), float(kv["norm.v_max"]))
        shards = [{"path": kv[f"shard.{i}.path"], "crc32": int(kv[f"shard.{i}.crc32"]),
                   "indices": formats.parse_ints(kv[f"shard.{i}.indices"])}
                  for i in range(int(kv["shards"]))]
        splits = {name: formats.parse_ints(kv[f"split.{name}"]) for name in ("train", "val", "test")}
        return cls(int(kv["n_total"]), int(kv["n_train"]), int(kv["n_val"]), int(kv["n_test"]),
                   GenConfig(**gen), acq, float(kv["wavelet.f0"]), float(kv["wavelet.t0"]),
                   norm, shards, splits, Path(root) if root is not None else None)

    def wavelet(self) -> SourceWavelet:
        return ricker(self.wavelet_f0, self.wavelet_t0, 1e-4, 2000)


MANIFEST_NAME = "manifest.txt"


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return DatasetManifest.from_text(path.read_text(), root=path.parent)


def _sample_bytes(sample: Sample) -> bytes:
    nz, nx = sample.label.shape
    head = _SAMPLE_HEADER.pack(_SAMPLE_MAGIC, sample.index, nz, nx, N_RECEIVERS, N_TIME,
                               N_CHANNELS, sample.v_min, sample.v_max)
    return head + sample.seismic.astype("<f4").tobytes() + sample.label.astype("<f4").tobytes()


def _record_size(nz: int, nx: int) -> int:
    return _SAMPLE_HEADER.size + 4 * (N_RECEIVERS * N_TIME * N_CHANNELS + nz * nx)


def _parse_sample(buf: bytes, family: str) -> Sample:
    magic, index, nz, nx, r, t, c, vmin, vmax = _SAMPLE_HEADER.unpack_from(buf)
    if magic != _SAMPLE_MAGIC or (r, t, c) != (N_RECEIVERS, N_TIME, N_CHANNELS):
        raise CorruptionError("malformed sample header")
    off = _SAMPLE_HEADER.size
    n_seis = r * t * c
    seismic = np.frombuffer(buf, "<f4", n_seis, off).reshape(r, t, c).astype(np.float32)
    label = np.frombuffer(buf, "<f4", nz * nx, off + 4 * n_seis).reshape(nz, nx).astype(np.float32)
    return Sample(seismic, label, family, index, vmin, vmax)


def _raw_gather(args):
    cfg, index, acq, wavelet = args
    model = gen_model(cfg, index)[0]
    try:
        return model, simulate_gather(model, acq, wavelet)
    except InstabilityError as exc:
        raise SampleError(index, exc) from exc


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FWI_THREADS", "1")))
    except ValueError:
        return 1


def build_dataset(cfg: GenConfig, n: int, splits: tuple[int, int, int], out_dir,
                  shard_size: int = SHARD_SIZE) -> DatasetManifest:
    """Generate ``n`` samples, write shards and a manifest into ``out_dir``."""
    n_train, n_val, n_test = (int(s) for s in splits)
    if min(splits) < 0 or n_train + n_val + n_test != n:
        raise ValueError(f"splits {splits} must be non-negative and sum to n={n}")
    if n < 1:
        raise ValueError("need at least one sample")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = gen_model(cfg, 0)[0].grid
    acq = default_acquisition(grid)
    wavelet = default_wavelet()

    jobs = [(cfg, i, acq, wavelet) for i in range(n)]
    workers = _worker_count()
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    results = pool.map(_raw_gather, jobs) if pool else map(_raw_gather, jobs)

    n_cal = min(CALIBRATION_SAMPLES, n)
    pending = [next(results) for _ in range(n_cal)]
    p_scale, vz_scale = calibrate(raw for _, raw in pending)
    norm = Normalization(p_scale, vz_scale, cfg.v_min, cfg.v_max)

    def samples():
        for i, (model, raw) in enumerate(pending):
            yield _make_sample(raw, model, norm, cfg.family, i)
        pending.clear()
        for i, (model, raw) in enumerate(results, start=n_cal):
            yield _make_sample(raw, model, norm, cfg.family, i)

    shards = []
    stream = samples()
    for start in range(0, n, shard_size):
        idx = list(range(start, min(n, start + shard_size)))
        name = f"shard_{len(shards):04d}.bin"
        crc = 0
        with open(out / name, "wb") as f:
            for _ in idx:
                blob = _sample_bytes(next(stream))
                crc = zlib.crc32(blob, crc)
                f.write(blob)
        shards.append({"path": name, "crc32": crc, "indices": idx})
    if pool:
        pool.shutdown()

    order = np.random.default_rng([cfg.rng_seed, 1, 0]).permutation(n)
    split_map = {"train": sorted(order[:n_train].tolist()),
                 "val": sorted(order[n_train:n_train + n_val].tolist()),
                 "test": sorted(order[n_train + n_val:].tolist())}
    manifest = DatasetManifest(n, n_train, n_val, n_test, cfg, acq, wavelet.f0, wavelet.t0,
                               norm, shards, split_map, out)
    (out / MANIFEST_NAME).write_text(manifest.to_text())
    return manifest


class _ShardReader:
    def __init__(self, manifest: DatasetManifest):
        if manifest.root is None:
            raise ValueError("manifest has no root directory")
        self.manifest = manifest
        self.where = {}
        for s, sh in enumerate(manifest.shards):
            for pos, idx in enumerate(sh["indices"]):
                self.where[idx] = (s, pos)
        self.verified: set[int] = set()
        self.size = _record_size(*manifest.label_shape)

    def read(self, index: int) -> Sample:
        s, pos = self.where[index]
        sh = self.manifest.shards[s]
        path = self.manifest.root / sh["path"]
        if s not in self.verified:
            if zlib.crc32(path.read_bytes()) != sh["crc32"]:
                raise CorruptionError(f"{path}: checksum mismatch")
            self.verified.add(s)
        with open(path, "rb") as f:
            f.seek(pos * self.size)
            buf = f.read(self.size)
        if len(buf) != self.size:
            raise CorruptionError(f"{path}: truncated sample record")
        sample = _parse_sample(buf, self.manifest.family)
        if sample.index != index:
            raise CorruptionError(f"{path}: expected sample {index}, found {sample.index}")
        return sample


_readers: dict[int, _ShardReader] = {}


def _reader(manifest: DatasetManifest) -> _ShardReader:
    key = id(manifest)
    r = _readers.get(key)
    if r is None or r.manifest is not manifest:
        r = _readers[key] = _ShardReader(manifest)
    return r


def load_batch(manifest: DatasetManifest, split: str, batch_indices) -> list[Sample]:
    """Samples at positions ``batch_indices`` within ``split``."""
    members = manifest.splits[split]
    positions = [int(i) for i in batch_indices]
    bad = [i for i in positions if not 0 <= i < len(members)]
    if bad:
        raise IndexError(f"positions {bad} outside split {split!r} of size {len(members)}")
    reader = _reader(manifest)
    return [reader.read(members[i]) for i in positions]


def load_split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Whole split as network arrays: seismic ``(n, 6, 1000, 32)``, labels ``(n, 1, nz, nx)``."""
    samples = load_batch(manifest, split, range(len(manifest.splits[split])))
    nz, nx = manifest.label_shape
    seis = np.empty((len(samples), N_CHANNELS, N_TIME, N_RECEIVERS), dtype=np.float32)
    labels = np.empty((len(samples), 1, nz, nx), dtype=np.float32)
    for i, s in enumerate(samples):
        seis[i] = to_network_layout(s.seismic)
        labels[i, 0] = s.label
    return seis, labels


def to_network_layout(seismic: np.ndarray) -> np.ndarray:
    """(receivers, time, channels) -> (channels, time, receivers)."""
    return np.ascontiguousarray(np.transpose(seismic, (2, 1, 0)))
