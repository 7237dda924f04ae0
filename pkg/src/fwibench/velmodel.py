"""Procedural layered velocity models with an optional dip-slip fault.

Two families are produced: ``ST`` (straight, tilted interfaces, 100x100)
and ``Curved`` (more layers, cosine-perturbed interfaces, 150x100).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .wavesim import Grid2D, VelocityModel

FAMILY_SHAPES = {"ST": (100, 100), "Curved": (150, 100)}
MAX_ATTEMPTS = 200


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    interface_depths: tuple[float, ...]
    dips: tuple[float, ...]
    velocities: tuple[float, ...]
    amplitudes: tuple[float, ...] = ()
    phases: tuple[float, ...] = ()

    def interface_rows(self, nx: int) -> np.ndarray:
        """(n_interfaces, nx) row position of each interface per column."""
        cols = np.arange(nx, dtype=np.float64)
        rows = np.empty((len(self.interface_depths), nx))
        for i, (d, s) in enumerate(zip(self.interface_depths, self.dips)):
            rows[i] = d + s * cols
            if self.amplitudes:
                rows[i] += self.amplitudes[i] * np.cos(2 * np.pi * cols / nx + self.phases[i])
        return rows


@dataclass(frozen=True)
class FaultSpec:
    """Planar dip-slip fault.

    ``dip`` is the lateral shift of the plane in columns per row of depth.
    The block above the plane (the hanging wall) is moved down by ``throw``
    rows, so a vertical line never meets the layers out of order.
    """

    x_position: int
    dip: float
    throw: int
    extent: tuple[int, int]

    def hanging_side(self, nz: int, nx: int) -> np.ndarray:
        rows = np.arange(nz)[:, None]
        cols = np.arange(nx)[None, :]
        plane = self.x_position + self.dip * rows
        inside = (rows >= self.extent[0]) & (rows < self.extent[1])
        side = cols > plane if self.dip >= 0 else cols < plane
        return side & inside


@dataclass(frozen=True)
class GenConfig:
    family: str = "ST"
    nz: int = 100
    nx: int = 100
    n_layers_range: tuple[int, int] = (2, 4)
    v_min: float = 1500.0
    v_max: float = 4500.0
    dip_range: tuple[float, float] = (-0.3, 0.3)
    thickness_range: tuple[float, float] = (12.0, 40.0)
    curve_amplitude_range: tuple[float, float] = (0.0, 0.0)
    fault_probability: float = 0.5
    throw_range: tuple[int, int] = (3, 10)
    rng_seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILY_SHAPES:
            raise GenerationError(f"unknown family {self.family!r}")
        if (self.nz, self.nx) != FAMILY_SHAPES[self.family]:
            raise GenerationError(f"{self.family} models are {FAMILY_SHAPES[self.family]}, got {(self.nz, self.nx)}")
        for name in ("n_layers_range", "dip_range", "thickness_range", "curve_amplitude_range", "throw_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise GenerationError(f"{name} is empty: {(lo, hi)}")
        if not 0 < self.v_min <= self.v_max:
            raise GenerationError("need 0 < v_min <= v_max")
        if self.n_layers_range[0] < 1 or self.throw_range[0] < 1:
            raise GenerationError("layer counts and throws must be at least 1")
        if not 0 <= self.fault_probability <= 1:
            raise GenerationError("fault_probability must lie in [0, 1]")

    @classmethod
    def st(cls, **kw) -> "GenConfig":
        return cls(**kw)

    @classmethod
    def curved(cls, **kw) -> "GenConfig":
        base = dict(family="Curved", nz=150, nx=100, n_layers_range=(4, 7),
                    dip_range=(-0.15, 0.15), thickness_range=(12.0, 32.0),
                    curve_amplitude_range=(2.0, 12.0))
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_family(cls, family: str, **kw) -> "GenConfig":
        key = {"st": "ST", "curved": "Curved"}.get(family.lower(), family)
        return cls.curved(**kw) if key == "Curved" else cls.st(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def _floats(a) -> tuple[float, ...]:
    return tuple(float(x) for x in a)


def _rng(cfg: GenConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.rng_seed, index])


def _draw_layers(cfg: GenConfig, rng: np.random.Generator) -> LayerSpec:
    n_layers = int(rng.integers(cfg.n_layers_range[0], cfg.n_layers_range[1] + 1))
    t_lo, t_hi = cfg.thickness_range
    if n_layers * t_lo > cfg.nz:
        raise GenerationError(f"{n_layers} layers of at least {t_lo} rows do not fit in {cfg.nz} rows")
    velocities = tuple(float(x) for x in np.sort(rng.uniform(cfg.v_min, cfg.v_max, n_layers)))
    n_if = n_layers - 1
    if n_if == 0:
        return LayerSpec((), (), velocities)

    curved = cfg.family == "Curved"
    for _ in range(MAX_ATTEMPTS):
        thick = rng.uniform(t_lo, t_hi, n_if)
        base_dip = rng.uniform(*cfg.dip_range)
        # keep interfaces inside the image across the full width
        span = abs(base_dip) * (cfg.nx - 1)
        start = thick[0] + (span if base_dip < 0 else 0.0)
        depths = start + np.concatenate([[0.0], np.cumsum(thick[1:])])
        bottom = depths[-1] + max(0.0, base_dip) * (cfg.nx - 1)
        if bottom > cfg.nz - t_lo:
            continue
        if curved:
            dips = np.full(n_if, base_dip)
            gaps = np.concatenate([[thick[0]], thick[1:], [cfg.nz - bottom]])
            bound = np.minimum(gaps[:-1], gaps[1:]) / 2.0 - 0.5
            amps = np.minimum(rng.uniform(*cfg.curve_amplitude_range, n_if), np.maximum(bound, 0.0))
            phases = rng.uniform(0.0, 2 * np.pi, n_if)
            spec = LayerSpec(_floats(depths), _floats(dips), velocities, _floats(amps), _floats(phases))
        else:
            jitter = rng.uniform(-0.05, 0.05, n_if)
            dips = np.clip(base_dip + jitter, *cfg.dip_range)
            spec = LayerSpec(_floats(depths), _floats(dips), velocities)
        rows = spec.interface_rows(cfg.nx)
        if np.all(np.diff(rows, axis=0) >= 1.0) and rows.min() >= 1.0 and rows.max() <= cfg.nz - 1:
            return spec
    raise GenerationError(f"could not place {n_layers} non-crossing layers in {MAX_ATTEMPTS} attempts")


def layer_index_map(spec: LayerSpec, nz: int, nx: int, fault: FaultSpec | None = None) -> np.ndarray:
    """Integer layer id per cell; id k lies below k interfaces."""
    rows = np.arange(nz, dtype=np.float64)[:, None]
    ids = np.zeros((nz, nx), dtype=np.int64)
    for line in spec.interface_rows(nx):
        ids += rows >= line[None, :]
    if fault is not None:
        hang = fault.hanging_side(nz, nx)
        shifted = np.zeros_like(ids)
        shifted[fault.throw:] = ids[:-fault.throw]
        ids = np.where(hang, shifted, ids)
    return ids


def _draw_fault(cfg: GenConfig, rng: np.random.Generator) -> FaultSpec:
    x = int(rng.integers(cfg.nx // 4, (3 * cfg.nx) // 4))
    dip = float(rng.uniform(-0.2, 0.2))
    throw = int(rng.integers(cfg.throw_range[0], cfg.throw_range[1] + 1))
    # shift the plane so it spans the image without leaving it
    lateral = dip * cfg.nz
    x = int(np.clip(x, max(1, -lateral + 1), min(cfg.nx - 2, cfg.nx - 2 - lateral)))
    return FaultSpec(x, dip, throw, (0, cfg.nz))


def gen_model(cfg: GenConfig, index: int, dx: float = 5.0, pml_width: int = 10):
    """Generate model ``index`` of the family described by ``cfg``.

    Returns ``(model, layers, fault)``; ``fault`` is None when no fault was
    drawn. The result depends only on ``(cfg, index)``.
    """
    rng = _rng(cfg, index)
    layers = _draw_layers(cfg, rng)
    fault = _draw_fault(cfg, rng) if rng.random() < cfg.fault_probability else None
    ids = layer_index_map(layers, cfg.nz, cfg.nx, fault)
    v = np.asarray(layers.velocities)[ids]
    return VelocityModel(Grid2D(cfg.nz, cfg.nx, dx, pml_width), v), layers, fault


def vertical_profile(model: VelocityModel, col: int) -> np.ndarray:
    if not 0 <= col < model.grid.nx:
        raise ValueError(f"column {col} outside 0..{model.grid.nx - 1}")
    return model.v[:, col].copy()
