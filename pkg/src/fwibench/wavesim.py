"""2D constant-density acoustic modeling on a staggered grid.

Pressure lives on integer grid points, particle velocities on the half
points between them. Absorbing boundaries are split-field PML with a
quadratic damping profile. The time loop is written as a linear recursion
so that :func:`backpropagate` can apply its exact discrete transpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DENSITY = 1.0
PML_REFLECTION = 1e-5


class InstabilityError(RuntimeError):
    """Raised when a non-finite value appears in the wavefield."""

    def __init__(self, step: int):
        super().__init__(f"non-finite wavefield detected at time step {step}")
        self.step = step


@dataclass(frozen=True)
class Grid2D:
    nz: int
    nx: int
    dx: float = 5.0
    pml_width: int = 10

    def __post_init__(self):
        if self.nz < 8 or self.nx < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.nz}x{self.nx}")
        if not self.dx > 0:
            raise ValueError(f"dx must be positive, got {self.dx}")
        if self.pml_width < 0:
            raise ValueError("pml_width must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nz, self.nx)

    @property
    def padded_shape(self) -> tuple[int, int]:
        n = 2 * self.pml_width
        return (self.nz + n, self.nx + n)


@dataclass(frozen=True)
class VelocityModel:
    grid: Grid2D
    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ValueError(f"velocity shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("velocities must be finite and positive")
        object.__setattr__(self, "v", v)

    @classmethod
    def constant(cls, nz: int, nx: int, value: float, dx: float = 5.0, pml_width: int = 10):
        return cls(Grid2D(nz, nx, dx, pml_width), np.full((nz, nx), float(value)))

    def with_values(self, v: np.ndarray) -> "VelocityModel":
        return VelocityModel(self.grid, v)


@dataclass(frozen=True)
class SourceWavelet:
    samples: np.ndarray
    dt: float
    t0: float = 0.0
    f0: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise ValueError("wavelet samples must be a finite 1-D array")
        object.__setattr__(self, "samples", s)

    def scaled(self, factor: float) -> "SourceWavelet":
        return SourceWavelet(self.samples * factor, self.dt, self.t0, self.f0)

    def at(self, times: np.ndarray) -> np.ndarray:
        """Linearly interpolated amplitudes, zero outside the sampled window."""
        t = np.arange(len(self.samples)) * self.dt
        return np.interp(times, t, self.samples, left=0.0, right=0.0)


def ricker(f0: float, t0: float, dt: float, n: int) -> SourceWavelet:
    """Ricker wavelet with peak frequency ``f0`` delayed by ``t0``."""
    if not all(np.isfinite(x) for x in (f0, t0, dt)):
        raise ValueError("ricker parameters must be finite")
    if f0 <= 0 or dt <= 0 or n < 1:
        raise ValueError("ricker needs f0 > 0, dt > 0 and n >= 1")
    tau = np.arange(n) * dt - t0
    arg = (np.pi * f0 * tau) ** 2
    return SourceWavelet((1.0 - 2.0 * arg) * np.exp(-arg), dt, t0, f0)


@dataclass(frozen=True)
class Acquisition:
    source_positions: tuple[tuple[int, int], ...]
    receiver_positions: tuple[tuple[int, int], ...]
    n_time_out: int = 1000
    dt_out: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "source_positions", tuple(tuple(map(int, p)) for p in self.source_positions))
        object.__setattr__(self, "receiver_positions", tuple(tuple(map(int, p)) for p in self.receiver_positions))
        if self.n_time_out < 1 or not self.dt_out > 0:
            raise ValueError("n_time_out must be >= 1 and dt_out > 0")
        if not self.receiver_positions:
            raise ValueError("at least one receiver is required")

    @classmethod
    def surface(cls, grid: Grid2D, n_receivers: int = 32, n_time_out: int = 1000,
                dt_out: float = 1e-3, depth: int = 1) -> "Acquisition":
        """Three shots at nx/6, nx/2, 5nx/6 and evenly spaced receivers near the top."""
        nx = grid.nx
        src = [(depth, nx // 6), (depth, nx // 2), (depth, (5 * nx) // 6)]
        cols = np.round(np.linspace(0, nx - 1, n_receivers)).astype(int)
        rec = [(depth, int(c)) for c in cols]
        return cls(tuple(src), tuple(rec), n_time_out, dt_out)

    def validate(self, grid: Grid2D) -> None:
        for iz, ix in self.source_positions + self.receiver_positions:
            if not (0 <= iz < grid.nz and 0 <= ix < grid.nx):
                raise ValueError(f"position ({iz}, {ix}) lies outside the {grid.nz}x{grid.nx} interior")

    @property
    def n_receivers(self) -> int:
        return len(self.receiver_positions)

    @property
    def n_shots(self) -> int:
        return len(self.source_positions)


@dataclass
class ShotRecord:
    pressure: np.ndarray
    vz: np.ndarray
    dt_out: float

    def __post_init__(self):
        if self.pressure.shape != self.vz.shape:
            raise ValueError("pressure and vz recordings must share a shape")

    def stacked(self) -> np.ndarray:
        """(2, receivers, time) array of the two recorded channels."""
        return np.stack([self.pressure, self.vz])

    def __sub__(self, other: "ShotRecord") -> "ShotRecord":
        return ShotRecord(self.pressure - other.pressure, self.vz - other.vz, self.dt_out)

    def sq_norm(self) -> float:
        return float(np.sum(self.pressure ** 2) + np.sum(self.vz ** 2))

    def dot(self, other: "ShotRecord") -> float:
        return float(np.sum(self.pressure * other.pressure) + np.sum(self.vz * other.vz))


@dataclass
class WavefieldHistory:
    """What the adjoint needs from a forward run.

    ``sens_x``/``sens_z`` hold, for every step, the damped divergence parts
    that multiply the bulk modulus in the pressure update. ``energy`` is the
    time-summed squared pressure on the padded grid.
    """

    sens_x: np.ndarray
    sens_z: np.ndarray
    energy: np.ndarray
    dt: float
    record_steps: np.ndarray = field(repr=False)


def stable_dt(model: VelocityModel, safety: float = 0.9) -> float:
    if not 0 < safety <= 1:
        raise ValueError("safety must lie in (0, 1]")
    return safety * model.grid.dx / (float(model.v.max()) * np.sqrt(2.0))


def internal_dt(model: VelocityModel, acq: Acquisition) -> float:
    # never coarser than the output sampling, so decimation only drops steps
    return min(stable_dt(model, 0.9), acq.dt_out)


def record_steps(dt: float, acq: Acquisition) -> np.ndarray:
    return np.rint(np.arange(acq.n_time_out) * acq.dt_out / dt).astype(np.int64)


def _pml_profile(n_int: int, width: int, dx: float, v_max: float, offset: float) -> np.ndarray:
    """Quadratic damping at points ``i + offset`` of a padded axis."""
    pos = np.arange(n_int + 2 * width, dtype=np.float64) + offset
    if offset:
        pos = pos[:-1]
    if width == 0:
        return np.zeros_like(pos)
    lo, hi = width, width + n_int - 1
    dist = np.maximum(np.maximum(lo - pos, pos - hi), 0.0) / width
    d0 = 3.0 * v_max * np.log(1.0 / PML_REFLECTION) / (2.0 * width * dx)
    return d0 * dist ** 2


class Propagator:
    """Fixed-model stepping machinery shared by the forward and adjoint loops."""

    def __init__(self, model: VelocityModel, dt: float, pml_velocity: float | None = None):
        g = model.grid
        self.grid, self.dt, self.dx = g, float(dt), float(g.dx)
        n = g.pml_width
        self.v_pad = np.pad(model.v, n, mode="edge")
        self.kappa = DENSITY * self.v_pad ** 2
        # damping strength must not depend on the model when differentiating
        v_max = float(model.v.max()) if pml_velocity is None else float(pml_velocity)

        def coeffs(d):
            h = 0.5 * d * self.dt
            return (1.0 - h) / (1.0 + h), 1.0 / (1.0 + h)

        dz_c = _pml_profile(g.nz, n, g.dx, v_max, 0.0)[:, None]
        dx_c = _pml_profile(g.nx, n, g.dx, v_max, 0.0)[None, :]
        dz_h = _pml_profile(g.nz, n, g.dx, v_max, 0.5)[:, None]
        dx_h = _pml_profile(g.nx, n, g.dx, v_max, 0.5)[None, :]
        NZ, NX = g.padded_shape
        self.ax, self.bx = (np.broadcast_to(c, (NZ, NX)).copy() for c in coeffs(dx_c))
        self.az, self.bz = (np.broadcast_to(c, (NZ, NX)).copy() for c in coeffs(dz_c))
        ax_h, bx_h = coeffs(dx_h)
        az_h, bz_h = coeffs(dz_h)
        self.ax_h = np.broadcast_to(ax_h, (NZ, NX - 1)).copy()
        self.az_h = np.broadcast_to(az_h, (NZ - 1, NX)).copy()
        c = self.dt / (DENSITY * self.dx)
        self.cx_h = np.broadcast_to(bx_h * c, (NZ, NX - 1)).copy()
        self.cz_h = np.broadcast_to(bz_h * c, (NZ - 1, NX)).copy()
        self.kdt = self.kappa * self.dt

    def pad_index(self, pos: tuple[int, int]) -> tuple[int, int]:
        n = self.grid.pml_width
        return pos[0] + n, pos[1] + n

    def fold_pad(self, g: np.ndarray) -> np.ndarray:
        """Transpose of edge padding: sum padded cells back onto the edge cells."""
        n = self.grid.pml_width
        if n == 0:
            return g.copy()
        g = g.copy()
        g[n] += g[:n].sum(axis=0)
        g[-n - 1] += g[-n:].sum(axis=0)
        g = g[n:-n]
        g[:, n] += g[:, :n].sum(axis=1)
        g[:, -n - 1] += g[:, -n:].sum(axis=1)
        return g[:, n:-n]


def _div_x(vx: np.ndarray, out: np.ndarray) -> np.ndarray:
    out[:, :-1] = vx
    out[:, -1] = 0.0
    out[:, 1:] -= vx
    return out


def _div_z(vz: np.ndarray, out: np.ndarray) -> np.ndarray:
    out[:-1] = vz
    out[-1] = 0.0
    out[1:] -= vz
    return out


def _vz_taps(prop: Propagator, receivers) -> tuple[np.ndarray, np.ndarray]:
    # vz sits half a cell below each pressure point; average the two neighbours
    NZ = prop.grid.padded_shape[0]
    rows, cols = [], []
    for pos in receivers:
        r, c = prop.pad_index(pos)
        rows.append((r - 1 if r >= 1 else 0, r if r < NZ - 1 else NZ - 2))
        cols.append(c)
    rows = np.array(rows)
    return rows, np.array(cols)


@np.errstate(over="ignore", invalid="ignore")  # blow-up is reported as InstabilityError
def run_forward(prop: Propagator, wavelet: SourceWavelet, source: tuple[int, int],
                acq: Acquisition, save: bool = False):
    g = prop.grid
    NZ, NX = g.padded_shape
    dt, dx = prop.dt, prop.dx
    steps = record_steps(dt, acq)
    nsteps = int(steps[-1])
    rec_at = np.full(nsteps + 1, -1, dtype=np.int64)
    rec_at[steps] = np.arange(len(steps))

    q = 0.5 * wavelet.at(np.arange(nsteps) * dt) * dt / dx ** 2
    sz_, sx_ = prop.pad_index(source)
    rz = np.array([prop.pad_index(p)[0] for p in acq.receiver_positions])
    rx = np.array([prop.pad_index(p)[1] for p in acq.receiver_positions])
    vrows, vcols = _vz_taps(prop, acq.receiver_positions)

    px = np.zeros((NZ, NX)); pz = np.zeros((NZ, NX))
    vx = np.zeros((NZ, NX - 1)); vz = np.zeros((NZ - 1, NX))
    dvx = np.zeros((NZ, NX)); dvz = np.zeros((NZ, NX))
    out_p = np.zeros((acq.n_receivers, acq.n_time_out))
    out_vz = np.zeros_like(out_p)
    if save:
        hist_x = np.empty((nsteps, NZ, NX))
        hist_z = np.empty((nsteps, NZ, NX))
        energy = np.zeros((NZ, NX))

    for n in range(nsteps):
        p = px + pz
        vx *= prop.ax_h
        vx -= prop.cx_h * np.diff(p, axis=1)
        vz *= prop.az_h
        vz -= prop.cz_h * np.diff(p, axis=0)
        sx = _div_x(vx, dvx)
        sx *= prop.bx / dx
        sz = _div_z(vz, dvz)
        sz *= prop.bz / dx
        px *= prop.ax
        px -= prop.kdt * sx
        pz *= prop.az
        pz -= prop.kdt * sz
        px[sz_, sx_] += q[n]
        pz[sz_, sx_] += q[n]
        if save:
            hist_x[n] = sx
            hist_z[n] = sz
            energy += (px + pz) ** 2
        k = rec_at[n + 1]
        if k >= 0:
            out_p[:, k] = px[rz, rx] + pz[rz, rx]
            out_vz[:, k] = 0.5 * (vz[vrows[:, 0], vcols] + vz[vrows[:, 1], vcols])
        if n % 100 == 99 and not np.isfinite(px[sz_, sx_] + pz.sum() + px.sum()):
            raise InstabilityError(n + 1)
    if not (np.all(np.isfinite(px)) and np.all(np.isfinite(pz))):
        raise InstabilityError(nsteps)

    record = ShotRecord(out_p, out_vz, acq.dt_out)
    if not save:
        return record, None
    return record, WavefieldHistory(hist_x, hist_z, energy, dt, steps)


def backpropagate(prop: Propagator, history: WavefieldHistory, residual: ShotRecord,
                  acq: Acquisition) -> np.ndarray:
    """Transpose of the linearised shot map applied to a data residual.

    Returns the gradient with respect to the bulk modulus on the padded grid,
    i.e. the zero-lag correlation of the time-reversed residual field with
    the stored forward divergence, summed over steps.
    """
    NZ, NX = prop.grid.padded_shape
    dx = prop.dx
    steps = history.record_steps
    nsteps = history.sens_x.shape[0]
    rec_at = np.full(nsteps + 1, -1, dtype=np.int64)
    rec_at[steps] = np.arange(len(steps))
    rz = np.array([prop.pad_index(p)[0] for p in acq.receiver_positions])
    rx = np.array([prop.pad_index(p)[1] for p in acq.receiver_positions])
    vrows, vcols = _vz_taps(prop, acq.receiver_positions)
    gp = residual.pressure
    gv = 0.5 * residual.vz

    apx = np.zeros((NZ, NX)); apz = np.zeros((NZ, NX))
    avx = np.zeros((NZ, NX - 1)); avz = np.zeros((NZ - 1, NX))
    buf_x = np.zeros((NZ, NX)); buf_z = np.zeros((NZ, NX))
    grad = np.zeros((NZ, NX))
    kx = prop.kdt * prop.bx / dx
    kz = prop.kdt * prop.bz / dx

    for n in range(nsteps - 1, -1, -1):
        k = rec_at[n + 1]
        if k >= 0:
            np.add.at(apx, (rz, rx), gp[:, k])
            np.add.at(apz, (rz, rx), gp[:, k])
            np.add.at(avz, (vrows[:, 0], vcols), gv[:, k])
            np.add.at(avz, (vrows[:, 1], vcols), gv[:, k])
        grad -= history.sens_x[n] * apx
        grad -= history.sens_z[n] * apz
        avx += np.diff(kx * apx, axis=1)
        avz += np.diff(kz * apz, axis=0)
        apx *= prop.ax
        apz *= prop.az
        ap = _div_x(prop.cx_h * avx, buf_x) + _div_z(prop.cz_h * avz, buf_z)
        apx += ap
        apz += ap
        avx *= prop.ax_h
        avz *= prop.az_h
    grad *= prop.dt
    if not np.all(np.isfinite(grad)):
        raise InstabilityError(0)
    return grad


def simulate_shot(model: VelocityModel, acq: Acquisition, shot_index: int,
                  wavelet: SourceWavelet, save_wavefield: bool = False,
                  dt: float | None = None, pml_velocity: float | None = None):
    """Model one common-shot gather.

    Returns a :class:`ShotRecord`, or ``(record, history)`` when
    ``save_wavefield`` is set. ``dt`` overrides the internal step; by default
    it is the CFL step at safety 0.9, capped at the output sampling.
    ``pml_velocity`` fixes the velocity used to scale the PML damping
    (default: the model maximum).
    """
    acq.validate(model.grid)
    if dt is None:
        dt = internal_dt(model, acq)
    prop = Propagator(model, dt, pml_velocity)
    record, history = run_forward(prop, wavelet, acq.source_positions[shot_index], acq, save_wavefield)
    return (record, history) if save_wavefield else record


def residual_energy(record: ShotRecord) -> float:
    """Sum of squared samples over the trailing 20 % of the time axis."""
    nt = record.pressure.shape[1]
    start = nt - max(1, int(round(0.2 * nt)))
    return float(np.sum(record.pressure[:, start:] ** 2) + np.sum(record.vz[:, start:] ** 2))
