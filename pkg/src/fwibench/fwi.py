"""Adjoint-state full-waveform inversion.

The objective is ``0.5 * sum_shots ||f(m) - d||^2 + lambda * R(m)`` with
``R`` either ``||m||^2`` or a smoothed total variation. Descent uses a
wave-energy preconditioned gradient, a projected backtracking Armijo
search and clamping to velocity bounds.

The TV term is a smoothed isotropic stand-in for the modified TV schemes
used in the literature; it is differentiable and has an analytic gradient.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .wavesim import (Acquisition, Propagator, ShotRecord, SourceWavelet, VelocityModel,
                      backpropagate, run_forward, stable_dt)

REGULARIZERS = ("l2", "tv")
PRECONDITION_DELTA = 1e-3
REPORT_FIELDS = ("iter", "misfit", "grad_norm", "step", "mae")


class InversionError(ValueError):
    pass


@dataclass(frozen=True)
class InversionConfig:
    max_iters: int = 30
    lambda_reg: float = 0.0
    regularizer: str = "tv"
    tv_epsilon: float = 1.0
    precondition: bool = True
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 12
    v_bounds: tuple[float, float] = (1500.0, 4500.0)
    max_update: float = 100.0  # m/s, size of the first trial step
    grad_tol: float = 1e-8
    source_mute: int = 3  # cells around each source excluded from the update
    bb_steps: bool = True  # first trial step from the last accepted move (Barzilai-Borwein)
    max_bb_update: float = 500.0  # m/s cap on that first trial
    dt: float | None = None

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise InversionError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.lambda_reg < 0 or self.tv_epsilon < 0:
            raise InversionError("lambda_reg and tv_epsilon must be non-negative")
        if not 0 < self.v_bounds[0] < self.v_bounds[1]:
            raise InversionError(f"velocity bounds must be ordered and positive, got {self.v_bounds}")
        if self.max_iters < 0 or self.max_backtracks < 0 or self.source_mute < 0:
            raise InversionError("iteration counts must be non-negative")
        if not 0 < self.shrink < 1 or not 0 < self.c1 < 1:
            raise InversionError("need 0 < shrink < 1 and 0 < c1 < 1")

    @property
    def pml_velocity(self) -> float:
        return float(self.v_bounds[1])

    def time_step(self, model: VelocityModel, acq: Acquisition) -> float:
        """Internal step fixed by the upper velocity bound, so it never changes between iterates."""
        if self.dt is not None:
            return float(self.dt)
        fastest = VelocityModel(model.grid, np.full(model.grid.shape, float(self.v_bounds[1])))
        return min(stable_dt(fastest, 0.9), acq.dt_out)


@dataclass
class InversionState:
    model: VelocityModel
    misfit_history: list[float] = field(default_factory=list)
    gradient: np.ndarray | None = None
    step: float = 0.0
    stagnated: bool = False
    report: list[dict] = field(default_factory=list)


# regularizers

def _forward_diffs(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gz = np.zeros_like(m)
    gx = np.zeros_like(m)
    gz[:-1] = m[1:] - m[:-1]
    gx[:, :-1] = m[:, 1:] - m[:, :-1]
    return gz, gx


def total_variation(m: np.ndarray, eps: float = 0.0) -> float:
    gz, gx = _forward_diffs(m)
    return float(np.sum(np.sqrt(gz ** 2 + gx ** 2 + eps ** 2)))


def total_variation_gradient(m: np.ndarray, eps: float) -> np.ndarray:
    gz, gx = _forward_diffs(m)
    mag = np.sqrt(gz ** 2 + gx ** 2 + eps ** 2)
    mag = np.where(mag > 0, mag, 1.0)
    qz, qx = gz / mag, gx / mag
    out = np.zeros_like(m)
    # transpose of the forward difference operators
    out[:-1] -= qz[:-1]
    out[1:] += qz[:-1]
    out[:, :-1] -= qx[:, :-1]
    out[:, 1:] += qx[:, :-1]
    return out


def regularization(m: np.ndarray, cfg: InversionConfig) -> float:
    if cfg.regularizer == "l2":
        return float(np.sum(m ** 2))
    return total_variation(m, cfg.tv_epsilon)


def regularization_gradient(m: np.ndarray, cfg: InversionConfig) -> np.ndarray:
    if cfg.regularizer == "l2":
        return 2.0 * m
    return total_variation_gradient(m, cfg.tv_epsilon)


# modelling

def _check_shots(observed, acq: Acquisition) -> None:
    if len(observed) != acq.n_shots:
        raise InversionError(f"{len(observed)} observed shots for {acq.n_shots} sources")


def simulate_observed(model: VelocityModel, acq: Acquisition, wavelet: SourceWavelet,
                      cfg: InversionConfig) -> list[ShotRecord]:
    """All shots modelled exactly as the inversion models them."""
    prop = Propagator(model, cfg.time_step(model, acq), cfg.pml_velocity)
    return [run_forward(prop, wavelet, src, acq)[0] for src in acq.source_positions]


def data_misfit(model, observed, acq, wavelet, cfg) -> float:
    _check_shots(observed, acq)
    prop = Propagator(model, cfg.time_step(model, acq), cfg.pml_velocity)
    total = 0.0
    for src, d in zip(acq.source_positions, observed):
        rec, _ = run_forward(prop, wavelet, src, acq)
        total += 0.5 * (rec - d).sq_norm()
    return total


def misfit(model: VelocityModel, observed, acq: Acquisition, wavelet: SourceWavelet,
           cfg: InversionConfig) -> float:
    value = data_misfit(model, observed, acq, wavelet, cfg)
    if cfg.lambda_reg:
        value += cfg.lambda_reg * regularization(model.v, cfg)
    return value


@dataclass
class GradientResult:
    data_misfit: float
    gradient: np.ndarray  # data term only, w.r.t. velocity
    source_energy: np.ndarray  # sum over shots and steps of p^2, padding folded onto edges
    backprop_scale: float = 0.0  # ||J^T f(m)||, set on request


def gradient_adjoint(model: VelocityModel, observed, acq: Acquisition, wavelet: SourceWavelet,
                     cfg: InversionConfig, with_scale: bool = False) -> GradientResult:
    """Data-term gradient by one forward and one adjoint run per shot.

    The adjoint run correlates the time-reversed residual field with the
    stored forward divergence, which yields the gradient with respect to the
    bulk modulus ``rho v^2``; the chain rule maps it to velocity.
    """
    _check_shots(observed, acq)
    prop = Propagator(model, cfg.time_step(model, acq), cfg.pml_velocity)
    grad_kappa = np.zeros(model.grid.padded_shape)
    scale_kappa = np.zeros_like(grad_kappa) if with_scale else None
    energy = np.zeros(model.grid.padded_shape)
    total = 0.0
    for src, d in zip(acq.source_positions, observed):
        rec, hist = run_forward(prop, wavelet, src, acq, save=True)
        res = rec - d
        total += 0.5 * res.sq_norm()
        grad_kappa += backpropagate(prop, hist, res, acq)
        if with_scale:
            scale_kappa += backpropagate(prop, hist, rec, acq)
        energy += hist.energy
        del hist
    dkappa_dv = 2.0 * prop.kappa / prop.v_pad
    grad = prop.fold_pad(grad_kappa * dkappa_dv)
    # edge cells also control the padding, so they collect its energy too
    out = GradientResult(total, grad, prop.fold_pad(energy))
    if with_scale:
        out.backprop_scale = float(np.linalg.norm(prop.fold_pad(scale_kappa * dkappa_dv)))
    return out


def precondition(gradient: np.ndarray, source_energy: np.ndarray, delta: float = PRECONDITION_DELTA) -> np.ndarray:
    """Divide by the illuminating wave energy, stabilised by ``delta * max``."""
    if source_energy.shape != gradient.shape:
        raise InversionError(f"energy shape {source_energy.shape} does not match gradient {gradient.shape}")
    if np.any(source_energy < 0):
        raise InversionError("source energy must be non-negative")
    peak = float(source_energy.max())
    if peak <= 0:
        raise InversionError("source energy is zero everywhere")
    return gradient / (source_energy + delta * peak)


# driver

def source_mask(shape: tuple[int, int], acq: Acquisition, radius: int) -> np.ndarray:
    """1 everywhere except within ``radius`` cells (Chebyshev) of a source."""
    mask = np.ones(shape)
    if radius == 0:
        return mask
    for iz, ix in acq.source_positions:
        mask[max(0, iz - radius + 1):iz + radius, max(0, ix - radius + 1):ix + radius] = 0.0
    return mask


def balance_lambda(data_value: float, reg_value: float, ratio: float) -> float:
    """Weight that makes the penalty ``ratio`` times the data misfit at the start model."""
    if reg_value <= 0:
        return 0.0
    return ratio * data_value / reg_value


def model_mae(model: VelocityModel, truth: VelocityModel | None) -> float:
    if truth is None:
        return math.nan
    return float(np.mean(np.abs(model.v - truth.v)))


def _bb_step(s: np.ndarray, y: np.ndarray, weight: np.ndarray, fallback: float, cap: float) -> float:
    """``s' W^-1 s / s' y`` in the metric of the diagonal preconditioner ``W``."""
    live = weight > 0
    sy = float(np.sum(s[live] * y[live]))
    if sy <= 0:
        return fallback
    ss = float(np.sum(s[live] ** 2 / weight[live]))
    return min(ss / sy, cap)


def invert(observed, acq: Acquisition, wavelet: SourceWavelet, m0: VelocityModel,
           cfg: InversionConfig, truth: VelocityModel | None = None,
           snapshot=None, log=None) -> tuple[VelocityModel, InversionState]:
    """Preconditioned steepest descent with a projected Armijo line search.

    A trial point ``m + a d`` is clamped to the bounds and accepted when
    ``phi(trial) <= phi(m) + c1 <g, trial - m>``. If no trial passes within
    ``max_backtracks`` halvings the best iterate is returned with
    ``stagnated`` set. ``snapshot(k, model)`` is called after each accepted
    step when given.
    """
    _check_shots(observed, acq)
    lo, hi = cfg.v_bounds
    if m0.v.min() < lo or m0.v.max() > hi:
        raise InversionError(f"initial model leaves the bounds {cfg.v_bounds}")
    state = InversionState(model=m0)
    m = m0
    reference = None
    previous = None
    mask = source_mask(m0.grid.shape, acq, cfg.source_mute)
    for k in range(cfg.max_iters + 1):
        gr = gradient_adjoint(m, observed, acq, wavelet, cfg, with_scale=reference is None)
        if reference is None:
            reference = gr.backprop_scale
        phi = gr.data_misfit
        grad = gr.gradient
        if cfg.lambda_reg:
            phi += cfg.lambda_reg * regularization(m.v, cfg)
            grad = grad + cfg.lambda_reg * regularization_gradient(m.v, cfg)
        gnorm = float(np.linalg.norm(grad))
        state.gradient = grad
        state.misfit_history.append(phi)
        state.report.append(dict(iter=k, misfit=phi, grad_norm=gnorm, step=state.step,
                                 mae=model_mae(m, truth)))
        if log:
            log(f"iter {k}: misfit={phi:.6e} |g|={gnorm:.3e} mae={state.report[-1]['mae']:.2f}")
        if k == cfg.max_iters:
            break
        if gnorm == 0.0 or gnorm <= cfg.grad_tol * reference:
            break

        weight = (precondition(np.ones_like(grad), gr.source_energy) if cfg.precondition
                  else np.ones_like(grad)) * mask
        direction = -weight * grad
        peak = float(np.max(np.abs(direction)))
        if peak == 0.0:
            break
        alpha = cfg.max_update / peak
        if cfg.bb_steps and previous is not None:
            alpha = _bb_step(m.v - previous[0], grad - previous[1], weight, alpha, cfg.max_bb_update / peak)
        accepted = None
        for _ in range(cfg.max_backtracks + 1):
            trial_v = np.clip(m.v + alpha * direction, lo, hi)
            decrease = float(np.sum(grad * (trial_v - m.v)))
            if decrease < 0:
                trial = m.with_values(trial_v)
                value = misfit(trial, observed, acq, wavelet, cfg)
                if value <= phi + cfg.c1 * decrease:
                    accepted = trial
                    break
            alpha *= cfg.shrink
        if accepted is None:
            state.stagnated = True
            break
        previous = (m.v, grad)
        m = accepted
        state.model = m
        state.step = alpha
        if snapshot:
            snapshot(k + 1, m)
    return state.model, state


def write_report(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_FIELDS)
        for r in rows:
            w.writerow([r["iter"]] + [repr(float(r[k])) for k in REPORT_FIELDS[1:]])


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(r[k]) if k == "iter" else float(r[k])) for k in REPORT_FIELDS} for r in rows]


def smooth_model(model: VelocityModel, sigma: float) -> VelocityModel:
    return model.with_values(gaussian_filter(model.v, sigma, mode="nearest"))
