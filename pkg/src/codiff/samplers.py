"""Iterative sampling operators for the design loops.

The joint operator keeps a cloud of (theta, y) pairs marching toward the
joint of belief and predicted outcome at the current design.  The pooled
operator drives a second cloud toward the pooled posterior of the
current outcome atoms.  Both are unadjusted Langevin steps; there is no
Metropolis correction, so small step-size bias is accepted and covered
by test tolerances.  DiGS wraps a noise-then-denoise auxiliary move
around a score target to restore mixing across well-separated modes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as streams_mod
from .models import History, ModelSpec, current_prior_score
from .pooling import DegenerateWeightsError, OutcomeMeasure, pooled_score
from .rng import NoiseStreams

log = logging.getLogger(__name__)


@dataclass
class StepSchedule:
    """Step size gamma(t) = max(floor, gamma0 * decay^t)."""

    gamma0: float = 1e-2
    decay: float = 1.0
    floor: float = 0.0

    def __post_init__(self):
        if self.gamma0 <= 0 or not (0.0 < self.decay <= 1.0) or self.floor < 0:
            raise ValueError("need gamma0 > 0, 0 < decay <= 1, floor >= 0")

    def gamma(self, t: int) -> float:
        return max(self.floor, self.gamma0 * self.decay**t)


@dataclass
class DigsConfig:
    """Knobs of the noise/denoise auxiliary kernel."""

    noise_scale: float = 1.0
    denoise_steps: int = 20
    denoise_step_size: float = 1e-2

    def __post_init__(self):
        if self.noise_scale <= 0 or self.denoise_steps <= 0 or self.denoise_step_size <= 0:
            raise ValueError("DiGS parameters must be positive")


@dataclass
class JointCloud:
    """Particles tracking the joint of belief and predicted outcome."""

    th: np.ndarray  # (N, theta_dim)
    y: np.ndarray  # (N, y_dim)
    stream: int = streams_mod.JOINT_THETA


@dataclass
class ContrastiveCloud:
    """Particles tracking the pooled posterior."""

    th: np.ndarray  # (M, theta_dim)
    stream: int = streams_mod.POOLED


def _guarded_move(old: np.ndarray, new: np.ndarray, what: str) -> np.ndarray:
    """Keep particles whose update went non-finite at their old state."""
    bad = ~np.isfinite(new).all(axis=-1)
    if bad.any():
        log.warning("%s: reset %d particle(s) with non-finite update", what, int(bad.sum()))
        new = np.where(bad[..., None], old, new)
    return new


def joint_langevin_step(
    model: ModelSpec,
    cloud: JointCloud,
    xi: np.ndarray,
    gamma: float,
    streams: NoiseStreams,
    step: int,
    history: History = History(),
    mode: str = "split",
) -> JointCloud:
    """One update of the joint cloud at design xi.

    Default split mode moves theta by one unadjusted Langevin step on the
    current belief and then redraws y exactly from the likelihood at the
    new theta.  Full mode runs simultaneous Langevin on (theta, y) under
    the joint potential instead, for models without exact outcome
    sampling.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    th = cloud.th
    n, d = th.shape
    eps = streams.normal_block(cloud.stream, step, n, d)
    if mode == "split":
        drift = current_prior_score(model, th, history)
        new_th = _guarded_move(th, th + gamma * drift + np.sqrt(2 * gamma) * eps, "joint theta")
        new_y = model.sample_outcome(new_th, xi, streams.generator(streams_mod.JOINT_Y, step))
        new_y = _guarded_move(cloud.y, new_y, "joint outcome")
        return JointCloud(new_th, new_y, cloud.stream)
    if mode == "full":
        y = cloud.y
        drift_th = current_prior_score(model, th, history) + model.grad_theta_log_lik(y, th, xi)
        drift_y = model.grad_y_log_lik(y, th, xi)
        eps_y = streams.normal_block(streams_mod.JOINT_Y, step, n, y.shape[1])
        new_th = _guarded_move(th, th + gamma * drift_th + np.sqrt(2 * gamma) * eps, "joint theta")
        new_y = _guarded_move(y, y + gamma * drift_y + np.sqrt(2 * gamma) * eps_y, "joint outcome")
        return JointCloud(new_th, new_y, cloud.stream)
    raise ValueError(f"unknown joint mode {mode!r}")


def pooled_langevin_step(
    model: ModelSpec,
    cloud: ContrastiveCloud,
    xi: np.ndarray,
    measure: OutcomeMeasure,
    gamma: float,
    streams: NoiseStreams,
    step: int,
    history: History = History(),
) -> ContrastiveCloud:
    """One unadjusted Langevin step on the pooled posterior."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    th = cloud.th
    drift = pooled_score(model, th, measure, xi, history)
    eps = streams.normal_block(cloud.stream, step, *th.shape)
    new_th = _guarded_move(th, th + gamma * drift + np.sqrt(2 * gamma) * eps, "pooled theta")
    return ContrastiveCloud(new_th, cloud.stream)


def digs_sweep(
    x: np.ndarray,
    target_score,
    cfg: DigsConfig,
    streams: NoiseStreams,
    step: int,
) -> np.ndarray:
    """One noise/denoise sweep of the cloud x under a score target.

    Noising draws an auxiliary point x_tilde = x + noise_scale * eps per
    particle; denoising runs Langevin steps, started from x_tilde, on the
    conditional whose score is target_score(x) - (x - x_tilde) /
    noise_scale^2, and returns the denoised particles.
    """
    n, d = np.shape(x)
    base = step * (cfg.denoise_steps + 1)
    x_tilde = x + cfg.noise_scale * streams.normal_block(streams_mod.DIGS, base, n, d)
    cur = x_tilde
    inv_var = 1.0 / cfg.noise_scale**2
    g = cfg.denoise_step_size
    for k in range(cfg.denoise_steps):
        drift = target_score(cur) - (cur - x_tilde) * inv_var
        eps = streams.normal_block(streams_mod.DIGS, base + 1 + k, n, d)
        cur = _guarded_move(cur, cur + g * drift + np.sqrt(2 * g) * eps, "digs denoise")
    return cur


def ess(weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(w^2) of a simplex vector."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
        raise ValueError("weights must lie on the simplex")
    return 1.0 / float(np.sum(w**2))


def systematic_resample(
    weights: np.ndarray, streams: NoiseStreams, step: int, n_out: int | None = None
) -> np.ndarray:
    """Indices of a systematic resample; expected copy count is n_out * w_i."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not np.isfinite(total) or total <= 0 or np.any(w < 0):
        raise DegenerateWeightsError(0)
    w = w / total
    n = len(w) if n_out is None else int(n_out)
    u = streams.uniforms(streams_mod.RESAMPLE, step, 1)[0]
    positions = (u + np.arange(n)) / n
    return np.searchsorted(np.cumsum(w), positions)
