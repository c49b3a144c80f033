"""Variance-preserving diffusion transport with analytic score oracles.

The forward process runs on a uniform grid from clean parameters at the
start time to near-white noise at the end time; the reverse pass is an
Euler discretization driven by a closed-form score of the diffused
belief.  Conditioning on observations enters through an observation
score marginalized over the denoising posterior, evaluated at the
recorded (clean) datum.  A separately noised observation path is kept
for the path-matching weight diagnostics; it is a single stored process
per datum, not independent redraws at each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import rng as streams_mod
from .models import ContractViolationError, GmmPrior
from .pooling import DegenerateWeightsError, validate_pooling_weights
from .rng import NoiseStreams
from .samplers import systematic_resample

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class VpSchedule:
    """Linear noise-rate schedule of the variance-preserving process.

    The rate grows from b_min at t_start to b_max at t_end, so the
    retained signal fraction alpha_bar decreases monotonically.
    """

    b_min: float = 0.2
    b_max: float = 5.0
    t_start: float = 0.0
    t_end: float = 2.0
    n_steps: int = 200

    def __post_init__(self):
        if self.b_min <= 0 or self.b_max < self.b_min:
            raise ValueError("need 0 < b_min <= b_max")
        if self.t_end <= self.t_start:
            raise ValueError("t_end must exceed t_start")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        """Forward-time grid, index 0 at the clean end."""
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    def reverse_time(self, k: int) -> float:
        """Time after k reverse steps; adapter from backward indexing."""
        return self.times[self.n_steps - k]

    def beta(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        frac = (t - self.t_start) / (self.t_end - self.t_start)
        return self.b_min + (self.b_max - self.b_min) * frac

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        rel = t - self.t_start
        frac = rel / (self.t_end - self.t_start)
        integral = self.b_min * rel + 0.5 * (self.b_max - self.b_min) * rel * frac
        return np.exp(-integral)


class GaussianScoreOracle:
    """Closed-form diffused score of an isotropic Gaussian belief."""

    def __init__(self, mean, var: float, schedule: VpSchedule):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if var <= 0:
            raise ValueError("variance must be positive")
        self.var = float(var)
        self.schedule = schedule

    def score(self, th, t):
        a = self.schedule.alpha_bar(t)
        marg_var = a * self.var + 1.0 - a
        return -(np.asarray(th, dtype=float) - np.sqrt(a) * self.mean) / marg_var

    def denoise_stats(self, th, t):
        """Mean and per-axis variance of the clean value given a noised one."""
        a = self.schedule.alpha_bar(t)
        marg_var = a * self.var + 1.0 - a
        gain = np.sqrt(a) * self.var / marg_var
        mean = self.mean + gain * (np.asarray(th, dtype=float) - np.sqrt(a) * self.mean)
        var = self.var * (1.0 - a) / marg_var
        return mean, np.broadcast_to(var, mean.shape)


class GmmScoreOracle:
    """Diffused score of a Gaussian-mixture belief.

    The diffused marginal stays a mixture with shrunk means and inflated
    component variance, so the score and the denoising posterior moments
    are available in closed form (the latter moment-matched per axis).
    """

    def __init__(self, prior: GmmPrior, schedule: VpSchedule):
        self.prior = prior
        self.schedule = schedule

    def _responsibilities(self, th, t):
        a = self.schedule.alpha_bar(t)
        marg_var = a * self.prior.var + 1.0 - a
        means = np.sqrt(a) * self.prior.means
        d = means.shape[1]
        th = np.asarray(th, dtype=float)
        sq = np.sum((th[..., None, :] - means) ** 2, axis=-1)
        logp = -0.5 * sq / marg_var - 0.5 * d * (_LOG_2PI + np.log(marg_var))
        logp = logp + np.log(self.prior.weights)
        resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
        return resp, means, marg_var, a

    def score(self, th, t):
        resp, means, marg_var, _ = self._responsibilities(th, t)
        mean_resp = np.einsum("...k,kd->...d", resp, means)
        return -(np.asarray(th, dtype=float) - mean_resp) / marg_var

    def denoise_stats(self, th, t):
        resp, means, marg_var, a = self._responsibilities(th, t)
        th = np.asarray(th, dtype=float)
        gain = np.sqrt(a) * self.prior.var / marg_var
        comp_mean = self.prior.means + gain * (th[..., None, :] - means)
        comp_var = self.prior.var * (1.0 - a) / marg_var
        mean = np.einsum("...k,...kd->...d", resp, comp_mean)
        second = np.einsum("...k,...kd->...d", resp, comp_var + comp_mean**2)
        return mean, second - mean**2


@dataclass
class LinearObservation:
    """Observation y = A theta + Gaussian noise of scale sigma."""

    a_matrix: np.ndarray
    sigma: float

    def __post_init__(self):
        self.a_matrix = np.atleast_2d(np.asarray(self.a_matrix, dtype=float))
        if self.sigma <= 0:
            raise ValueError("observation noise scale must be positive")


def forward_noise(th0, a_bar, eps):
    """Noised parameters at retained signal fraction a_bar."""
    return np.sqrt(a_bar) * np.asarray(th0, dtype=float) + np.sqrt(1.0 - a_bar) * eps


def noise_observation(obs: LinearObservation, y, a_bar, eps_theta):
    """A datum noised consistently with the parameter process."""
    mapped = np.einsum("pq,...q->...p", obs.a_matrix, np.asarray(eps_theta, dtype=float))
    return np.sqrt(a_bar) * np.asarray(y, dtype=float) + np.sqrt(1.0 - a_bar) * mapped


def build_observation_path(
    obs: LinearObservation, y, schedule: VpSchedule, streams: NoiseStreams, path_id: int = 0
) -> np.ndarray:
    """Stored noising process of one datum over the full forward grid.

    Consecutive path values share noise through a first-order recursion,
    so every marginal matches noise_observation at its grid time.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    a = schedule.alpha_bar(schedule.times)
    d = obs.a_matrix.shape[1]
    path = np.empty((schedule.n_steps + 1, y.shape[-1]))
    path[0] = y
    for j in range(schedule.n_steps):
        ratio = a[j + 1] / a[j]
        eps = streams.normal_for_particle(streams_mod.OBS_PATH, j, path_id, d)
        mapped = obs.a_matrix @ eps
        path[j + 1] = np.sqrt(ratio) * path[j] + np.sqrt(1.0 - ratio) * mapped
    return path


def reverse_step(th, score_value, beta_dt, eps):
    """One Euler update of the reverse-time process."""
    th = np.asarray(th, dtype=float)
    return th + beta_dt * (0.5 * th + score_value) + np.sqrt(beta_dt) * eps


def reverse_pass(
    oracle,
    schedule: VpSchedule,
    n_particles: int,
    dim: int,
    streams: NoiseStreams,
    extra_score=None,
):
    """Transport white noise back to the clean belief.

    extra_score(th, t), when given, is added to the oracle score at every
    step; the conditional and pooled passes are thin wrappers around it.
    """
    th = streams.normal_block(streams_mod.DIFFUSION_INIT, 0, n_particles, dim)
    dt = schedule.dt
    for k in range(schedule.n_steps):
        t = schedule.reverse_time(k)
        drift = oracle.score(th, t)
        if extra_score is not None:
            drift = drift + extra_score(th, t)
        eps = streams.normal_block(streams_mod.DIFFUSION_STEP, k, n_particles, dim)
        th = reverse_step(th, drift, schedule.beta(t) * dt, eps)
    return th


def fps_likelihood_score(obs: LinearObservation, th_t, y_t, a_bar):
    """Raw conditioning score against a matched noised datum."""
    th_t = np.asarray(th_t, dtype=float)
    residual = np.asarray(y_t, dtype=float) - np.einsum("pq,...q->...p", obs.a_matrix, th_t)
    return np.einsum("pq,...p->...q", obs.a_matrix, residual) / (obs.sigma**2 * a_bar)


def fps_observation_score(oracle, obs: LinearObservation, th_t, y, t):
    """Observation score marginalized over the denoising posterior.

    Gradient of log N(y; A E[theta0|th_t], A Var(theta0|th_t) A^T +
    sigma^2 I) in th_t, using that the mean's sensitivity equals
    sqrt(a_bar)/(1 - a_bar) times the denoising covariance.  Exact for
    Gaussian beliefs, where it reproduces the diffused-posterior score.
    """
    a = oracle.schedule.alpha_bar(t)
    if 1.0 - a < 1e-12:
        return fps_likelihood_score(obs, th_t, np.asarray(y, dtype=float), a)
    m0, v0 = oracle.denoise_stats(th_t, t)
    A = obs.a_matrix
    residual = np.asarray(y, dtype=float) - np.einsum("pq,...q->...p", A, m0)
    cov = np.einsum("pq,...q,rq->...pr", A, v0, A)
    cov = cov + (obs.sigma**2) * np.eye(A.shape[0])
    solved = np.linalg.solve(cov, residual[..., None])[..., 0]
    back = np.einsum("pq,...p->...q", A, solved)
    return (np.sqrt(a) / (1.0 - a)) * v0 * back


def fps_conditional_reverse(oracle, obs, th, y, t, beta_dt, eps):
    """One reverse step conditioned on a recorded datum."""
    drift = oracle.score(th, t) + fps_observation_score(oracle, obs, th, y, t)
    return reverse_step(th, drift, beta_dt, eps)


def fps_pooled_reverse(oracle, obs, th, y_atoms, nu, t, beta_dt, eps):
    """One reverse step conditioned on a pooled set of outcome atoms."""
    y_atoms = np.atleast_2d(np.asarray(y_atoms, dtype=float))
    nu = validate_pooling_weights(nu)
    if len(nu) != len(y_atoms):
        raise ContractViolationError("one pooling weight per outcome atom required")
    drift = oracle.score(th, t)
    for w, y in zip(nu, y_atoms):
        if w == 0.0:
            continue
        drift = drift + w * fps_observation_score(oracle, obs, th, y, t)
    return reverse_step(th, drift, beta_dt, eps)


def fps_resample_weights(obs: LinearObservation, th_t, y_t_atoms, a_bar, nu=None):
    """Path-matching weights of a particle cloud against noised data.

    Particle j is scored by the pooled product of Gaussian densities of
    each noised datum around A th_j with variance a_bar sigma^2.
    """
    th_t = np.asarray(th_t, dtype=float)
    y_t_atoms = np.atleast_2d(np.asarray(y_t_atoms, dtype=float))
    nu = validate_pooling_weights(np.full(len(y_t_atoms), 1.0 / len(y_t_atoms)) if nu is None else nu)
    pred = np.einsum("pq,jq->jp", obs.a_matrix, th_t)
    var = a_bar * obs.sigma**2
    sq = np.sum((y_t_atoms[None, :, :] - pred[:, None, :]) ** 2, axis=-1)
    logw = -0.5 * (sq / var) @ nu
    if not np.isfinite(logw).any():
        raise DegenerateWeightsError(0)
    return np.exp(logw - logsumexp(logw))


@dataclass
class FpsPassResult:
    """Final cloud of a conditional pass plus per-step weight diagnostics."""

    th: np.ndarray
    ess_path: np.ndarray
    fired_steps: list = field(default_factory=list)


def fps_conditional_pass(
    oracle,
    obs: LinearObservation,
    schedule: VpSchedule,
    y_atoms,
    n_particles: int,
    streams: NoiseStreams,
    nu=None,
    resample: bool = False,
) -> FpsPassResult:
    """Full reverse transport conditioned on one or more outcome atoms.

    The drift conditions on the recorded clean data; noised observation
    paths are used only to weight particles for the effective-sample-size
    diagnostics, and optionally to resample when resample=True and the
    ESS drops below half the cloud.  Resampling is off by default because
    the conditioned drift already transports the cloud exactly for
    Gaussian beliefs and reweighting such a cloud only adds noise.
    """
    y_atoms = np.atleast_2d(np.asarray(y_atoms, dtype=float))
    n_atoms = len(y_atoms)
    nu = validate_pooling_weights(np.full(n_atoms, 1.0 / n_atoms) if nu is None else nu)
    dim = obs.a_matrix.shape[1]
    paths = np.stack(
        [build_observation_path(obs, y_atoms[i], schedule, streams, path_id=i) for i in range(n_atoms)]
    )
    th = streams.normal_block(streams_mod.DIFFUSION_INIT, 0, n_particles, dim)
    dt = schedule.dt
    ess_path = np.empty(schedule.n_steps)
    fired = []
    for k in range(schedule.n_steps):
        t = schedule.reverse_time(k)
        eps = streams.normal_block(streams_mod.DIFFUSION_STEP, k, n_particles, dim)
        th = fps_pooled_reverse(oracle, obs, th, y_atoms, nu, t, schedule.beta(t) * dt, eps)
        j_next = schedule.n_steps - (k + 1)
        a_next = schedule.alpha_bar(schedule.times[j_next])
        w = fps_resample_weights(obs, th, paths[:, j_next], a_next, nu)
        ess_path[k] = 1.0 / np.sum(w**2)
        if resample and ess_path[k] < 0.5 * n_particles:
            th = th[systematic_resample(w, streams, k)]
            fired.append(k)
    return FpsPassResult(th, ess_path, fired)


def tweedie_predict(oracle, th_t, t):
    """Posterior-mean prediction of the clean value from a noised one."""
    a = oracle.schedule.alpha_bar(t)
    th_t = np.asarray(th_t, dtype=float)
    return (th_t + (1.0 - a) * oracle.score(th_t, t)) / np.sqrt(a)
