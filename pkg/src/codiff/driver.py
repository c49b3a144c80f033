"""Loop orchestration for gradient-based experiment design.

Two optimization drivers share one engine: the nested driver refreshes
its particle clouds and runs many sampler sweeps per design update, the
single-loop driver advances each cloud by one sweep per update and lets
the clouds track the moving design.  On top of them sits the greedy
sequential loop, which optimizes one experiment at a time, simulates its
outcome under the ground truth, and scores the growing history.

Noise discipline: sampler sweeps consume the joint/pooled streams keyed
by a per-experiment step counter, cloud initialization draws come from
the contrastive-init stream, and design initialization, outcome
simulation, baseline designs, and evaluation draws each have their own
stream.  Restarting the counters at every experiment keeps replays from
a resumed history identical to the original run.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import MetricRecord, SpceConfig, information_bounds, prior_snis_w2
from .gradients import GradEstimate, grad_pooled_snis, grad_prior_is
from .models import ContractViolationError, Design, History, ModelSpec
from .pooling import OutcomeMeasure
from .rng import (
    BASELINE_DESIGN,
    CONTRASTIVE,
    DESIGN_INIT,
    EVAL_CONTRAST,
    EVAL_ROLLOUT,
    NoiseStreams,
    SEQ_OUTCOME,
)
from .samplers import (
    ContrastiveCloud,
    JointCloud,
    StepSchedule,
    ess,
    joint_langevin_step,
    pooled_langevin_step,
    systematic_resample,
)

logger = logging.getLogger("codiff.driver")

LOOP_ESTIMATORS = ("pooled_snis", "prior_is")


class NumericFailureError(RuntimeError):
    """Raised when a loop cannot continue; carries the failing iteration."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class OptimizerState:
    """Adam ascent with box projection and stepwise learning-rate decay.

    The learning rate multiplies by `decay` once per `epoch_len` design
    updates; a literal per-update decay would collapse the rate to zero
    over a standard-length run.
    """

    bounds: np.ndarray
    lr0: float = 1e-2
    decay: float = 0.98
    epoch_len: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float)
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2:
            raise ContractViolationError("bounds must be (design_dim, 2)")
        if self.lr0 <= 0 or not 0 < self.decay <= 1 or self.epoch_len < 1:
            raise ContractViolationError("need lr0 > 0, decay in (0, 1], epoch_len >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractViolationError("Adam betas must lie in [0, 1)")
        d = self.bounds.shape[0]
        if self.m is None:
            self.m = np.zeros(d)
        if self.v is None:
            self.v = np.zeros(d)

    @property
    def lr(self) -> float:
        return self.lr0 * self.decay ** (self.t // self.epoch_len)

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, zeroed moments and step count."""
        return OptimizerState(
            self.bounds.copy(),
            lr0=self.lr0,
            decay=self.decay,
            epoch_len=self.epoch_len,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


@dataclass(frozen=True)
class ResamplePolicy:
    """When to reanchor a warm-started cloud on the newest outcome."""

    enabled: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ContractViolationError("threshold is a fraction of the cloud size")


@dataclass(frozen=True)
class LoopConfig:
    """Budgets and choices shared by both optimization drivers."""

    t_outer: int = 5000
    s_joint: int = 50
    s_pooled: int = 50
    n_joint: int = 200
    n_contrastive: int = 200
    estimator: str = "pooled_snis"
    step_schedule: StepSchedule = field(default_factory=StepSchedule)
    reinit_clouds: bool = True
    resample: ResamplePolicy = field(default_factory=ResamplePolicy)

    def __post_init__(self):
        counts = (self.t_outer, self.s_joint, self.s_pooled, self.n_joint, self.n_contrastive)
        if min(counts) < 0 or min(counts[1:]) < 1:
            raise ContractViolationError("loop sizes must be positive (t_outer may be zero)")
        if self.estimator not in LOOP_ESTIMATORS:
            raise ContractViolationError(
                f"loop estimator must be one of {LOOP_ESTIMATORS}; the nested-MC"
                " estimator needs per-outcome posterior clouds and lives in diagnostics"
            )


@dataclass(frozen=True)
class TraceRow:
    """One design update: the design the gradient was taken at, and the
    sweep stamp of the clouds that produced it."""

    iteration: int
    xi: np.ndarray
    grad_norm: float
    ess_min: float
    cloud_stamp: int
    wall_ms: float
    flags: tuple = ()


def update_design(opt: OptimizerState, xi, grad) -> Design:
    """One Adam ascent step from xi, clipped into the bounds box."""
    g = np.asarray(grad.grad if isinstance(grad, GradEstimate) else grad, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ContractViolationError("gradient must be finite")
    opt.t += 1
    opt.m = opt.beta1 * opt.m + (1 - opt.beta1) * g
    opt.v = opt.beta2 * opt.v + (1 - opt.beta2) * g**2
    m_hat = opt.m / (1 - opt.beta1**opt.t)
    v_hat = opt.v / (1 - opt.beta2**opt.t)
    stepped = xi + opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    design = Design(stepped, opt.bounds)
    return Design(design.project(stepped), opt.bounds)


def _uniform_design(bounds: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(bounds[:, 0], bounds[:, 1])


def _init_clouds(model, hist, xi, n, m, streams, init_idx):
    g = streams.generator(CONTRASTIVE, init_idx)
    th = model.sample_prior(n, g)
    y = model.sample_outcome(th, xi, g)
    th_c = model.sample_prior(m, g)
    return JointCloud(th, y), ContrastiveCloud(th_c)


def _estimate(model, hist, xi, joint, contrastive, which) -> GradEstimate:
    if which == "pooled_snis":
        return grad_pooled_snis(model, hist, xi, joint, contrastive)
    return grad_prior_is(model, xi, joint, contrastive, hist)


def _run_loop(
    model: ModelSpec,
    hist: History,
    cfg: LoopConfig,
    opt: OptimizerState,
    streams: NoiseStreams,
    *,
    single: bool,
    xi0=None,
    warm_start=None,
):
    if cfg.estimator == "prior_is" and len(hist):
        raise ContractViolationError(
            "the prior-contrastive loop estimator draws from the model prior,"
            " which matches the belief only before any experiments"
        )
    if xi0 is None:
        xi = _uniform_design(opt.bounds, streams.generator(DESIGN_INIT, 0))
    else:
        xi = Design(np.asarray(xi0, dtype=float), opt.bounds).project(xi0)
    joint = contrastive = None
    if warm_start is not None:
        joint, contrastive = warm_start
    sched = cfg.step_schedule
    n_joint_steps = 0
    n_pooled_steps = 0
    init_idx = 0
    trace: list[TraceRow] = []
    reinit = cfg.reinit_clouds and not single
    for t in range(cfg.t_outer):
        start = time.perf_counter()
        if joint is None or reinit:
            joint, fresh_contrastive = _init_clouds(
                model, hist, xi, cfg.n_joint, cfg.n_contrastive, streams, init_idx
            )
            contrastive = contrastive if contrastive is not None and not reinit else fresh_contrastive
            init_idx += 1
        for _ in range(cfg.s_joint if not single else 1):
            joint = joint_langevin_step(
                model, joint, xi, sched.gamma(n_joint_steps), streams, n_joint_steps, hist
            )
            n_joint_steps += 1
        if cfg.estimator == "prior_is":
            g = streams.generator(CONTRASTIVE, init_idx)
            contrastive = ContrastiveCloud(model.sample_prior(cfg.n_contrastive, g))
            init_idx += 1
        else:
            measure = OutcomeMeasure(joint.y)
            for _ in range(cfg.s_pooled if not single else 1):
                contrastive = pooled_langevin_step(
                    model, contrastive, xi, measure, sched.gamma(n_pooled_steps), streams, n_pooled_steps, hist
                )
                n_pooled_steps += 1
        try:
            est = _estimate(model, hist, xi, joint, contrastive, cfg.estimator)
        except ValueError as exc:
            raise NumericFailureError(t, str(exc)) from exc
        grad_norm = float(np.linalg.norm(est.grad))
        row_xi = xi.copy()
        if np.isfinite(grad_norm):
            xi = update_design(opt, xi, est).xi
        else:
            logger.warning("skipping design update at iteration %d: non-finite gradient", t)
        trace.append(
            TraceRow(
                iteration=t,
                xi=row_xi,
                grad_norm=grad_norm,
                ess_min=est.ess_min,
                cloud_stamp=n_joint_steps,
                wall_ms=(time.perf_counter() - start) * 1000.0,
                flags=est.flags,
            )
        )
    if joint is None:
        joint, contrastive = _init_clouds(
            model, hist, xi, cfg.n_joint, cfg.n_contrastive, streams, init_idx
        )
    return Design(xi, opt.bounds), joint, contrastive, trace


def run_nested_loop(model, hist, cfg, opt, streams, *, xi0=None, warm_start=None):
    """Refresh clouds and run full inner sweeps before every design update."""
    return _run_loop(model, hist, cfg, opt, streams, single=False, xi0=xi0, warm_start=warm_start)


def run_single_loop(model, hist, cfg, opt, streams, *, xi0=None, warm_start=None):
    """Advance each persistent cloud by one sweep per design update.

    The gradient at iteration t uses the clouds after their (t+1)-th sweep
    and the design from before the update, which the trace records as
    cloud_stamp = t + 1 against the stored xi.
    """
    return _run_loop(model, hist, cfg, opt, streams, single=True, xi0=xi0, warm_start=warm_start)


@dataclass(frozen=True)
class SequentialRun:
    """A greedy sequential experiment campaign and its running record."""

    n_experiments: int
    theta_star: np.ndarray
    history: History = field(default_factory=History)
    records: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "theta_star", np.atleast_1d(np.asarray(self.theta_star, dtype=float)))
        if self.n_experiments < 0:
            raise ContractViolationError("number of experiments must be nonnegative")
        if len(self.history) > self.n_experiments:
            raise ContractViolationError("history already longer than the campaign")


def _reanchor(model, joint, xi, y, policy, streams, k):
    """Reweight a warm-started cloud by the newest outcome and resample it
    when the weights say the cloud no longer covers the target."""
    logw = model.log_lik(y, joint.th, xi)
    if not np.any(np.isfinite(logw)):
        logger.warning("experiment %d: outcome likelihood degenerate on warm cloud", k)
        return joint
    w = np.exp(logw - logw.max())
    w /= w.sum()
    if ess(w) < policy.threshold * w.shape[0]:
        idx = systematic_resample(w, streams, k)
        return JointCloud(joint.th[idx], joint.y[idx], stream=joint.stream)
    return joint


def run_sequential(
    model: ModelSpec,
    run: SequentialRun,
    cfg: LoopConfig,
    opt: OptimizerState,
    streams: NoiseStreams,
    *,
    spce_cfg: SpceConfig = SpceConfig(),
    design_policy: str = "optimize",
    w2_samples: int = 4000,
) -> SequentialRun:
    """Greedily extend the campaign to its full length.

    Each experiment optimizes its design against the history (or draws it
    uniformly under the random baseline), simulates the outcome at the
    ground truth, then scores the enlarged history.  The distance to
    truth is computed from prior draws reweighted by the whole history,
    so both policies are scored by exactly the same procedure.

    Clouds warm-start from the previous experiment's final state.  A run
    resumed from a stored history cannot recover that state, so it
    restarts the clouds; the resumed computation is still deterministic
    in (history, config, seed).
    """
    if design_policy not in ("optimize", "random"):
        raise ContractViolationError("design_policy must be 'optimize' or 'random'")
    hist = run.history
    records = list(run.records)
    warm = None
    for k in range(len(hist) + 1, run.n_experiments + 1):
        start = time.perf_counter()
        if design_policy == "optimize":
            xi0 = _uniform_design(opt.bounds, streams.generator(DESIGN_INIT, k))
            design, joint, contrastive, _ = run_single_loop(
                model, hist, cfg, opt.fresh(), streams, xi0=xi0, warm_start=warm
            )
            xi_k = design.xi
        else:
            xi_k = _uniform_design(opt.bounds, streams.generator(BASELINE_DESIGN, k))
            joint = contrastive = None
        y_k = model.sample_outcome(
            run.theta_star[None, :], xi_k, streams.generator(SEQ_OUTCOME, k)
        )[0]
        if joint is not None and cfg.resample.enabled:
            joint = _reanchor(model, joint, xi_k, y_k, cfg.resample, streams, k)
        warm = (joint, contrastive) if joint is not None else None
        hist = hist.append(xi_k, y_k)
        designs = [xi for xi, _ in hist]
        outcomes = [y for _, y in hist]
        lo, hi = information_bounds(
            model, designs, outcomes, run.theta_star, spce_cfg, streams.generator(EVAL_CONTRAST, k)
        )
        w2 = prior_snis_w2(
            model, designs, outcomes, run.theta_star, w2_samples, streams.generator(EVAL_ROLLOUT, k)
        )
        records.append(MetricRecord(k, lo, hi, w2, time.perf_counter() - start))
    return replace(run, history=hist, records=tuple(records))
