"""Design-gradient estimators.

All estimators average rowwise differences of the score kernel g: the
own-sample evaluation g(xi, y_i, theta_i, theta_i) minus a weighted mean
of contrastive evaluations g(xi, y_i, theta_i, theta'_j).  They differ
only in where the contrastive particles come from and how the weights
are formed:

* grad_prior_is: particles from the current belief, weights proportional
  to the likelihood of each row's outcome (plug-in ratio estimator).
* grad_nested_mc: one fresh posterior cloud per outcome, uniform weights.
* grad_pooled_snis: one shared cloud near the pooled posterior,
  self-normalized importance weights per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .models import ContractViolationError, History, ModelSpec, g_score
from .pooling import (
    DegenerateWeightsError,
    OutcomeMeasure,
    log_lik_table,
    row_ess,
    snis_weights,
    snis_weights_or_uniform,
)
from .samplers import ContrastiveCloud, JointCloud

DEGENERATE_WEIGHTS_FLAG = "degenerate-weights-uniform-fallback"


@dataclass
class GradEstimate:
    """A design-gradient estimate with the diagnostics the loops log."""

    grad: np.ndarray
    n_joint: int
    n_contrastive: int
    ess_min: float
    flags: tuple = ()


def _own_and_cross_g(model: ModelSpec, xi, joint: JointCloud, th_contrastive: np.ndarray):
    """g on the diagonal (N, d) and against every contrastive particle (N, M, d)."""
    y, th = joint.y, joint.th
    own = g_score(model, xi, y, th, th)
    cross = g_score(model, xi, y[:, None, :], th[:, None, :], th_contrastive[None, :, :])
    return own, cross


def gamma(
    joint: JointCloud,
    contrastive: ContrastiveCloud,
    w: np.ndarray,
    xi,
    model: ModelSpec,
    history: History = History(),
    flags: tuple = (),
) -> GradEstimate:
    """Weighted contrastive reduction of the score kernel.

    Returns the mean over rows of g_own_i - sum_j w_ij g_cross_ij.  The
    history is carried by the clouds and the weights; it is accepted here
    so callers can thread one context object through every estimator.
    """
    w = np.asarray(w, dtype=float)
    n, m = joint.th.shape[0], contrastive.th.shape[0]
    if w.shape != (n, m):
        raise ContractViolationError(f"weight matrix {w.shape} does not match clouds ({n}, {m})")
    own, cross = _own_and_cross_g(model, xi, joint, contrastive.th)
    contrast = np.sum(w[:, :, None] * cross, axis=1)
    grad = np.mean(own - contrast, axis=0)
    return GradEstimate(grad, n, m, float(row_ess(w).min()), flags)


def grad_pooled_snis(
    model: ModelSpec,
    history: History,
    xi,
    joint: JointCloud,
    contrastive: ContrastiveCloud,
    nu: np.ndarray | None = None,
    fallback: bool = True,
) -> GradEstimate:
    """SNIS weights from the shared pooled cloud, then the gamma reduction."""
    measure = OutcomeMeasure(joint.y, nu)
    table = log_lik_table(model, measure, contrastive.th, xi)
    if fallback:
        w, bad_rows = snis_weights_or_uniform(table, measure.nu)
        flags = (DEGENERATE_WEIGHTS_FLAG,) if len(bad_rows) else ()
    else:
        w = snis_weights(table, measure.nu)
        flags = ()
    return gamma(joint, contrastive, w, xi, model, history, flags)


def grad_nested_mc(
    model: ModelSpec,
    history: History,
    xi,
    joint: JointCloud,
    per_outcome_posterior_samples: list[ContrastiveCloud],
) -> GradEstimate:
    """Uniform-weight contrast against a fresh posterior cloud per outcome."""
    n = joint.th.shape[0]
    if len(per_outcome_posterior_samples) != n:
        raise ContractViolationError("need one contrastive cloud per joint particle")
    sizes = {c.th.shape[0] for c in per_outcome_posterior_samples}
    if 0 in sizes:
        raise ContractViolationError("empty inner contrastive cloud")
    own = g_score(model, xi, joint.y, joint.th, joint.th)
    if len(sizes) == 1:
        inner = np.stack([c.th for c in per_outcome_posterior_samples])
        cross = g_score(model, xi, joint.y[:, None, :], joint.th[:, None, :], inner)
        contrast = np.mean(cross, axis=1)
    else:
        contrast = np.stack(
            [
                np.mean(g_score(model, xi, joint.y[i], joint.th[i], c.th), axis=0)
                for i, c in enumerate(per_outcome_posterior_samples)
            ]
        )
    m = min(sizes)
    return GradEstimate(np.mean(own - contrast, axis=0), n, m, float(m), ())


def grad_prior_is(
    model: ModelSpec,
    xi,
    joint: JointCloud,
    prior_contrastive: ContrastiveCloud,
    history: History = History(),
) -> GradEstimate:
    """Ratio estimator with belief-sampled contrastive particles.

    Row weights are the likelihood of y_i at each contrastive particle,
    normalized in log space.  Rows whose every likelihood underflows to
    zero have no usable denominator and raise DegenerateWeightsError.
    """
    measure = OutcomeMeasure(joint.y)
    table = log_lik_table(model, measure, prior_contrastive.th, xi)
    norm = logsumexp(table, axis=1, keepdims=True)
    finite = np.isfinite(norm[:, 0])
    if not finite.all():
        raise DegenerateWeightsError(int(np.argmin(finite)))
    w = np.exp(table - norm)
    return gamma(joint, prior_contrastive, w, xi, model, history)


def analytic_linear_gaussian(xi, sigma: float = 1.0, a: float = 1.0):
    """Closed-form information gain and its design derivative for y = a xi theta + noise."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = float(np.asarray(xi).reshape(()))
    eig = 0.5 * np.log1p(a**2 * x**2 / sigma**2)
    grad = a**2 * x / (sigma**2 + a**2 * x**2)
    return eig, grad
