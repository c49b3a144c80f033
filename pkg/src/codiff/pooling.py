"""Pooled posterior over a measure of candidate outcomes.

Given a measure rho = sum_i nu_i delta_{y_i} of outcome atoms at a
design xi, the pooled posterior tilts the current belief by the
nu-weighted product of likelihoods:

    q(theta) propto p(theta | history) * prod_i p(y_i | theta, xi)^nu_i.

The self-normalized importance weights convert a cloud sampled from q
into per-atom posterior clouds: atom i reweights particle j by
p(y_i | theta_j, xi) divided by the pooled tilt, normalized over j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import History, ModelSpec, current_log_prior, current_prior_score


class DegenerateWeightsError(ValueError):
    """A weight row has no finite entry; carries the offending row."""

    def __init__(self, row: int):
        self.row = int(row)
        super().__init__(f"weight row {row} has no finite entry")


def validate_pooling_weights(nu: np.ndarray) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    if np.any(nu < 0):
        raise ValueError("pooling weights must be non-negative")
    if abs(nu.sum() - 1.0) > 1e-12:
        raise ValueError("pooling weights must sum to one")
    return nu


@dataclass
class OutcomeMeasure:
    """Weighted atoms of candidate outcomes at a shared design."""

    atoms: np.ndarray  # (N, y_dim)
    nu: np.ndarray | None = None

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if self.nu is None:
            self.nu = np.full(len(self.atoms), 1.0 / len(self.atoms))
        self.nu = validate_pooling_weights(self.nu)
        if self.nu.shape != (len(self.atoms),):
            raise ValueError("one pooling weight per atom required")

    def __len__(self):
        return len(self.atoms)


def _contract_nu(nu: np.ndarray, table: np.ndarray) -> np.ndarray:
    # Skip zero-weight atoms so a -inf entry there cannot poison the sum.
    live = nu > 0
    return np.einsum("i,i...->...", nu[live], table[live])


def _pooled_log_lik(model: ModelSpec, th, measure: OutcomeMeasure, xi):
    # (N, n_particles) likelihood table contracted against nu
    table = model.log_lik(measure.atoms[:, None, :], th, xi)
    return _contract_nu(measure.nu, table)


def pooled_log_density_unnorm(
    model: ModelSpec, th, measure: OutcomeMeasure, xi, history: History = History()
) -> np.ndarray:
    """Unnormalized log-density of the pooled posterior at th."""
    return current_log_prior(model, th, history) + _pooled_log_lik(model, th, measure, xi)


def pooled_score(
    model: ModelSpec, th, measure: OutcomeMeasure, xi, history: History = History()
) -> np.ndarray:
    """Gradient in theta of the pooled log-density."""
    grads = model.grad_theta_log_lik(measure.atoms[:, None, :], th, xi)
    return current_prior_score(model, th, history) + _contract_nu(measure.nu, grads)


def log_lik_table(model: ModelSpec, measure: OutcomeMeasure, th_contrastive, xi) -> np.ndarray:
    """(N, M) table of log p(y_i | theta'_j, xi), computed once and shared."""
    return model.log_lik(measure.atoms[:, None, :], th_contrastive, xi)


def _snis_log_weights(log_lik_matrix: np.ndarray, nu: np.ndarray):
    """Unnormalized log weights plus masks of rows with no usable entry.

    bad_input marks rows of the matrix itself with no finite entry;
    bad_row additionally marks rows emptied by dropped columns.
    """
    L = np.asarray(log_lik_matrix, dtype=float)
    nu = validate_pooling_weights(nu)
    bad_input = ~np.isfinite(L).any(axis=1)
    tilt = _contract_nu(nu, L)
    # A non-finite pooled tilt means the particle is impossible under the
    # pooled density; drop such columns rather than dividing by zero.
    valid_col = np.isfinite(tilt)
    logw = np.full_like(L, -np.inf)
    logw[:, valid_col] = L[:, valid_col] - tilt[valid_col]
    bad_row = bad_input | ~(logw > -np.inf).any(axis=1)
    return logw, bad_input, bad_row


def snis_weights(log_lik_matrix: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Row-normalized importance weights from pooled samples to per-atom posteriors.

    Entry (i, j) starts from log p(y_i | theta'_j) minus the pooled tilt
    sum_l nu_l log p(y_l | theta'_j); rows are normalized in log space.
    Raises DegenerateWeightsError if a row has no finite entry.
    """
    logw, bad_input, bad_row = _snis_log_weights(log_lik_matrix, nu)
    if bad_input.any():
        raise DegenerateWeightsError(int(np.argmax(bad_input)))
    if bad_row.any():
        raise DegenerateWeightsError(int(np.argmax(bad_row)))
    return _row_exp_normalize(logw)


def snis_weights_or_uniform(log_lik_matrix: np.ndarray, nu: np.ndarray):
    """snis_weights with degenerate rows replaced by uniform weights.

    Returns (weights, bad_rows) where bad_rows indexes the rows that fell
    back.  Meant for use inside optimization loops that must not abort.
    """
    logw, _, bad_row = _snis_log_weights(log_lik_matrix, nu)
    m = logw.shape[1]
    logw[bad_row] = -np.log(m)
    return _row_exp_normalize(logw), np.flatnonzero(bad_row)


def _row_exp_normalize(logw: np.ndarray) -> np.ndarray:
    """Max-shifted exp-normalization of each row.

    Equivalent to exp(logw - logsumexp(logw, axis=1)) but without scipy's
    per-call dispatch, which costs more than the reduction itself at the
    table sizes the inner loops use.  Rows must have a finite maximum.
    """
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return w


def row_ess(weights: np.ndarray) -> np.ndarray:
    """Effective sample size of each weight row, 1 / sum w^2."""
    w = np.asarray(weights, dtype=float)
    return 1.0 / np.sum(w**2, axis=-1)
