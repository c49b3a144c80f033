"""Shared test doubles."""

import numpy as np

from codiff.models import ModelSpec


class FlatGaussianLocation(ModelSpec):
    """Flat prior, y ~ N(theta, v).  Posterior for one y is N(y, v)."""

    def __init__(self, v=1.0):
        self.v = v
        self.theta_dim = self.y_dim = self.design_dim = 1
        self.default_design_bounds = np.array([[-1.0, 1.0]])

    def log_prior(self, th):
        return np.zeros(np.shape(th)[:-1])

    def grad_theta_log_prior(self, th):
        return np.zeros_like(np.asarray(th, dtype=float))

    def log_lik(self, y, th, xi):
        r = np.asarray(y, dtype=float) - np.asarray(th, dtype=float)
        return np.sum(-0.5 * r**2 / self.v, axis=-1)

    def grad_theta_log_lik(self, y, th, xi):
        return (np.asarray(y, dtype=float) - np.asarray(th, dtype=float)) / self.v

    def grad_y_log_lik(self, y, th, xi):
        return -self.grad_theta_log_lik(y, th, xi)

    def forward(self, u, th, xi):
        return np.asarray(th, dtype=float) + np.sqrt(self.v) * np.asarray(u, dtype=float)


def quadratic_moments(f, pts=(-1.0, 0.0, 1.0)):
    """Recover (mean, var) of exp(quadratic) from three evaluations."""
    x = np.asarray(pts)
    vals = np.array([f(v) for v in x])
    a, b, _ = np.polyfit(x, vals, 2)
    return -b / (2 * a), -1.0 / (2 * a)
