"""Shared analytic oracles for the diffusion tests."""

import numpy as np


class GaussianPrior:
    """Pixelwise Gaussian prior x0 ~ N(mu, sigma^2 I) with closed forms.

    Under the variance-preserving forward process the marginal of x_t is
    N(gamma mu, gamma^2 sigma^2 + v^2), so the score and the posterior mean
    E[x0 | x_t] are available exactly.
    """

    def __init__(self, mu: float, sigma: float, schedule):
        self.mu = mu
        self.sigma = sigma
        self.schedule = schedule

    def score(self, x_t, t):
        g = self.schedule.gamma(t)
        v = self.schedule.v(t)
        if np.ndim(t) == 1:
            g = g[:, None, None, None]
            v = v[:, None, None, None]
        denom = g * g * self.sigma ** 2 + v * v
        return -(x_t - g * self.mu) / denom

    def posterior_mean(self, x_t, t):
        g = float(self.schedule.gamma(t))
        v = float(self.schedule.v(t))
        denom = g * g * self.sigma ** 2 + v * v
        return self.mu + g * self.sigma ** 2 * (x_t - g * self.mu) / denom

    def sample(self, rng, shape):
        return self.mu + self.sigma * rng.standard_normal(shape)
