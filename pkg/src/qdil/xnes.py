"""Exponential natural evolution strategy over gradient-combination coefficients.

Keeps a Gaussian search distribution (mean, global scale sigma, unit-determinant
shape matrix B) over coefficient vectors and adapts it from rank-based utilities
of archive improvements, so any monotone transform of the scores leaves the
update unchanged.
"""

from __future__ import annotations

import numpy as np


def default_rates(n: int) -> tuple[float, float]:
    """(eta_mu, eta_sigma); the shape matrix shares eta_sigma."""
    return 1.0, (9.0 + 3.0 * np.log(n)) / (5.0 * n * np.sqrt(n))


def _expm_symmetric(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.exp(vals)) @ vecs.T


def rank_utilities(improvements: np.ndarray) -> np.ndarray:
    """Zero-sum utilities by descending score; tied scores share their span's mean."""
    scores = np.asarray(improvements, dtype=np.float64)
    lam = scores.size
    if lam < 2:
        raise ValueError("need at least two samples to rank")
    if np.all(scores == scores[0]):          # full tie: exactly zero signal
        return np.zeros(lam)
    raw = np.maximum(0.0, np.log(lam / 2.0 + 1.0) - np.log(np.arange(1, lam + 1)))
    per_rank = raw / raw.sum() - 1.0 / lam
    order = np.argsort(-scores, kind="stable")
    utilities = np.empty(lam)
    utilities[order] = per_rank
    start = 0
    while start < lam:                       # average across tied spans
        stop = start + 1
        while stop < lam and scores[order[stop]] == scores[order[start]]:
            stop += 1
        if stop - start > 1:
            utilities[order[start:stop]] = per_rank[start:stop].mean()
        start = stop
    return utilities


class CoeffDistribution:
    """Search distribution c = mu + sigma * B z with z ~ N(0, I)."""

    def __init__(self, n: int, sigma: float = 1.0):
        if n < 1 or sigma <= 0.0:
            raise ValueError("need n >= 1 and sigma > 0")
        self.n = n
        self.mu = np.zeros(n)
        self.sigma = float(sigma)
        self.b = np.eye(n)
        self.eta_mu, self.eta_sigma = default_rates(n)

    def sample(self, lam: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Returns (coeffs, zs), each (lam, n); keep zs for adapt()."""
        if lam < 2:
            raise ValueError("population must be >= 2")
        zs = rng.standard_normal((lam, self.n))
        return self.mu + self.sigma * zs @ self.b.T, zs

    def adapt(self, zs: np.ndarray, improvements: np.ndarray) -> None:
        zs = np.asarray(zs, dtype=np.float64)
        if zs.shape[0] != np.size(improvements):
            raise ValueError("one improvement per sample required")
        u = rank_utilities(improvements)
        if not np.any(u):                    # fully tied scores carry no signal
            return
        sq = (zs * zs).sum(axis=1)
        g_mu = u @ zs
        g_sigma = float(u @ (sq - self.n)) / self.n
        g_b = (zs.T * u) @ zs - np.diag(np.full(self.n, float(u @ sq) / self.n))
        self.mu = self.mu + self.eta_mu * self.sigma * self.b @ g_mu
        self.sigma *= float(np.exp(0.5 * self.eta_sigma * g_sigma))
        self.b = self.b @ _expm_symmetric(0.5 * self.eta_sigma * g_b)
        det = np.linalg.det(self.b)
        if det > 0.0:                        # strip accumulated round-off from det B = 1
            self.b /= det ** (1.0 / self.n)

    def mean_coeffs(self) -> np.ndarray:
        return self.mu.copy()

    def restart(self, sigma: float) -> None:
        """Back to the isotropic prior around zero."""
        if sigma <= 0.0:
            raise ValueError("sigma must be > 0")
        self.mu = np.zeros(self.n)
        self.sigma = float(sigma)
        self.b = np.eye(self.n)
