"""Estimate containers and mergeable moment accumulators."""

from dataclasses import dataclass

import numpy as np


@dataclass
class EstimateResult:
    """Monte Carlo estimate with its standard error.

    ``value`` and ``stderr`` are scalars or vectors of matching shape;
    ``n_paths`` counts all simulated paths (dead ones contribute zeros to
    indicator-weighted estimators, they are not dropped from the sample).
    """

    value: np.ndarray | float
    stderr: np.ndarray | float
    n_paths: int
    seed: int
    dt: float

    def as_dict(self):
        value = np.asarray(self.value)
        stderr = np.asarray(self.stderr)
        return {
            "value": value.item() if value.ndim == 0 else value.tolist(),
            "stderr": stderr.item() if stderr.ndim == 0 else stderr.tolist(),
            "n": int(self.n_paths),
            "seed": int(self.seed),
            "dt": float(self.dt),
        }


class MomentAccumulator:
    """Associative mean/variance accumulator (Chan et al. pairwise update).

    Merging two accumulators gives the same moments as accumulating the
    concatenated samples, up to floating-point reassociation.
    """

    def __init__(self, shape=()):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, float)
        n = values.shape[0]
        if n == 0:
            return
        batch_mean = values.mean(axis=0)
        batch_m2 = ((values - batch_mean) ** 2).sum(axis=0)
        self._combine(n, batch_mean, batch_m2)

    def merge(self, other: "MomentAccumulator") -> None:
        self._combine(other.count, other.mean, other.m2)

    def _combine(self, n, mean, m2):
        if n == 0:
            return
        total = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta ** 2 * (self.count * n / total)
        self.count = total

    def stderr(self):
        if self.count < 2:
            return np.full_like(np.asarray(self.mean, float), np.inf)
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


def mean_and_stderr(values: np.ndarray):
    """Sample mean and standard error along the first axis."""
    values = np.asarray(values, float)
    n = values.shape[0]
    mean = values.mean(axis=0)
    if n < 2:
        return mean, np.full_like(mean, np.inf)
    std = values.std(axis=0, ddof=1)
    return mean, std / np.sqrt(n)
