"""Correlation coefficients and seeded permutation tests.

Monte-Carlo p-values use the add-one estimator (count + 1) / (P + 1), which
never reports zero; exhaustive enumeration over all n! permutations reports
the exact count / n! instead (the identity permutation guarantees p > 0).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateDataError


@dataclass
class CorrelationResult:
    method: str
    coefficient: float
    p_value: float
    n_permutations: int
    seed: int


def _validate(x, y, method: str) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or len(x) != len(y):
        raise ConfigurationError(f"{method} needs two equal-length vectors")
    if len(x) < 3:
        raise ConfigurationError(f"{method} needs n >= 3, got {len(x)}")
    return x, y


def pearson(x, y) -> float:
    """Sample product-moment correlation."""
    x, y = _validate(x, y, "pearson")
    cx, cy = x - x.mean(), y - y.mean()
    ssx, ssy = float(cx @ cx), float(cy @ cy)
    if ssx == 0.0 or ssy == 0.0:
        raise DegenerateDataError("pearson is undefined for a constant vector")
    return float(cx @ cy) / math.sqrt(ssx * ssy)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks; ties share the mean of their rank span."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sorted_v = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average-ranked data."""
    x, y = _validate(x, y, "spearman")
    rx, ry = _average_ranks(x), _average_ranks(y)
    if (rx == rx[0]).all() or (ry == ry[0]).all():
        raise DegenerateDataError("spearman is undefined for a fully tied vector")
    return pearson(rx, ry)


def kendall_tau(x, y) -> float:
    """Tie-corrected tau-b via pair counting."""
    x, y = _validate(x, y, "kendall")
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    upper = np.triu_indices(len(x), k=1)
    s = float((dx[upper] * dy[upper]).sum())
    n0 = len(x) * (len(x) - 1) / 2.0
    n1 = n0 - float(np.abs(dx[upper]).sum())
    n2 = n0 - float(np.abs(dy[upper]).sum())
    if n0 == n1 or n0 == n2:
        raise DegenerateDataError("kendall tau is undefined for a fully tied vector")
    return s / math.sqrt((n0 - n1) * (n0 - n2))


_METHODS = {"pearson": pearson, "spearman": spearman, "kendall": kendall_tau}


def permutation_pvalue(x, y, method: str = "pearson", n_permutations: int = 10000,
                       seed: int = 0, exhaustive: bool = False) -> CorrelationResult:
    """Two-sided permutation test of the chosen coefficient, permuting y.

    Sampled permutations are drawn from a generator seeded with ``seed``, so
    results are reproducible; ``exhaustive`` enumerates all n! permutations
    (n <= 8) and reports the exact p-value.
    """
    if method not in _METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {sorted(_METHODS)}")
    fn = _METHODS[method]
    x, y = _validate(x, y, method)
    observed = fn(x, y)
    threshold = abs(observed)

    if exhaustive:
        if len(x) > 8:
            raise ConfigurationError(f"exhaustive enumeration limited to n <= 8, got {len(x)}")
        count, total = 0, 0
        for perm in itertools.permutations(range(len(y))):
            total += 1
            if abs(fn(x, y[list(perm)])) >= threshold:
                count += 1
        return CorrelationResult(method, observed, count / total, total, seed)

    if n_permutations < 99:
        raise ConfigurationError(f"need at least 99 permutations, got {n_permutations}")
    rng = np.random.default_rng([int(seed), 0xC0])
    count = 0
    for _ in range(n_permutations):
        if abs(fn(x, rng.permutation(y))) >= threshold:
            count += 1
    return CorrelationResult(
        method, observed, (count + 1) / (n_permutations + 1), n_permutations, seed
    )
