"""Constructive two-tower approximation with monomial feature maps.

Any polynomial in (c, a) splits as a sum of terms alpha_m * c^p_m * a^q_m, so
phi(c)_m = alpha_m * c^p_m and psi(a)_m = a^q_m reproduce it as an inner
product. Fitting alpha by least squares on a grid turns this into a
numerical demonstration that dot-product scoring can approximate continuous
targets on the unit cube.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np


def monomial_exponents(k_c: int, k_a: int, degree: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(customer, article) exponent pairs; each tower's monomial has degree <= ``degree``."""
    if degree < 0:
        raise ValueError("degree must be >= 0")
    out = []
    for exps in itertools.product(range(degree + 1), repeat=k_c + k_a):
        p, q = exps[:k_c], exps[k_c:]
        if sum(p) <= degree and sum(q) <= degree:
            out.append((tuple(p), tuple(q)))
    out.sort(key=lambda e: (sum(e[0]) + sum(e[1]), e))
    return out


def _powers(x: np.ndarray, exps: list[tuple[int, ...]]) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.stack([np.prod(x ** np.array(e), axis=1) for e in exps], axis=1)


@dataclass
class PolynomialFit:
    degree: int
    customer_exponents: list[tuple[int, ...]]
    article_exponents: list[tuple[int, ...]]
    coefficients: np.ndarray
    max_error: float
    regularized: bool = False

    @property
    def embedding_size(self) -> int:
        return len(self.coefficients)

    def phi(self, c) -> np.ndarray:
        return _powers(np.asarray(c, dtype=np.float64), self.customer_exponents) * self.coefficients

    def psi(self, a) -> np.ndarray:
        return _powers(np.asarray(a, dtype=np.float64), self.article_exponents)

    def score(self, c, a) -> np.ndarray:
        return np.sum(self.phi(c) * self.psi(a), axis=1)


def unit_grid(k_c: int, k_a: int, points: int) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(0.0, 1.0, points)
    mesh = np.array(list(itertools.product(axis, repeat=k_c + k_a)))
    return mesh[:, :k_c], mesh[:, k_c:]


def polynomial_two_tower_fit(target_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], degree: int,
                             k_c: int = 1, k_a: int = 1, grid_points: int = 21,
                             grid: tuple[np.ndarray, np.ndarray] | None = None) -> PolynomialFit:
    """Least-squares fit of <phi(c), psi(a)> to ``target_fn`` on a unit-cube grid.

    ``target_fn(c, a)`` receives [N, k_c] and [N, k_a] arrays. The reported
    error is the maximum absolute residual over the grid.
    """
    c, a = grid if grid is not None else unit_grid(k_c, k_a, grid_points)
    if len(c) == 0:
        raise ValueError("grid must be non-empty")
    k_c, k_a = c.shape[1], a.shape[1]
    exps = monomial_exponents(k_c, k_a, degree)
    ce = [e[0] for e in exps]
    ae = [e[1] for e in exps]
    X = _powers(c, ce) * _powers(a, ae)
    y = np.asarray(target_fn(c, a), dtype=np.float64).reshape(-1)
    regularized = np.linalg.matrix_rank(X) < X.shape[1]
    if regularized:
        lam = 1e-12 * np.trace(X.T @ X) / X.shape[1]
        coef = np.linalg.solve(X.T @ X + lam * np.eye(X.shape[1]), X.T @ y)
    else:
        coef = np.linalg.lstsq(X, y, rcond=None)[0]
    fit = PolynomialFit(degree, ce, ae, coef, 0.0, bool(regularized))
    fit.max_error = float(np.max(np.abs(y - fit.score(c, a))))
    return fit
