"""Solving fractionally weighted estimating equations.

An estimate solves sum_d w_d U(theta; y_d) = 0 over the long-form draws of a
:class:`~figmm.em.FractionalImputation`. The built-in estimands are linear in
their parameters (or reduce to weighted moments) and are solved in closed
form; anything else goes through damped Newton with a finite-difference
Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import SolverError


@dataclass(frozen=True)
class EstimatingFunction:
    """U(theta; y) evaluated row-wise: ``evaluate(theta, Y) -> (len(Y), theta_dim)``.

    ``primary`` indexes the component of theta that is reported as "the"
    estimate (e.g. the correlation inside the correlation moment system).
    Discontinuous functions (indicators) must supply ``closed_form_solver``.
    """

    theta_dim: int
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    closed_form_solver: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    name: str = "U"
    primary: int = 0
    initial: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class PointEstimate:
    theta_hat: np.ndarray
    iterations: int
    residual_norm: float
    method: str

    @property
    def value(self):
        return float(self.theta_hat[0]) if self.theta_hat.size == 1 else self.theta_hat


def weighted_residual(U, theta, values, weights):
    """(sum_d w_d U(theta; y_d)) / sum_d w_d."""
    u = np.asarray(U.evaluate(np.asarray(theta, dtype=float), values), dtype=float)
    return weights @ u.reshape(len(values), U.theta_dim) / weights.sum()


def _fd_jacobian(U, theta, values, weights, r0):
    J = np.empty((U.theta_dim, U.theta_dim))
    for j in range(U.theta_dim):
        h = max(1e-6, 1e-6 * abs(theta[j]))
        t = theta.copy()
        t[j] += h
        J[:, j] = (weighted_residual(U, t, values, weights) - r0) / h
    return J


def newton_solve(U, values, weights, theta0=None, tol=1e-8, max_iter=100):
    theta = np.zeros(U.theta_dim) if theta0 is None else np.array(theta0, dtype=float)
    r = weighted_residual(U, theta, values, weights)
    norm = np.linalg.norm(r)
    for it in range(max_iter + 1):
        if norm < tol:
            return PointEstimate(theta, it, float(norm), "newton")
        if it == max_iter:
            break
        J = _fd_jacobian(U, theta, values, weights, r)
        try:
            step = np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, r, rcond=None)[0]
        lam = 1.0
        for _ in range(40):
            cand = theta - lam * step
            r_c = weighted_residual(U, cand, values, weights)
            n_c = np.linalg.norm(r_c)
            if np.isfinite(n_c) and n_c < norm:
                break
            lam *= 0.5
        else:
            break
        theta, r, norm = cand, r_c, n_c
    raise SolverError(f"Newton did not converge; residual norm {norm:.3g}", residual=float(norm))


def solve_weighted(U, values, weights, tol=None, max_iter=100):
    """Solve the weighted estimating equation over explicit draws."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if U.closed_form_solver is not None:
        theta = np.atleast_1d(np.asarray(U.closed_form_solver(values, weights), dtype=float))
        res = float(np.linalg.norm(weighted_residual(U, theta, values, weights)))
        tol = 1e-10 if tol is None else tol
        if not res < tol:
            raise SolverError(f"closed-form solution leaves residual {res:.3g}", residual=res)
        return PointEstimate(theta, 0, res, "closed_form")
    theta0 = U.initial(values, weights) if U.initial is not None else None
    return newton_solve(U, values, weights, theta0, 1e-8 if tol is None else tol, max_iter)


def solve_estimating_equation(imputation, U, tol=None, max_iter=100):
    """theta solving n^{-1} sum_i sum_g sum_j w*_igj U(theta; Y*_igj) = 0."""
    _, _, _, weights, values = imputation.long_form()
    return solve_weighted(U, values, weights, tol, max_iter)


# --------------------------------------------------------------------------
# built-in estimands
# --------------------------------------------------------------------------
def _wmean(x, w):
    return np.dot(w, x) / w.sum()


def builtin_mean(k):
    def evaluate(theta, Y):
        return (Y[:, k] - theta[0])[:, None]

    return EstimatingFunction(1, evaluate, lambda Y, w: [_wmean(Y[:, k], w)], name=f"mean[{k}]")


def builtin_proportion(k, c):
    c = float(c)

    def evaluate(theta, Y):
        return ((Y[:, k] < c).astype(float) - theta[0])[:, None]

    return EstimatingFunction(
        1, evaluate, lambda Y, w: [_wmean((Y[:, k] < c).astype(float), w)],
        name=f"prop[{k}<{c:g}]",
    )


def builtin_correlation(k, l):
    """Moment system (mu_k, mu_l, var_k, var_l, rho); rho is the reported value."""

    def evaluate(theta, Y):
        mk, ml, vk, vl, rho = theta
        dk, dl = Y[:, k] - mk, Y[:, l] - ml
        return np.column_stack([dk, dl, dk * dk - vk, dl * dl - vl,
                                dk * dl - rho * np.sqrt(vk * vl)])

    def solve(Y, w):
        mk, ml = _wmean(Y[:, k], w), _wmean(Y[:, l], w)
        dk, dl = Y[:, k] - mk, Y[:, l] - ml
        vk, vl = _wmean(dk * dk, w), _wmean(dl * dl, w)
        return [mk, ml, vk, vl, _wmean(dk * dl, w) / np.sqrt(vk * vl)]

    return EstimatingFunction(5, evaluate, solve, name=f"corr[{k},{l}]", primary=4)


def _column(token, columns):
    if token in columns:
        return columns.index(token)
    try:
        j = int(token)
    except ValueError:
        raise ValueError(f"unknown column {token!r}") from None
    if not 1 <= j <= len(columns):
        raise ValueError(f"column index {j} out of range 1..{len(columns)}")
    return j - 1


def parse_estimand(spec, columns):
    """Build an estimating function from ``mean:k``, ``prop:k:c`` or ``corr:k:l``.

    Columns are given by name or by 1-based position.
    """
    parts = spec.split(":")
    kind = parts[0].strip().lower()
    columns = list(columns)
    if kind == "mean" and len(parts) == 2:
        U = builtin_mean(_column(parts[1], columns))
    elif kind == "prop" and len(parts) == 3:
        U = builtin_proportion(_column(parts[1], columns), float(parts[2]))
    elif kind == "corr" and len(parts) == 3:
        U = builtin_correlation(_column(parts[1], columns), _column(parts[2], columns))
    else:
        raise ValueError(f"bad estimand spec {spec!r}; expected mean:k, prop:k:c or corr:k:l")
    return EstimatingFunction(U.theta_dim, U.evaluate, U.closed_form_solver, spec, U.primary,
                              U.initial)
