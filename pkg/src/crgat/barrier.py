"""Log-barrier Newton method for smooth convex programs.

Problems are posed as ``minimize f(x) s.t. g_i(x) < 0`` where every ``g_i``
is smooth and the barrier ``-sum log(-g_i)`` is convex on the feasible
interior. Second-order cone constraints written as ``||u||^2 - t^2 < 0``
(together with ``-t < 0``) qualify even though ``g_i`` itself is not convex.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import SolverError

# objective(x) -> (value, gradient, hessian)
Objective = Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]]
# constraints(x) -> (values (m,), jacobian (m, n), hessians (m, n, n))
Constraints = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class BarrierSettings:
    t0: float = 1.0
    factor: float = 10.0  # barrier parameter growth per outer step
    gap_tol: float = 1e-11  # stop once (barrier degree)/t falls below this
    newton_tol: float = 1e-12  # half squared Newton decrement
    max_newton: int = 200
    max_outer: int = 60
    armijo: float = 0.25
    backtrack: float = 0.5


@dataclass
class BarrierResult:
    x: np.ndarray
    value: float
    duals: np.ndarray
    gap: float
    kkt_residual: float
    newton_steps: int
    stopped_early: bool = False


def _barrier_terms(x, t, objective, constraints):
    f, gf, hf = objective(x)
    g, jac, hess = constraints(x)
    if np.any(g >= 0) or not np.all(np.isfinite(g)):
        return None
    inv = -1.0 / g
    val = t * f - np.sum(np.log(-g))
    grad = t * gf + jac.T @ inv
    h = t * hf + (jac.T * inv**2) @ jac + np.einsum("m,mij->ij", inv, hess)
    return val, grad, h


def _phi(x, t, objective, constraints) -> float:
    # trial points far outside the domain may overflow; they score +inf
    with np.errstate(over="ignore", invalid="ignore"):
        g = constraints(x)[0]
    if np.any(g >= 0) or not np.all(np.isfinite(g)):
        return np.inf
    return t * objective(x)[0] - float(np.sum(np.log(-g)))


def barrier_solve(
    objective: Objective,
    constraints: Constraints,
    x0: np.ndarray,
    settings: BarrierSettings = BarrierSettings(),
    degree: float | None = None,
    stop: Callable[[np.ndarray], bool] | None = None,
) -> BarrierResult:
    """Follow the central path from the strictly feasible ``x0``.

    ``degree`` is the barrier parameter (defaults to the number of
    constraints); ``stop`` may end the run early once it returns True for the
    current iterate (used by phase-one feasibility searches).
    """
    x = np.array(x0, dtype=np.float64)
    g0 = constraints(x)[0]
    if np.any(g0 >= 0):
        raise SolverError("barrier start point is not strictly feasible", last_iterate=x)
    m = float(len(g0) if degree is None else degree)
    t = settings.t0
    steps = 0
    for _ in range(settings.max_outer):
        for _ in range(settings.max_newton):
            terms = _barrier_terms(x, t, objective, constraints)
            if terms is None:
                raise SolverError("iterate left the feasible interior", last_iterate=x)
            val, grad, hess = terms
            try:
                dx = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                dx = -np.linalg.lstsq(hess, grad, rcond=None)[0]
            dec = -float(grad @ dx)
            if not np.isfinite(dec):
                raise SolverError("Newton system is singular", last_iterate=x)
            if dec / 2 <= settings.newton_tol * max(1.0, abs(val)) or dec <= 0:
                break
            step = 1.0
            while True:
                cand = x + step * dx
                if _phi(cand, t, objective, constraints) <= val - settings.armijo * step * dec:
                    break
                step *= settings.backtrack
                if step < 1e-14:
                    break
            if step < 1e-14:
                break  # no progress possible at this precision
            x = cand
            steps += 1
            if stop is not None and stop(x):
                return _result(x, t, m, objective, constraints, steps, True)
        else:
            raise SolverError(f"centering did not converge at t={t:g}", last_iterate=x)
        if m / t < settings.gap_tol:
            break
        t *= settings.factor
    return _result(x, t, m, objective, constraints, steps, False)


def _result(x, t, m, objective, constraints, steps, early) -> BarrierResult:
    f, gf, _ = objective(x)
    g, jac, _ = constraints(x)
    duals = -1.0 / (t * g)
    # near-active constraint values are cancellation-limited at large t;
    # refit their multipliers from stationarity instead
    active = -g < np.sqrt(m / t)
    if active.any():
        rest = gf + jac[~active].T @ duals[~active]
        fit = np.linalg.lstsq(jac[active].T, -rest, rcond=None)[0]
        duals[active] = np.maximum(fit, 0.0)
    kkt = float(np.linalg.norm(gf + jac.T @ duals))
    return BarrierResult(x, float(f), duals, m / t, kkt, steps, early)
