"""Optimisation baselines: SOCP initialisation, SCA, and fixed-direction MRT/ZF.

All solvers work on a single channel matrix ``h`` of shape ``(K, N_T)``
whose row ``k`` is ``h_k``; beamformers use the same layout, so
``s[k, i] = h_k^H w_i`` is ``(conj(h) @ w.T)[k, i]``.

Complex beams enter the convex subproblems through their real and
imaginary parts. For user ``k`` the real map ``M_k = [[hr, hi], [-hi, hr]]``
sends ``(Re w_i, Im w_i)`` to ``(Re s_ki, Im s_ki)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .barrier import BarrierSettings, barrier_solve
from .errors import ContractError, InfeasibleError, SolverError

LN2 = np.log(2.0)


@dataclass(frozen=True)
class ScaConfig:
    convergence_tol: float = 1e-4
    max_outer_iters: int = 100
    barrier: BarrierSettings = BarrierSettings()
    sigma2: float = 1.0
    extra_starts: bool = True  # also run from zero-forcing and per-user priority points, keep the best

    def __post_init__(self):
        if self.convergence_tol <= 0:
            raise ContractError("convergence_tol must be positive")
        if self.max_outer_iters < 1:
            raise ContractError("max_outer_iters must be at least 1")
        if self.sigma2 <= 0:
            raise ContractError("sigma2 must be positive")


@dataclass
class ScaState:
    w: np.ndarray
    a: np.ndarray
    b: np.ndarray
    objective: float


@dataclass
class ScaResult:
    w: np.ndarray
    sum_rate: float
    trace: list[float]
    state: ScaState
    iterations: int


@dataclass
class SubproblemResult:
    w: np.ndarray
    gamma: np.ndarray
    a: np.ndarray
    b: np.ndarray
    objective: float
    gap: float
    kkt_residual: float
    x: np.ndarray = field(repr=False, default=None)


@dataclass
class PowerResult:
    powers: np.ndarray
    w: np.ndarray
    sum_rate: float
    trace: list[float]


# ---------------------------------------------------------------------------
# shared helpers


def cross_gains(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``s[k, i] = h_k^H w_i``."""
    return np.conj(h) @ w.T


def user_rates(h: np.ndarray, w: np.ndarray, sigma2: float = 1.0) -> np.ndarray:
    p = np.abs(cross_gains(h, w)) ** 2
    sig = np.diag(p)
    return np.log2(1 + sig / (p.sum(axis=1) - sig + sigma2))


def is_feasible(h, w, p_max, r_req, sigma2=1.0, power_tol=1e-8, rate_tol=1e-6) -> bool:
    return bool(
        np.sum(np.abs(w) ** 2) <= p_max + power_tol and np.min(user_rates(h, w, sigma2)) >= r_req - rate_tol
    )


def _check_h(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim != 2:
        raise ContractError(f"channel must be (K, N_T), got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ContractError("channel contains non-finite entries")
    return h


def _real_maps(h: np.ndarray) -> np.ndarray:
    """``(K, 2, 2N)`` stack of the real maps ``M_k``."""
    hr, hi = h.real, h.imag
    return np.stack([np.concatenate([hr, hi], axis=1), np.concatenate([-hi, hr], axis=1)], axis=1)


class _Layout:
    """Index bookkeeping for ``x = [Re W (row-major), Im W, gamma, a, b]``."""

    def __init__(self, k: int, n: int):
        self.k, self.n = k, n
        kn = k * n
        self.nw = 2 * kn
        self.size = 2 * kn + 3 * k
        self.gamma = np.arange(2 * kn, 2 * kn + k)
        self.a = self.gamma + k
        self.b = self.a + k
        self.blocks = [np.r_[i * n : (i + 1) * n, kn + i * n : kn + (i + 1) * n] for i in range(k)]

    def pack(self, w, gamma, a, b) -> np.ndarray:
        return np.concatenate([w.real.ravel(), w.imag.ravel(), gamma, a, b])

    def unpack(self, x):
        kn = self.k * self.n
        w = (x[:kn] + 1j * x[kn : 2 * kn]).reshape(self.k, self.n)
        return w, x[self.gamma], x[self.a], x[self.b]


# ---------------------------------------------------------------------------
# SOCP initialisation


def _soc_problem(h, p_max, r_req, sigma2, with_slack: bool):
    """Rate constraints as second-order cones in the real variables.

    For each user: ``||(s_k1, ..., s_kK, sigma)|| <= c Re(s_kk) + r`` with
    ``c = sqrt(1 + 1 / (2^R - 1))``, plus ``c Re(s_kk) + r > 0`` and the
    power budget. Without slack the variable ``r`` is absent (fixed at 0).
    """
    k, n = h.shape
    lay = _Layout(k, n)
    nv = lay.nw + (1 if with_slack else 0)
    maps = _real_maps(h)
    c = np.sqrt(1.0 + 1.0 / (2.0**r_req - 1.0))
    quads, lins = [], []
    for u in range(k):
        b = np.zeros((2 * k, nv))
        for i, idx in enumerate(lay.blocks):
            b[2 * i : 2 * i + 2, idx] = maps[u]
        q = np.zeros(nv)
        q[lay.blocks[u]] = c * maps[u][0]
        if with_slack:
            q[-1] = 1.0
        quads.append(b.T @ b)
        lins.append(q)
    eye_w = np.zeros((nv, nv))
    eye_w[: lay.nw, : lay.nw] = np.eye(lay.nw)

    def constraints(y):
        vals, jac, hess = [], [], []
        for q2, q in zip(quads, lins):
            t = q @ y
            vals.append(y @ q2 @ y + sigma2 - t * t)
            jac.append(2 * q2 @ y - 2 * t * q)
            hess.append(2 * q2 - 2 * np.outer(q, q))
        for q in lins:
            vals.append(-(q @ y))
            jac.append(-q)
            hess.append(np.zeros((nv, nv)))
        yw = y[: lay.nw]
        vals.append(yw @ yw - p_max)
        g = np.zeros(nv)
        g[: lay.nw] = 2 * yw
        jac.append(g)
        hess.append(2 * eye_w)
        return np.array(vals), np.array(jac), np.array(hess)

    degree = 2 * k + k + 1
    return lay, nv, constraints, degree, eye_w


def socp_init(h, p_max: float, r_req: float, sigma2: float = 1.0, settings: BarrierSettings = BarrierSettings()):
    """Minimum-power beamformer meeting every rate requirement.

    Raises :class:`InfeasibleError` when no beamformer within the power
    budget meets the requirements. Returned beams satisfy ``h_k^H w_k >= 0``.
    """
    h = _check_h(h)
    if r_req <= 0:
        return np.zeros_like(h)
    k, n = h.shape
    sigma = np.sqrt(sigma2)
    lay, nv, cons1, deg, _ = _soc_problem(h, p_max, r_req, sigma2, with_slack=True)

    def slack_objective(y):
        g = np.zeros(nv)
        g[-1] = 1.0
        return float(y[-1]), g, np.zeros((nv, nv))

    y0 = np.zeros(nv)
    y0[-1] = sigma + 1.0
    margin = 1e-3 * sigma
    res = barrier_solve(slack_objective, cons1, y0, settings, degree=deg, stop=lambda y: y[-1] < -margin)
    if res.x[-1] >= 0:
        raise InfeasibleError(f"rate requirement {r_req} is infeasible within power {p_max} (slack {res.x[-1]:.3g})")
    _, _, cons2, deg2, eye_w = _soc_problem(h, p_max, r_req, sigma2, with_slack=False)

    def power_objective(x):
        return float(x @ x), 2 * x, 2 * eye_w

    x = barrier_solve(power_objective, cons2, res.x[: lay.nw], settings, degree=deg2).x
    w = (x[: k * n] + 1j * x[k * n :]).reshape(k, n)
    phase = np.diag(cross_gains(h, w))
    return w * np.exp(-1j * np.angle(phase))[:, None]


def init_aux(w, h, sigma2: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Auxiliary variables that make the lifted constraints tight at ``w``."""
    h = _check_h(h)
    p = np.abs(cross_gains(h, np.asarray(w))) ** 2
    sig = np.diag(p)
    interference = p.sum(axis=1) - sig + sigma2
    sinr = sig / interference
    if np.any(sinr <= 0):
        raise ContractError("a user has zero rate; auxiliary variable a_k would be -inf")
    # 2^R - 1 equals the SINR exactly
    return np.log(sinr), np.log(interference)


# ---------------------------------------------------------------------------
# SCA subproblem


def _sca_subproblem(h, w_t, a_t, b_t, p_max, r_req, sigma2):
    k, n = h.shape
    lay = _Layout(k, n)
    nv = lay.size
    maps = _real_maps(h)
    s_t = cross_gains(h, w_t)
    gram = np.einsum("kri,krj->kij", maps, maps)
    ea, eb = np.exp(a_t), np.exp(b_t)
    zeros = np.zeros((nv, nv))

    def objective(x):
        g = np.zeros(nv)
        g[lay.gamma] = -1.0
        return -float(np.sum(x[lay.gamma])), g, zeros

    def constraints(x):
        vals = np.empty(4 * k + 1)
        jac = np.zeros((4 * k + 1, nv))
        hess = np.zeros((4 * k + 1, nv, nv))
        gam, a, b = x[lay.gamma], x[lay.a], x[lay.b]
        for u in range(k):
            # c1: e^{a+b} <= first-order expansion of |s_uu|^2
            zk = x[lay.blocks[u]]
            st = np.array([s_t[u, u].real, s_t[u, u].imag])
            s_now = maps[u] @ zk
            eab = np.exp(a[u] + b[u])
            vals[u] = eab - (2 * st @ s_now - st @ st)
            jac[u, lay.blocks[u]] = -2 * maps[u].T @ st
            jac[u, lay.a[u]] = jac[u, lay.b[u]] = eab
            ab = [lay.a[u], lay.b[u]]
            hess[u][np.ix_(ab, ab)] = eab
            # c2: 2^gamma - 1 <= expansion of e^a
            r = k + u
            pw = 2.0 ** gam[u]
            vals[r] = pw - 1 - ea[u] * (1 + a[u] - a_t[u])
            jac[r, lay.gamma[u]] = LN2 * pw
            jac[r, lay.a[u]] = -ea[u]
            hess[r, lay.gamma[u], lay.gamma[u]] = LN2 * LN2 * pw
            # c3: interference + noise <= expansion of e^b
            r = 2 * k + u
            total = sigma2 - eb[u] * (1 + b[u] - b_t[u])
            for i in range(k):
                if i == u:
                    continue
                idx = lay.blocks[i]
                zi = x[idx]
                total += zi @ gram[u] @ zi
                jac[r, idx] = 2 * gram[u] @ zi
                hess[r][np.ix_(idx, idx)] = 2 * gram[u]
            vals[r] = total
            jac[r, lay.b[u]] = -eb[u]
            # c5: rate floor on gamma
            r = 3 * k + u
            vals[r] = r_req - gam[u]
            jac[r, lay.gamma[u]] = -1.0
        xw = x[: lay.nw]
        vals[-1] = xw @ xw - p_max
        jac[-1, : lay.nw] = 2 * xw
        hess[-1][: lay.nw, : lay.nw] = 2 * np.eye(lay.nw)
        return vals, jac, hess

    return lay, objective, constraints


def _shifted_start(h, w, p_max, r_req, sigma2, lay: _Layout):
    """Strictly interior point of the subproblem expanded at ``w`` with tight aux variables."""
    a_t, b_t = init_aux(w, h, sigma2)
    sinr = np.exp(a_t)
    need = 2.0**r_req - 1.0
    if np.any(sinr <= need) or np.sum(np.abs(w) ** 2) >= p_max:
        raise ContractError("expansion point has no slack in rates or power")
    eps = np.minimum(1e-3, (sinr - need) / (4 * sinr))
    a0, b0 = a_t - 2 * eps, b_t + eps
    gamma0 = 0.5 * (r_req + np.log2(1 + sinr * (1 - 2 * eps)))
    return a_t, b_t, lay.pack(w, gamma0, a0, b0)


def subproblem_solve(
    h,
    w_tilde,
    a_tilde,
    b_tilde,
    p_max: float,
    r_req: float,
    sigma2: float = 1.0,
    x0: np.ndarray | None = None,
    settings: BarrierSettings = BarrierSettings(),
) -> SubproblemResult:
    """Solve the convexified problem expanded at ``(w_tilde, a_tilde, b_tilde)``.

    Without ``x0`` the expansion point must have rate and power slack and
    ``a_tilde, b_tilde`` must be tight there (as produced by :func:`init_aux`).
    """
    h = _check_h(h)
    w_tilde = np.asarray(w_tilde, dtype=np.complex128)
    lay, objective, constraints = _sca_subproblem(h, w_tilde, a_tilde, b_tilde, p_max, r_req, sigma2)
    if x0 is None:
        _, _, x0 = _shifted_start(h, w_tilde, p_max, r_req, sigma2, lay)
    res = barrier_solve(objective, constraints, x0, settings)
    w, gam, a, b = lay.unpack(res.x)
    return SubproblemResult(w, gam, a, b, -res.value, res.gap, res.kkt_residual, res.x)


def _interior_scale(w, p_max):
    """Scale a minimum-power solution halfway to the budget; every SINR strictly rises."""
    p = float(np.sum(np.abs(w) ** 2))
    if p <= 0:
        return None
    target = 0.5 * (p + p_max)
    if target <= p * (1 + 1e-12):
        return None
    return w * np.sqrt(target / p)


def _sca_from(h, w_start, p_max, r_req, config: ScaConfig) -> ScaResult:
    sigma2 = config.sigma2
    k, n = h.shape
    lay = _Layout(k, n)
    a_t, b_t, x = _shifted_start(h, w_start, p_max, r_req, sigma2, lay)
    w_t = w_start
    trace = [float(np.sum(x[lay.gamma]))]
    iterations = 0
    for _ in range(config.max_outer_iters):
        try:
            sub = subproblem_solve(h, w_t, a_t, b_t, p_max, r_req, sigma2, x0=x, settings=config.barrier)
        except SolverError as exc:
            raise SolverError(f"SCA subproblem failed at outer iteration {iterations}: {exc}", last_iterate=w_t) from exc
        iterations += 1
        if sub.objective < trace[-1]:
            break  # barrier precision floor reached; keep the previous iterate
        improvement = sub.objective - trace[-1]
        trace.append(sub.objective)
        x, w_t, a_t, b_t = sub.x, sub.w, sub.a, sub.b
        if improvement < config.convergence_tol:
            break
    state = ScaState(w_t, a_t, b_t, trace[-1])
    return ScaResult(w_t, float(user_rates(h, w_t, sigma2).sum()), trace, state, iterations)


def _zf_start(h, p_max, r_req, sigma2):
    """Strictly interior zero-forcing point with water-filled powers, or None."""
    k, n = h.shape
    try:
        d = zf_directions(h, max_cond=1e6)
    except ContractError:
        return None
    g = np.abs(np.diag(cross_gains(h, d))) ** 2
    p_min = (2.0**r_req - 1.0) * sigma2 / g
    if p_min.sum() >= p_max:
        return None
    p_wf = waterfill_floors(g, p_max, p_min, sigma2)
    p_mid = p_min * (p_max + p_min.sum()) / (2 * p_min.sum()) if p_min.sum() > 0 else np.full(k, p_max / (2 * k))
    return np.sqrt(0.5 * (p_wf + p_mid))[:, None] * d


def _priority_start(h, w, j, p_max, r_req, sigma2):
    """Push user ``j``'s beam along its own channel while staying strictly feasible."""
    s_jj = cross_gains(h, w)[j, j]
    u = h[j] / np.linalg.norm(h[j]) * (s_jj / abs(s_jj) if abs(s_jj) > 0 else 1.0)
    budget = p_max * (1 - 1e-3)
    # largest alpha with ||w + alpha u e_j||^2 = budget
    wj = w[j]
    other = np.sum(np.abs(w) ** 2) - np.sum(np.abs(wj) ** 2)
    bb = 2 * np.real(np.vdot(u, wj))
    cc = np.sum(np.abs(wj) ** 2) + other - budget
    disc = bb * bb - 4 * cc
    if disc <= 0:
        return None
    alpha = (-bb + np.sqrt(disc)) / 2
    for _ in range(30):
        cand = w.copy()
        cand[j] = wj + alpha * u
        if np.min(user_rates(h, cand, sigma2)) > r_req and np.sum(np.abs(cand) ** 2) < p_max:
            return cand
        alpha *= 0.5
    return None


def sca_solve(h, p_max: float, r_req: float, config: ScaConfig = ScaConfig()) -> ScaResult:
    """Successive convex approximation from the SOCP starting point.

    The trace holds the subproblem objective (sum of the lifted rate
    variables) per outer iteration, starting with the initial point. With
    ``config.extra_starts`` further runs start from a water-filled
    zero-forcing point and from one point per user that favours that user;
    the best local solution (and its trace) is returned.
    """
    h = _check_h(h)
    sigma2 = config.sigma2
    r_floor = max(r_req, 0.0)
    w0 = socp_init(h, p_max, r_floor, sigma2, config.barrier)
    if r_floor == 0:
        w0 = np.sqrt(p_max / (2 * h.shape[0])) * h / np.linalg.norm(h, axis=1, keepdims=True)
    w_start = _interior_scale(w0, p_max)
    if w_start is None:
        # the budget is exactly exhausted by the rate floors: nothing to optimise
        a, b = init_aux(w0, h, sigma2)
        total = float(user_rates(h, w0, sigma2).sum())
        return ScaResult(w0, total, [total], ScaState(w0, a, b, total), 0)
    best = _sca_from(h, w_start, p_max, r_floor, config)
    starts = []
    if config.extra_starts:
        starts.append(_zf_start(h, p_max, r_floor, sigma2))
        starts += [_priority_start(h, w_start, j, p_max, r_floor, sigma2) for j in range(h.shape[0])]
    for w_alt in starts:
        if w_alt is None:
            continue
        alt = _sca_from(h, w_alt, p_max, r_floor, config)
        if alt.sum_rate > best.sum_rate:
            best = alt
    return best


# ---------------------------------------------------------------------------
# fixed-direction designs


def mrt_directions(h) -> np.ndarray:
    h = _check_h(h)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ContractError("MRT needs non-zero channels")
    return h / norms


def zf_directions(h, max_cond: float = 1e12) -> np.ndarray:
    """Unit-norm zero-forcing beams: ``h_k^H w_j = 0`` for ``j != k``."""
    h = _check_h(h)
    k, n = h.shape
    if k > n:
        raise ContractError(f"zero forcing needs K <= N_T (K={k}, N_T={n})")
    g = np.conj(h)  # row k is h_k^H
    if np.linalg.cond(g) > max_cond:
        raise ContractError("channel matrix is rank deficient; zero forcing undefined")
    v = g.conj().T @ np.linalg.inv(g @ g.conj().T)
    w = v.T
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def min_power_allocation(gains: np.ndarray, r_req: float, sigma2: float = 1.0) -> np.ndarray:
    """Smallest powers meeting the rate floor with fixed directions.

    ``gains[k, i] = |h_k^H d_i|^2``. Raises :class:`InfeasibleError` when no
    non-negative solution exists.
    """
    k = gains.shape[0]
    need = 2.0**r_req - 1.0
    diag = np.diag(gains)
    if np.any(diag <= 0):
        raise InfeasibleError("a user has zero gain on its own beam")
    m = np.diag(diag) - need * (gains - np.diag(diag))
    try:
        p = np.linalg.solve(m, np.full(k, need * sigma2))
    except np.linalg.LinAlgError:
        raise InfeasibleError("rate floors cannot be met with these directions") from None
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InfeasibleError("rate floors cannot be met with these directions")
    return p


def _power_subproblem(gains, p_t, a_t, b_t, p_max, r_req, sigma2):
    k = gains.shape[0]
    nv = 4 * k
    ip, ig, ia, ib = (np.arange(k) + j * k for j in range(4))
    ea, eb = np.exp(a_t), np.exp(b_t)
    off = gains - np.diag(np.diag(gains))
    zeros = np.zeros((nv, nv))

    def objective(x):
        g = np.zeros(nv)
        g[ig] = -1.0
        return -float(np.sum(x[ig])), g, zeros

    def constraints(x):
        m = 5 * k + 1
        vals = np.empty(m)
        jac = np.zeros((m, nv))
        hess = np.zeros((m, nv, nv))
        p, gam, a, b = x[ip], x[ig], x[ia], x[ib]
        for u in range(k):
            eab = np.exp(a[u] + b[u])
            vals[u] = eab - p[u] * gains[u, u]
            jac[u, ip[u]] = -gains[u, u]
            jac[u, ia[u]] = jac[u, ib[u]] = eab
            ab = [ia[u], ib[u]]
            hess[u][np.ix_(ab, ab)] = eab
            r = k + u
            pw = 2.0 ** gam[u]
            vals[r] = pw - 1 - ea[u] * (1 + a[u] - a_t[u])
            jac[r, ig[u]] = LN2 * pw
            jac[r, ia[u]] = -ea[u]
            hess[r, ig[u], ig[u]] = LN2 * LN2 * pw
            r = 2 * k + u
            vals[r] = off[u] @ p + sigma2 - eb[u] * (1 + b[u] - b_t[u])
            jac[r, ip] = off[u]
            jac[r, ib[u]] = -eb[u]
            r = 3 * k + u
            vals[r] = r_req - gam[u]
            jac[r, ig[u]] = -1.0
            r = 4 * k + u
            vals[r] = -p[u]
            jac[r, ip[u]] = -1.0
        vals[-1] = p.sum() - p_max
        jac[-1, ip] = 1.0
        return vals, jac, hess

    return objective, constraints


def power_only_sca(h, directions, p_max: float, r_req: float, config: ScaConfig = ScaConfig()) -> PowerResult:
    """Optimise per-user powers along fixed unit ``directions`` by SCA."""
    h = _check_h(h)
    d = np.asarray(directions, dtype=np.complex128)
    if d.shape != h.shape:
        raise ContractError(f"directions {d.shape} do not match channel {h.shape}")
    if not np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9):
        raise ContractError("directions must have unit norm")
    sigma2 = config.sigma2
    k = h.shape[0]
    gains = np.abs(cross_gains(h, d)) ** 2
    r_floor = max(r_req, 0.0)
    p_min = min_power_allocation(gains, r_floor, sigma2) if r_floor > 0 else np.zeros(k)
    if p_min.sum() > p_max * (1 + 1e-12):
        raise InfeasibleError(f"rate floors need power {p_min.sum():.6g} > budget {p_max}")

    def finish(p, trace):
        w = np.sqrt(np.maximum(p, 0))[:, None] * d
        return PowerResult(p, w, float(user_rates(h, w, sigma2).sum()), trace)

    total = p_min.sum()
    target = 0.5 * (total + p_max)
    if total <= 0:
        p0 = np.full(k, p_max / (2 * k))
    elif target <= total * (1 + 1e-12):
        r = user_rates(h, np.sqrt(p_min)[:, None] * d, sigma2).sum()
        return finish(p_min, [float(r)])
    else:
        p0 = p_min * target / total
    sig = p0 * np.diag(gains)
    interference = (gains - np.diag(np.diag(gains))) @ p0 + sigma2
    a_t, b_t = np.log(sig / interference), np.log(interference)
    sinr = np.exp(a_t)
    need = 2.0**r_floor - 1.0
    eps = np.minimum(1e-3, (sinr - need) / (4 * sinr))
    gamma0 = 0.5 * (r_floor + np.log2(1 + sinr * (1 - 2 * eps)))
    x = np.concatenate([p0, gamma0, a_t - 2 * eps, b_t + eps])
    trace = [float(gamma0.sum())]
    for _ in range(config.max_outer_iters):
        objective, constraints = _power_subproblem(gains, x[:k], a_t, b_t, p_max, r_floor, sigma2)
        try:
            res = barrier_solve(objective, constraints, x, config.barrier)
        except SolverError as exc:
            raise SolverError(f"power subproblem failed: {exc}", last_iterate=x[:k]) from exc
        value = -res.value
        if value < trace[-1]:
            break
        improvement = value - trace[-1]
        trace.append(value)
        x = res.x
        a_t, b_t = x[2 * k : 3 * k], x[3 * k :]
        if improvement < config.convergence_tol:
            break
    return finish(x[:k], trace)


def waterfill_floors(gains, p_max: float, p_min, sigma2: float = 1.0, iters: int = 200) -> np.ndarray:
    """``max sum log2(1 + g_k p_k / sigma2)`` s.t. ``sum p = p_max``, ``p >= p_min``.

    Solution ``p_k = max(p_min_k, mu - sigma2 / g_k)`` with the level ``mu`` found by bisection.
    """
    g = np.asarray(gains, dtype=np.float64) / sigma2
    p_min = np.broadcast_to(np.asarray(p_min, dtype=np.float64), g.shape)
    if p_min.sum() > p_max * (1 + 1e-12):
        raise InfeasibleError("rate floors exceed the power budget")
    lo, hi = 0.0, p_max + np.max(1 / g) + np.max(p_min)
    for _ in range(iters):
        mu = 0.5 * (lo + hi)
        if np.maximum(p_min, mu - 1 / g).sum() > p_max:
            hi = mu
        else:
            lo = mu
    return np.maximum(p_min, lo - 1 / g)


Solver = Callable[..., object]
