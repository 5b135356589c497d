"""Multi-start reference optimiser for tiny instances.

Each restart is a random beamformer. Stage one runs projected gradient
ascent on a penalised sum rate until every rate floor holds with strict
slack. Stage two maximises the barrier objective

    sum_k R_k + eps * (sum_k log(R_k - R_req) + log(P_max - ||W||^2))

by damped Newton steps for a decreasing sequence of ``eps``; line searches
reject any point outside the feasible interior, so every stage-two endpoint
is feasible. Gradients are analytic; Hessians are central differences of
those gradients. All restarts advance together as one batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

LN2 = np.log(2.0)
MAX_USERS = 3
MAX_ANTENNAS = 4
STAGE_ONE_SLACK = 5e-4


@dataclass(frozen=True)
class OracleBudget:
    restarts: int = 128
    penalty_iters: int = 400
    penalty: float = 10.0
    eps_schedule: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9)
    newton_iters: int = 40
    prune_gap: float = 0.05  # after the eps <= prune_eps stages, drop restarts this far below the best
    prune_eps: float = 1e-3
    refine_keep: int = 16  # restarts carried into the fine stages (must cover min_recurrences)
    recur_tol: float = 1e-4
    min_recurrences: int = 5
    seed: int = 0
    sigma2: float = 1.0

    def __post_init__(self):
        if self.restarts < 1:
            raise ContractError("restarts must be positive")
        if not self.eps_schedule:
            raise ContractError("eps_schedule must not be empty")
        if self.refine_keep < self.min_recurrences:
            raise ContractError("refine_keep must be at least min_recurrences")


@dataclass
class OracleResult:
    w: np.ndarray | None
    sum_rate: float
    feasible: bool
    stable: bool
    recurrences: int
    n_feasible: int


def check_cost_guard(k: int, n_t: int) -> None:
    if k > MAX_USERS or n_t > MAX_ANTENNAS:
        raise ContractError(
            f"brute-force oracle is limited to K <= {MAX_USERS}, N_T <= {MAX_ANTENNAS} (got K={k}, N_T={n_t})"
        )


def _rate_parts(h, w, sigma2):
    """Rates ``(S, K)`` for a batch ``w`` of shape ``(S, K, N)`` plus gradient ingredients."""
    s = np.einsum("kn,sin->ski", np.conj(h), w)
    p = np.abs(s) ** 2
    total = p.sum(axis=2) + sigma2
    interf = total - np.einsum("skk->sk", p)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log2(total / interf), s, total, interf


def _weighted_rate_grad(h, c, s, total, interf):
    """Gradient of ``sum_k c_k R_k`` w.r.t. every ``w_i`` (complex convention)."""
    off = 1.0 - np.eye(h.shape[0])
    coef = c[:, :, None] * (2.0 / LN2) * s * (1.0 / total[:, :, None] - off / interf[:, :, None])
    return np.einsum("ski,kn->sin", coef, h)


def _power(w):
    return np.sum(np.abs(w) ** 2, axis=(1, 2))


def _project(w, p_max):
    return w * np.minimum(1.0, np.sqrt(p_max / np.maximum(_power(w), 1e-300)))[:, None, None]


# ---------------------------------------------------------------------------
# stage one: reach strict feasibility


def _penalised(h, w, r_req, budget):
    r, s, total, interf = _rate_parts(h, w, budget.sigma2)
    short = r < r_req + 1e-3
    f = r.sum(axis=1) - budget.penalty * np.where(short, r_req + 1e-3 - r, 0).sum(axis=1)
    return f, r, (s, total, interf, 1.0 + budget.penalty * short)


def _stage_one(h, w, p_max, r_req, budget):
    step = np.full(len(w), 0.1 * p_max / max(float(np.max(np.sum(np.abs(h) ** 2, axis=1))), 1e-12))
    for _ in range(budget.penalty_iters):
        f, r, (s, total, interf, c) = _penalised(h, w, r_req, budget)
        pending = ~np.all(r > r_req + STAGE_ONE_SLACK, axis=1)
        if not pending.any():
            break
        g = _weighted_rate_grad(h, c, s, total, interf)
        trial = step.copy()
        for _ in range(30):
            cand = _project(w + trial[:, None, None] * g, p_max)
            fc = _penalised(h, cand, r_req, budget)[0]
            ok = pending & (fc > f)
            w = np.where(ok[:, None, None], cand, w)
            pending &= ~ok
            if not pending.any():
                break
            trial = np.where(pending, trial * 0.5, trial)
        step = np.where(pending, trial, trial * 2.0)
    return w


# ---------------------------------------------------------------------------
# stage two: barrier continuation with Newton steps


def _barrier_value(h, w, p_max, r_req, eps, sigma2):
    r = _rate_parts(h, w, sigma2)[0]
    slack = r - r_req
    room = p_max - _power(w)
    ok = np.all(slack > 0, axis=1) & (room > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = r.sum(axis=1) + eps * (np.log(slack).sum(axis=1) + np.log(room))
    return np.where(ok, val, -np.inf)


def _barrier_grad(h, w, p_max, r_req, eps, sigma2):
    r, s, total, interf = _rate_parts(h, w, sigma2)
    c = 1.0 + eps / (r - r_req)
    room = p_max - _power(w)
    g = _weighted_rate_grad(h, c, s, total, interf) - (2 * eps / room)[:, None, None] * w
    return np.concatenate([g.real.reshape(len(w), -1), g.imag.reshape(len(w), -1)], axis=1)


def _to_complex(x, shape):
    half = x.shape[1] // 2
    return (x[:, :half] + 1j * x[:, half:]).reshape((len(x),) + shape)


def _to_real(w):
    return np.concatenate([w.real.reshape(len(w), -1), w.imag.reshape(len(w), -1)], axis=1)


def _hessian(h, x, shape, p_max, r_req, eps, sigma2):
    s_count, dim = x.shape
    delta = 1e-6 * np.maximum(1.0, np.abs(x).max(axis=1))
    # every coordinate perturbation of every restart at once
    pert = np.eye(dim)[None, :, :] * delta[:, None, None]
    xp = (x[:, None, :] + pert).reshape(-1, dim)
    xm = (x[:, None, :] - pert).reshape(-1, dim)
    gp = _barrier_grad(h, _to_complex(xp, shape), p_max, r_req, eps, sigma2).reshape(s_count, dim, dim)
    gm = _barrier_grad(h, _to_complex(xm, shape), p_max, r_req, eps, sigma2).reshape(s_count, dim, dim)
    hess = (gp - gm) / (2 * delta[:, None, None])
    return 0.5 * (hess + np.swapaxes(hess, 1, 2))


def _stage_two(h, w, p_max, r_req, budget):
    shape = w.shape[1:]
    sig2 = budget.sigma2
    x = _to_real(w)
    for eps in budget.eps_schedule:
        active = np.ones(len(x), bool)
        for _ in range(budget.newton_iters):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            xa = x[idx]
            wa = _to_complex(xa, shape)
            f = _barrier_value(h, wa, p_max, r_req, eps, sig2)
            g = _barrier_grad(h, wa, p_max, r_req, eps, sig2)
            # perturbations near the boundary can leave the domain; drop those entries
            hess = _hessian(h, xa, shape, p_max, r_req, eps, sig2)
            hess = np.nan_to_num(hess, nan=0.0, posinf=0.0, neginf=0.0)
            evals, evecs = np.linalg.eigh(-hess)
            floor = 1e-10 * np.maximum(1.0, np.abs(evals).max(axis=1, keepdims=True))
            evals = np.maximum(evals, floor)
            d = np.einsum("sij,sj->si", evecs, np.einsum("sji,sj->si", evecs, g) / evals)
            dec = np.einsum("si,si->s", g, d)
            # trust region: never move further than half the power-ball radius at once
            cap = 0.5 * np.sqrt(p_max) / np.maximum(np.linalg.norm(d, axis=1), 1e-300)
            d = d * np.minimum(1.0, cap)[:, None]
            dec_step = np.einsum("si,si->s", g, d)
            done = dec < 1e-13
            step = np.ones(len(idx))
            pending = ~done
            for _ in range(40):
                if not pending.any():
                    break
                cand = xa + step[:, None] * d
                fc = _barrier_value(h, _to_complex(cand, shape), p_max, r_req, eps, sig2)
                ok = pending & np.isfinite(fc) & (fc >= f + 1e-4 * step * dec_step)
                xa = np.where(ok[:, None], cand, xa)
                pending &= ~ok
                step = np.where(pending, step * 0.5, step)
            done |= pending  # line search failed: precision floor
            x[idx] = xa
            active[idx[done]] = False
        if eps <= budget.prune_eps:
            totals = _rate_parts(h, _to_complex(x, shape), sig2)[0].sum(axis=1)
            order = np.argsort(-totals, kind="stable")[: budget.refine_keep]
            x = x[order[totals[order] >= totals.max() - budget.prune_gap]]
    return _to_complex(x, shape)


def brute_force_oracle(h, p_max: float, r_req: float, budget: OracleBudget = OracleBudget()) -> OracleResult:
    """Best feasible beamformer over ``budget.restarts`` random restarts."""
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim != 2:
        raise ContractError(f"channel must be (K, N_T), got {h.shape}")
    k, n = h.shape
    check_cost_guard(k, n)
    rng = np.random.default_rng([budget.seed, 0x0AC1E])
    count = budget.restarts
    w = rng.standard_normal((count, k, n)) + 1j * rng.standard_normal((count, k, n))
    scale = rng.uniform(0.2, 1.0, size=count) * p_max
    w = w * np.sqrt(scale / _power(w))[:, None, None]
    w = _stage_one(h, w, p_max, r_req, budget)
    w = w * np.sqrt(1 - 1e-4)  # strictly inside the power ball
    feasible = np.isfinite(_barrier_value(h, w, p_max, r_req, budget.eps_schedule[0], budget.sigma2))
    if not feasible.any():
        return OracleResult(None, float("nan"), False, False, 0, 0)
    w = w[feasible]
    w = _stage_two(h, w, p_max, r_req, budget)
    totals = _rate_parts(h, w, budget.sigma2)[0].sum(axis=1)
    best = int(np.argmax(totals))
    recur = int(np.sum(totals >= totals[best] - budget.recur_tol))
    return OracleResult(w[best], float(totals[best]), True, recur >= budget.min_recurrences, recur, len(w))
