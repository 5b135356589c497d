"""Evaluation metrics, the MAD oversmoothing gauge and the evaluation protocols."""

from __future__ import annotations

import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .channels import apply_csi_error
from .errors import ContractError
from .model import CrgatConfig, ForwardTrace, ModelParams, forward
from .training import FEASIBILITY_TOL, evaluate_rates, rates

ROBUSTNESS_GRID = (1e-4, 4e-4, 9e-4)
ASTERISK = "OP computed with infeasible solutions"


def feasible_mask(user_rates: np.ndarray, r_req: float, tol: float = FEASIBILITY_TOL) -> np.ndarray:
    r = np.asarray(user_rates, dtype=np.float64)
    if r.ndim == 1:
        r = r[None]
    return np.min(r, axis=-1) >= r_req - tol


def feasibility_rate(user_rates: np.ndarray, r_req: float, tol: float = FEASIBILITY_TOL) -> float:
    """Percentage of samples whose every user meets ``r_req`` (within ``tol``)."""
    if tol < 0:
        raise ContractError("tol must be non-negative")
    r = np.asarray(user_rates, dtype=np.float64)
    if r.size == 0:
        raise ContractError("feasibility rate of an empty set is undefined")
    return 100.0 * float(np.mean(feasible_mask(r, r_req, tol)))


def optimality_performance(candidate, reference, feasible) -> tuple[float, bool]:
    """Candidate-to-reference ratio of mean sum rates over the feasible samples, in percent.

    Samples with a NaN reference (no reference solution) are left out. When
    no remaining candidate sample is feasible the ratio is taken over all
    of them and the returned flag is True.
    """
    cand = np.asarray(candidate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    ok = np.asarray(feasible, dtype=bool)
    if cand.shape != ref.shape or ok.shape != cand.shape:
        raise ContractError("candidate, reference and feasibility mask must align")
    valid = np.isfinite(ref)
    use = valid & ok
    flagged = not use.any()
    if flagged:
        use = valid
    if not use.any():
        return float("nan"), True
    return 100.0 * float(np.mean(cand[use]) / np.mean(ref[use])), flagged


def inference_time(params: ModelParams, h: np.ndarray, repetitions: int = 10, warmup: int = 10) -> float:
    """Mean wall-clock seconds per sample of a batched eval-mode forward pass."""
    h = np.asarray(h)
    if repetitions < 1:
        raise ContractError("repetitions must be positive")
    for _ in range(warmup):
        forward(h, params, "eval")
    start = time.perf_counter()
    for _ in range(repetitions):
        forward(h, params, "eval")
    return (time.perf_counter() - start) / repetitions / len(h)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    optimality_performance: float
    feasibility_rate: float
    inference_time: float
    n_feasible: int
    n_total: int
    flags: list[str] = field(default_factory=list)
    label: str = ""

    COLUMNS = ("label", "optimality_pct", "feasibility_pct", "n_feasible", "n_total", "flags")

    def __post_init__(self):
        if not 0 <= self.n_feasible <= self.n_total:
            raise ContractError("need 0 <= n_feasible <= n_total")

    def row(self) -> str:
        op = f"{self.optimality_performance:.6f}" + ("*" if ASTERISK in self.flags else "")
        flags = ";".join(self.flags) or "-"
        return f"{self.label or '-'}\t{op}\t{self.feasibility_rate:.6f}\t{self.n_feasible}\t{self.n_total}\t{flags}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["timing"] = {"inference_time_s_per_sample": d.pop("inference_time")}
        return d


def metrics_table(reports: Sequence[MetricsReport]) -> str:
    """Tab-separated metrics; timings go to a separate trailing section."""
    buf = io.StringIO()
    buf.write("# " + "\t".join(MetricsReport.COLUMNS) + "\n")
    for r in reports:
        buf.write(r.row() + "\n")
    buf.write("## timing\n# label\tinference_time_s_per_sample\n")
    for r in reports:
        buf.write(f"{r.label or '-'}\t{r.inference_time:.6e}\n")
    return buf.getvalue()


def reports_json(reports: Sequence[MetricsReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2)


@dataclass
class MadReport:
    values: list[float]
    label: str = ""

    def __post_init__(self):
        for v in self.values:
            if not -1e-12 <= v <= 2 + 1e-12:
                raise ContractError(f"MAD value {v} outside [0, 2]")

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("# label\tlayer\tmad\n")
        for i, v in enumerate(self.values):
            buf.write(f"{self.label or '-'}\t{i + 1}\t{v:.12f}\n")
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"label": self.label, "mad": list(self.values)}


def build_report(user_rates, reference, r_req, seconds_per_sample: float = float("nan"), label: str = "") -> MetricsReport:
    r = np.asarray(user_rates, dtype=np.float64)
    ok = feasible_mask(r, r_req)
    op, flagged = optimality_performance(r.sum(axis=1), reference, ok)
    return MetricsReport(
        op,
        feasibility_rate(r, r_req),
        seconds_per_sample,
        int(ok.sum()),
        len(ok),
        [ASTERISK] if flagged else [],
        label,
    )


def evaluate_model(params: ModelParams, h_test, reference, r_req: float, label: str = "", timing: bool = True):
    h_test = np.asarray(h_test)
    r = evaluate_rates(params, h_test)
    t = inference_time(params, h_test) if timing else float("nan")
    return build_report(r, reference, r_req, t, label)


# ---------------------------------------------------------------------------
# MAD


def _realify(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([x.real, x.imag], axis=-1)


def mad(h_layer) -> float | np.ndarray:
    """Mean cosine distance between distinct realified node rows.

    Accepts ``(K, F)`` or a batch ``(B, K, F)`` (one value per sample).
    """
    x = _realify(h_layer)
    if x.ndim not in (2, 3):
        raise ContractError(f"expected (K, F) or (B, K, F), got {x.shape}")
    k = x.shape[-2]
    if k < 2:
        raise ContractError("MAD needs at least two nodes")
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ContractError("MAD is undefined for an all-zero feature row")
    unit = x / norms
    cos = np.clip(unit @ np.swapaxes(unit, -1, -2), -1.0, 1.0)
    dist = 1.0 - cos
    off = 1.0 - np.eye(k)
    out = np.sum(dist * off, axis=(-2, -1)) / (k * (k - 1))
    return float(out) if out.ndim == 0 else out


def mad_per_layer(params: ModelParams, h, label: str = "") -> MadReport:
    """MAD of every graph-layer output, averaged over the samples in ``h``."""
    trace = ForwardTrace()
    forward(np.asarray(h), params, "eval", trace=trace)
    return MadReport([float(np.mean(mad(layer))) for layer in trace.hidden], label)


# ---------------------------------------------------------------------------
# protocols


def robustness_eval(
    params: ModelParams,
    h_test,
    reference,
    r_req: float,
    rel_vars: Sequence[float] = ROBUSTNESS_GRID,
    seed: int = 0,
) -> list[MetricsReport]:
    """Model sees ``H + E``; rates are scored on the true ``H``."""
    h_test = np.asarray(h_test)
    out = []
    for i, rel in enumerate(rel_vars):
        noisy = apply_csi_error(h_test, rel, np.random.default_rng([seed, i]))
        w = np.concatenate([forward(noisy[s : s + 512], params, "eval").data for s in range(0, len(noisy), 512)])
        r = rates(h_test, w)
        out.append(build_report(r, reference, r_req, label=f"rel_var={rel:g}"))
    return out


def scalability_eval(params: ModelParams, test_sets: Mapping[int, tuple], r_req: float) -> dict[int, MetricsReport]:
    """Run the unchanged model on test sets ``{K: (h, reference)}``."""
    return {
        k: evaluate_model(params, h, ref, r_req, label=f"K={k}", timing=False) for k, (h, ref) in sorted(test_sets.items())
    }


def ablation_no_residual(config: CrgatConfig) -> CrgatConfig:
    """Same layers with the jump and initial residual paths removed (weights fixed at zero)."""
    return config.without_residual()


def decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))
