"""Rates, constrained unsupervised losses and the two training loops.

Both loops follow the same minibatch schedule: shuffle the training split
each epoch, run the model in train mode, take one optimizer step per batch.
The Lagrangian variant also accumulates per-user rate violations over the
epoch and raises the multipliers once at the end of it.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .channels import Dataset
from .checkpoint import load_checkpoint
from .errors import ContractError
from .model import ModelParams, forward

log = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-6


# ---------------------------------------------------------------------------
# rates and losses


def sum_rate(h, w, sigma2: float = 1.0) -> Tensor:
    """Per-user achievable rates ``(..., K)`` in bit/s/Hz.

    ``h`` and ``w`` hold one row per user; row ``k`` of ``w`` is the beam of user ``k``.
    """
    if sigma2 <= 0:
        raise ContractError("sigma2 must be positive")
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.complex128))
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=np.complex128))
    if h.shape != w.shape:
        raise ContractError(f"channel {h.shape} and beamformer {w.shape} shapes differ")
    k = h.shape[-2]
    gains = ad.modulus_sq(ad.c_matmul(ad.conj(h), ad.swapaxes(w, -1, -2)))  # [k, i] = |h_k^H w_i|^2
    signal = ad.sum(gains * np.eye(k), axis=-1)
    interference = ad.sum(gains, axis=-1) - signal
    return ad.log2(1.0 + signal / (interference + sigma2))


def rates(h, w, sigma2: float = 1.0) -> np.ndarray:
    """Plain-array version of :func:`sum_rate`."""
    return sum_rate(np.asarray(h), np.asarray(w), sigma2).data


def _violation(r: Tensor, r_req: float) -> Tensor:
    return ad.relu(r_req - r)


def pm_loss_from_rates(r: Tensor, lam: float, r_req: float) -> Tensor:
    n = r.shape[0] if r.ndim > 1 else 1
    total = ad.sum(-r) + lam * ad.sum(_violation(r, r_req))
    return total * (1.0 / n)


def ldm_loss_from_rates(r: Tensor, mu, r_req: float) -> Tensor:
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu < 0):
        raise ContractError("Lagrange multipliers must be non-negative")
    n = r.shape[0] if r.ndim > 1 else 1
    total = ad.sum(-r) + ad.sum(_violation(r, r_req) * mu)
    return total * (1.0 / n)


def pm_loss(h, w, lam: float, r_req: float, sigma2: float = 1.0) -> Tensor:
    """Batch mean of negative sum rate plus ``lam`` times the total rate shortfall."""
    if lam <= 0:
        raise ContractError("penalty coefficient must be positive")
    return pm_loss_from_rates(sum_rate(h, w, sigma2), lam, r_req)


def ldm_loss(h, w, mu, r_req: float, sigma2: float = 1.0) -> Tensor:
    """Batch mean of negative sum rate plus the multiplier-weighted shortfall."""
    return ldm_loss_from_rates(sum_rate(h, w, sigma2), mu, r_req)


# ---------------------------------------------------------------------------
# multipliers


@dataclass
class LdmState:
    mu: np.ndarray
    tau: float = 1e-3
    grad_mu: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).copy()
        if np.any(self.mu < 0):
            raise ContractError("initial multipliers must be non-negative")
        if self.grad_mu is None:
            self.grad_mu = np.zeros_like(self.mu)

    @classmethod
    def zeros(cls, k: int, tau: float = 1e-3) -> LdmState:
        return cls(np.zeros(k), tau)

    def accumulate(self, batch_rates: np.ndarray, r_req: float) -> None:
        self.grad_mu += np.maximum(r_req - np.asarray(batch_rates), 0.0).reshape(-1, self.mu.size).sum(axis=0)

    def end_epoch(self) -> None:
        # step size applied once, on the raw accumulated violation
        self.mu = self.mu + self.tau * self.grad_mu
        self.grad_mu = np.zeros_like(self.mu)


def update_multipliers(state: LdmState, batch_rates: Sequence[np.ndarray], r_req: float) -> LdmState:
    """One epoch of multiplier ascent from the rates of every minibatch."""
    new = LdmState(state.mu, state.tau)
    for r in batch_rates:
        new.accumulate(r, r_req)
    new.end_epoch()
    return new


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        for name, value in params.named():
            g = grads.get(name)
            if g is not None:
                params.set(name, value - self.lr * g)


class Adam:
    """Adam with real and imaginary parts treated as separate coordinates."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, value in params.named():
            g = grads.get(name)
            if g is None:
                continue
            if np.iscomplexobj(value):
                g = np.stack([np.real(g), np.imag(g)])
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if np.iscomplexobj(value):
                upd = upd[0] + 1j * upd[1]
            params.set(name, value - upd)


def make_optimizer(kind: str, lr: float):
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ContractError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainConfig:
    loss: str = "pm"  # "pm" or "ldm"
    lam: float = 10.0
    tau: float = 1e-3
    r_req: float | None = None  # defaults to the dataset's rate requirement
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    sigma2: float = 1.0
    # rotate every user's channel by a random phase each time it is drawn; rates are unchanged by this
    phase_augment: bool = False

    def __post_init__(self):
        if self.loss not in ("pm", "ldm"):
            raise ContractError(f"loss must be 'pm' or 'ldm', got {self.loss!r}")
        if self.lam <= 0:
            raise ContractError("lam must be positive")
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be non-negative")


PmConfig = TrainConfig


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_sum_rate: float
    val_feasibility: float
    mu: list[float] | None = None


@dataclass
class TrainReport:
    loss: str
    records: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    COLUMNS = ("epoch", "train_loss", "val_sum_rate", "val_feasibility_pct", "mu")

    def to_text(self) -> str:
        """Tab-separated table, one line per epoch, ``#`` header line first."""
        buf = io.StringIO()
        buf.write("# " + "\t".join(self.COLUMNS) + "\n")
        for r in self.records:
            mu = "-" if r.mu is None else ",".join(f"{x:.10g}" for x in r.mu)
            buf.write(f"{r.epoch}\t{r.train_loss:.10g}\t{r.val_sum_rate:.10g}\t{r.val_feasibility:.6g}\t{mu}\n")
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def evaluate_rates(params: ModelParams, h: np.ndarray, batch: int = 512, sigma2: float = 1.0, p_max=None) -> np.ndarray:
    """Eval-mode rates ``(n, K)`` for channels ``h`` of shape ``(n, K, N_T)``."""
    out = []
    for start in range(0, len(h), batch):
        hb = h[start : start + batch]
        out.append(rates(hb, forward(hb, params, "eval", p_max=p_max).data, sigma2))
    return np.concatenate(out) if out else np.zeros((0, h.shape[1]))


def _validate(params: ModelParams, h_val: np.ndarray, r_req: float, sigma2: float) -> tuple[float, float]:
    if len(h_val) == 0:
        return float("nan"), float("nan")
    r = evaluate_rates(params, h_val, sigma2=sigma2)
    feasible = np.min(r, axis=1) >= r_req - FEASIBILITY_TOL
    return float(np.mean(r.sum(axis=1))), 100.0 * float(np.mean(feasible))


def _train_split(data) -> tuple[np.ndarray, np.ndarray, float]:
    if isinstance(data, Dataset):
        return data.train, data.val, data.config.r_req
    h_train, h_val = data
    return np.asarray(h_train), np.asarray(h_val), None


def _train(data, params: ModelParams, config: TrainConfig, state: LdmState | None):
    h_train, h_val, r_req_default = _train_split(data)
    r_req = config.r_req if config.r_req is not None else r_req_default
    if r_req is None:
        raise ContractError("rate requirement unknown: set TrainConfig.r_req")
    if len(h_train) == 0:
        raise ContractError("training split is empty")
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    report = TrainReport(config.loss)
    n = len(h_train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            hb = h_train[order[start : start + config.batch_size]]
            if config.phase_augment:
                hb = hb * np.exp(2j * np.pi * rng.random(hb.shape[:2] + (1,)))
            tape = Tape()
            leaves = params.bind(tape)
            w = forward(hb, params, "train", weights=leaves)
            r = sum_rate(hb, w, config.sigma2)
            if state is None:
                loss = pm_loss_from_rates(r, config.lam, r_req)
            else:
                loss = ldm_loss_from_rates(r, state.mu, r_req)
            grads = tape.backward(loss).by_name()
            opt.step(params, grads)
            if state is not None:
                state.accumulate(r.data, r_req)
            losses.append(float(loss.data))
            report.step_losses.append(float(loss.data))
        if state is not None:
            state.end_epoch()
        val_rate, val_fr = _validate(params, h_val, r_req, config.sigma2)
        rec = EpochRecord(epoch, float(np.mean(losses)), val_rate, val_fr, None if state is None else state.mu.tolist())
        report.records.append(rec)
        log.info("epoch %d loss %.5f val rate %.4f val FR %.1f%%", epoch, rec.train_loss, val_rate, val_fr)
    return params, report


def train_pm(data, params: ModelParams, config: TrainConfig) -> tuple[ModelParams, TrainReport]:
    """Penalty-method training; returns trained copies, the input is untouched."""
    return _train(data, params, config, None)


def train_ldm(
    data, params: ModelParams, config: TrainConfig, state: LdmState | None = None
) -> tuple[ModelParams, LdmState, TrainReport]:
    """Lagrangian training with epoch-wise multiplier ascent."""
    h_train = data.train if isinstance(data, Dataset) else np.asarray(data[0])
    if state is None:
        state = LdmState.zeros(h_train.shape[1], config.tau)
    state = LdmState(state.mu, state.tau)
    params, report = _train(data, params, config, state)
    return params, state, report


def train(data, params: ModelParams, config: TrainConfig):
    """Dispatch on ``config.loss``; returns ``(params, report, ldm_state_or_None)``."""
    if config.loss == "pm":
        p, rep = train_pm(data, params, config)
        return p, rep, None
    p, state, rep = train_ldm(data, params, config)
    return p, rep, state


def check_compatible(source: ModelParams, n_t: int, arch=None) -> None:
    if source.config.n_t != n_t:
        raise ContractError(f"checkpoint expects N_T={source.config.n_t}, dataset has N_T={n_t}")
    if arch is not None and arch != source.config:
        raise ContractError("checkpoint architecture differs from the requested architecture")


def fine_tune(checkpoint, data, config: TrainConfig, arch=None):
    """Continue training from checkpoint parameters (K may differ, layer sizes may not)."""
    source = checkpoint
    if isinstance(checkpoint, (str, Path)):
        source, _ = load_checkpoint(checkpoint)
    h_train = data.train if isinstance(data, Dataset) else np.asarray(data[0])
    check_compatible(source, h_train.shape[-1], arch)
    return train(data, source, config)
