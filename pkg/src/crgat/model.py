"""Complex residual graph attention network mapping channels to beamformers.

Every function accepts a single graph ``(K, F)`` or a batch ``(B, K, F)``;
samples in a batch never attend to each other.  Node ``k`` attends to every
other node, never to itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class CrgatConfig:
    """Layer dimensions.

    ``crgal_layers`` holds ``(in_dim, head_out_dim, heads)`` per graph layer and
    ``cfcl_layers`` holds ``(in_dim, out_dim, has_cbn)`` per dense layer.
    """

    crgal_layers: tuple[tuple[int, int, int], ...]
    cfcl_layers: tuple[tuple[int, int, bool], ...]
    leaky_slope: float = 0.2
    p_max: float = 1.0
    residual: bool = True
    # fixed multiplier applied to the channel before the first layer
    input_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "crgal_layers", tuple(tuple(int(x) for x in l) for l in self.crgal_layers))
        object.__setattr__(
            self, "cfcl_layers", tuple((int(a), int(b), bool(c)) for a, b, c in self.cfcl_layers)
        )
        if not self.crgal_layers or not self.cfcl_layers:
            raise ContractError("need at least one graph layer and one dense layer")
        prev = None
        for f_in, f_out, heads in self.crgal_layers:
            if min(f_in, f_out, heads) < 1:
                raise ContractError("layer dimensions must be positive")
            if prev is not None and f_in != prev:
                raise ContractError(f"graph layer input {f_in} != previous output {prev}")
            prev = f_out * heads
        for i, (g_in, g_out, cbn) in enumerate(self.cfcl_layers):
            if g_in != prev:
                raise ContractError(f"dense layer input {g_in} != previous output {prev}")
            if i == len(self.cfcl_layers) - 1 and cbn:
                raise ContractError("the last dense layer carries no activation or batch norm")
            prev = g_out
        if prev != self.n_t:
            raise ContractError("last dense layer must output N_T features")
        if not 0 < self.leaky_slope < 1:
            raise ContractError("leaky_slope must lie in (0, 1)")
        if not self.input_scale > 0:
            raise ContractError("input_scale must be positive")
        if self.p_max <= 0:
            raise ContractError("p_max must be positive")

    @property
    def n_t(self) -> int:
        return self.crgal_layers[0][0]

    @classmethod
    def build(
        cls,
        n_t: int,
        head_dims=(32, 64, 128, 256),
        heads=(10, 10, 10, 10),
        dense_dims=(1024, 512),
        **kw,
    ) -> CrgatConfig:
        crgal, f_in = [], n_t
        for f_out, d in zip(head_dims, heads):
            crgal.append((f_in, f_out, d))
            f_in = f_out * d
        cfcl = []
        for g in dense_dims:
            cfcl.append((f_in, g, True))
            f_in = g
        cfcl.append((f_in, n_t, False))
        return cls(tuple(crgal), tuple(cfcl), **kw)

    @classmethod
    def full_size(cls, n_t: int, **kw) -> CrgatConfig:
        """Four graph layers (32/64/128/256 x 10 heads) and three dense layers."""
        return cls.build(n_t, **kw)

    def without_residual(self) -> CrgatConfig:
        return replace(self, residual=False)

    def with_input_scale(self, scale: float) -> CrgatConfig:
        return replace(self, input_scale=float(scale))

    def to_dict(self) -> dict:
        return {
            "crgal_layers": [list(l) for l in self.crgal_layers],
            "cfcl_layers": [list(l) for l in self.cfcl_layers],
            "leaky_slope": self.leaky_slope,
            "p_max": self.p_max,
            "residual": self.residual,
            "input_scale": self.input_scale,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> CrgatConfig:
        return cls(
            tuple(tuple(l) for l in d["crgal_layers"]),
            tuple(tuple(l) for l in d["cfcl_layers"]),
            float(d["leaky_slope"]),
            float(d["p_max"]),
            bool(d["residual"]),
            float(d.get("input_scale", 1.0)),
        )


@dataclass
class CrgalParams:
    attn: np.ndarray  # (D, F~)
    theta: np.ndarray  # (D, F, F~)
    theta_jump: np.ndarray | None = None  # (F, F~*D)
    theta_init: np.ndarray | None = None  # (F1, F~*D)
    a_jump: np.ndarray | None = None  # () real
    a_init: np.ndarray | None = None  # () real

    @property
    def heads(self) -> int:
        return self.attn.shape[0]

    @property
    def residual(self) -> bool:
        return self.theta_jump is not None


@dataclass
class BatchNormParams:
    gamma_re: np.ndarray
    gamma_im: np.ndarray
    beta_re: np.ndarray
    beta_im: np.ndarray
    # real part holds the statistic of the real channel, imaginary part of the imaginary one
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def identity(cls, channels: int) -> BatchNormParams:
        return cls(np.ones(channels), np.ones(channels), np.zeros(channels), np.zeros(channels))


@dataclass
class CfclParams:
    theta: np.ndarray  # (G, G')
    cbn: BatchNormParams | None = None


@dataclass
class ModelParams:
    config: CrgatConfig
    crgals: list[CrgalParams]
    cfcls: list[CfclParams] = field(default_factory=list)

    def named(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in the fixed checkpoint order."""
        out = []
        for l, p in enumerate(self.crgals):
            out += [(f"crgal{l}.attn", p.attn), (f"crgal{l}.theta", p.theta)]
            if p.residual:
                out += [
                    (f"crgal{l}.theta_jump", p.theta_jump),
                    (f"crgal{l}.theta_init", p.theta_init),
                    (f"crgal{l}.a_jump", p.a_jump),
                    (f"crgal{l}.a_init", p.a_init),
                ]
        for c, p in enumerate(self.cfcls):
            out.append((f"cfcl{c}.theta", p.theta))
            if p.cbn is not None:
                for part in ("gamma_re", "gamma_im", "beta_re", "beta_im"):
                    out.append((f"cfcl{c}.cbn.{part}", getattr(p.cbn, part)))
        return out

    def buffers(self) -> list[tuple[str, np.ndarray | None]]:
        """Non-trainable state (batch-norm running statistics)."""
        out = []
        for c, p in enumerate(self.cfcls):
            if p.cbn is not None:
                out.append((f"cfcl{c}.cbn.running_mean", p.cbn.running_mean))
                out.append((f"cfcl{c}.cbn.running_var", p.cbn.running_var))
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.named())

    def _locate(self, name: str):
        head, *rest = name.split(".")
        if head.startswith("crgal"):
            return self.crgals[int(head[5:])], rest[0]
        obj = self.cfcls[int(head[4:])]
        if rest[0] == "cbn":
            return obj.cbn, rest[1]
        return obj, rest[0]

    def set(self, name: str, value: np.ndarray) -> None:
        obj, attr = self._locate(name)
        setattr(obj, attr, value)

    def get(self, name: str):
        obj, attr = self._locate(name)
        return getattr(obj, attr)

    def copy(self) -> ModelParams:
        new = ModelParams(
            self.config,
            [CrgalParams(**{k: None if v is None else np.array(v) for k, v in vars(p).items()}) for p in self.crgals],
            [
                CfclParams(
                    np.array(p.theta),
                    None
                    if p.cbn is None
                    else BatchNormParams(
                        **{k: (np.array(v) if isinstance(v, np.ndarray) else v) for k, v in vars(p.cbn).items()}
                    ),
                )
                for p in self.cfcls
            ],
        )
        return new

    def n_scalars(self) -> int:
        """Number of real trainable scalars (complex entries count twice)."""
        return int(np.sum([v.size * (2 if np.iscomplexobj(v) else 1) for _, v in self.named()]))

    def nbytes(self) -> int:
        return int(np.sum([v.nbytes for _, v in self.named()]))

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every trainable array as a leaf of ``tape``."""
        return {name: tape.leaf(value, name=name) for name, value in self.named()}


# ---------------------------------------------------------------------------
# initialisation


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(1.0 / (2.0 * (fan_in + fan_out)))
    return rng.normal(0.0, std, shape) + 1j * rng.normal(0.0, std, shape)


def init_params(config: CrgatConfig, rng: np.random.Generator | int) -> ModelParams:
    """Glorot-style complex weights, unit residual weights, identity batch norm."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    f1 = config.n_t
    crgals = []
    for f_in, f_out, heads in config.crgal_layers:
        p = CrgalParams(
            attn=_glorot(rng, (heads, f_out), f_out, 1),
            theta=_glorot(rng, (heads, f_in, f_out), f_in, f_out),
        )
        if config.residual:
            p.theta_jump = _glorot(rng, (f_in, f_out * heads), f_in, f_out * heads)
            p.theta_init = _glorot(rng, (f1, f_out * heads), f1, f_out * heads)
            p.a_jump = np.array(1.0)
            p.a_init = np.array(1.0)
        crgals.append(p)
    cfcls = []
    for g_in, g_out, cbn in config.cfcl_layers:
        cfcls.append(CfclParams(_glorot(rng, (g_in, g_out), g_in, g_out), BatchNormParams.identity(g_out) if cbn else None))
    return ModelParams(config, crgals, cfcls)


# ---------------------------------------------------------------------------
# batched building blocks (operate on Tensors of shape (B, K, F))


def _as_batch(h) -> tuple[Tensor, bool]:
    t = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.complex128))
    if t.ndim == 2:
        return ad.reshape(t, (1,) + t.shape), True
    if t.ndim != 3:
        raise ShapeError(f"expected (K, F) or (B, K, F), got {t.shape}")
    return t, False


def _check_k(k: int) -> None:
    if k < 2:
        raise ContractError("every node needs at least one neighbour (K >= 2)")


def _w(weights, name, fallback):
    if weights is not None and name in weights:
        return weights[name]
    return Tensor(fallback)


def _transform(h: Tensor, theta: Tensor) -> Tensor:
    b, k, f = h.shape
    return ad.c_matmul(ad.reshape(h, (b, 1, k, f)), theta)  # (B, D, K, F~)


def _attention(z: Tensor, attn: Tensor, slope: float) -> Tensor:
    """Attention weights ``(B, D, K, K)`` from transformed features ``z``."""
    b, d, k, f = z.shape
    pair = ad.reshape(z, (b, d, k, 1, f)) + ad.reshape(z, (b, d, 1, k, f))
    act = ad.leaky_relu_c(pair, slope)
    score = ad.c_matmul(ad.reshape(act, (b, d, k * k, f)), ad.reshape(attn, (d, f, 1)))
    score = ad.modulus(ad.reshape(score, (b, d, k, k)))
    off = 1.0 - np.eye(k)
    shift = np.max(np.where(off > 0, score.data, -np.inf), axis=-1, keepdims=True)
    # zero the self scores before exp so they cannot overflow
    e = ad.exp((score - shift) * off) * off
    return e / ad.sum(e, axis=-1, keepdims=True)


def _crgal(h: Tensor, h1: Tensor, p: CrgalParams, prefix: str, weights, slope: float, residual: bool):
    b, k, _ = h.shape
    theta = _w(weights, prefix + "theta", p.theta)
    attn = _w(weights, prefix + "attn", p.attn)
    z = _transform(h, theta)
    alpha = _attention(z, attn, slope)
    beta = ad.c_matmul(alpha, z)  # (B, D, K, F~)
    d, f = beta.shape[1], beta.shape[3]
    net = ad.reshape(ad.transpose(beta, (0, 2, 1, 3)), (b, k, d * f))
    if residual:
        jump = ad.c_matmul(h, _w(weights, prefix + "theta_jump", p.theta_jump))
        init = ad.c_matmul(h1, _w(weights, prefix + "theta_init", p.theta_init))
        net = net + _w(weights, prefix + "a_jump", p.a_jump) * jump + _w(weights, prefix + "a_init", p.a_init) * init
    return ad.cselu(net), alpha


def _batch_norm(x: Tensor, bn: BatchNormParams, prefix: str, weights, mode: str, track_stats: bool) -> Tensor:
    parts = []
    if mode == "train":
        stats_mean, stats_var = [], []
        for part, take in (("re", ad.real), ("im", ad.imag)):
            v = take(x)
            mu = ad.mean(v, axis=(0, 1), keepdims=True)
            cent = v - mu
            var = ad.mean(cent * cent, axis=(0, 1), keepdims=True)
            xhat = cent / ad.sqrt(var + bn.eps)
            parts.append(xhat)
            stats_mean.append(mu.data.reshape(-1))
            stats_var.append(var.data.reshape(-1))
        if track_stats:
            n = x.shape[0] * x.shape[1]
            mean_c = stats_mean[0] + 1j * stats_mean[1]
            unbiased = n / max(n - 1, 1)
            var_c = stats_var[0] * unbiased + 1j * stats_var[1] * unbiased
            if bn.running_mean is None:
                bn.running_mean, bn.running_var = mean_c, var_c
            else:
                bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean_c
                bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var_c
    else:
        if bn.running_mean is None or bn.running_var is None:
            raise ContractError("batch-norm running statistics are uninitialised; run a train-mode pass first")
        for take, m, v in (
            (ad.real, bn.running_mean.real, bn.running_var.real),
            (ad.imag, bn.running_mean.imag, bn.running_var.imag),
        ):
            parts.append((take(x) - m) / np.sqrt(v + bn.eps))
    re = parts[0] * _w(weights, prefix + "gamma_re", bn.gamma_re) + _w(weights, prefix + "beta_re", bn.beta_re)
    im = parts[1] * _w(weights, prefix + "gamma_im", bn.gamma_im) + _w(weights, prefix + "beta_im", bn.beta_im)
    return ad.make_complex(re, im)


def _cfcl(h: Tensor, p: CfclParams, prefix: str, weights, mode: str, last: bool, track_stats: bool) -> Tensor:
    out = ad.c_matmul(h, _w(weights, prefix + "theta", p.theta))
    if last:
        return out
    out = ad.cselu(out)
    if p.cbn is not None:
        out = _batch_norm(out, p.cbn, prefix + "cbn.", weights, mode, track_stats)
    return out


def _project(y: Tensor, p_max: float) -> Tensor:
    norm = ad.frobenius_norm(y, axis=(-2, -1), keepdims=True)
    return y * (np.sqrt(p_max) / ad.clamp_min(norm, 1.0))


# ---------------------------------------------------------------------------
# public per-layer operations


def attention_coefficients(h_layer, params: CrgalParams, head: int, slope: float = 0.2) -> np.ndarray:
    """Attention weights ``(K, K)`` of one head; the diagonal is zero."""
    h, _ = _as_batch(h_layer)
    _check_k(h.shape[1])
    z = _transform(h, Tensor(params.theta[head : head + 1]))
    return _attention(z, Tensor(params.attn[head : head + 1]), slope).data[0, 0]


def aggregate_head(h_layer, params: CrgalParams, head: int, alphas) -> np.ndarray:
    """Attention-weighted sum of the transformed neighbour features ``(K, F~)``."""
    h, _ = _as_batch(h_layer)
    z = _transform(h, Tensor(params.theta[head : head + 1]))
    return ad.c_matmul(Tensor(np.asarray(alphas)[None, None]), z).data[0, 0]


def crgal_forward(h_layer, h_initial, params: CrgalParams, slope: float = 0.2) -> Tensor:
    """One graph layer: concatenated heads plus jump and initial residuals, then CSELU."""
    h, single = _as_batch(h_layer)
    h1, _ = _as_batch(h_initial)
    _check_k(h.shape[1])
    if h.shape[-1] != params.theta.shape[1]:
        raise ShapeError(f"layer expects {params.theta.shape[1]} input features, got {h.shape[-1]}")
    if params.residual and h1.shape[-1] != params.theta_init.shape[0]:
        raise ShapeError("initial features do not match the initial-residual transform")
    out, _ = _crgal(h, h1, params, "", None, slope, params.residual)
    return ad.reshape(out, out.shape[1:]) if single else out


def cfcl_forward(h, params: CfclParams, mode: str = "eval", last: bool | None = None, track_stats: bool = True) -> Tensor:
    """One dense layer; intermediate layers add CSELU and complex batch norm."""
    x, single = _as_batch(h)
    if last is None:
        last = params.cbn is None
    out = _cfcl(x, params, "", None, mode, last, track_stats)
    return ad.reshape(out, out.shape[1:]) if single else out


def power_project(h_out, p_max: float) -> Tensor:
    """Scale onto the power ball ``||W||_F^2 <= p_max``."""
    if p_max <= 0:
        raise ContractError("p_max must be positive")
    x, single = _as_batch(h_out)
    out = _project(x, p_max)
    return ad.reshape(out, out.shape[1:]) if single else out


@dataclass
class ForwardTrace:
    """Per-layer graph-layer outputs and attention weights of one forward pass."""

    hidden: list[np.ndarray] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)


def forward(
    h,
    params: ModelParams,
    mode: str = "eval",
    *,
    weights: Mapping[str, Tensor] | None = None,
    track_stats: bool = True,
    trace: ForwardTrace | None = None,
    p_max: float | None = None,
) -> Tensor:
    """Map channels ``(K, N_T)`` or ``(B, K, N_T)`` to beamformers of the same shape.

    ``weights`` (from :meth:`ModelParams.bind`) makes the pass differentiable.
    ``p_max`` overrides the configured power budget.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    x, single = _as_batch(h)
    cfg = params.config
    _check_k(x.shape[1])
    if x.shape[-1] != cfg.n_t:
        raise ShapeError(f"model expects N_T={cfg.n_t}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x.data)):
        raise ContractError("channel contains non-finite entries")
    if cfg.input_scale != 1.0:
        x = x * cfg.input_scale
    h1 = x
    for l, p in enumerate(params.crgals):
        x, alpha = _crgal(x, h1, p, f"crgal{l}.", weights, cfg.leaky_slope, cfg.residual)
        if trace is not None:
            trace.hidden.append(x.data)
            trace.attention.append(alpha.data)
    n = len(params.cfcls)
    for c, p in enumerate(params.cfcls):
        x = _cfcl(x, p, f"cfcl{c}.", weights, mode, c == n - 1, track_stats)
    out = _project(x, cfg.p_max if p_max is None else p_max)
    return ad.reshape(out, out.shape[1:]) if single else out


def predict(h, params: ModelParams, p_max: float | None = None) -> np.ndarray:
    """Eval-mode forward pass returning a plain array."""
    return forward(h, params, "eval", p_max=p_max).data


def calibrate_batch_norm(params: ModelParams, h: np.ndarray) -> None:
    """Set running statistics from one train-mode pass over ``h`` (no weight update)."""
    for p in params.cfcls:
        if p.cbn is not None:
            p.cbn.running_mean = p.cbn.running_var = None
    forward(h, params, "train")
