"""Dense complex tensors with a reverse-mode differentiation tape.

Values live in numpy arrays (``float64`` or ``complex128``).  A :class:`Tensor`
is *attached* when it was produced on a :class:`Tape`; operations on attached
tensors are recorded and :meth:`Tape.backward` replays them in reverse.

Gradient convention
-------------------
Real and imaginary parts are independent real variables.  For a real scalar
loss ``L`` and a complex tensor ``z`` the stored adjoint is the complex array
``dL/dRe(z) + 1j * dL/dIm(z)`` (twice the conjugate Wirtinger derivative).
A gradient step ``z - lr * grad`` therefore moves both parts downhill.
Real tensors receive real adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ShapeError

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


def _to_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if np.iscomplexobj(arr):
        return arr.astype(np.complex128, copy=False)
    return arr.astype(np.float64, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    meta: tuple[tuple[tuple[int, ...], bool] | None, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tensor:
    """A dense real or complex array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None, name: str | None = None):
        self.data = _to_array(data)
        self.tape = tape
        self.node_id = node_id
        self.name = name

    # -- views ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    @property
    def re(self) -> np.ndarray:
        return np.real(self.data).ravel()

    @property
    def im(self) -> np.ndarray:
        if self.is_complex:
            return np.imag(self.data).ravel()
        return np.zeros(self.data.size)

    @property
    def attached(self) -> bool:
        return self.tape is not None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self):
        return self.data.item()

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __repr__(self) -> str:
        tag = "attached" if self.attached else "detached"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, {tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return c_matmul(self, other)

    def __rmatmul__(self, other):
        return c_matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


ComplexTensor = Tensor


class Gradients(Mapping):
    """Adjoints of the leaves of one tape, keyed by leaf tensor or node id."""

    def __init__(self, by_id: dict[int, np.ndarray], names: dict[int, str | None]):
        self._by_id = by_id
        self._names = names

    def _key(self, item) -> int:
        if isinstance(item, Tensor):
            if item.node_id is None:
                raise KeyError("tensor is detached")
            return item.node_id
        return item

    def __getitem__(self, item) -> np.ndarray:
        return self._by_id[self._key(item)]

    def __iter__(self):
        return iter(self._by_id)

    def __len__(self) -> int:
        return len(self._by_id)

    def re(self, item) -> np.ndarray:
        return np.real(self[item])

    def im(self, item) -> np.ndarray:
        g = self[item]
        return np.imag(g) if np.iscomplexobj(g) else np.zeros_like(g)

    def by_name(self) -> dict[str, np.ndarray]:
        return {self._names[i]: g for i, g in self._by_id.items() if self._names[i] is not None}


class Tape:
    """Records operations in creation order; ``backward`` walks them in reverse.

    A tape is single use: after ``backward`` its records are released and a
    second call raises :class:`ContractError`.
    """

    def __init__(self):
        self.nodes: list[_Node] | None = []
        self.kinks: list[np.ndarray] = []
        self._leaves: dict[int, tuple[str | None, tuple[int, ...], bool]] = {}
        self._done = False

    def leaf(self, value, name: str | None = None) -> Tensor:
        if self._done:
            raise ContractError("tape already consumed by backward()")
        arr = value.data if isinstance(value, Tensor) else value
        t = Tensor(arr, self, len(self.nodes), name)
        self.nodes.append(_Node("leaf", (), (), None))
        self._leaves[t.node_id] = (name, t.shape, t.is_complex)
        return t

    def _record(self, kind, data, inputs, vjp) -> Tensor:
        if self._done:
            raise ContractError("tape already consumed by backward()")
        ids = tuple(x.node_id if isinstance(x, Tensor) and x.tape is self else None for x in inputs)
        meta = tuple(
            (x.shape, x.is_complex) if isinstance(x, Tensor) and x.tape is self else None for x in inputs
        )
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, ids, meta, vjp))
        return Tensor(data, self, node_id)

    def backward(self, loss: Tensor) -> Gradients:
        if self._done:
            raise ContractError("backward() called twice on the same tape")
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractError("loss is not a node of this tape")
        if loss.size != 1 or loss.is_complex:
            raise ContractError("loss must be a real scalar")
        nodes = self.nodes
        grads: list[np.ndarray | None] = [None] * len(nodes)
        grads[loss.node_id] = np.ones(loss.shape)
        for i in range(len(nodes) - 1, -1, -1):
            node = nodes[i]
            g = grads[i]
            if g is None or node.vjp is None:
                continue
            for inp, meta, c in zip(node.inputs, node.meta, node.vjp(g)):
                if inp is None or c is None:
                    continue
                shape, is_c = meta
                c = _unbroadcast(np.asarray(c), shape)
                if not is_c:
                    c = np.real(c)
                if grads[inp] is None:
                    grads[inp] = np.array(c, dtype=np.complex128 if is_c else np.float64)
                else:
                    grads[inp] = grads[inp] + c
            grads[i] = None
        out = {}
        for i, (_, shape, is_c) in self._leaves.items():
            g = grads[i]
            if g is None:
                g = np.zeros(shape, dtype=np.complex128 if is_c else np.float64)
            out[i] = g
        self._done = True
        self.nodes = None
        return Gradients(out, {i: meta[0] for i, meta in self._leaves.items()})


# ---------------------------------------------------------------------------
# operation helpers


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = x.tape
    return tape


def _op(kind, data, inputs, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape._record(kind, data, inputs, vjp)


def _kink(inputs, pattern: np.ndarray) -> None:
    tape = _tape_of(*inputs)
    if tape is not None:
        tape.kinks.append(pattern)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _op("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _op("mul", ad * bd, (a, b), lambda g: (g * np.conj(bd), g * np.conj(ad)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        gb = np.conj(bd)
        return g / gb, -g * np.conj(out) / gb

    return _op("div", out, (a, b), vjp)


def c_matmul(a, b) -> Tensor:
    """Complex matrix product ``a @ b`` (leading axes are batch axes)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"c_matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return _mm(g, np.conj(np.swapaxes(bd, -1, -2))), _matmul_grad_right(ad, g, bd.shape)

    return _op("matmul", _mm(ad, bd), (a, b), vjp)


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # one BLAS call instead of a per-batch loop when the right factor is a plain matrix
    if y.ndim == 2 and x.ndim > 2:
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
    if x.ndim == 4 and x.shape[1] == 1 and y.ndim == 3:
        return np.einsum("bkf,dfg->bdkg", x[:, 0], y, optimize=True)
    return x @ y


def _matmul_grad_right(ad: np.ndarray, g: np.ndarray, bshape: tuple[int, ...]) -> np.ndarray:
    """``A^H G`` summed over the batch axes along which the right factor was broadcast."""
    nb = g.ndim - 2
    letters = "abcdefghij"[:nb]
    a_batch = (1,) * (nb - (ad.ndim - 2)) + ad.shape[:-2]
    b_batch = (1,) * (nb - (len(bshape) - 2)) + tuple(bshape[:-2])
    a_sub = "".join(l for l, n in zip(letters, a_batch) if n != 1)
    b_sub = "".join(l for l, n in zip(letters, b_batch) if n != 1)
    a_sq = ad.reshape(tuple(n for n in a_batch if n != 1) + ad.shape[-2:])
    out = np.einsum(f"{a_sub}xy,{letters}xz->{b_sub}yz", np.conj(a_sq), g, optimize=True)
    return out.reshape(bshape)


def conj(a) -> Tensor:
    a = _wrap(a)
    return _op("conj", np.conj(a.data), (a,), lambda g: (np.conj(g),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _op("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    return _op("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def hermitian(a) -> Tensor:
    """Conjugate transpose of the last two axes."""
    a = _wrap(a)
    if a.ndim < 2:
        raise ShapeError("hermitian needs at least two axes")
    return conj(swapaxes(a, -1, -2))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_wrap(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _op("concat", data, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(a, index) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        out = np.zeros(a.shape, dtype=np.result_type(g, a.data))
        np.add.at(out, index, g)
        return (out,)

    return _op("getitem", a.data[index], (a,), vjp)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _op("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# complex <-> real


def real(a) -> Tensor:
    a = _wrap(a)
    return _op("real", np.real(a.data).copy(), (a,), lambda g: (g,))


def imag(a) -> Tensor:
    a = _wrap(a)
    return _op("imag", np.imag(a.data).copy(), (a,), lambda g: (1j * g,))


def make_complex(re, im) -> Tensor:
    re, im = _wrap(re), _wrap(im)
    return _op("complex", re.data + 1j * im.data, (re, im), lambda g: (np.real(g), np.imag(g)))


def modulus_sq(a) -> Tensor:
    """Elementwise ``re**2 + im**2`` as a real tensor."""
    a = _wrap(a)
    d = a.data
    return _op("modulus_sq", np.real(d) ** 2 + np.imag(d) ** 2, (a,), lambda g: (2.0 * g * d,))


def modulus(a) -> Tensor:
    a = _wrap(a)
    d = a.data
    out = np.abs(d)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * d / safe, 0.0),)

    return _op("modulus", out, (a,), vjp)


def frobenius_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Square root of the summed squared moduli (over ``axis`` or all entries)."""
    return sqrt(sum(modulus_sq(a), axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------------
# elementwise functions


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _op("exp", out, (a,), lambda g: (g * np.conj(out),))


def log(a) -> Tensor:
    a = _wrap(a)
    d = a.data
    return _op("log", np.log(d), (a,), lambda g: (g / np.conj(d),))


def log2(a) -> Tensor:
    a = _wrap(a)
    d = a.data
    return _op("log2", np.log2(d), (a,), lambda g: (g / (np.conj(d) * np.log(2.0)),))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out != 0, out, np.inf)
        return (g / (2.0 * np.conj(safe)),)

    return _op("sqrt", out, (a,), vjp)


def clamp_min(a, floor: float) -> Tensor:
    """``max(a, floor)`` for real tensors; the gradient passes where ``a > floor``."""
    a = _wrap(a)
    if a.is_complex:
        raise ContractError("clamp_min is defined for real tensors")
    mask = a.data > floor
    _kink((a,), mask)
    return _op("clamp_min", np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def _split(kind, a, f, df) -> Tensor:
    a = _wrap(a)
    d = a.data
    if not np.iscomplexobj(d):
        _kink((a,), d > 0)
        return _op(kind, f(d), (a,), lambda g: (g * df(d),))
    xr, xi = np.real(d), np.imag(d)
    _kink((a,), np.stack([xr > 0, xi > 0]))
    out = f(xr) + 1j * f(xi)
    return _op(kind, out, (a,), lambda g: (np.real(g) * df(xr) + 1j * np.imag(g) * df(xi),))


def relu(a) -> Tensor:
    return _split("relu", a, lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(np.float64))


def leaky_relu_c(a, slope: float = 0.2) -> Tensor:
    """LeakyReLU applied separately to the real and imaginary parts."""
    if not 0.0 < slope < 1.0:
        raise ContractError("slope must lie in (0, 1)")
    return _split(
        "leaky_relu", a, lambda x: np.where(x > 0, x, slope * x), lambda x: np.where(x > 0, 1.0, slope)
    )


def _selu(x):
    return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def _dselu(x):
    return SELU_SCALE * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def cselu(a) -> Tensor:
    """SELU applied separately to the real and imaginary parts."""
    return _split("selu", a, _selu, _dselu)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    n_checked: int = 0
    n_skipped: int = 0
    worst: tuple[str, int, str] | None = None
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def empty(self) -> bool:
        return self.n_checked == 0


LossFn = Callable[[Tape, dict[str, Tensor]], Tensor]


def _run(f: LossFn, params: Mapping[str, np.ndarray]):
    tape = Tape()
    leaves = {name: tape.leaf(value, name=name) for name, value in params.items()}
    loss = f(tape, leaves)
    return tape, leaves, loss


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    f: LossFn,
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    floor: float = 1e-6,
    coords: Iterable[tuple[str, int]] | None = None,
) -> GradCheckReport:
    """Compare ``backward`` against central differences, coordinate by coordinate.

    ``f(tape, leaves)`` must build a real scalar loss from the leaf tensors.
    Real and imaginary parts of complex parameters are checked separately.
    Coordinates whose perturbation flips any activation kink (ReLU family,
    SELU, clamp) are skipped.  The relative error of one coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    report = GradCheckReport()
    params = {k: _to_array(v) for k, v in params.items()}
    if not params:
        return report
    tape, leaves, loss = _run(f, params)
    base_kinks = list(tape.kinks)
    grads = tape.backward(loss)

    if coords is None:
        coords = [(name, i) for name, v in params.items() for i in range(v.size)]
    for name, i in coords:
        value = params[name]
        parts = ("re", "im") if np.iscomplexobj(value) else ("re",)
        g = grads[leaves[name]].ravel()[i]
        for part in parts:
            delta = step if part == "re" else 1j * step
            vals = []
            skip = False
            for sign in (1.0, -1.0):
                shifted = dict(params)
                pert = value.copy().ravel()
                pert[i] = pert[i] + sign * delta
                shifted[name] = pert.reshape(value.shape)
                t2, _, l2 = _run(f, shifted)
                if not _same_pattern(base_kinks, t2.kinks):
                    skip = True
                    break
                vals.append(float(l2.data))
            if skip:
                report.n_skipped += 1
                continue
            numeric = (vals[0] - vals[1]) / (2 * step)
            analytic = float(np.real(g)) if part == "re" else float(np.imag(g))
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            report.errors.append(err)
            report.n_checked += 1
            if err >= report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, i, part)
    return report
