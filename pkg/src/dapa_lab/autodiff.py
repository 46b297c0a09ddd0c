"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops executed while a :class:`Tape` is active are appended to it in execution
order, which is already a topological order, so the backward pass is a single
reversed sweep. Outside a tape every op is a plain numpy computation.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ContractError",
    "NonFiniteGradientError",
    "MLPParams",
    "AdamState",
    "GradCheckReport",
    "as_tensor",
    "active_tape",
    "paused",
    "backward",
    "forward_mlp",
    "init_mlp",
    "adam_step",
    "grad_check",
    "concat",
    "stack",
    "matmul",
    "rotation_coeffs",
]


class ContractError(ValueError):
    """Raised when an op is called outside its documented preconditions."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`adam_step` when a gradient holds NaN or inf."""

    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"non-finite gradient for parameter(s): {', '.join(self.names)}")


_local = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class paused:
    """Suspend recording on this thread; ops inside run as plain numpy."""

    def __enter__(self):
        self._prev = active_tape()
        _local.tape = None
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False


class Tape:
    """Ordered record of differentiable ops for one forward/backward pass.

    Use as a context manager; nesting is not supported. Each tape belongs to
    the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        if self._prev is not None:
            raise ContractError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes.clear()

    def backward(self, loss: "Tensor", params: Sequence["Tensor"] = ()) -> list[np.ndarray]:
        return backward(self, loss, params)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._vjp: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return _make(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return _make(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return _make(x * y, (self, other),
                     lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y
        return _make(out, (self, other),
                     lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        x = self.data
        return _make(x ** exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g) if _has_advanced(idx) else full.__setitem__(idx, g)
            return (full,)

        return _make(self.data[idx], (self,), vjp)

    # -- elementwise functions ---------------------------------------------
    def square(self):
        x = self.data
        return _make(x * x, (self,), lambda g: (2.0 * g * x,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _make(out, (self,), lambda g: (0.5 * g / out,))

    def exp(self):
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        out = np.tanh(self.data)
        return _make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sin(self):
        x = self.data
        return _make(np.sin(x), (self,), lambda g: (g * np.cos(x),))

    def cos(self):
        x = self.data
        return _make(np.cos(x), (self,), lambda g: (-g * np.sin(x),))

    def softplus(self):
        x = self.data
        out = np.logaddexp(0.0, x)
        return _make(out, (self,), lambda g: (g / (1.0 + np.exp(-x)),))

    def clip(self, lo: float, hi: float):
        x = self.data
        mask = (x >= lo) & (x <= hi)
        return _make(np.clip(x, lo, hi), (self,), lambda g: (g * mask,))

    # -- reductions and reshapes -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def swapaxes(self, a: int, b: int):
        return _make(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    def expand_dims(self, axis: int):
        return self.reshape(np.expand_dims(self.data, axis).shape)


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        tape.nodes.append(out)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        return matmul(a.reshape(1, -1), b).reshape(b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return matmul(a, b.reshape(-1, 1)).reshape(a.shape[:-1])
    x, y = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return _make(x @ y, (a, b), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


# Taylor coefficients of a(x) = sin(sqrt x)/sqrt x and b(x) = (1 - cos sqrt x)/x in x.
_A_SERIES = np.array([1.0, -1 / 6, 1 / 120, -1 / 5040, 1 / 362880, -1 / 39916800])
_B_SERIES = np.array([1 / 2, -1 / 24, 1 / 720, -1 / 40320, 1 / 3628800, -1 / 479001600])
_SERIES_CUTOFF = 1e-2


def _series(coeffs, x):
    val = np.zeros_like(x)
    der = np.zeros_like(x)
    for k in range(len(coeffs) - 1, -1, -1):
        val = val * x + coeffs[k]
        if k >= 1:
            der = der * x + k * coeffs[k]
    return val, der


def rotation_coeffs(angle_sq: Tensor) -> tuple[Tensor, Tensor]:
    """Rodrigues coefficients ``sin t / t`` and ``(1 - cos t) / t**2`` as functions of ``t**2``.

    Smooth at zero: a truncated series is used below ``t**2 = 1e-2``.
    """
    x = angle_sq.data
    small = x < _SERIES_CUTOFF
    xs = np.where(small, x, 0.0)
    xl = np.where(small, 1.0, x)
    t = np.sqrt(xl)
    sa, dsa = _series(_A_SERIES, xs)
    sb, dsb = _series(_B_SERIES, xs)
    a = np.where(small, sa, np.sin(t) / t)
    b = np.where(small, sb, (1.0 - np.cos(t)) / xl)
    da = np.where(small, dsa, (t * np.cos(t) - np.sin(t)) / (2.0 * xl * t))
    db = np.where(small, dsb, (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / (2.0 * xl * xl))
    return (_make(a, (angle_sq,), lambda g: (g * da,)),
            _make(b, (angle_sq,), lambda g: (g * db,)))


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reached.

    Returns the gradients of ``params`` in order; parameters that do not
    influence the loss get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._vjp is None:
                leaves[key] = parent
    if loss._vjp is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# -- MLP ---------------------------------------------------------------------

_ACTIVATIONS = ("tanh", "identity")


@dataclass
class MLPParams:
    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ContractError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in _ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ContractError(f"layer {i} input dim {w.shape[0]} does not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, hidden: str = "tanh",
             out_scale: float = 1.0, name: str = "mlp") -> MLPParams:
    """Glorot-uniform weights and zero biases; ``hidden`` activation on all but the last layer."""
    weights, biases, acts = [], [], []
    n = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if i == n - 1:
            w = w * out_scale
        weights.append(Tensor(w, requires_grad=True, name=f"{name}.w{i}"))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b{i}"))
        acts.append(hidden if i < n - 1 else "identity")
    return MLPParams(weights, biases, acts)


def forward_mlp(params: MLPParams, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != params.in_dim:
        raise ContractError(f"input dim {x.shape[-1]} != first layer input {params.in_dim}")
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = matmul(h, w) + b
        if act == "tanh":
            h = h.tanh()
    return h


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Raises :class:`NonFiniteGradientError` without touching anything if any
    gradient is non-finite.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and moment buffers differ in length")
    bad = [p.name or str(i) for i, (p, g) in enumerate(zip(params, grads)) if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(bad)
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or m.shape != p.shape:
            raise ContractError(f"shape mismatch for {p.name}: {p.shape} vs {np.shape(g)}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    checked_entries: int

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if e > self.tolerance]


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], tolerance: float = 1e-6,
               h: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` must rebuild the scalar loss from the current parameter values.
    The relative error of an entry is ``|a - n| / (max(|a|, |n|) + floor)``
    with ``floor = 1e-6 * max(1, max|n|, |loss|)`` taken per parameter, so
    entries whose true gradient is exactly zero are judged against the
    finite-difference round-off scale rather than against zero.
    ``max_entries`` caps the number of probed entries per parameter.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, params)
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    total = 0
    for i, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(len(idx))
        for k, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + h
            fp = fn().item()
            flat[j] = orig - h
            fm = fn().item()
            flat[j] = orig
            num[k] = (fp - fm) / (2.0 * h)
        ana = a.reshape(-1)[idx]
        floor = 1e-6 * max(1.0, float(np.max(np.abs(num), initial=0.0)), abs(loss.item()))
        err = np.abs(ana - num) / (np.maximum(np.abs(ana), np.abs(num)) + floor)
        report[p.name or f"param{i}"] = float(np.max(err, initial=0.0))
        total += len(idx)
    for p in params:
        p.grad = None
    return GradCheckReport(report, tolerance, total)


def parameters_of(*groups: Iterable[Tensor]) -> list[Tensor]:
    out = []
    for g in groups:
        out.extend(g)
    return out
