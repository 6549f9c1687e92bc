"""Dense float64 tensors with reverse-mode differentiation and Adam.

Ops run on plain numpy when no tape is active. Inside a ``with Tape()``
block, any op touching a gradient-bearing tensor appends a record, and the
tape replays those records in reverse to accumulate gradients. Creation
order is already a topological order, so no explicit sort is needed.

Every op validates that its output is finite; a NaN or Inf anywhere raises
immediately rather than corrupting a training run.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit


class TensorError(Exception):
    """Base class for numeric-engine errors."""


class ShapeMismatch(TensorError):
    """Raised when operand shapes are incompatible."""


class NonFiniteValue(TensorError):
    """Raised as soon as an op produces NaN or Inf."""


class TapeError(TensorError):
    """Raised on tape misuse: nesting, or backward without reset."""


class Tensor:
    """A float64 array; set requires_grad for parameters that receive gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_LOCAL = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Append-only op record for one forward/backward pair on one thread."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._tracked: set[int] = set()
        self._spent = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _LOCAL.tape = None

    def gradients(self, loss: Tensor, sources: list[Tensor]) -> list[np.ndarray]:
        """Run the backward pass once, returning gradients aligned with sources."""
        if self._spent:
            raise TapeError("backward already ran on this tape")
        self._spent = True
        if loss.data.size != 1:
            raise ShapeMismatch(f"loss must be a single value, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._records):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for tensor, g_in in zip(inputs, backward(g_out)):
                if g_in is None:
                    continue
                if tensor.requires_grad or id(tensor) in self._tracked:
                    seen = grads.get(id(tensor))
                    grads[id(tensor)] = g_in if seen is None else seen + g_in
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue("op produced non-finite values")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(
        t.requires_grad or id(t) in tape._tracked for t in inputs
    ):
        tape._records.append((out, inputs, backward))
        tape._tracked.add(id(out))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# --- Primitive ops ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _emit(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _emit(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = astensor(a)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    return _emit(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def const_matmul(mat, b) -> Tensor:
    """Multiply by a constant (optionally sparse) matrix that receives no gradient."""
    b = astensor(b)
    if mat.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"const_matmul needs (n,k)@(k,m), got {mat.shape} @ {b.shape}")
    out = np.asarray(mat @ b.data)
    mat_t = mat.T
    return _emit(out, (b,), lambda g: (np.asarray(mat_t @ g),))


def transpose(a) -> Tensor:
    a = astensor(a)
    return _emit(a.data.T, (a,), lambda g: (g.T,))


def relu(a) -> Tensor:
    a = astensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = astensor(a)
    out = expit(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = astensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def log(a) -> Tensor:
    a = astensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    widths = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows by index; the backward pass scatter-adds into the source."""
    a = astensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(a.data[idx], (a,), backward)


def sum_rows(a) -> Tensor:
    """Sum a (n, d) matrix to (1, d); an empty input sums to zeros."""
    a = astensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"sum_rows needs a 2-D input, got {a.shape}")
    n, d = a.data.shape
    out = a.data.sum(axis=0, keepdims=True) if n else np.zeros((1, d))
    return _emit(out, (a,), lambda g: (np.repeat(g, n, axis=0),))


def mean_rows(a) -> Tensor:
    """Average a (n, d) matrix to (1, d); an empty collection averages to zeros."""
    a = astensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"mean_rows needs a 2-D input, got {a.shape}")
    n, d = a.data.shape
    if n == 0:
        return _emit(np.zeros((1, d)), (a,), lambda g: (np.zeros((0, d)),))
    return _emit(a.data.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),))


def mean_all(a) -> Tensor:
    """Average every entry to a single-element (1,) tensor."""
    a = astensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeMismatch("mean_all over an empty tensor")
    return _emit(
        np.array([a.data.mean()]), (a,),
        lambda g: (np.full(a.data.shape, float(g.reshape(-1)[0]) / n),),
    )


NORM_EPS = 1e-12


def l2_normalize(a) -> Tensor:
    """Scale rows to unit L2 norm; rows with norm below 1e-12 map to zero."""
    a = astensor(a)
    vec = a.data.ndim == 1
    x = a.data[None, :] if vec else a.data
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms >= NORM_EPS, norms, 1.0)
    live = norms >= NORM_EPS
    y = np.where(live, x / safe, 0.0)

    def backward(g):
        g = g[None, :] if vec else g
        dot = (g * y).sum(axis=1, keepdims=True)
        gx = np.where(live, (g - y * dot) / safe, 0.0)
        return (gx[0] if vec else gx,)

    return _emit(y[0] if vec else y, (a,), backward)


def softmax(a) -> Tensor:
    """Row-wise softmax (last axis), computed with max subtraction."""
    a = astensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), backward)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Per-example -log softmax(logits)[target]; returns a (n,) loss vector.

    A 1-D logits vector with an integer target yields a (1,) loss.
    """
    logits = astensor(logits)
    vec = logits.data.ndim == 1
    z = logits.data[None, :] if vec else logits.data
    t = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    if t.shape[0] != z.shape[0]:
        raise ShapeMismatch(f"{t.shape[0]} targets for {z.shape[0]} logit rows")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(z.shape[0]), t]
    probs = np.exp(shifted - lse[:, None])

    def backward(g):
        g = np.atleast_1d(g)
        grad = probs.copy()
        grad[np.arange(z.shape[0]), t] -= 1.0
        grad *= g[:, None]
        return (grad[0] if vec else grad,)

    return _emit(losses, (logits,), backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gamma, beta) -> Tensor:
    """Per-row normalization with learned scale and shift."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        return (dx, dgamma, dbeta)

    return _emit(out, (x, gamma, beta), backward)


# --- Parameter initialization and serialization --------------------------------

def glorot(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """Uniform(-a, a) weight matrix with a = sqrt(6 / (fan_in + fan_out))."""
    a = math.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-a, a, size=(rows, cols)), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def const_param(value: float, *shape: int) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


PARAMS_FORMAT_VERSION = 1


def params_to_jsonable(params: dict[str, Tensor]) -> dict:
    return {
        "format_version": PARAMS_FORMAT_VERSION,
        "tensors": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.items()
        },
    }


def params_from_jsonable(obj: dict) -> dict[str, Tensor]:
    if obj.get("format_version") != PARAMS_FORMAT_VERSION:
        raise TensorError(f"unsupported parameter format version {obj.get('format_version')!r}")
    out = {}
    for name, spec in obj["tensors"].items():
        data = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        out[name] = Tensor(data, requires_grad=True)
    return out


# --- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters and step count."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, Tensor], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, t in params.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to params in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# --- Gradient verification -------------------------------------------------------

def gradcheck(fn, params: dict[str, Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``fn`` must rebuild the scalar loss from ``params`` on every call. The
    relative error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    names = list(params)
    with Tape() as tape:
        loss = fn()
    analytic = dict(zip(names, tape.gradients(loss, [params[n] for n in names])))
    worst = 0.0
    for name in names:
        flat = params[name].data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
