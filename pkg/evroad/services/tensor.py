"""Dense tensors with a reverse-mode tape for the ops the network uses.

Ops only record when a :class:`Tape` is active on the current thread and at
least one input requires a gradient, so the same functions serve inference.
Broadcasting is limited to bias-row addition; every other expansion goes
through an explicit ``broadcast_*`` op with its own backward.
"""
import builtins
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from evroad.core.errors import NumericError, PreconditionError, ShapeError
from evroad.core.logger import get_logger

logger = get_logger(__name__)

LN_EPS = 1e-5
NORM_FLOOR = 1e-12
GELU_C = math.sqrt(2.0 / math.pi)

_state = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != 'f':
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records ops in execution order; replaying them backwards is a reverse topological order."""

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tapes.pop()
        return False

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, wrt: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for tensor, g_in in zip(node.inputs, node.backward(g)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
        logger.debug(f"backward through {len(self.nodes)} recorded ops")
        return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in wrt.items()}


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward,
          check_finite: bool = True) -> Tensor:
    # shape plumbing passes raw values such as beta_raw = -inf through unchecked
    if check_finite and not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(_Node(op, out, inputs, backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum_to_shape(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


#-------------------------------------------------
# Linear algebra and elementwise arithmetic
#-------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _make("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return _make("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _make("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _make("shift", a.data + c, (a,), lambda g: (g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    return _make("square", A * A, (a,), lambda g: (2.0 * A * g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    return _make("log", np.log(A), (a,), lambda g: (g / A,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * A))
    return _make("softplus", np.logaddexp(0.0, A), (a,), lambda g: (g * sig,))


def gelu(a) -> Tensor:
    """Tanh approximation 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    a = _as_tensor(a)
    x = a.data
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make("gelu", out, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


#-------------------------------------------------
# Reductions and row-wise normalisations
#-------------------------------------------------
def sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_sum_to_shape(g, shape, axis, keepdims),))


def mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]
    return _make("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_sum_to_shape(g, shape, axis, keepdims) / count,))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    out = _softmax(a.data)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make("softmax_rows", out, (a,), backward)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))
    out = x - lse
    probs = np.exp(out)
    return _make("log_softmax", out, (a,),
                 lambda g: (g - probs * np.sum(g, axis=-1, keepdims=True),))


def logsumexp_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"logsumexp_rows: expected a matrix, got {a.shape}")
    x = a.data
    m = np.max(x, axis=1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=1, keepdims=True))
    probs = np.exp(x - lse)
    return _make("logsumexp_rows", lse[:, 0], (a,), lambda g: (probs * g[:, None],))


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: input {x.shape} with scale {gamma.shape} and shift {beta.shape}")
    X, G = x.data, gamma.data
    mu = X.mean(axis=1, keepdims=True)
    std = np.sqrt(X.var(axis=1, keepdims=True) + eps)
    xhat = (X - mu) / std

    def backward(g):
        dxhat = g * G
        dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) / std
        return dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    return _make("layer_norm", xhat * G + beta.data, (x, gamma, beta), backward)


def l2_normalize_rows(a) -> Tensor:
    """Divide each row by max(||row||_2, 1e-12)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected a matrix, got {a.shape}")
    X = a.data
    norms = np.sqrt(np.sum(X * X, axis=1, keepdims=True))
    denom = np.maximum(norms, NORM_FLOOR)
    out = X / denom
    active = norms > NORM_FLOOR

    def backward(g):
        projected = g - out * np.sum(g * out, axis=1, keepdims=True)
        return (np.where(active, projected, g) / denom,)

    return _make("l2_normalize_rows", out, (a,), backward)


#-------------------------------------------------
# Shape plumbing
#-------------------------------------------------
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {e}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), check_finite=False)


def slice_axis(a, start: int, stop: int, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = [builtins.slice(None)] * a.ndim
    index[axis] = builtins.slice(start, stop)
    index = tuple(index)
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make("slice", a.data[index].copy(), (a,), backward, check_finite=False)


def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    original = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {original} -> {shape}") from e
    return _make("reshape", data.copy(), (a,), lambda g: (g.reshape(original),), check_finite=False)


def broadcast_rows(v, n: int) -> Tensor:
    """Stack a length-d vector into an n x d matrix."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected a vector, got {v.shape}")
    return _make("broadcast_rows", np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def broadcast_cols(v, m: int) -> Tensor:
    """Repeat a length-r vector across m columns (r x m)."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"broadcast_cols: expected a vector, got {v.shape}")
    return _make("broadcast_cols", np.tile(v.data[:, None], (1, m)), (v,), lambda g: (g.sum(axis=1),))


def broadcast_scalar(s, shape: Tuple[int, ...]) -> Tensor:
    s = _as_tensor(s)
    if s.data.size != 1:
        raise ShapeError(f"broadcast_scalar: expected one element, got {s.shape}")
    s_shape = s.shape
    return _make("broadcast_scalar", np.full(shape, s.data.reshape(()), dtype=s.data.dtype), (s,),
                 lambda g: (np.reshape(g.sum(), s_shape),))


#-------------------------------------------------
# Finite-difference gradient check
#-------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    tol: float
    atol: float
    passed: bool
    per_tensor: Dict[str, float] = field(default_factory=dict)
    worst: Optional[str] = None


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _scalar_value(f, arrays: Mapping[str, np.ndarray]) -> float:
    value = float(np.sum(f({k: Tensor(v) for k, v in arrays.items()}).data))
    if not math.isfinite(value):
        raise NumericError("grad_check: loss is not finite")
    return value


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               eps: float = 1e-6, tol: float = 1e-4, atol: float = 1e-7,
               max_elements: Optional[int] = 32, seed: int = 0,
               names: Optional[Iterable[str]] = None) -> GradCheckReport:
    """Compare tape gradients of a scalar ``f`` with central differences.

    Tensors larger than ``max_elements`` are checked on a seeded random
    sample of elements. An element passes when its relative error
    ``|a-b| / max(|a|,|b|,1e-8)`` is within ``tol`` or its absolute error is
    within ``atol``; ``max_rel_error`` is reported over every checked element.
    """
    if eps <= 0:
        raise PreconditionError(f"eps must be > 0, got {eps}")
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}
    with Tape() as tape:
        loss = f(leaves)
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("grad_check: loss is not finite")
    analytic = tape.gradient(loss, leaves)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, 0.0, 0, tol, atol, True)
    for name in (list(names) if names is not None else list(arrays)):
        array = arrays[name]
        flat = array.reshape(-1)
        if max_elements is not None and flat.size > max_elements:
            indices = rng.choice(flat.size, size=max_elements, replace=False)
        else:
            indices = np.arange(flat.size)
        worst = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + eps
            up = _scalar_value(f, arrays)
            flat[idx] = original - eps
            down = _scalar_value(f, arrays)
            flat[idx] = original
            numeric = (up - down) / (2.0 * eps)
            exact = float(analytic[name].reshape(-1)[idx])
            rel = relative_error(exact, numeric)
            err = abs(exact - numeric)
            worst = max(worst, rel)
            report.max_abs_error = max(report.max_abs_error, err)
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = f"{name}[{int(idx)}]"
            if rel > tol and err > atol:
                report.passed = False
            report.checked += 1
        report.per_tensor[name] = worst

    logger.info(f"Gradient check over {report.checked} elements: max relative error "
                f"{report.max_rel_error:.3e} ({report.worst}), passed={report.passed}")
    return report
