"""
Tensor Core - reverse-mode autodiff over float64 numpy arrays
Only the ops the continual-learning losses need, plus a finite-difference checker
"""

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import (
    DimensionError,
    NonFiniteGradientError,
    NormalizationError,
    RankError,
    TemperatureError,
)

KL_FLOOR = 1e-12
NORMALIZATION_TOLERANCE = 1e-6

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """Dense float64 array with an optional gradient buffer"""

    __slots__ = ("values", "grad", "name", "requires_grad")

    def __init__(self, values, name: Optional[str] = None, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64)
        out.grad = None
        out.name = None
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise RankError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Detached copy: a value gradients never flow into"""
    return Tensor(x.values if isinstance(x, Tensor) else x)


# =============================================================================
# COMPUTATION RECORD
# =============================================================================

@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class Tape:
    """Ordered record of applied ops; creation order is a topological order"""

    nodes: List[Node] = field(default_factory=list)
    _token: Optional[contextvars.Token] = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self) -> List[np.ndarray]:
        """Re-run every recorded forward from the current leaf values"""
        recomputed: Dict[int, np.ndarray] = {}
        outputs = []
        for node in self.nodes:
            args = [recomputed.get(id(t), t.values) for t in node.inputs]
            out = np.asarray(node.forward(*args), dtype=np.float64)
            recomputed[id(node.output)] = out
            outputs.append(out)
        return outputs


ComputationRecord = Tape


class no_record:
    """Context in which ops run but nothing is taped"""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False


def _apply(op: str, inputs: Sequence[Tensor], forward: Callable[..., np.ndarray],
           make_vjp: Callable[..., Callable]) -> Tensor:
    xs = [t.values for t in inputs]
    out_values = np.asarray(forward(*xs), dtype=np.float64)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_values, requires_grad=needs_grad)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and needs_grad:
        tape.nodes.append(Node(op, tuple(inputs), out, forward, make_vjp(out_values, *xs)))
    return out


# =============================================================================
# OPS
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def make_vjp(out, x, w):
        return lambda g: (g @ w.T, x.T @ g)

    return _apply("matmul", (a, b), lambda x, w: x @ w, make_vjp)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    if x.values.ndim != 2 or b.values.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias shape mismatch: {x.shape} + {b.shape}")

    def make_vjp(out, xv, bv):
        return lambda g: (g, g.sum(axis=0))

    return _apply("add_bias", (x, b), lambda xv, bv: xv + bv, make_vjp)


def relu(x: Tensor) -> Tensor:
    def make_vjp(out, xv):
        return lambda g: (g * (xv > 0),)

    return _apply("relu", (as_tensor(x),), lambda xv: np.maximum(xv, 0.0), make_vjp)


def sigmoid(x: Tensor) -> Tensor:
    def make_vjp(out, xv):
        return lambda g: (g * out * (1.0 - out),)

    return _apply("sigmoid", (as_tensor(x),), lambda xv: 0.5 * (1.0 + np.tanh(0.5 * xv)), make_vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")

    def make_vjp(out, xv):
        return lambda g: (g.reshape(xv.shape),)

    return _apply("reshape", (x,), lambda xv: xv.reshape(shape), make_vjp)


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {x.shape}")

    def make_vjp(out, xv):
        return lambda g: (g.T,)

    return _apply("transpose", (x,), lambda xv: xv.T, make_vjp)


def index_select(x: Tensor, indices: Sequence[int], axis: int) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise DimensionError(f"index out of range for axis {axis} of {x.shape}")

    def make_vjp(out, xv):
        def vjp(g):
            full = np.zeros_like(xv)
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            return (full,)
        return vjp

    return _apply("index_select", (x,), lambda xv: np.take(xv, idx, axis=axis), make_vjp)


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _apply("add", (a, b), lambda x, y: x + y, lambda out, x, y: lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _apply("sub", (a, b), lambda x, y: x - y, lambda out, x, y: lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _apply("mul", (a, b), lambda x, y: x * y, lambda out, x, y: lambda g: (g * y, g * x))


def scale(x: Tensor, factor: float) -> Tensor:
    c = float(factor)
    return _apply("scale", (as_tensor(x),), lambda xv: xv * c, lambda out, xv: lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    return _apply("square", (as_tensor(x),), lambda xv: xv * xv, lambda out, xv: lambda g: (2.0 * g * xv,))


def reduce_sum(x: Tensor) -> Tensor:
    def make_vjp(out, xv):
        return lambda g: (np.broadcast_to(g, xv.shape).copy(),)

    return _apply("sum", (as_tensor(x),), lambda xv: np.sum(xv), make_vjp)


def reduce_mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = max(x.size, 1)

    def make_vjp(out, xv):
        return lambda g: (np.broadcast_to(g / n, xv.shape).copy(),)

    return _apply("mean", (x,), lambda xv: np.sum(xv) / n, make_vjp)


def zeros_scalar() -> Tensor:
    return Tensor(0.0)


def softmax_temp(logits: Tensor, tau: float) -> Tensor:
    """Softmax of logits/tau along the last axis, max-subtracted"""
    if not tau > 0:
        raise TemperatureError(f"temperature must be positive, got {tau}")
    t = float(tau)

    def forward(z):
        s = z / t
        e = np.exp(s - np.max(s, axis=-1, keepdims=True))
        return e / np.sum(e, axis=-1, keepdims=True)

    def make_vjp(out, z):
        return lambda g: ((out * (g - np.sum(g * out, axis=-1, keepdims=True))) / t,)

    return _apply("softmax_temp", (as_tensor(logits),), forward, make_vjp)


def _check_normalized(name: str, v: np.ndarray):
    sums = np.sum(v, axis=-1)
    if np.any(np.abs(sums - 1.0) > NORMALIZATION_TOLERANCE):
        worst = float(sums.flat[np.argmax(np.abs(sums - 1.0))])
        raise NormalizationError(f"{name} rows must sum to 1, found {worst:.8f}")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Sum over rows of KL(p || q); p is the fixed target, q gets the gradient"""
    p, q = as_tensor(p), as_tensor(q)
    _same_shape("kl_div", p, q)
    _check_normalized("p", p.values)
    _check_normalized("q", q.values)

    def forward(pv, qv):
        qc = np.maximum(qv, KL_FLOOR)
        safe_p = np.where(pv > 0, pv, 1.0)
        terms = np.where(pv > 0, pv * (np.log(safe_p) - np.log(qc)), 0.0)
        return max(float(np.sum(terms)), 0.0)

    def make_vjp(out, pv, qv):
        qc = np.maximum(qv, KL_FLOOR)
        return lambda g: (None, np.where(qv > KL_FLOOR, -pv / qc, 0.0) * g)

    return _apply("kl_div", (p, q), forward, make_vjp)


def mse(a: Tensor, b: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean of (a-b)^2 over unmasked elements; zero when everything is masked"""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mse", a, b)
    if mask is None:
        m = np.ones(a.shape)
    else:
        m = np.asarray(mask.values if isinstance(mask, Tensor) else mask, dtype=np.float64)
        if m.shape != a.shape:
            raise DimensionError(f"mse mask shape {m.shape} does not match {a.shape}")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise DimensionError("mse mask entries must be 0 or 1")
    count = float(np.sum(m))
    if count == 0.0:
        return zeros_scalar()

    def forward(x, y):
        d = x - y
        return np.sum(m * d * d) / count

    def make_vjp(out, x, y):
        def vjp(g):
            ga = g * 2.0 * m * (x - y) / count
            return (ga, -ga)
        return vjp

    return _apply("mse", (a, b), forward, make_vjp)


def distillation_kl(teacher_rows, student_rows: Tensor, tau: float) -> Tensor:
    """tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)), averaged over rows"""
    student_rows = as_tensor(student_rows)
    teacher_values = teacher_rows.values if isinstance(teacher_rows, Tensor) else np.asarray(teacher_rows)
    if teacher_values.shape != student_rows.shape:
        raise DimensionError(f"teacher {teacher_values.shape} vs student {student_rows.shape}")
    rows = int(np.prod(student_rows.shape[:-1])) if student_rows.values.ndim > 1 else 1
    p = softmax_temp(Tensor(teacher_values), tau)
    q = softmax_temp(student_rows, tau)
    return scale(kl_div(p, q), tau * tau / rows)


# =============================================================================
# BACKWARD
# =============================================================================

def backward(record: Tape, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) in reverse record order

    Returns a map leaf-name -> gradient. When `params` is given, exactly those
    tensors are reported, with zeros for any the loss never reached.
    """
    if loss.values.size != 1:
        raise RankError(f"loss must be a scalar, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    produced = set()
    leaves: Dict[int, Tensor] = {}
    for node in reversed(record.nodes):
        produced.add(id(node.output))
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig
            leaves.setdefault(key, inp)

    if params is not None:
        targets = list(params)
    else:
        targets = [t for k, t in leaves.items() if k not in produced]

    result: Dict[str, np.ndarray] = {}
    for i, t in enumerate(targets):
        g = grads.get(id(t))
        t.grad = np.zeros_like(t.values) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
        result[t.name or f"_leaf{i}"] = t.grad
    return result


# =============================================================================
# OPTIMIZER
# =============================================================================

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
               lr: float, betas: Tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8, frozen: Iterable[str] = ()) -> AdamState:
    """One decoupled-weight-decay Adam step, in place on the parameter values"""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            layer = name.split(".")[0]
            raise NonFiniteGradientError(f"non-finite gradient in layer {layer} ({name})", layer=layer)

    b1, b2 = betas
    state.t += 1
    skip = set(frozen)
    for name, p in params.items():
        if name in skip or name not in grads:
            continue
        g = grads[name]
        if name not in state.m or state.m[name].shape != p.shape:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        p.values *= 1.0 - lr * weight_decay
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class AdamW:
    """Stateful wrapper around adamw_step; one per experience"""

    def __init__(self, lr: float = 4e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = AdamState()

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray], frozen: Iterable[str] = ()):
        adamw_step(params, grads, self.state, self.lr, self.betas, self.weight_decay, self.eps, frozen)


# =============================================================================
# FINITE-DIFFERENCE CHECK
# =============================================================================

@dataclass
class GradCheckReport:
    max_rel_error: float
    analytic: List[np.ndarray]
    numeric: List[np.ndarray]

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(t.values)
    flat = t.values.reshape(-1)
    out = grad.reshape(-1)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * eps)
    return grad


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                   floor: float = 1e-6) -> GradCheckReport:
    """Compare backward() against central differences for every input element"""
    for t in inputs:
        t.requires_grad = True
    with Tape() as tape:
        loss = fn()
    analytic_map = backward(tape, loss, params=inputs)
    analytic = [analytic_map[t.name or f"_leaf{i}"] for i, t in enumerate(inputs)]
    numeric = [numeric_gradient(fn, t, eps) for t in inputs]
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return GradCheckReport(worst, analytic, numeric)
