"""Dense reverse-mode automatic differentiation over float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents, a
``compute`` function (used again by :meth:`Tape.replay`) and a vector-Jacobian
product.  Broadcasting is limited to scalar <-> tensor for the elementwise
ops; anything else (bias rows, gathers, scatters) has a dedicated op so each
backward rule stays small enough to audit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when a tensor holds NaN or Inf where finite values are required."""


def make_rng(*keys: int) -> np.random.Generator:
    """Counter-based generator keyed by an explicit seed path.

    ``make_rng(trial, epoch, layer)`` always yields the same stream, independent
    of any other stream drawn before it.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_compute", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._compute: Callable | None = None
        self._vjp: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{what} contains non-finite values")
        return self

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(name: str, compute: Callable, vjp: Callable, *parents: Tensor) -> Tensor:
    """Record an op: ``compute(*parent_data) -> data`` and
    ``vjp(grad_out, out_data, *parent_data) -> tuple of parent grads``."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(compute(*[p.data for p in parents]), dtype=DTYPE)
    out.grad = None
    out.op = name
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._compute = compute
        out._vjp = vjp
    else:
        out._parents = ()
        out._compute = None
        out._vjp = None
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_pair(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return custom_op(
        "add",
        np.add,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        a,
        b,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return custom_op(
        "sub",
        np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        a,
        b,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")
    sa, sb = a.shape, b.shape
    return custom_op(
        "mul",
        np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
        a,
        b,
    )


def _safe_div(x, y):
    if np.any(y == 0):
        raise ZeroDivisionError("div: zero in denominator")
    return x / y


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "div")
    sa, sb = a.shape, b.shape
    return custom_op(
        "div",
        _safe_div,
        lambda g, out, x, y: (_unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb)),
        a,
        b,
    )


def neg(a) -> Tensor:
    return custom_op("neg", np.negative, lambda g, out, x: (-g,), as_tensor(a))


def pow_const(a, p: float) -> Tensor:
    p = float(p)
    return custom_op(
        "pow_const",
        lambda x: np.power(x, p),
        lambda g, out, x: (g * p * np.power(x, p - 1.0),),
        as_tensor(a),
    )


def _safe_log(x):
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    return np.log(x)


def log(a) -> Tensor:
    return custom_op("log", _safe_log, lambda g, out, x: (g / x,), as_tensor(a))


def exp(a) -> Tensor:
    return custom_op("exp", np.exp, lambda g, out, x: (g * out,), as_tensor(a))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only strictly inside the interval."""
    lo_ = -np.inf if lo is None else float(lo)
    hi_ = np.inf if hi is None else float(hi)

    def vjp(g, out, x):
        return (g * ((x > lo_) & (x < hi_)),)

    return custom_op("clamp", lambda x: np.clip(x, lo_, hi_), vjp, as_tensor(a))


def max_const(a, c: float) -> Tensor:
    """Elementwise ``max(a, c)``; ties route the gradient to the constant."""
    c = float(c)
    return custom_op("max_const", lambda x: np.maximum(x, c), lambda g, out, x: (g * (x > c),), as_tensor(a))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``.  ``cond`` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    if a.shape != b.shape or cond.shape != a.shape:
        raise ValueError(f"where: shape mismatch {cond.shape}, {a.shape}, {b.shape}")
    return custom_op(
        "where",
        lambda x, y: np.where(cond, x, y),
        lambda g, out, x, y: (g * cond, g * ~cond),
        a,
        b,
    )


def elementwise(op_kind: str, a, b=None, **kw) -> Tensor:
    """Dispatch by name; ``pow_const`` takes ``p``, ``clamp`` takes ``lo``/``hi``, ``max_const`` takes ``c``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op_kind in binary:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind == "pow_const":
        return pow_const(a, kw["p"])
    if op_kind == "log":
        return log(a)
    if op_kind == "clamp":
        return clamp(a, kw.get("lo"), kw.get("hi"))
    if op_kind == "max_const":
        return max_const(a, kw["c"])
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a) -> Tensor:
    # gradient at exactly 0 is 0
    return custom_op("relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),), as_tensor(a))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    return custom_op(
        "leaky_relu",
        lambda x: np.where(x > 0, x, slope * x),
        lambda g, out, x: (g * np.where(x > 0, 1.0, slope),),
        as_tensor(a),
    )


def relu_dropout(x, p: float, training: bool, rng_seed) -> Tensor:
    """ReLU followed by inverted dropout.

    ``rng_seed`` is an int or a tuple of ints forwarded to :func:`make_rng`.
    In eval mode the dropout stage is skipped entirely.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return relu(x)
    keys = rng_seed if isinstance(rng_seed, (tuple, list)) else (rng_seed,)
    keep = make_rng(*keys).random(x.shape) >= p
    scale = keep / (1.0 - p)
    return custom_op(
        "relu_dropout",
        lambda v: np.maximum(v, 0.0) * scale,
        lambda g, out, v: (g * (v > 0) * scale,),
        x,
    )


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    x.check_finite("softmax_rows input")

    def compute(v):
        e = np.exp(v - v.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def vjp(g, out, v):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return custom_op("softmax_rows", compute, vjp, x)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return custom_op("matmul", np.matmul, lambda g, out, x, y: (g @ y.T, x.T @ g), a, b)


def add_rowvec(x, v) -> Tensor:
    """Add a length-c vector to every row of an r x c matrix (bias)."""
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.shape != (x.shape[1],):
        raise ValueError(f"add_rowvec: shapes {x.shape} and {v.shape}")
    return custom_op("add_rowvec", np.add, lambda g, out, a, b: (g, g.sum(axis=0)), x, v)


def transpose(a) -> Tensor:
    return custom_op("transpose", lambda x: x.T, lambda g, out, x: (g.T,), as_tensor(a))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return custom_op("reshape", lambda x: x.reshape(shape), lambda g, out, x: (g.reshape(old),), a)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return custom_op("sum", lambda x: np.sum(x), lambda g, out, x: (np.full(x.shape, g),), a)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    if n == 0:
        raise ValueError("mean of empty tensor")
    return custom_op("mean", lambda x: np.sum(x) / n, lambda g, out, x: (np.full(x.shape, g / n),), a)


def sum_rows(a) -> Tensor:
    """Row sums of a matrix -> vector."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"sum_rows expects a matrix, got shape {a.shape}")
    return custom_op(
        "sum_rows",
        lambda x: x.sum(axis=1),
        lambda g, out, x: (np.broadcast_to(g[:, None], x.shape).copy(),),
        a,
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    ts = [reshape(t, (1,)) if t.data.ndim == 0 else t for t in ts]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g, out, *xs):
        return tuple(np.split(g, sizes, axis=axis))

    return custom_op("concat", lambda *xs: np.concatenate(xs, axis=axis), vjp, *ts)


def stack_scalars(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(as_tensor(t), (1,)) for t in tensors], axis=0)


class Segments:
    """Row index ``index`` into ``num_rows`` buckets, with the sparse
    ``num_rows x len(index)`` incidence matrix prebuilt so gathers and
    scatters cost one sparse product each."""

    def __init__(self, index: np.ndarray, num_rows: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.num_rows = int(num_rows)
        if self.index.size and (self.index.min() < 0 or self.index.max() >= self.num_rows):
            raise ValueError(f"segment index outside [0, {self.num_rows})")
        e = self.index.size
        self.matrix = sp.csr_matrix(
            (np.ones(e, dtype=DTYPE), (self.index, np.arange(e))), shape=(self.num_rows, e)
        )
        self.is_sorted = bool(e == 0 or np.all(self.index[1:] >= self.index[:-1]))
        self.starts = np.searchsorted(self.index, np.arange(self.num_rows)) if self.is_sorted else None

    def __len__(self) -> int:
        return self.index.size

    def sum(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 1:
            return self.matrix @ x
        return np.asarray(self.matrix @ x.reshape(x.shape[0], -1)).reshape((self.num_rows,) + x.shape[1:])


def _as_segments(index, num_rows: int) -> Segments:
    if isinstance(index, Segments):
        if index.num_rows != num_rows:
            raise ValueError(f"segments built for {index.num_rows} rows, tensor has {num_rows}")
        return index
    return Segments(index, num_rows)


def gather_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis; repeated indices accumulate in backward."""
    a = as_tensor(a)
    seg = _as_segments(index, a.shape[0])
    idx = seg.index
    return custom_op("gather_rows", lambda x: x[idx], lambda g, out, x: (seg.sum(g),), a)


def scatter_add_rows(a, index, num_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``num_rows`` buckets given by ``index``."""
    a = as_tensor(a)
    seg = _as_segments(index, num_rows)
    if len(seg) != a.shape[0]:
        raise ValueError("scatter_add_rows: index length must equal row count")
    idx = seg.index
    return custom_op("scatter_add_rows", seg.sum, lambda g, out, x: (g[idx],), a)


def segment_softmax(a, seg: Segments) -> Tensor:
    """Softmax over each bucket of rows (per column).

    ``seg`` must be sorted with every bucket non-empty, so bucket maxima and
    sums reduce over contiguous slices.
    """
    a = as_tensor(a)
    if not seg.is_sorted or len(seg) != a.shape[0]:
        raise ValueError("segment_softmax needs a sorted index covering every row")
    if np.any(np.diff(np.append(seg.starts, len(seg))) == 0):
        raise ValueError("segment_softmax: empty bucket")
    idx, starts = seg.index, seg.starts

    def compute(x):
        ex = np.exp(x - np.maximum.reduceat(x, starts, axis=0)[idx])
        return ex / seg.sum(ex)[idx]

    def vjp(g, out, x):
        return (out * (g - seg.sum(g * out)[idx]),)

    return custom_op("segment_softmax", compute, vjp, a)


def repeat_cols(a, times: int) -> Tensor:
    """Repeat each column ``times`` times: (r, h) -> (r, h*times)."""
    a = as_tensor(a)
    r, h = a.shape

    def vjp(g, out, x):
        return (g.reshape(r, h, times).sum(axis=2),)

    return custom_op("repeat_cols", lambda x: np.repeat(x, times, axis=1), vjp, a)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of every op reachable from ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _topo_order(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self) -> None:
        root = self.root
        if root.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=DTYPE)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node._vjp(g, node.data, *[p.data for p in node._parents])
            for p, pg in zip(node._parents, pgrads):
                if not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=DTYPE)

    def replay(self) -> Tensor:
        """Recompute every recorded value from the current leaf data."""
        for node in self.nodes:
            if node._compute is not None:
                node.data = np.asarray(node._compute(*[p.data for p in node._parents]), dtype=DTYPE)
        return self.root


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    Calling it twice without zeroing grads adds the gradients up.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    Tape(root).backward()


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0 or self.epsilon <= 0 or self.weight_decay < 0:
            raise ValueError("Adam hyper-parameters must be non-negative (epsilon positive)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One Adam update in place.  The L2 term ``weight_decay * w`` is added to the gradient."""
    if len(params) != len(grads):
        raise ValueError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("adam_step: state was built for a different parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Iterable[Tensor], lr=0.001, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``leaf``."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def gradcheck(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between analytic and numerical gradients.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)`` per element; the floor
    keeps round-off on exactly-zero gradients from reading as a failure.
    """
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    backward(out)
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        numeric = numerical_grad(fn, leaf, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
