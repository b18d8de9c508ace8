"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Tape style: every operation returns a new :class:`Tensor` holding the
result value, references to the parent tensors it was computed from, and a
closure that routes the output gradient back to those parents.  Calling
:func:`backward` on a scalar root runs the closures in reverse topological
order and accumulates gradients into the leaves.

The op set is deliberately small: the pointwise family (add, mul, neg,
relu, sigmoid, softplus, log, clamp01), strict 2-D matmul, same-padded
stride-1 conv2d, scalar reductions (sum, mean), and a little shape
plumbing (reshape, transpose, stack).  Shapes never broadcast implicitly
except scalar-with-tensor; anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "add",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "softplus",
    "log",
    "clamp01",
    "matmul",
    "conv2d",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "stack",
    "elementwise",
    "reduce_scalar",
    "backward",
    "zero_grad",
    "grad_check",
    "xavier_uniform",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A dense float64 array plus its slot on the gradient tape.

    ``grad`` always has the same shape as ``data`` and accumulates
    additively during :func:`backward`.  Leaf tensors (built directly from
    data, no parents) are the gradient sinks; intermediate grads are
    scratch space owned by the tape.  Construction rejects non-finite
    values so a NaN surfaces at the op that produced it, not three ops
    later.
    """

    __slots__ = ("data", "grad", "name", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, name=None):
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            where = f" in {name!r}" if name else ""
            raise FloatingPointError(f"non-finite values entering the tape{where}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; all defer to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def log(self):
        return log(self)

    def clamp01(self):
        return clamp01(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def backward(self):
        backward(self)


def _lift(x):
    """Wrap a python scalar as a 0-d leaf; reject bare arrays.

    Arrays must be wrapped in Tensor explicitly so it is always visible in
    calling code which values sit on the tape.
    """
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 0:
        raise ShapeError(
            f"only python scalars auto-lift, got array of shape {arr.shape}; "
            "wrap it in Tensor explicitly"
        )
    return Tensor(arr)


def _binary_shapes(a, b, opname):
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _acc(t, g):
    # reduce over the broadcast when the parent was a 0-d scalar
    if t.data.shape == g.shape:
        t.grad += g
    else:
        t.grad += g.sum()


def add(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data, (a, b))

    def _bw():
        g = out.grad
        _acc(a, g)
        _acc(b, g)

    out._backward = _bw
    return out


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data, (a, b))

    def _bw():
        g = out.grad
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    out._backward = _bw
    return out


def neg(a):
    a = _lift(a)
    out = Tensor(-a.data, (a,))

    def _bw():
        a.grad -= out.grad

    out._backward = _bw
    return out


def relu(a):
    a = _lift(a)
    out = Tensor(np.maximum(a.data, 0.0), (a,))
    mask = a.data > 0.0  # subgradient 0 at exactly 0

    def _bw():
        a.grad += out.grad * mask

    out._backward = _bw
    return out


def _sigmoid_val(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _lift(a)
    s = _sigmoid_val(a.data)
    out = Tensor(s, (a,))

    def _bw():
        a.grad += out.grad * s * (1.0 - s)

    out._backward = _bw
    return out


def softplus(a):
    a = _lift(a)
    out = Tensor(np.logaddexp(0.0, a.data), (a,))

    def _bw():
        a.grad += out.grad * _sigmoid_val(a.data)

    out._backward = _bw
    return out


def log(a):
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: nonpositive element in operand")
    out = Tensor(np.log(a.data), (a,))

    def _bw():
        a.grad += out.grad / a.data

    out._backward = _bw
    return out


def clamp01(a):
    a = _lift(a)
    out = Tensor(np.clip(a.data, 0.0, 1.0), (a,))
    mask = (a.data > 0.0) & (a.data < 1.0)  # zero gradient at and beyond bounds

    def _bw():
        a.grad += out.grad * mask

    out._backward = _bw
    return out


def matmul(a, b):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul operands must be Tensors")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.data.shape} vs {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, (a, b))

    def _bw():
        g = out.grad
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    out._backward = _bw
    return out


def conv2d(x, kernel, bias):
    """Same-padded stride-1 cross-correlation.

    x is [C_in, H, W], kernel [C_out, C_in, k, k] with k odd, bias [C_out].
    Output is [C_out, H, W].  Implemented by unrolling the k*k taps into
    columns and doing one matmul; the backward scatters the column
    gradients back through the same unrolling.
    """
    for t in (x, kernel, bias):
        if not isinstance(t, Tensor):
            raise TypeError("conv2d operands must be Tensors")
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be [C,H,W], got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [Cout,Cin,k,k], got {kernel.data.shape}")
    cout, cin_k, kh, kw = kernel.data.shape
    cin, h, w = x.data.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {kh}")
    if cin_k != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin_k}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias must be [{cout}], got {bias.data.shape}")

    p = (kh - 1) // 2
    xp = np.zeros((cin, h + 2 * p, w + 2 * p))
    xp[:, p : p + h, p : p + w] = x.data
    cols = np.empty((cin, kh, kw, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + h, j : j + w]
    cols2 = cols.reshape(cin * kh * kw, h * w)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    val = (wmat @ cols2 + bias.data[:, None]).reshape(cout, h, w)
    out = Tensor(val, (x, kernel, bias))

    def _bw():
        g = out.grad.reshape(cout, h * w)
        bias.grad += g.sum(axis=1)
        kernel.grad += (g @ cols2.T).reshape(kernel.data.shape)
        gcols = (wmat.T @ g).reshape(cin, kh, kw, h, w)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + h, j : j + w] += gcols[:, i, j]
        x.grad += gxp[:, p : p + h, p : p + w]

    out._backward = _bw
    return out


def tsum(a):
    a = _lift(a)
    out = Tensor(a.data.sum(), (a,))

    def _bw():
        a.grad += out.grad  # 0-d broadcasts over the operand

    out._backward = _bw
    return out


def tmean(a):
    a = _lift(a)
    n = a.data.size
    out = Tensor(a.data.mean(), (a,))

    def _bw():
        a.grad += out.grad / n

    out._backward = _bw
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), (a,))

    def _bw():
        a.grad += out.grad.reshape(a.data.shape)

    out._backward = _bw
    return out


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.data.shape}")
    out = Tensor(a.data.T, (a,))

    def _bw():
        a.grad += out.grad.T

    out._backward = _bw
    return out


def stack(tensors):
    """Stack same-shape tensors along a new leading axis."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("stack of zero tensors")
    shape0 = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != shape0:
            raise ShapeError(f"stack: shape mismatch {shape0} vs {t.data.shape}")
    out = Tensor(np.stack([t.data for t in ts]), tuple(ts))

    def _bw():
        for i, t in enumerate(ts):
            t.grad += out.grad[i]

    out._backward = _bw
    return out


_UNARY = {
    "neg": neg,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "log": log,
    "clamp01": clamp01,
}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind, a, b=None):
    """Dispatch a pointwise op by name; handy for table-driven tests."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def reduce_scalar(kind, a):
    if kind == "sum":
        return tsum(a)
    if kind == "mean":
        return tmean(a)
    raise ValueError(f"unknown reduction {kind!r}")


def _toposort(root):
    # iterative DFS postorder; inputs land before their consumers
    topo = []
    seen = set()
    stk = [(root, False)]
    while stk:
        node, done = stk.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stk.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stk.append((p, False))
    return topo


def backward(root):
    """Accumulate d(root)/d(leaf) into every leaf's grad.

    Intermediate grads are reset at the start of each sweep so repeated
    calls on subgraphs sharing leaves accumulate cleanly in those leaves
    without double-counting through stale interior values.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward root must be a Tensor")
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.data.shape}")
    topo = _toposort(root)
    for node in topo:
        if node._backward is not None:
            node.grad[...] = 0.0
    root.grad[...] = 1.0
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def zero_grad(tensors):
    for t in tensors:
        t.grad[...] = 0.0


def grad_check(builder, params, h=1e-5):
    """Compare tape gradients against central differences.

    ``builder(params)`` must rebuild the graph from the given leaf tensors
    and return a scalar Tensor.  It is evaluated twice up-front; any
    disagreement means it is not deterministic and the check aborts.
    Returns the worst relative error max|analytic - fd| / max(1, |fd|)
    over all elements of all params.
    """
    out1 = builder(params)
    out2 = builder(params)
    if out1.data.size != 1:
        raise ShapeError("grad_check builder must return a scalar")
    if not np.array_equal(out1.data, out2.data):
        raise RuntimeError("grad_check: builder is not deterministic")
    zero_grad(params)
    backward(out1)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + h
            up = float(builder(params).data)
            flat[idx] = keep - h
            dn = float(builder(params).data)
            flat[idx] = keep
            fd = (up - dn) / (2.0 * h)
            rel = abs(gflat[idx] - fd) / max(1.0, abs(fd))
            if rel > worst:
                worst = rel
    return worst


def xavier_uniform(rng, shape, fan_in, fan_out, gain=1.0):
    """Uniform(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out))."""
    a = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)
