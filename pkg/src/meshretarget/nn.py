"""Array-valued reverse-mode autodiff with the operations the retargeting
networks need, plus graph-conv layers, Adam, and text checkpoints."""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.sparse as sp

from .deform import rotation_coeff_derivs, rotation_coeffs

CHECKPOINT_VERSION = "meshretarget-ckpt-1"


class AutodiffError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class Tensor:
    """A float64 array with an optional gradient buffer and backward hook."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; every operator defers to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _track(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum a gradient down to the shape numpy broadcast it up from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(output: Tensor) -> None:
    """Reverse-mode accumulation from a scalar output.

    Gradients land in ``.grad`` of every leaf tensor created with
    ``requires_grad=True`` (accumulating across calls). Intermediate
    gradients live in a per-call table, so repeated backward passes over a
    shared subgraph stay correct.
    """
    if not isinstance(output, Tensor):
        raise AutodiffError("backward expects a Tensor")
    if output.size != 1:
        raise AutodiffError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise AutodiffError("output does not depend on any tracked tensor; run a forward first")

    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(topo):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = grad if node.grad is None else node.grad + grad
            continue
        for parent, pgrad in zip(node._parents, node._vjp(grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pgrad
            else:
                grads[key] = pgrad


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _track(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _track(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _track(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _track(a.data / b.data, (a, b), vjp)


def power(a, exponent: float):
    a = as_tensor(a)
    exponent = float(exponent)

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _track(a.data**exponent, (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        return (g * out_data,)

    return _track(out_data, (a,), vjp)


def log(a):
    a = as_tensor(a)

    def vjp(g):
        return (g / a.data,)

    return _track(np.log(a.data), (a,), vjp)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out_data,)

    return _track(out_data, (a,), vjp)


def absolute(a):
    a = as_tensor(a)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _track(np.abs(a.data), (a,), vjp)


def maximum_const(a, floor: float):
    """Elementwise max with a constant; gradient passes only above the floor."""
    a = as_tensor(a)
    floor = float(floor)

    def vjp(g):
        return (g * (a.data > floor),)

    return _track(np.maximum(a.data, floor), (a,), vjp)


def elu(a):
    a = as_tensor(a)
    out_data = np.where(a.data > 0.0, a.data, np.expm1(a.data))

    def vjp(g):
        return (g * np.where(a.data > 0.0, 1.0, out_data + 1.0),)

    return _track(out_data, (a,), vjp)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _track(out_data, (a,), vjp)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _track(a.data.reshape(shape), (a,), vjp)


def transpose(a, axes=None):
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _track(a.data.transpose(axes), (a,), vjp)


def getitem(a, idx):
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _track(a.data[idx], (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _track(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _track(a.data @ b.data, (a, b), vjp)


def spmm(matrix: sp.spmatrix, x):
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    mt = matrix.T.tocsr()

    def vjp(g):
        return (mt @ g,)

    return _track(matrix @ x.data, (x,), vjp)


def einsum2(spec: str, a, b):
    """Two-operand einsum. Each operand's indices must appear in the output
    or in the other operand (plain contractions, no internal traces)."""
    a, b = as_tensor(a), as_tensor(b)
    inputs, out_spec = spec.split("->")
    spec_a, spec_b = inputs.split(",")
    known = set(out_spec)
    assert set(spec_a) <= known | set(spec_b) and set(spec_b) <= known | set(spec_a), spec

    def vjp(g):
        ga = (
            np.einsum(f"{out_spec},{spec_b}->{spec_a}", g, b.data)
            if a.requires_grad
            else None
        )
        gb = (
            np.einsum(f"{spec_a},{out_spec}->{spec_b}", a.data, g)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _track(np.einsum(spec, a.data, b.data), (a, b), vjp)


def cross(a, b):
    """Cross product over the trailing axis, with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(np.cross(b.data, g), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.cross(g, a.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _track(np.cross(a.data, b.data), (a, b), vjp)


def skew3(r):
    """(..., 3) axis vectors to (..., 3, 3) cross-product matrices."""
    r = as_tensor(r)
    from .deform import skew as _skew

    def vjp(g):
        out = np.empty(r.shape)
        out[..., 0] = g[..., 2, 1] - g[..., 1, 2]
        out[..., 1] = g[..., 0, 2] - g[..., 2, 0]
        out[..., 2] = g[..., 1, 0] - g[..., 0, 1]
        return (out,)

    return _track(_skew(r.data), (r,), vjp)


def rot_coef_a(theta_sq):
    t = as_tensor(theta_sq)
    a_val, _ = rotation_coeffs(t.data)

    def vjp(g):
        da, _ = rotation_coeff_derivs(t.data)
        return (g * da,)

    return _track(a_val, (t,), vjp)


def rot_coef_b(theta_sq):
    t = as_tensor(theta_sq)
    _, b_val = rotation_coeffs(t.data)

    def vjp(g):
        _, db = rotation_coeff_derivs(t.data)
        return (g * db,)

    return _track(b_val, (t,), vjp)


def softmax_columns(logits):
    """Column-stochastic softmax of a (J, V) tensor; max-shifted per column."""
    logits = as_tensor(logits)
    shift = Tensor(logits.data.max(axis=0, keepdims=True))
    e = exp(sub(logits, shift))
    return div(e, sum_(e, axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# Layers


@dataclasses.dataclass
class GraphConvParams:
    """Weight/bias stacks for a graph-convolution tower."""

    weights: list
    biases: list

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_graph_conv(dims, rng: np.random.Generator, zero_last: bool = False) -> GraphConvParams:
    """Chain of layers dims[0] -> dims[1] -> ... with Glorot-uniform weights;
    ``zero_last`` zeroes the final layer so the stack starts as a constant map."""
    weights, biases = [], []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        w = np.zeros((dims[i], dims[i + 1])) if (zero_last and last) else glorot(rng, dims[i], dims[i + 1])
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(dims[i + 1]), requires_grad=True))
    return GraphConvParams(weights, biases)


def graph_conv_forward(features, agg: sp.spmatrix, params: GraphConvParams) -> Tensor:
    """Per layer: neighborhood mean (self-loop included), linear map, ELU on
    hidden layers, identity on the last."""
    h = as_tensor(features)
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(spmm(agg, h), w), b)
        if i != last:
            h = elu(h)
    return h


def dense_forward(x, params: GraphConvParams) -> Tensor:
    """Row-wise dense tower sharing weights across rows; ELU on hidden layers."""
    h = as_tensor(x)
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(h, w), b)
        if i != last:
            h = elu(h)
    return h


# ---------------------------------------------------------------------------
# Optimizer


@dataclasses.dataclass
class AdamState:
    step: int
    first: dict
    second: dict


def adam_init(params: dict) -> AdamState:
    return AdamState(
        0,
        {name: np.zeros_like(p.data) for name, p in params.items()},
        {name: np.zeros_like(p.data) for name, p in params.items()},
    )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """Standard bias-corrected Adam update, in place on the tensors' data."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first[name] = b1 * state.first[name] + (1.0 - b1) * g
        v = state.second[name] = b2 * state.second[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Versioned text checkpoint: one ``param`` header plus one line of values
    (17 significant digits, lossless for float64) per parameter."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CHECKPOINT_VERSION + "\n")
        for key, value in (meta or {}).items():
            fh.write(f"meta {key} {value}\n")
        for name, p in params.items():
            dims = " ".join(str(d) for d in p.data.shape)
            fh.write(f"param {name} {p.data.ndim} {dims}\n".rstrip() + "\n")
            fh.write(" ".join(f"{v:.17g}" for v in p.data.reshape(-1)) + "\n")


def load_checkpoint(path):
    """Returns (arrays by name, meta dict). Raises CheckpointError on any
    structural problem."""
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        version = fh.readline().strip()
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version!r}")
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "meta":
                meta[parts[1]] = " ".join(parts[2:])
            elif parts[0] == "param":
                name = parts[1]
                ndim = int(parts[2])
                shape = tuple(int(d) for d in parts[3 : 3 + ndim])
                values = fh.readline().split()
                expected = int(np.prod(shape)) if shape else 1
                if len(values) != expected:
                    raise CheckpointError(f"parameter {name}: expected {expected} values")
                arrays[name] = np.array([float(v) for v in values]).reshape(shape)
            else:
                raise CheckpointError(f"unrecognized checkpoint record {parts[0]!r}")
    return arrays, meta


def restore_params(params: dict, arrays: dict) -> None:
    """Copy checkpoint arrays into live parameters; names and shapes must match."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {arrays[name].shape} != model {p.data.shape}"
            )
        p.data = arrays[name].copy()
