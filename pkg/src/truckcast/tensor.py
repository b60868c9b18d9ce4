"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  The graph is rebuilt on
every forward call; :func:`backprop` walks it in reverse topological order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASK_VALUE = -1e9


class NonFiniteError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(value, requires_grad=True, check_finite=True) -> Tensor:
    """Graph input; non-finite values are rejected here."""
    value = np.array(value, dtype=np.float64)
    if check_finite and not np.all(np.isfinite(value)):
        raise NonFiniteError("non-finite value bound to graph leaf")
    return Tensor(value, requires_grad=requires_grad)


def _node(value, parents, backward_fn, op):
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, needs, parents if needs else (), backward_fn if needs else None, op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), back, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), back, "mul")


def neg(a) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    return _node(a.value * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` set, inputs below it are clamped (zero gradient there)."""
    x = a.value
    if floor is not None:
        clamped = x < floor
        x = np.where(clamped, floor, x)

        def back(g):
            return (np.where(clamped, 0.0, g / x),)
    else:
        def back(g):
            return (g / x,)

    return _node(np.log(x), (a,), back, "log")


# --------------------------------------------------------------------------
# shape / structure
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.value @ b.value, (a, b), back, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; leading axes are flattened for one GEMM."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, w)
    if b is not None:
        out = add(out, b)
    return reshape(out, lead + (w.shape[-1],)) if x.ndim != 2 else out


def reshape(a, shape) -> Tensor:
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), back, "concat")


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.value for t in tensors], axis=axis), tuple(tensors), back, "stack")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class SliceGrad:
    """Gradient that touches only ``parent[idx]``; backprop adds it in place."""
    __slots__ = ("idx", "g", "basic")

    def __init__(self, idx, g, basic):
        self.idx, self.g, self.basic = idx, g, basic


def getitem(a, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def back(g):
        return (SliceGrad(idx, g, basic),)

    return _node(a.value[idx], (a,), back, "getitem")


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tensor_sum(a, axis, keepdims), 1.0 / n)


def embedding(table, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _node(table.value[idx], (table,), back, "embedding")


# --------------------------------------------------------------------------
# composite primitives with hand-written backward passes
# --------------------------------------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back, "softmax")


def causal_conv1d(x, w, dilation=1) -> Tensor:
    """Dilated causal convolution.

    x: [B, T, Cin]; w: [K, Cin, Cout].  Output step t only sees inputs at
    t, t-d, ..., t-(K-1)d (zero padded on the left).
    """
    K = w.shape[0]
    B, T, _ = x.shape
    pad = (K - 1) * dilation
    xp = np.pad(x.value, ((0, 0), (pad, 0), (0, 0)))
    out = np.zeros((B, T, w.shape[2]))
    for k in range(K):
        out += xp[:, k * dilation:k * dilation + T] @ w.value[k]

    def back(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k * dilation:k * dilation + T] += g @ w.value[k].T
            gx = gxp[:, pad:]
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gw = np.stack([
                xp[:, k * dilation:k * dilation + T].reshape(-1, xp.shape[-1]).T @ g2
                for k in range(K)
            ])
        return gx, gw

    return _node(out, (x, w), back, "causal_conv1d")


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        return gx, gg, gb

    return _node(xhat * gamma.value + beta.value, (x, gamma, beta), back, "layer_norm")


def _sig(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm(xp, wh, reverse=False) -> Tensor:
    """LSTM over a whole sequence; returns the final hidden state.

    xp: [M, k, 4d] input projections (gate order i, f, g, o, bias included);
    wh: [d, 4d] recurrent weights.  Zero initial state.  ``reverse`` runs
    from the last step to the first.
    """
    M, k, four_d = xp.shape
    d = four_d // 4
    W = wh.value
    steps = list(range(k - 1, -1, -1)) if reverse else list(range(k))
    h = np.zeros((M, d))
    c = np.zeros((M, d))
    cache = []
    for t in steps:
        z = xp.value[:, t, :] + h @ W
        s = _sig(z)
        i, f, o = s[:, :d], s[:, d:2 * d], s[:, 3 * d:]
        g = np.tanh(z[:, 2 * d:3 * d])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        cache.append((t, i, f, g, o, c, tc, h))
        h, c = o * tc, c_new

    def back(dh):
        dxp = np.zeros_like(xp.value)
        dW = np.zeros_like(W)
        dc = np.zeros((M, d))
        dz = np.empty((M, four_d))
        for t, i, f, g, o, c_prev, tc, h_prev in reversed(cache):
            dc = dc + dh * o * (1.0 - tc * tc)
            dz[:, :d] = dc * g * i * (1.0 - i)
            dz[:, d:2 * d] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * d:3 * d] = dc * i * (1.0 - g * g)
            dz[:, 3 * d:] = dh * tc * o * (1.0 - o)
            dxp[:, t, :] = dz
            dW += h_prev.T @ dz
            dh = dz @ W.T
            dc = dc * f
        return dxp, dW

    return _node(h, (xp, wh), back, "lstm")


def attention(q, k, v, mask=None):
    """Scaled dot-product attention composed from primitives.

    q: [..., Lq, d]; k, v: [..., Lk, d]; mask: boolean [..., Lq, Lk], True = may attend.
    Returns (output, attention weights).
    """
    d = q.shape[-1]
    scores = scale(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = add(scores, Tensor(np.where(mask, 0.0, MASK_VALUE)))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


# --------------------------------------------------------------------------
# graph traversal
# --------------------------------------------------------------------------

def topological_order(output: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def evaluate(fn, bindings: dict):
    """Run a graph-building function on leaf bindings; every leaf must be bound and finite."""
    leaves = {name: v if isinstance(v, Tensor) else leaf(v, requires_grad=False)
              for name, v in bindings.items()}
    return fn(**leaves)


def backprop(output: Tensor, seed=None) -> dict[int, np.ndarray]:
    """Accumulate gradients into ``.grad`` of every node reachable from ``output``.

    Returns a mapping ``id(leaf) -> gradient`` for leaves with ``requires_grad``.
    """
    if seed is None:
        if output.value.size != 1:
            raise ValueError("seed gradient required for non-scalar output")
        seed = np.ones_like(output.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ValueError(f"seed shape {seed.shape} != output shape {output.shape}")
    order = topological_order(output)
    for node in order:
        node.grad = None
    output.grad = seed.copy()
    owned = set()  # ids of nodes whose .grad buffer may be modified in place
    leaves = {}
    for node in reversed(order):
        if node.grad is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                leaves[id(node)] = node.grad
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if isinstance(g, SliceGrad):
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                elif id(parent) not in owned:
                    parent.grad = np.array(parent.grad)
                owned.add(id(parent))
                if g.basic:
                    parent.grad[g.idx] += g.g
                else:
                    np.add.at(parent.grad, g.idx, g.g)
            elif parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
                owned.add(id(parent))
    return leaves


def finite_diff_check(loss_fn, params: dict, eps=1e-5, n_coords=100, seed=0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(params_as_tensors) -> scalar Tensor``.  At least ``n_coords``
    coordinates are checked (all of them if fewer exist).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tensors = {k: leaf(v) for k, v in params.items()}
    out = loss_fn(tensors)
    if out.value.size != 1:
        raise ValueError("finite_diff_check needs a scalar output")
    backprop(out)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in tensors.items()}

    coords = [(k, i) for k in sorted(params) for i in range(np.size(params[k]))]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        base = np.array(params[name], dtype=np.float64)
        vals = []
        for sgn in (1.0, -1.0):
            bumped = base.copy()
            bumped.flat[i] += sgn * eps
            trial = {k: Tensor(v) for k, v in params.items()}
            trial[name] = Tensor(bumped)
            vals.append(float(loss_fn(trial).value))
        numeric = (vals[0] - vals[1]) / (2 * eps)
        a = float(analytic[name].flat[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


# --------------------------------------------------------------------------
# parameters, Adam, checkpoints
# --------------------------------------------------------------------------

def glorot(rng: np.random.Generator, shape, fan_in=None, fan_out=None) -> np.ndarray:
    fan_in = fan_in if fan_in is not None else int(np.prod(shape[:-1]))
    fan_out = fan_out if fan_out is not None else shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update; returns new parameter arrays and the mutated state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state


def save_checkpoint(path, params: dict, seed: int, step: int, extra: dict | None = None):
    """Write ``<path>.bin`` (little-endian float64, names sorted) and ``<path>.json``."""
    path = Path(path)
    names = sorted(params)
    blob = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    path.with_suffix(".bin").write_bytes(blob)
    manifest = {
        "names": names,
        "shapes": [list(np.shape(params[n])) for n in names],
        "seed": seed,
        "step": step,
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    params, off = {}, 0
    for name, shape in zip(manifest["names"], manifest["shapes"]):
        n = int(np.prod(shape)) if shape else 1
        params[name] = flat[off:off + n].reshape(shape).astype(np.float64)
        off += n
    if off != flat.size:
        raise ValueError(f"checkpoint {path} has {flat.size - off} trailing values")
    return params, manifest
