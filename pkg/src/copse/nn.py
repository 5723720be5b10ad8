"""A small reverse-mode autodiff core for PointNet-style networks.

Everything is float64. Tensors carry a numpy array plus, for nodes produced by
an operation, a closure that maps the upstream gradient to gradients of the
parents. ``Tensor.backward`` walks the recorded graph once in reverse
topological order. Gradients accumulate into the ``.grad`` of leaf tensors
that have ``requires_grad=True``; callers reset them between steps.
"""

import contextlib
import json
import math
import struct
import threading

import numpy as np

from .exceptions import EmptyInput, NotScalar, ShapeMismatch

__all__ = [
    "Tensor",
    "LinearLayer",
    "MLP",
    "Adam",
    "no_grad",
    "linear_forward",
    "linear_relu",
    "pointwise_global_linear",
    "relu",
    "maxpool_points",
    "concat",
    "l1_loss",
    "step_lr",
    "save_params",
    "load_params",
]


_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread (inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = _lift(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)

        return Tensor._from_op(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        if np.isscalar(other):
            c = float(other)
            return Tensor._from_op(self.data * c, (self,), lambda g: (g * c,))
        other = _lift(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, c):
        if not np.isscalar(c):
            raise TypeError("only division by a scalar is supported")
        return self * (1.0 / c)

    def abs(self):
        x = self.data
        # np.sign(0) == 0, i.e. the subgradient at the kink is 0.
        return Tensor._from_op(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._from_op(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    # -- autodiff ----------------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every reachable leaf that requires grad."""
        if self.size != 1:
            raise NotScalar(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        # ids whose pending gradient is referenced nowhere else; backward
        # functions flagged ``inplace`` may then overwrite it
        owned = {id(self)}
        for node in reversed(order):
            key = id(node)
            g = grads.pop(key, None)
            if g is None:
                continue
            mine = key in owned
            owned.discard(key)
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if getattr(node._backward, "inplace", False):
                pgs = node._backward(g, mine)
            else:
                pgs = node._backward(g)
            live = [(p, pg) for p, pg in zip(node._parents, pgs) if pg is not None and p.requires_grad]
            for i, (parent, pg) in enumerate(live):
                pkey = id(parent)
                if pkey in grads:
                    grads[pkey] = grads[pkey] + pg
                    owned.add(pkey)
                    continue
                grads[pkey] = pg
                aliased = np.may_share_memory(pg, g) or any(
                    np.may_share_memory(pg, other) for j, (_, other) in enumerate(live) if j != i)
                if not aliased:
                    owned.add(pkey)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# -- layers and ops ----------------------------------------------------------------


class LinearLayer:
    """``y = x W^T + b`` over the trailing dimension.

    Initialised like PyTorch's ``nn.Linear``: U(-1/sqrt(in), 1/sqrt(in)).
    """

    def __init__(self, in_features, out_features, rng=None, name="linear"):
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / math.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_features, in_features)),
            requires_grad=True,
            name=f"{name}.weight",
        )
        self.bias = Tensor(
            rng.uniform(-bound, bound, size=out_features), requires_grad=True, name=f"{name}.bias"
        )

    def __call__(self, x):
        return linear_forward(self, x)

    def parameters(self):
        return [self.weight, self.bias]


def linear_forward(layer, x):
    x = _lift(x)
    W, b = layer.weight, layer.bias
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, layer expects {W.shape[1]}")
    x2 = x.data.reshape(-1, W.shape[1])
    out = x2 @ W.data.T
    out += b.data
    out_shape = x.shape[:-1] + (W.shape[0],)

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        gx = (g2 @ W.data).reshape(x.shape) if x.requires_grad else None
        return gx, (x2.T @ g2).T, np.ones(len(g2)) @ g2

    return Tensor._from_op(out.reshape(out_shape), (x, W, b), backward)


def linear_relu(layer, x):
    """``relu(linear_forward(layer, x))`` as a single graph node."""
    x = _lift(x)
    W, b = layer.weight, layer.bias
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, layer expects {W.shape[1]}")
    x2 = x.data.reshape(-1, W.shape[1])
    out = x2 @ W.data.T
    out += b.data
    np.maximum(out, 0.0, out=out)

    def backward(g, owned=False):
        g2 = g.reshape(-1, W.shape[0])
        if owned:
            g2 *= out > 0.0
        else:
            g2 = g2 * (out > 0.0)
        gx = (g2 @ W.data).reshape(x.shape) if x.requires_grad else None
        return gx, (x2.T @ g2).T, np.ones(len(g2)) @ g2

    backward.inplace = True
    return Tensor._from_op(out.reshape(x.shape[:-1] + (W.shape[0],)), (x, W, b), backward)


def pointwise_global_linear(layer, points, *globals_):
    """Linear layer applied to ``concat(point_i, *globals)`` for every point.

    ``points`` is (..., N, p) and each global is (..., g_k). The result equals
    ``linear_forward(layer, concat([points, broadcast(globals)]))`` but the
    global part is multiplied once per cloud instead of once per point.
    """
    points = _lift(points)
    globals_ = tuple(_lift(g) for g in globals_)
    W, b = layer.weight, layer.bias
    p = points.shape[-1]
    widths = [g.shape[-1] for g in globals_]
    if p + sum(widths) != W.shape[1]:
        raise ShapeMismatch(
            f"concat width {p + sum(widths)} does not match layer input {W.shape[1]}"
        )
    for g in globals_:
        if g.shape[:-1] != points.shape[:-2]:
            raise ShapeMismatch(f"global feature {g.shape} does not match points {points.shape}")
    glob = np.concatenate([g.data for g in globals_], axis=-1) if globals_ else None
    Wp = W.data[:, :p]
    Wg = W.data[:, p:]
    out = points.data @ Wp.T
    per_cloud = b.data if glob is None else glob @ Wg.T + b.data
    out += np.expand_dims(per_cloud, -2)

    def backward(g):
        n_out = W.shape[0]
        g_cloud = g.sum(axis=-2)
        gW = np.empty_like(W.data)
        gW[:, :p] = (points.data.reshape(-1, p).T @ g.reshape(-1, n_out)).T
        grads = [g @ Wp if points.requires_grad else None]
        if glob is not None:
            gW[:, p:] = (glob.reshape(-1, glob.shape[-1]).T @ g_cloud.reshape(-1, n_out)).T
            g_glob = g_cloud @ Wg
            start = 0
            for w in widths:
                grads.append(g_glob[..., start:start + w])
                start += w
        gb = g_cloud.reshape(-1, n_out).sum(axis=0)
        return (*grads, gW, gb)

    return Tensor._from_op(out, (points, *globals_, W, b), backward)


def relu(x):
    x = _lift(x)
    out = np.maximum(x.data, 0.0)

    def backward(g, owned=False):
        if owned:
            g *= out > 0.0
            return (g,)
        return (g * (out > 0.0),)

    backward.inplace = True
    return Tensor._from_op(out, (x,), backward)


def maxpool_points(x):
    """Channel-wise max over the point axis (second to last).

    The gradient goes to the first (lowest-index) maximiser of each channel.
    """
    x = _lift(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise EmptyInput(f"maxpool needs at least one point, got shape {x.shape}")
    idx = np.expand_dims(np.argmax(x.data, axis=-2), -2)
    out = np.take_along_axis(x.data, idx, axis=-2).squeeze(-2)

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, -2), axis=-2)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def linear_relu_maxpool(layer, x):
    """``maxpool_points(linear_relu(layer, x))`` as a single graph node.

    Only the winning point of each channel receives gradient, so the backward
    pass touches B*C rows instead of the full (B, N, C) activation.
    """
    x = _lift(x)
    W, b = layer.weight, layer.bias
    if x.ndim < 2 or x.shape[-2] == 0:
        raise EmptyInput(f"maxpool needs at least one point, got shape {x.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, layer expects {W.shape[1]}")
    x3 = x.data.reshape(-1, x.shape[-2], W.shape[1])
    # channel-major (B, C, N) so the argmax runs over contiguous memory
    act = np.matmul(W.data, x3.transpose(0, 2, 1))
    act += b.data[:, None]
    idx = np.argmax(act, axis=-1)                                    # (B, C)
    pre = np.take_along_axis(act, idx[..., None], axis=-1)[..., 0]   # (B, C)
    out = np.maximum(pre, 0.0)
    batch = np.arange(len(x3))[:, None]

    def backward(g):
        g = g.reshape(pre.shape) * (pre > 0.0)
        winners = x3[batch, idx]                                     # (B, C, in)
        gW = np.einsum("bc,bci->ci", g, winners)
        gb = g.sum(axis=0)
        gx = None
        if x.requires_grad:
            gx = np.zeros(x3.shape)
            np.add.at(gx, (np.broadcast_to(batch, idx.shape), idx), g[..., None] * W.data)
            gx = gx.reshape(x.shape)
        return gx, gW, gb

    return Tensor._from_op(out.reshape(x.shape[:-2] + (W.shape[0],)), (x, W, b), backward)


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(data, tuple(tensors), backward)


def l1_loss(pred, gt):
    """Mean absolute difference over all elements; subgradient 0 at a tie."""
    pred, gt = _lift(pred), _lift(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred shape {pred.shape} != gt shape {gt.shape}")
    diff = pred.data - gt.data
    n = diff.size

    def backward(g):
        s = np.sign(diff) * (float(g) / n)
        return s, -s

    return Tensor._from_op(np.abs(diff).mean(), (pred, gt), backward)


class MLP:
    """Stack of linear layers with ReLU between them.

    If ``final_activation`` is False the last layer stays linear.
    """

    def __init__(self, widths, rng=None, name="mlp", final_activation=False):
        self.layers = [
            LinearLayer(a, b, rng=rng, name=f"{name}.{i}")
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.final_activation = final_activation

    def __call__(self, x, start=0):
        """Run layers ``start:`` on ``x``.

        ``start=1`` lets a caller evaluate the first layer itself (for example
        with :func:`pointwise_global_linear`) and hand over its output.
        """
        last = len(self.layers) - 1
        for i in range(start, len(self.layers)):
            if i < last or self.final_activation:
                x = linear_relu(self.layers[i], x)
            else:
                x = self.layers[i](x)
        return x

    def activate(self, x, index):
        """Apply the activation that follows layer ``index``."""
        if index < len(self.layers) - 1 or self.final_activation:
            return relu(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


def step_lr(epoch, base_lr=4e-4, factor=0.75, period=4):
    """Step decay: ``base_lr * factor ** floor(epoch / period)``."""
    return base_lr * factor ** (epoch // period)


class Adam:
    def __init__(self, params, lr=4e-4, betas=(0.9, 0.999), eps=1e-8,
                 decay=0.75, decay_period=4):
        self.params = list(params)
        self.base_lr = lr
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.decay = decay
        self.decay_period = decay_period
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def set_epoch(self, epoch):
        self.lr = step_lr(epoch, self.base_lr, self.decay, self.decay_period)
        return self.lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def hyperparameters(self):
        return {
            "name": "adam",
            "lr": self.base_lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "decay": self.decay,
            "decay_period": self.decay_period,
            "step": self.t,
        }


# -- serialization -------------------------------------------------------------------

PARAMS_SCHEMA_VERSION = 1
_MAGIC = b"COPSEPAR"


def save_params(path, named_params, meta=None):
    """Write ``{name: Tensor|ndarray}`` as a JSON header plus a raw f64 blob.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then each array as little-endian float64 in header order.
    """
    entries = []
    blobs = []
    offset = 0
    for name, value in named_params.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    header = {"schema_version": PARAMS_SCHEMA_VERSION, "params": entries, "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a parameter file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    if header.get("schema_version") != PARAMS_SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {header.get('schema_version')}")
    arrays = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = blob[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]
