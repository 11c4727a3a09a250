"""Small reverse-mode autodiff over dense numpy arrays, plus Adam.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active,
every primitive touching a tracked tensor is appended to the tape together
with a closure computing the vector-Jacobian product. ``Tape.gradient``
walks the record backwards once.

Complex numbers are carried as explicit (real, imag) pairs of real tensors;
see :func:`gabor_wavelet` and :func:`complex_matmul`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteGradientError", "AdamState", "Adam",
    "add", "sub", "mul", "div", "neg", "matmul", "sin", "cos", "exp", "log",
    "sigmoid", "softmax", "square", "abs", "sum", "mean", "reshape", "concat",
    "getitem", "binary_cross_entropy", "box_filter2d", "grid_sample3d",
    "gabor_wavelet", "gabor_stacked", "complex_matmul", "complex_matmul_stacked", "backward", "adam_step",
    "finite_difference_grad", "max_relative_error",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteGradientError(FloatingPointError):
    """A NaN or inf reached the optimizer."""


class Tensor:
    """Dense real array, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# tape

_TAPES: list["Tape"] = []


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: object


class Tape:
    """Ordered record of primitives executed while the tape is active.

    Usage::

        with Tape() as tape:
            y = f(x)
        (gx,) = tape.gradient(y, [x])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, op, inputs, output, vjp):
        self.nodes.append(_Node(op, inputs, output, vjp))
        self._tracked.add(id(output))

    def gradient(self, output: Tensor, wrt, seed=None):
        """Vector-Jacobian product of ``output`` against each tensor in ``wrt``.

        ``seed`` defaults to ones (so a scalar loss gets d loss / d leaf).
        Leaves not connected to ``output`` get zero arrays.
        """
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed,
                              dtype=output.dtype)
            if seed.shape != output.shape:
                raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
        if not self.nodes:
            raise ValueError("backward: tape is empty")
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not self.watches(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else g)
        return out

    backward = gradient


def backward(tape: Tape, output: Tensor, wrt, seed=None):
    return tape.gradient(output, wrt, seed=seed)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _lift(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(op, inputs, out_data, vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(tape.watches(t) for t in inputs):
        tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise primitives


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    a = _lift(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def sin(a):
    a = _lift(a)
    return _emit("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = _lift(a)
    return _emit("cos", (a,), np.cos(a.data), lambda g: (-g * np.sin(a.data),))


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = _lift(a)
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def square(a):
    a = _lift(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def sigmoid(a):
    a = _lift(a)
    x = a.data
    # split evaluation keeps exp from overflowing
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softmax(a, axis=-1):
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), out, vjp)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T, a.data.T @ g))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, vjp)


def getitem(a, index):
    a = _lift(a)
    out = a.data[index]

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", (a,), np.array(out), vjp)


# ---------------------------------------------------------------------------
# losses and image operators


def binary_cross_entropy(p, target, eps=1e-7):
    """Elementwise BCE of probabilities ``p`` against targets in [0, 1].

    ``p`` is clamped to [eps, 1-eps]; the clamp passes no gradient.
    """
    p = _lift(p)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    _broadcast_shape("binary_cross_entropy", p, Tensor(y))
    q = np.clip(p.data, eps, 1.0 - eps)
    out = -(y * np.log(q) + (1.0 - y) * np.log1p(-q))
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def vjp(g):
        return (np.where(inside, g * (q - y) / (q * (1.0 - q)), 0.0).astype(p.dtype),)

    return _emit("binary_cross_entropy", (p,), out, vjp)


def box_filter2d(a, size):
    """Mean over every fully contained ``size`` x ``size`` window (valid mode)."""
    a = _lift(a)
    if a.ndim != 2 or size % 2 != 1 or min(a.shape) < size:
        raise ShapeError(f"box_filter2d: input shape {a.shape} too small for window {size}")
    r = size // 2
    full = ndimage.uniform_filter(a.data, size=size, mode="constant", cval=0.0)
    out = full[r:-r or None, r:-r or None].copy()

    def vjp(g):
        padded = np.zeros_like(a.data)
        padded[r:a.shape[0] - r, r:a.shape[1] - r] = g
        return (ndimage.uniform_filter(padded, size=size, mode="constant", cval=0.0),)

    return _emit("box_filter2d", (a,), out, vjp)


def grid_sample3d(values, coords):
    """Trilinear lookup of a channel grid at normalized coordinates.

    ``values`` has shape (ny, nx, nz, k); ``coords`` is (n, 3) in [-1, 1]
    ordered (y, x, z). Points outside are clamped to the border. Both
    arguments are differentiable.
    """
    values, coords = _lift(values), _lift(coords)
    if values.ndim != 4 or coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"grid_sample3d: incompatible shapes {values.shape} and {coords.shape}")
    dims = np.array(values.shape[:3])
    pos = (coords.data + 1.0) * 0.5 * (dims - 1)
    inside = (pos >= 0) & (pos <= dims - 1)
    pos = np.clip(pos, 0, dims - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), np.maximum(dims - 2, 0))
    i1 = np.minimum(i0 + 1, dims - 1)
    f = (pos - i0).astype(values.dtype)
    v = values.data
    corners = []
    out = np.zeros((coords.shape[0], values.shape[3]), dtype=values.dtype)
    for cy in (0, 1):
        wy = f[:, 0] if cy else 1 - f[:, 0]
        iy = i1[:, 0] if cy else i0[:, 0]
        for cx in (0, 1):
            wx = f[:, 1] if cx else 1 - f[:, 1]
            ix = i1[:, 1] if cx else i0[:, 1]
            for cz in (0, 1):
                wz = f[:, 2] if cz else 1 - f[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                val = v[iy, ix, iz]
                out += (wy * wx * wz)[:, None] * val
                corners.append((cy, cx, cz, iy, ix, iz, val))
    scale = (0.5 * (dims - 1)).astype(values.dtype)

    def vjp(g):
        gv = np.zeros_like(v)
        gc = np.zeros_like(coords.data)
        for cy, cx, cz, iy, ix, iz, val in corners:
            wy = f[:, 0] if cy else 1 - f[:, 0]
            wx = f[:, 1] if cx else 1 - f[:, 1]
            wz = f[:, 2] if cz else 1 - f[:, 2]
            np.add.at(gv, (iy, ix, iz), (wy * wx * wz)[:, None] * g)
            gval = (g * val).sum(axis=1)
            gc[:, 0] += (1 if cy else -1) * wx * wz * gval
            gc[:, 1] += (1 if cx else -1) * wy * wz * gval
            gc[:, 2] += (1 if cz else -1) * wy * wx * gval
        gc *= scale
        gc *= inside
        return gv, gc

    return _emit("grid_sample3d", (values, coords), out, vjp)


# ---------------------------------------------------------------------------
# complex pairs


def gabor_stacked(z, omega0=20.0, s0=10.0):
    """Complex Gabor wavelet on a stacked [real | imag] matrix.

    psi(z) = exp(i*omega0*z) * exp(-|s0*z|^2); returns [Re psi | Im psi].
    """
    z = _lift(z)
    if z.ndim != 2 or z.shape[1] % 2:
        raise ShapeError(f"gabor_stacked: expected (n, 2h) input, got {z.shape}")
    h = z.shape[1] // 2
    a, b = z.data[:, :h], z.data[:, h:]
    s2 = s0 * s0
    env = np.exp(-omega0 * b - s2 * (a * a + b * b))
    re = env * np.cos(omega0 * a)
    im = env * np.sin(omega0 * a)
    out = np.concatenate([re, im], axis=1)

    def vjp(g):
        gr, gi = g[:, :h], g[:, h:]
        common = gr * re + gi * im
        ga = -2.0 * s2 * a * common + omega0 * (gi * re - gr * im)
        gb = (-omega0 - 2.0 * s2 * b) * common
        return (np.concatenate([ga, gb], axis=1),)

    return _emit("gabor", (z,), out, vjp)


def gabor_wavelet(z_re, z_im, omega0=20.0, s0=10.0):
    """Complex Gabor wavelet exp(i*omega0*z) * exp(-|s0*z|^2) on a (re, im) pair."""
    z_re, z_im = _lift(z_re), _lift(z_im)
    if z_re.shape != z_im.shape:
        raise ShapeError(f"gabor_wavelet: real/imag shapes differ {z_re.shape} and {z_im.shape}")
    shape = z_re.shape
    n = z_re.size
    flat = concat([reshape(z_re, (n, 1)), reshape(z_im, (n, 1))], axis=1)
    out = gabor_stacked(flat, omega0, s0)
    return reshape(out[:, :1], shape), reshape(out[:, 1:], shape)


def complex_matmul_stacked(h, w_re, w_im):
    """Complex product with the input stored as one [real | imag] matrix.

    ``[hr | hi] @ [[wr, wi], [-wi, wr]] = [real | imag]`` of
    ``(hr + i hi) @ (wr + i wi)``.
    """
    h, w_re, w_im = _lift(h), _lift(w_re), _lift(w_im)
    if w_re.shape != w_im.shape or h.ndim != 2 or h.shape[1] != 2 * w_re.shape[0]:
        raise ShapeError(f"complex_matmul: incompatible shapes {h.shape} and {w_re.shape}/{w_im.shape}")
    w = concat([concat([w_re, w_im], axis=1), concat([-w_im, w_re], axis=1)], axis=0)
    return h @ w


def complex_matmul(x_re, x_im, w_re, w_im):
    """(x_re + i x_im) @ (w_re + i w_im) returned as a (real, imag) pair."""
    x_re, x_im, w_re, w_im = (_lift(t) for t in (x_re, x_im, w_re, w_im))
    if x_re.shape != x_im.shape or w_re.shape != w_im.shape:
        raise ShapeError(f"complex_matmul: pair shapes differ {x_re.shape}/{x_im.shape}, "
                         f"{w_re.shape}/{w_im.shape}")
    z = complex_matmul_stacked(concat([x_re, x_im], axis=1), w_re, w_im)
    h = w_re.shape[1]
    return z[:, :h], z[:, h:]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not (0 < self.decay <= 1):
            raise ValueError(f"learning-rate decay must lie in (0, 1], got {self.decay}")
        if self.lr0 < 0:
            raise ValueError(f"negative learning rate {self.lr0}")

    @property
    def lr(self) -> float:
        return self.lr0 * self.decay ** self.epoch


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``' tensors.

    Raises :class:`NonFiniteGradientError` naming the first offending block
    before anything is modified.
    """
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr = state.lr
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    """Adam bound to a parameter dict; ``end_epoch`` advances the LR schedule."""

    def __init__(self, params: dict, lr=1e-3, decay=1.0, **kw):
        self.params = params
        self.state = AdamState(lr0=lr, decay=decay, **kw)

    def step(self, grads):
        if not isinstance(grads, dict):
            grads = dict(zip(self.params, grads))
        adam_step(self.params, grads, self.state)

    def end_epoch(self):
        self.state.epoch += 1

    @property
    def lr(self):
        return self.state.lr


# ---------------------------------------------------------------------------
# numerical checking


def finite_difference_grad(f, x: np.ndarray, h=1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (a float64 array, perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic, numeric) -> float:
    """Infinity-norm error scaled by the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def seeded_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)

