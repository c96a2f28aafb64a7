"""Minimal dense-tensor autograd: numpy storage, reverse-mode tape.

Everything the model differentiates goes through `Tensor`. Compute precision
is float64 so central finite differences are a meaningful oracle; checkpoint
serialization downcasts to float32 separately (see `serialize`).
"""

from __future__ import annotations

import contextlib

import numpy as np

EPS_NORM = 1e-12  # added to each norm inside cosine


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


_grad_enabled = True
_relu_trace = None


class _ReluTrace:
    """Fingerprint of every ReLU activation pattern in one evaluation.

    Central differences are invalid when the +h/-h evaluations land on
    different sides of a kink; comparing fingerprints detects that.
    """

    def __init__(self):
        self.sig = 0

    def update(self, mask):
        flat = np.flatnonzero(mask.ravel())
        h = (int(flat.sum()) * 1000003 + len(flat)) % (1 << 61)
        self.sig = (self.sig * 1000003 + h) % (1 << 61)


@contextlib.contextmanager
def trace_relu_pattern():
    global _relu_trace
    prev = _relu_trace
    _relu_trace = _ReluTrace()
    try:
        yield _relu_trace
    finally:
        _relu_trace = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _check: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        # leaf tensors are the boundary where external data enters; interior
        # op nodes skip the scan (the optimizer re-checks gradients)
        if _check and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite value in node '{op}'")
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self._backward = None
        self._prev = ()
        self.op = op

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward root must be a scalar")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- op construction ---------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        req = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(data, op=op, _check=False)
        out.requires_grad = req
        if req:
            out._prev = tuple(parents)
            out._backward = backward
        return out

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data
        a, b = self, other

        def back():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))

        out = Tensor._make(out_data, (a, b), back, "add")
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad, b.data.shape))

        out = Tensor._make(a.data - b.data, (a, b), back, "sub")
        return out

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        a = self

        def back():
            a._accum(-out.grad)

        out = Tensor._make(-a.data, (a,), back, "neg")
        return out

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.data.shape))

        out = Tensor._make(a.data * b.data, (a, b), back, "mul")
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return as_tensor(other) * self ** -1.0

    def __pow__(self, p: float):
        a = self
        out_data = a.data ** p

        def back():
            a._accum(out.grad * p * a.data ** (p - 1.0))

        out = Tensor._make(out_data, (a,), back, "pow")
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back():
            g = out.grad
            if a.requires_grad:
                if a.data.ndim == 1 and b.data.ndim == 2:
                    a._accum(b.data @ g)
                elif a.data.ndim == 2 and b.data.ndim == 1:
                    a._accum(np.outer(g, b.data))
                elif a.data.ndim == 1 and b.data.ndim == 1:
                    a._accum(g * b.data)
                else:
                    a._accum(g @ b.data.T)
            if b.requires_grad:
                if b.data.ndim == 1 and a.data.ndim == 2:
                    b._accum(a.data.T @ g)
                elif b.data.ndim == 2 and a.data.ndim == 1:
                    b._accum(np.outer(a.data, g))
                elif b.data.ndim == 1 and a.data.ndim == 1:
                    b._accum(g * a.data)
                else:
                    b._accum(a.data.T @ g)

        try:
            out_data = a.data @ b.data
        except ValueError as exc:
            raise ShapeError(f"matmul {a.data.shape} @ {b.data.shape}: {exc}") from exc
        out = Tensor._make(out_data, (a, b), back, "matmul")
        return out

    # -- indexing / shaping --------------------------------------------------

    def __getitem__(self, key):
        a = self

        def back():
            g = np.zeros_like(a.data)
            np.add.at(g, key, out.grad)
            a._accum(g)

        out = Tensor._make(a.data[key], (a,), back, "slice")
        return out

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def back():
            a._accum(out.grad.reshape(a.data.shape))

        out = Tensor._make(a.data.reshape(shape), (a,), back, "reshape")
        return out

    def transpose(self, axes=None):
        a = self
        data = a.data.T if axes is None else a.data.transpose(axes)

        def back():
            if axes is None:
                a._accum(out.grad.T)
            else:
                a._accum(out.grad.transpose(np.argsort(axes)))

        out = Tensor._make(data, (a,), back, "transpose")
        return out

    @property
    def T(self):
        return self.transpose()

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def back():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

        out = Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- nonlinearities ---------------------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0  # subgradient at 0 is 0
        if _relu_trace is not None:
            _relu_trace.update(mask)

        def back():
            a._accum(out.grad * mask)

        out = Tensor._make(np.where(mask, a.data, 0.0), (a,), back, "relu")
        return out

    def sigmoid(self):
        a = self
        s = 1.0 / (1.0 + np.exp(-a.data))

        def back():
            a._accum(out.grad * s * (1.0 - s))

        out = Tensor._make(s, (a,), back, "sigmoid")
        return out

    def tanh(self):
        a = self
        t = np.tanh(a.data)

        def back():
            a._accum(out.grad * (1.0 - t * t))

        out = Tensor._make(t, (a,), back, "tanh")
        return out

    def exp(self):
        a = self
        e = np.exp(a.data)

        def back():
            a._accum(out.grad * e)

        out = Tensor._make(e, (a,), back, "exp")
        return out

    def log(self):
        a = self

        def back():
            a._accum(out.grad / a.data)

        out = Tensor._make(np.log(a.data), (a,), back, "log")
        return out

    def softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=axis, keepdims=True)

        def back():
            g = out.grad
            a._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

        out = Tensor._make(s, (a,), back, "softmax")
        return out

    def log_softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

        def back():
            g = out.grad
            a._accum(g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

        out = Tensor._make(ls, (a,), back, "log_softmax")
        return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t._accum(out.grad[tuple(idx)])

    out = Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                       tuple(tensors), back, "concat")
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back():
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(out.grad, i, axis=axis))

    out = Tensor._make(np.stack([t.data for t in tensors], axis=axis),
                       tuple(tensors), back, "stack")
    return out


# Inside-the-sqrt epsilon: keeps the norm's backward finite when a vector is
# exactly zero (e.g. an MLP whose ReLU layer went silent, leaving a zero bias).
EPS_SQ = EPS_NORM ** 2


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of a vector (or full tensor flattened)."""
    return ((x * x).sum() + EPS_SQ) ** 0.5


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors; each norm gets +EPS_NORM."""
    num = (a * b).sum()
    return num / ((l2_norm(a) + EPS_NORM) * (l2_norm(b) + EPS_NORM))


def rows_cosine(m: Tensor, y: Tensor) -> Tensor:
    """Cosine of every row of 2-D `m` against vector `y`. Returns shape (rows,)."""
    num = m @ y
    rn = ((m * m).sum(axis=1) + EPS_SQ) ** 0.5
    return num / ((rn + EPS_NORM) * (l2_norm(y) + EPS_NORM))


def pairwise_rows_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of corresponding rows of two (k, d) matrices. Returns (k,)."""
    num = (a * b).sum(axis=1)
    na = ((a * a).sum(axis=1) + EPS_SQ) ** 0.5
    nb = ((b * b).sum(axis=1) + EPS_SQ) ** 0.5
    return num / ((na + EPS_NORM) * (nb + EPS_NORM))


def cross_rows_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of every row of `a` (p, d) against every row of `b` (q, d) -> (p, q)."""
    num = a @ b.T
    na = (((a * a).sum(axis=1) + EPS_SQ) ** 0.5 + EPS_NORM).reshape(-1, 1)
    nb = (((b * b).sum(axis=1) + EPS_SQ) ** 0.5 + EPS_NORM).reshape(1, -1)
    return num / (na * nb)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """2-D convolution, single image: x (C,H,W), w (O,C,K,K), b (O,).

    Implemented by patch extraction + one matmul; backward scatters the
    column gradient back into the padded input.
    """
    C, H, W = x.data.shape
    O, C2, K, _ = w.data.shape
    if C != C2:
        raise ShapeError(f"conv2d channels: input {C}, kernel {C2}")
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    # columns: (C*K*K, Ho*Wo)
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(C, K, K, Ho, Wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride), writeable=False)
    cols = windows.reshape(C * K * K, Ho * Wo)
    wm = w.data.reshape(O, C * K * K)
    out_data = (wm @ cols + b.data[:, None]).reshape(O, Ho, Wo)

    def back():
        g = out.grad.reshape(O, Ho * Wo)
        if b.requires_grad:
            b._accum(g.sum(axis=1))
        if w.requires_grad:
            w._accum((g @ cols.T).reshape(w.data.shape))
        if x.requires_grad:
            gcols = (wm.T @ g).reshape(C, K, K, Ho, Wo)
            gxp = np.zeros_like(xp)
            for ki in range(K):
                for kj in range(K):
                    gxp[:, ki:ki + Ho * stride:stride, kj:kj + Wo * stride:stride] \
                        += gcols[:, ki, kj]
            x._accum(gxp[:, pad:pad + H, pad:pad + W])

    out = Tensor._make(out_data, (x, w, b), back, "conv2d")
    return out


class Parameter(Tensor):
    """A named trainable tensor tagged with the training steps that update it."""

    __slots__ = ("name", "trainable_in_steps")

    def __init__(self, name: str, value, trainable_in_steps=(1, 2, 3)):
        super().__init__(value, requires_grad=True)
        self.requires_grad = True  # parameters ignore no_grad at creation
        self.name = name
        self.trainable_in_steps = frozenset(trainable_in_steps)
        if not self.trainable_in_steps <= {1, 2, 3}:
            raise ValueError(f"bad step tags for {name}: {trainable_in_steps}")


def finite_difference_check(loss_builder, params, sample_count=200, h=1e-5,
                            tolerance=1e-4, rng=None, picks=None):
    """Compare analytic gradients against central differences.

    `loss_builder` must return a scalar Tensor built from the current
    parameter values. Samples `sample_count` scalar entries uniformly over
    all parameter entries (or takes explicit `picks` of (param index, flat
    offset) pairs) and reports the max relative error.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_builder()
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}
    if picks is None:
        sizes = np.array([p.data.size for p in params])
        total = sizes.sum()
        flats = rng.choice(total, size=min(sample_count, total), replace=False)
        bounds = np.cumsum(sizes)
        picks = []
        for flat in flats:
            pi = int(np.searchsorted(bounds, flat, side="right"))
            picks.append((pi, int(flat - (bounds[pi - 1] if pi > 0 else 0))))
    worst = 0.0
    entries = []
    skipped = 0
    for pi, off in picks:
        if len(entries) >= sample_count:
            break
        p = params[pi]
        orig = p.data.flat[off]
        with no_grad():
            p.data.flat[off] = orig + h
            with trace_relu_pattern() as tr_plus:
                lo_plus = float(loss_builder().data)
            p.data.flat[off] = orig - h
            with trace_relu_pattern() as tr_minus:
                lo_minus = float(loss_builder().data)
            p.data.flat[off] = orig
        if not (np.isfinite(lo_plus) and np.isfinite(lo_minus)):
            raise NonFiniteError(f"loss non-finite while perturbing {p.name}[{off}]")
        if tr_plus.sig != tr_minus.sig:
            # perturbation crossed a ReLU/hinge kink; central differences
            # are meaningless there, so this entry does not count
            skipped += 1
            continue
        numeric = (lo_plus - lo_minus) / (2 * h)
        a = analytic[p.name].flat[off]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        entries.append((p.name, off, a, numeric, rel))
        worst = max(worst, rel)
    return {
        "max_rel_error": worst,
        "passed": worst <= tolerance,
        "tolerance": tolerance,
        "samples": len(entries),
        "skipped_at_kinks": skipped,
        "worst_entries": sorted(entries, key=lambda e: -e[4])[:5],
    }
