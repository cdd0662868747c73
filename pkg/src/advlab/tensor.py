"""Dense tensors with reverse-mode automatic differentiation.

The graph is implicit: every op output keeps references to its input tensors
plus a vector-Jacobian closure, and backward() walks that structure in
reverse topological order. There is no separate op record; a Tape here is an
allocation scope that lets tight loops (PGD crafting, training steps) recycle
the intermediate buffers instead of hammering the allocator. Numerics are
identical with or without a Tape.

Conventions:
  - float32 is the working precision; build float64 tensors for gradient
    checks, every op preserves dtype.
  - requires_grad marks leaves whose .grad accumulates across backward calls
    (explicit zero_grads between steps). Intermediates use mark_capture() +
    grad_of() instead.
  - backward prunes: gradient work happens only along paths that reach a
    requested leaf or capture site. Attacks asking for input gradients never
    compute weight gradients.
  - Single-threaded by design; tensors may be handed across threads, a
    backward walk must not be.

Image ops come in two layouts. The *_nhwc ops are the fast path used by the
models (channels-last, chunked im2col that stays cache-resident). The NCHW
ops match the external contract and are thin transpose wrappers around the
same kernels.
"""

import math

import numpy as np

from . import _kernels as K

__all__ = [
    "Tensor", "Tape", "no_grad", "tensor",
    "add", "sub", "mul", "scale", "abs_", "mean_all", "sum_all", "log",
    "matmul", "dense", "relu", "softmax", "log_softmax", "cross_entropy",
    "sq_dist_rows", "l2_squared", "margin_rows", "weighted_mean",
    "mul_rowvec", "mean_rows", "sum_rows",
    "conv2d", "conv2d_nhwc", "maxpool2d", "maxpool2d_nhwc", "relu_maxpool2",
    "to_nhwc", "to_nchw", "flatten2d", "permute", "global_avgpool_nhwc",
    "backward", "grad_of", "zero_grads",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_vjp", "_capture")

    def __init__(self, data, requires_grad=False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._inputs = ()
        self._vjp = None
        self._capture = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def mark_capture(self):
        """Flag this tensor as a gradient-capture site for grad_of()."""
        self._capture = True
        return self

    def detach(self):
        """Same data, cut from the graph."""
        return Tensor(self.data)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, " \
               f"requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype == np.float64 and dtype is None and not isinstance(data, np.ndarray):
        arr = arr.astype(np.float32)  # python lists default to working precision
    return Tensor(arr, requires_grad=requires_grad)


# ------------------------------------------------------------------ tape/pool

_POOL = {}
_POOL_BYTES = 0
_POOL_CAP = 1 << 30

_TAPE_STACK = []
_RECORD = True


class Tape:
    """Buffer scope for hot loops.

    While active (context manager), op outputs and backward intermediates are
    drawn from a process-wide free list. close() returns every owned buffer.
    After close, tensors produced inside the scope hold recycled storage, so
    anything the caller keeps must be copied out first (grad_of and .grad
    already escape their results). Purely an allocator: results are
    bit-identical with no Tape at all.
    """

    def __init__(self):
        self._owned = []
        self._owned_ids = set()
        self._closed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        if _TAPE_STACK and _TAPE_STACK[-1] is self:
            _TAPE_STACK.pop()
        return False

    def alloc(self, shape, dtype):
        arr = _pool_take(shape, dtype)
        self._owned.append(arr)
        self._owned_ids.add(id(arr))
        return arr

    def owns(self, arr):
        return id(arr) in self._owned_ids

    def close(self):
        if self._closed:
            return
        self._closed = True
        for arr in self._owned:
            _pool_put(arr)
        self._owned = []
        self._owned_ids = set()


def _pool_take(shape, dtype):
    global _POOL_BYTES
    key = (shape, np.dtype(dtype).str)
    stack = _POOL.get(key)
    if stack:
        arr = stack.pop()
        _POOL_BYTES -= arr.nbytes
        return arr
    return np.empty(shape, dtype)


def _pool_put(arr):
    global _POOL_BYTES
    if _POOL_BYTES + arr.nbytes > _POOL_CAP:
        return
    key = (arr.shape, arr.dtype.str)
    _POOL.setdefault(key, []).append(arr)
    _POOL_BYTES += arr.nbytes


def _alloc(shape, dtype):
    if _TAPE_STACK:
        return _TAPE_STACK[-1].alloc(shape, dtype)
    return np.empty(shape, dtype)


def _alloc_zeros(shape, dtype):
    arr = _alloc(shape, dtype)
    arr.fill(0)
    return arr


def _escape(arr):
    """Copy out of pooled storage if needed so the result survives close()."""
    if _TAPE_STACK and any(tp.owns(arr) for tp in _TAPE_STACK):
        return arr.copy()
    return arr


class no_grad:
    """Context: ops inside compute values but record no graph."""

    def __enter__(self):
        global _RECORD
        self._prev = _RECORD
        _RECORD = False
        return self

    def __exit__(self, *exc):
        global _RECORD
        _RECORD = self._prev
        return False


def _make(data, inputs, vjp):
    out = Tensor(data)
    if _RECORD and any(t._vjp is not None or t.requires_grad or t._capture
                       for t in inputs):
        out._inputs = tuple(inputs)
        out._vjp = vjp
    return out


# ------------------------------------------------------------------- backward

def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order  # inputs before consumers


def _run_backward(root, want):
    """Core reverse sweep. want: tensors whose grads are requested. Returns
    dict id(tensor) -> gradient array, escaped from any pool so it survives
    Tape.close(). Tensors the graph never reaches get zeros."""
    if root.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    order = _toposort(root)
    want_ids = {id(t) for t in want}

    # a node needs its grad if it is wanted or can reach a wanted node
    needed = set()
    for node in order:  # inputs visited before consumers
        if id(node) in want_ids or any(id(i) in needed for i in node._inputs):
            needed.add(id(node))

    def need(t):
        return id(t) in needed

    grads = {id(root): np.ones_like(root.data)}
    saved = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in want_ids:
            saved[id(node)] = _escape(g)
        if node._vjp is None or not any(id(i) in needed for i in node._inputs):
            continue
        for inp, contrib in node._vjp(g, need):
            key = id(inp)
            if key in grads:
                # not in-place: a contribution may be a view shared elsewhere
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return {id(t): saved.get(id(t), np.zeros_like(t.data)) for t in want}


def backward(loss):
    """Populate .grad (accumulating) for every requires_grad or capture-marked
    tensor reachable from the scalar loss."""
    order = _toposort(loss)
    want = [t for t in order if t.requires_grad or t._capture]
    got = _run_backward(loss, want)
    for t in want:
        g = got[id(t)]
        if t.grad is None:
            t.grad = g
        else:
            t.grad += g


def grad_of(loss, target):
    """Gradient of scalar loss w.r.t. a capture-marked tensor, as a Tensor.

    Scoped: touches no .grad fields. Disconnected targets yield zeros."""
    if not (target._capture or target.requires_grad):
        raise ValueError("grad_of target was not marked for capture")
    got = _run_backward(loss, [target])
    return Tensor(got[id(target)])


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ----------------------------------------------------------------- helpers

def _c(arr):
    """Kernels want C-contiguous memory; views from reshapes usually are."""
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def _check_same_shape(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    _check_same_shape(a, b)
    out = _alloc(a.data.shape, np.result_type(a.data, b.data))
    np.add(a.data, b.data, out=out)

    def vjp(dout, need):
        grads = []
        if need(a):
            grads.append((a, dout))
        if need(b):
            # each parent gets its own storage
            g = _alloc(dout.shape, dout.dtype)
            np.copyto(g, dout)
            grads.append((b, g))
        return grads

    return _make(out, (a, b), vjp)


def sub(a, b):
    _check_same_shape(a, b)
    out = _alloc(a.data.shape, np.result_type(a.data, b.data))
    np.subtract(a.data, b.data, out=out)

    def vjp(dout, need):
        grads = []
        if need(a):
            grads.append((a, dout))
        if need(b):
            g = _alloc(dout.shape, dout.dtype)
            np.negative(dout, out=g)
            grads.append((b, g))
        return grads

    return _make(out, (a, b), vjp)


def mul(a, b):
    _check_same_shape(a, b)
    out = _alloc(a.data.shape, np.result_type(a.data, b.data))
    np.multiply(a.data, b.data, out=out)

    def vjp(dout, need):
        grads = []
        if need(a):
            g = _alloc(dout.shape, dout.dtype)
            np.multiply(dout, b.data, out=g)
            grads.append((a, g))
        if need(b):
            g = _alloc(dout.shape, dout.dtype)
            np.multiply(dout, a.data, out=g)
            grads.append((b, g))
        return grads

    return _make(out, (a, b), vjp)


def scale(x, s):
    s = float(s)
    out = _alloc(x.data.shape, x.data.dtype)
    np.multiply(x.data, x.data.dtype.type(s), out=out)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(dout.shape, dout.dtype)
        np.multiply(dout, dout.dtype.type(s), out=g)
        return [(x, g)]

    return _make(out, (x,), vjp)


def abs_(x):
    out = _alloc(x.data.shape, x.data.dtype)
    np.abs(x.data, out=out)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(dout.shape, dout.dtype)
        np.multiply(dout, np.sign(x.data), out=g)
        return [(x, g)]

    return _make(out, (x,), vjp)


def log(x):
    out = _alloc(x.data.shape, x.data.dtype)
    np.log(x.data, out=out)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(dout.shape, dout.dtype)
        np.divide(dout, x.data, out=g)
        return [(x, g)]

    return _make(out, (x,), vjp)


def mean_all(x):
    n = x.data.size
    if n == 0:
        raise ValueError("mean of empty tensor")
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(x.data.shape, x.data.dtype)
        g.fill(float(dout) / n)
        return [(x, g)]

    return _make(out, (x,), vjp)


def sum_all(x):
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(x.data.shape, x.data.dtype)
        g.fill(float(dout))
        return [(x, g)]

    return _make(out, (x,), vjp)


# --------------------------------------------------------------------- linear

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    m, n = a.data.shape[0], b.data.shape[1]
    out = _alloc((m, n), np.result_type(a.data, b.data))
    np.matmul(a.data, b.data, out=out)

    def vjp(dout, need):
        grads = []
        if need(a):
            g = _alloc(a.data.shape, a.data.dtype)
            np.matmul(dout, b.data.T, out=g)
            grads.append((a, g))
        if need(b):
            g = _alloc(b.data.shape, b.data.dtype)
            np.matmul(a.data.T, dout, out=g)
            grads.append((b, g))
        return grads

    return _make(out, (a, b), vjp)


def dense(x, w, b):
    """x[B,d] @ w[d,f] + b[f]"""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("dense expects x[B,d], w[d,f], b[f]")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError("dense shape mismatch")
    B, f = x.data.shape[0], w.data.shape[1]
    out = _alloc((B, f), np.result_type(x.data, w.data))
    np.matmul(x.data, w.data, out=out)
    out += b.data

    def vjp(dout, need):
        dout = _c(dout)
        grads = []
        if need(x):
            g = _alloc(x.data.shape, x.data.dtype)
            np.matmul(dout, w.data.T, out=g)
            grads.append((x, g))
        if need(w):
            g = _alloc(w.data.shape, w.data.dtype)
            np.matmul(x.data.T, dout, out=g)
            grads.append((w, g))
        if need(b):
            grads.append((b, dout.sum(axis=0)))
        return grads

    return _make(out, (x, w, b), vjp)


def relu(x):
    xd = _c(x.data)
    out = _alloc(xd.shape, xd.dtype)
    K.relu_fwd(xd, out)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(xd.shape, xd.dtype)
        K.relu_bwd(xd, _c(dout), g)
        return [(x, g)]

    return _make(out, (x,), vjp)


# ------------------------------------------------------------ softmax family

def softmax(z):
    if z.data.ndim != 2:
        raise ValueError("softmax expects [B,K]")
    zd = z.data
    s = _alloc(zd.shape, zd.dtype)
    np.subtract(zd, zd.max(axis=1, keepdims=True), out=s)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)

    def vjp(dout, need):
        if not need(z):
            return []
        g = _alloc(zd.shape, zd.dtype)
        inner = (dout * s).sum(axis=1, keepdims=True)
        np.subtract(dout, inner, out=g)
        g *= s
        return [(z, g)]

    return _make(s, (z,), vjp)


def log_softmax(z):
    if z.data.ndim != 2:
        raise ValueError("log_softmax expects [B,K]")
    zd = z.data
    out = _alloc(zd.shape, zd.dtype)
    m = zd.max(axis=1, keepdims=True)
    np.subtract(zd, m, out=out)
    lse = np.log(np.exp(out).sum(axis=1, keepdims=True))
    out -= lse

    def vjp(dout, need):
        if not need(z):
            return []
        s = np.exp(out)
        g = _alloc(zd.shape, zd.dtype)
        np.multiply(s, dout.sum(axis=1, keepdims=True), out=g)
        np.subtract(dout, g, out=g)
        return [(z, g)]

    return _make(out, (z,), vjp)


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects logits[B,K]")
    B, K1 = logits.data.shape
    if B == 0:
        raise ValueError("cross_entropy on empty batch")
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ValueError("labels must be a [B] integer vector")
    if labels.min() < 0 or labels.max() >= K1:
        raise ValueError("label out of range")
    zd = logits.data
    shifted = _alloc(zd.shape, zd.dtype)
    np.subtract(zd, zd.max(axis=1, keepdims=True), out=shifted)
    probs = _alloc(zd.shape, zd.dtype)
    np.exp(shifted, out=probs)
    denom = probs.sum(axis=1, keepdims=True)
    probs /= denom
    rows = np.log(denom[:, 0]) - shifted[np.arange(B), labels]
    out = np.asarray(rows.mean(), dtype=zd.dtype)

    def vjp(dout, need):
        if not need(logits):
            return []
        g = _alloc(zd.shape, zd.dtype)
        np.copyto(g, probs)
        g[np.arange(B), labels] -= 1.0
        g *= zd.dtype.type(float(dout) / B)
        return [(logits, g)]

    return _make(out, (logits,), vjp)


def sq_dist_rows(a, b):
    """Per-sample squared L2 distance between row vectors: [B,K] -> [B]."""
    _check_same_shape(a, b)
    if a.data.ndim != 2:
        raise ValueError("sq_dist_rows expects [B,K]")
    d = _alloc(a.data.shape, np.result_type(a.data, b.data))
    np.subtract(a.data, b.data, out=d)
    rows = (d * d).sum(axis=1)

    def vjp(dout, need):
        grads = []
        col = (2.0 * dout)[:, None]
        if need(a):
            g = _alloc(d.shape, d.dtype)
            np.multiply(d, col, out=g)
            grads.append((a, g))
        if need(b):
            g = _alloc(d.shape, d.dtype)
            np.multiply(d, -col, out=g)
            grads.append((b, g))
        return grads

    return _make(rows, (a, b), vjp)


def weighted_mean(rows, weights):
    """Mean over the batch of weights[i] * rows[i]; weights is a detached
    numpy constant. The plain batch mean is this with unit weights, and both
    use the same dot-product reduction so the two agree bit for bit."""
    rd = _c(rows.data)
    w = np.ascontiguousarray(np.asarray(weights, dtype=rd.dtype))
    if rd.ndim != 1 or w.shape != rd.shape:
        raise ValueError("weighted_mean expects rows[B] and weights[B]")
    B = rd.shape[0]
    if B == 0:
        raise ValueError("weighted_mean on empty batch")
    out = np.asarray(np.dot(w, rd) / B, dtype=rd.dtype)

    def vjp(dout, need):
        if not need(rows):
            return []
        g = _alloc(rd.shape, rd.dtype)
        np.multiply(w, rd.dtype.type(float(dout) / B), out=g)
        return [(rows, g)]

    return _make(out, (rows,), vjp)


def l2_squared(a, b):
    """Batch mean of row-wise squared L2 distance (the pairing distance)."""
    rows = sq_dist_rows(a, b)
    return weighted_mean(rows, np.ones(rows.data.shape[0], rows.data.dtype))


def margin_rows(logits, labels):
    """Per-sample true-class margin: z[label] - max over other classes."""
    if logits.data.ndim != 2:
        raise ValueError("margin_rows expects logits[B,K]")
    B, K1 = logits.data.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= K1:
        raise ValueError("label out of range")
    zd = logits.data
    ar = np.arange(B)
    zy = zd[ar, labels]
    masked = zd.copy()
    masked[ar, labels] = -np.inf
    other = masked.argmax(axis=1)  # first occurrence on ties
    rows = zy - masked[ar, other]

    def vjp(dout, need):
        if not need(logits):
            return []
        g = _alloc_zeros(zd.shape, zd.dtype)
        g[ar, labels] = dout
        g[ar, other] -= dout
        return [(logits, g)]

    return _make(rows, (logits,), vjp)


def mul_rowvec(x, v):
    """x[B,d] * v[d] broadcast; v is a detached numpy constant (mask slot)."""
    v = np.asarray(v, dtype=x.data.dtype)
    if x.data.ndim != 2 or v.shape != (x.data.shape[1],):
        raise ValueError("mul_rowvec expects x[B,d] and v[d]")
    out = _alloc(x.data.shape, x.data.dtype)
    np.multiply(x.data, v, out=out)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(x.data.shape, x.data.dtype)
        np.multiply(dout, v, out=g)
        return [(x, g)]

    return _make(out, (x,), vjp)


def mean_rows(x):
    """Column means: [B,d] -> [d]. Used by batch statistics."""
    if x.data.ndim != 2:
        raise ValueError("mean_rows expects [B,d]")
    B = x.data.shape[0]
    out = x.data.mean(axis=0)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(x.data.shape, x.data.dtype)
        g[:] = dout[None, :]
        g *= x.data.dtype.type(1.0 / B)
        return [(x, g)]

    return _make(out, (x,), vjp)


# ------------------------------------------------------------- shape movement

def permute(x, axes):
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(dout, need):
        if not need(x):
            return []
        return [(x, np.ascontiguousarray(dout.transpose(inv)))]

    return _make(out, (x,), vjp)


def to_nhwc(x):
    return permute(x, (0, 2, 3, 1))


def to_nchw(x):
    return permute(x, (0, 3, 1, 2))


def flatten2d(x):
    B = x.data.shape[0]
    shape = x.data.shape
    out = _c(x.data).reshape(B, -1)

    def vjp(dout, need):
        if not need(x):
            return []
        return [(x, _c(dout).reshape(shape))]

    return _make(out, (x,), vjp)


# ----------------------------------------------------------------- image ops

_CHUNK_BYTES = 5 << 20  # im2col chunks sized to stay cache-resident


def _conv_out_dim(h, k, pad, stride):
    o = (h + 2 * pad - k) // stride + 1
    if o <= 0:
        raise ValueError("convolution output dimension is not positive")
    return o


def conv2d_nhwc(x, w, bias, stride=1, padding=0):
    """Correlation with channels-last layout: x[B,H,W,C], w[kh,kw,C,F]."""
    B, H, W, C = x.data.shape
    kh, kw, Cw, F = w.data.shape
    if Cw != C:
        raise ValueError("conv2d channel mismatch")
    Ho = _conv_out_dim(H, kh, padding, stride)
    Wo = _conv_out_dim(W, kw, padding, stride)
    dt = np.result_type(x.data, w.data)

    if padding:
        xp = _alloc_zeros((B, H + 2 * padding, W + 2 * padding, C), dt)
        xp[:, padding:padding + H, padding:padding + W, :] = x.data
    else:
        xp = _c(x.data.astype(dt, copy=False))
    w2d = _c(w.data.astype(dt, copy=False)).reshape(kh * kw * C, F)

    out = _alloc((B, Ho, Wo, F), dt)
    out2d = out.reshape(B * Ho * Wo, F)

    single_channel = C == 1
    if single_channel:
        xs = xp.reshape(xp.shape[0], xp.shape[1], xp.shape[2])
        colsT = _pool_take((kh * kw, B, Ho, Wo), dt)
        K.im2col_t1(xs, colsT, kh, kw, stride)
        np.matmul(colsT.reshape(kh * kw, B * Ho * Wo).T, w2d, out=out2d)
        _pool_put(colsT)
    else:
        per = Ho * Wo * kh * kw * C * dt.itemsize
        chunk = min(B, max(1, _CHUNK_BYTES // per))
        cc = _pool_take((chunk, Ho, Wo, kh, kw, C), dt)
        for s in range(0, B, chunk):
            nb = min(chunk, B - s)
            view = cc[:nb]
            K.im2col_chunk(xp, view, s, kh, kw, stride)
            np.matmul(view.reshape(nb * Ho * Wo, kh * kw * C), w2d,
                      out=out2d[s * Ho * Wo:(s + nb) * Ho * Wo])
        _pool_put(cc)
    if bias is not None:
        out2d += bias.data

    def vjp(dout, need):
        dout2d = _c(dout).reshape(B * Ho * Wo, F)
        grads = []
        if need(w):
            dw = _alloc_zeros(w.data.shape, w.data.dtype)
            dw2d = dw.reshape(kh * kw * C, F)
            per_b = Ho * Wo * kh * kw * C * dt.itemsize
            chunk_b = min(B, max(1, _CHUNK_BYTES // per_b))
            cc_b = _pool_take((chunk_b, Ho, Wo, kh, kw, C), dt)
            tmp = _pool_take((kh * kw * C, F), dt)
            for s in range(0, B, chunk_b):
                nb = min(chunk_b, B - s)
                view = cc_b[:nb]
                K.im2col_chunk(xp, view, s, kh, kw, stride)
                np.matmul(view.reshape(nb * Ho * Wo, kh * kw * C).T,
                          dout2d[s * Ho * Wo:(s + nb) * Ho * Wo], out=tmp)
                dw2d += tmp
            _pool_put(tmp)
            _pool_put(cc_b)
            grads.append((w, dw))
        if bias is not None and need(bias):
            grads.append((bias, dout2d.sum(axis=0)))
        if need(x):
            Hp = H + 2 * padding
            Wp = W + 2 * padding
            if single_channel:
                dxs = _alloc((B, Hp, Wp), dt)
                dcolsT = _pool_take((kh * kw, B * Ho * Wo), dt)
                np.matmul(w2d, dout2d.T, out=dcolsT)
                K.col2im_t1(dcolsT.reshape(kh * kw, B, Ho, Wo), dxs,
                            kh, kw, stride)
                _pool_put(dcolsT)
                dxp = dxs.reshape(B, Hp, Wp, 1)
            else:
                dxp = _alloc_zeros((B, Hp, Wp, C), dt)
                per_x = Ho * Wo * kh * kw * C * dt.itemsize
                chunk_x = min(B, max(1, _CHUNK_BYTES // per_x))
                dcc = _pool_take((chunk_x, Ho, Wo, kh, kw, C), dt)
                for s in range(0, B, chunk_x):
                    nb = min(chunk_x, B - s)
                    view = dcc[:nb]
                    np.matmul(dout2d[s * Ho * Wo:(s + nb) * Ho * Wo], w2d.T,
                              out=view.reshape(nb * Ho * Wo, kh * kw * C))
                    K.col2im_chunk(view, dxp, s, kh, kw, stride)
                _pool_put(dcc)
            if padding:
                dx = _alloc(x.data.shape, dt)
                dx[:] = dxp[:, padding:padding + H, padding:padding + W, :]
            else:
                dx = dxp
            grads.append((x, dx))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make(out, inputs, vjp)


def conv2d(x, w, bias, stride=1, padding=0):
    """External-contract convolution: x[N,C,H,W], w[F,C,kh,kw], bias[F]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-d x and w")
    xh = to_nhwc(x)
    wh = permute(w, (2, 3, 1, 0))
    yh = conv2d_nhwc(xh, wh, bias, stride=stride, padding=padding)
    return to_nchw(yh)


def maxpool2d_nhwc(x, window, stride):
    B, H, W, C = x.data.shape
    if window > H or window > W:
        raise ValueError("pool window exceeds spatial dims")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError("pool output dimension is not positive")
    xd = _c(x.data)
    out = _alloc((B, Ho, Wo, C), xd.dtype)
    idx = _alloc((B, Ho, Wo, C), np.int16)
    K.maxpool(xd, out, idx, window, stride)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(xd.shape, xd.dtype)
        K.maxpool_bwd(_c(dout), idx, g, window, stride)
        return [(x, g)]

    return _make(out, (x,), vjp)


def maxpool2d(x, window, stride):
    """External-contract pooling on NCHW layout."""
    return to_nchw(maxpool2d_nhwc(to_nhwc(x), window, stride))


def relu_maxpool2(x):
    """Fused relu -> 2x2/2 maxpool on NHWC. Identical to the composition,
    including the first-occurrence tie rule; one pass, no relu map stored."""
    B, H, W, C = x.data.shape
    if H % 2 or W % 2:
        raise ValueError("relu_maxpool2 needs even spatial dims")
    xd = _c(x.data)
    out = _alloc((B, H // 2, W // 2, C), xd.dtype)
    idx = _alloc((B, H // 2, W // 2, C), np.int8)
    K.relu_maxpool2(xd, out, idx)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(xd.shape, xd.dtype)
        K.relu_maxpool2_bwd(_c(dout), idx, g)
        return [(x, g)]

    return _make(out, (x,), vjp)


def global_avgpool_nhwc(x):
    """Spatial mean: [B,H,W,C] -> [B,C]."""
    B, H, W, C = x.data.shape
    out = _c(x.data).reshape(B, H * W, C).mean(axis=1)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(x.data.shape, x.data.dtype)
        g[:] = dout[:, None, None, :]
        g *= x.data.dtype.type(1.0 / (H * W))
        return [(x, g)]

    return _make(out, (x,), vjp)


def sum_rows(x):
    """Row sums: [B,d] -> [B]."""
    if x.data.ndim != 2:
        raise ValueError("sum_rows expects [B,d]")
    out = x.data.sum(axis=1)

    def vjp(dout, need):
        if not need(x):
            return []
        g = _alloc(x.data.shape, x.data.dtype)
        g[:] = dout[:, None]
        return [(x, g)]

    return _make(out, (x,), vjp)
