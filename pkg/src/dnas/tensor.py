"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward closure on
the output tensor; calling :meth:`Tensor.backward` on a scalar walks the
recorded graph in reverse topological order and accumulates gradients
additively across fan-out. Activations use NCHW layout, convolution weights
OIHW.

The library is intentionally narrow: it implements exactly the operations the
searchable blocks and the search loss need, in plain numpy. Convolution uses
an im2col/col2im formulation (a loop only over the K*K kernel offsets, so the
heavy lifting is batched matmul). Reductions use fixed numpy evaluation
order, so forward and backward are deterministic for a fixed BLAS thread
count.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ConfigurationError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (eval-mode forward passes, benchmarking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """N-dimensional float array, optionally participating in autodiff.

    ``grad`` is allocated lazily on first accumulation and always matches
    ``data`` in shape and dtype. Constructing a Tensor coerces to float32;
    internal ops may produce float64 scalars (the latency model keeps its
    accumulation in double precision).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if _grad_enabled and out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def is_leaf(self):
        return not self._parents

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
            self.grad = self.grad.reshape(self.data.shape)
        else:
            self.grad += np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Frees the recorded graph afterwards (closures and parent links of
        interior nodes are dropped) so one training step does not retain the
        previous step's intermediates.
        """
        if self.data.size != 1:
            raise ConfigurationError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        order = self._topo_order()
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None

    def _topo_order(self):
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def __sub__(self, other):
        return add(self, mul_const(other, -1.0)) if isinstance(other, Tensor) else add_const(self, -other)


def as_const(value, dtype=np.float32):
    """Wrap a value as a non-differentiable Tensor."""
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(value, dtype=dtype)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    t._op = "const"
    return t


# -- elementwise and scalar arithmetic -------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        return add_const(a, float(b))
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return Tensor._from_op(out_data, (a, b), backward, "add")


def add_const(a: Tensor, c: float) -> Tensor:
    out_data = a.data + c

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    return Tensor._from_op(out_data, (a,), backward, "add_const")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a scalar (size-1) tensor."""
    if not isinstance(b, Tensor):
        return mul_const(a, float(b))
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ConfigurationError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            ga = g * b.data
            if a.data.size == 1 and ga.size != 1:
                ga = ga.sum()
            a.accumulate_grad(ga)
        if b.requires_grad:
            gb = g * a.data
            if b.data.size == 1 and gb.size != 1:
                gb = gb.sum()
            b.accumulate_grad(gb)

    return Tensor._from_op(out_data, (a, b), backward, "mul")


def mul_const(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return Tensor._from_op(out_data, (a,), backward, "mul_const")


def tsum(a: Tensor) -> Tensor:
    out_data = a.data.sum()

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))

    return Tensor._from_op(out_data, (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = a.data.mean()

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g / n, a.data.shape))

    return Tensor._from_op(out_data, (a,), backward, "mean")


def tlog(a: Tensor) -> Tensor:
    """Natural logarithm; the caller guarantees strictly positive input."""
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return Tensor._from_op(out_data, (a,), backward, "log")


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0))

    return Tensor._from_op(out_data, (a,), backward, "pow")


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return Tensor._from_op(out_data, (a,), backward, "relu")


def index(a: Tensor, i: int) -> Tensor:
    """Pick one element of a vector as a 0-d tensor."""
    out_data = a.data[i].copy()

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[i] = g
            a.accumulate_grad(buf)

    return Tensor._from_op(out_data, (a,), backward, "index")


def softmax_vec(a: Tensor) -> Tensor:
    """Softmax over a 1-D tensor, stabilized by max subtraction."""
    z = a.data - a.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(s * (g - float(np.dot(g, s))))

    return Tensor._from_op(s, (a,), backward, "softmax")


def weighted_sum(tensors, weights: Tensor) -> Tensor:
    """sum_i weights[i] * tensors[i] with a fixed reduction order.

    All inputs share one shape; ``weights`` is a 1-D tensor of matching
    length. Used to mix parallel candidate-block outputs under a relaxed
    categorical mask.
    """
    if len(tensors) != weights.data.shape[0]:
        raise ConfigurationError(
            f"weighted_sum got {len(tensors)} tensors for {weights.data.shape[0]} weights"
        )
    stacked = np.stack([t.data for t in tensors])
    out_data = np.tensordot(weights.data, stacked, axes=(0, 0))

    def backward(g):
        if weights.requires_grad:
            gw = np.empty_like(weights.data)
            for i, t in enumerate(tensors):
                gw[i] = np.vdot(g, t.data)
            weights.accumulate_grad(gw)
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(g * weights.data[i])

    return Tensor._from_op(out_data, (*tensors, weights), backward, "weighted_sum")


def dot_const(a: Tensor, vec: np.ndarray) -> Tensor:
    """Dot product with a constant vector, accumulated in the vector's dtype.

    The output inherits ``vec``'s dtype (float64 for latency sums), and the
    gradient w.r.t. ``a`` is exactly the constant vector.
    """
    vec = np.asarray(vec)
    out_data = np.asarray(a.data.astype(vec.dtype) @ vec)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad((g * vec).astype(a.data.dtype))

    return Tensor._from_op(out_data, (a,), backward, "dot_const")


def flatten2d(a: Tensor) -> Tensor:
    """Collapse all trailing axes: (N, ...) -> (N, D)."""
    n = a.data.shape[0]
    out_data = a.data.reshape(n, -1)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return Tensor._from_op(out_data, (a,), backward, "flatten")


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with keep-scaling; caller applies only in train mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out_data = a.data * keep

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep)

    return Tensor._from_op(out_data, (a,), backward, "dropout")


# -- convolution ------------------------------------------------------------


def _conv_out_hw(h, w, k, stride, padding):
    return ((h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1)


def _im2col(x, k, stride, padding):
    """(N,C,H,W) -> (N, C, K*K, H_out*W_out) patch matrix."""
    n, c, h, w = x.shape
    ho, wo = _conv_out_hw(h, w, k, stride, padding)
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    cols = np.empty((n, c, k * k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki * k + kj] = xp[
                :, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride
            ]
    return cols.reshape(n, c, k * k, ho * wo), (ho, wo)


def _col2im(cols, x_shape, k, stride, padding):
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the image."""
    n, c, h, w = x_shape
    ho, wo = _conv_out_hw(h, w, k, stride, padding)
    cols5 = cols.reshape(n, c, k * k, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += cols5[
                :, :, ki * k + kj
            ]
    if padding:
        return xp[:, :, padding : padding + h, padding : padding + w].copy()
    return xp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D convolution, no bias.

    ``x`` is (N,C,H,W), ``weight`` is (O, C/groups, K, K). Depthwise
    convolution is groups == C. Kernel must be odd with same-padding
    (K-1)/2, stride 1 or 2 — the only configurations the block vocabulary
    uses.
    """
    n, c, h, w = x.data.shape
    o, cg, kh, kw = weight.data.shape
    if kh != kw:
        raise ConfigurationError(f"conv2d kernels must be square, got {kh}x{kw}")
    k = kh
    if k % 2 != 1:
        raise ConfigurationError(f"conv2d kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding != (k - 1) // 2:
        raise ConfigurationError(f"conv2d padding must be (K-1)/2 = {(k - 1) // 2}, got {padding}")
    if c % groups != 0 or o % groups != 0:
        raise ConfigurationError(
            f"conv2d groups={groups} must divide in_channels={c} and out_channels={o}"
        )
    if cg != c // groups:
        raise ConfigurationError(
            f"conv2d weight expects {cg} channels/group but input has {c // groups} "
            f"(C={c}, groups={groups})"
        )

    og = o // groups
    ho, wo = _conv_out_hw(h, w, k, stride, padding)
    wg = weight.data.reshape(groups, og, cg * k * k)

    if k == 1:
        # pointwise: a grouped matmul over the flattened spatial axis,
        # no patch extraction in either direction
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        xs = np.ascontiguousarray(xs).reshape(n, groups, cg, ho * wo)
        out_data = np.matmul(wg, xs).reshape(n, o, ho, wo)

        def backward(g):
            go = np.ascontiguousarray(g).reshape(n, groups, og, ho * wo)
            if weight.requires_grad:
                gw = np.matmul(go, xs.transpose(0, 1, 3, 2)).sum(axis=0)
                weight.accumulate_grad(gw.reshape(o, cg, 1, 1))
            if x.requires_grad:
                gxs = np.matmul(wg.transpose(0, 2, 1), go).reshape(n, c, ho, wo)
                if stride > 1:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = gxs
                x.accumulate_grad(gx)

        return Tensor._from_op(out_data, (x, weight), backward, "conv2d")

    if groups == c and o == c:
        return _depthwise_conv2d(x, weight, stride, padding)

    cols, _ = _im2col(x.data, k, stride, padding)
    colsg = cols.reshape(n, groups, cg * k * k, ho * wo)
    out_data = np.matmul(wg, colsg).reshape(n, o, ho, wo)

    def backward(g):
        go = np.ascontiguousarray(g).reshape(n, groups, og, ho * wo)
        # Patches are recomputed here rather than stored: the input tensor is
        # already retained by the graph, and dropping the K*K-fold patch
        # matrix between passes keeps peak memory flat across the supernet.
        cols_b, _ = _im2col(x.data, k, stride, padding)
        colsg_b = cols_b.reshape(n, groups, cg * k * k, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(go, colsg_b.transpose(0, 1, 3, 2)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(o, cg, k, k))
        if x.requires_grad:
            gcols = np.matmul(wg.transpose(0, 2, 1), go)
            x.accumulate_grad(
                _col2im(gcols.reshape(n, c, k * k, ho * wo), x.data.shape, k, stride, padding)
            )

    return Tensor._from_op(out_data, (x, weight), backward, "conv2d")


def _depthwise_conv2d(x: Tensor, weight: Tensor, stride: int, padding: int) -> Tensor:
    """Per-channel convolution as K*K strided multiply-accumulates.

    Skips the patch matrix entirely: each kernel offset contributes one
    vectorized elementwise product, which beats batched tiny matmuls for
    groups == channels.
    """
    n, c, h, w = x.data.shape
    k = weight.data.shape[2]
    ho, wo = _conv_out_hw(h, w, k, stride, padding)
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    wk = weight.data.reshape(c, k, k)
    out_data = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    scratch = np.empty_like(out_data)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            np.multiply(wk[:, ki, kj].reshape(1, c, 1, 1), patch, out=scratch)
            out_data += scratch

    def backward(g):
        if weight.requires_grad:
            gw = np.empty((c, 1, k, k), dtype=weight.data.dtype)
            for ki in range(k):
                for kj in range(k):
                    patch = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    gw[:, 0, ki, kj] = np.einsum("nchw,nchw->c", g, patch)
            weight.accumulate_grad(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            buf = np.empty_like(g)
            for ki in range(k):
                for kj in range(k):
                    np.multiply(wk[:, ki, kj].reshape(1, c, 1, 1), g, out=buf)
                    gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += buf
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w].copy()
            x.accumulate_grad(gxp)

    return Tensor._from_op(out_data, (x, weight), backward, "conv2d")


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave channel groups: layout (g, C/g) becomes (C/g, g).

    A fixed permutation; the gradient applies the inverse permutation.
    """
    n, c = x.data.shape[:2]
    if c % groups != 0:
        raise ConfigurationError(f"channel_shuffle: {groups} groups do not divide {c} channels")
    perm = np.arange(c).reshape(groups, c // groups).T.ravel()
    inv = np.argsort(perm)
    out_data = x.data[:, perm]

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g[:, inv])

    return Tensor._from_op(out_data, (x,), backward, "channel_shuffle")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C,1,1) spatial mean."""
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g / (h * w), x.data.shape))

    return Tensor._from_op(out_data, (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N,D) @ (D,M) + (M,)."""
    if x.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ConfigurationError(
            f"linear shape mismatch: input {x.data.shape} vs weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ConfigurationError(
            f"linear bias shape {bias.data.shape} does not match out dim {weight.data.shape[1]}"
        )
    out_data = x.data @ weight.data + bias.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate_grad(x.data.T @ g)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return Tensor._from_op(out_data, (x, weight, bias), backward, "linear")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N,H,W).

    Train mode normalizes by batch statistics and updates the running
    buffers in place (running variance uses the unbiased estimate). Eval mode
    normalizes by the running buffers; before any train step those are the
    init values (mean 0, var 1).
    """
    n, c, h, w = x.data.shape
    shape = (1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ConfigurationError(f"batch_norm train mode needs N*H*W >= 2, got {m}")
        mean = x.data.mean(axis=(0, 2, 3))
        diff = x.data - mean.reshape(shape)
        var = np.mean(np.square(diff), axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = diff
        xhat *= inv.reshape(shape)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1.0))
    else:
        mean = running_mean.astype(np.float32)
        inv = (1.0 / np.sqrt(running_var + eps)).astype(np.float32)
        xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out_data = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = g * gamma.data.reshape(shape)
            if training:
                m = n * h * w
                gx = (
                    gh
                    - gh.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)
                ) * inv.reshape(shape)
            else:
                gx = gh * inv.reshape(shape)
            x.accumulate_grad(gx)

    return Tensor._from_op(out_data, (x, gamma, beta), backward, "batch_norm")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the true class, stabilized by max shift."""
    labels = np.asarray(labels)
    n, m = logits.data.shape
    bad = np.nonzero((labels < 0) | (labels >= m))[0]
    if bad.size:
        raise ConfigurationError(
            f"cross_entropy label out of range at index {int(bad[0])}: "
            f"{int(labels[bad[0]])} not in [0, {m})"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    out_data = np.float32(-logp[np.arange(n), labels].mean())

    def backward(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(grad * (g / n))

    return Tensor._from_op(np.asarray(out_data), (logits,), backward, "cross_entropy")


def assert_finite(arr: np.ndarray, what: str):
    """Raise if an array picked up NaN/Inf; identifies the offending value."""
    if not np.all(np.isfinite(arr)):
        bad = np.nonzero(~np.isfinite(np.asarray(arr).ravel()))[0][0]
        raise FloatingPointError(f"non-finite value in {what} at flat index {int(bad)}")
