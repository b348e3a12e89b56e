"""A small define-by-run reverse-mode layer kit in float64 numpy.

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor with ``requires_grad``, are recorded together with a closure that
maps the output gradient to input gradients.  :func:`backprop` replays the
records in reverse.  Outside a tape every op is a plain numpy computation,
which is what inference uses.

Layouts: dense features are ``(N, F)``; volumes are channels-last
``(N, D, H, W, C)``; conv kernels are ``(k, k, k, C_in, C_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import NumericError, ShapeError

_ACTIVE: list[Tape] = []
# Branch records of piecewise ops, collected while a gradient check probes them.
_BRANCHES: list[list[np.ndarray]] = []

# Upper bound on im2col elements materialised at once.
COL_BUDGET = 1 << 23


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Records differentiable operations while used as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _ACTIVE[-1] if _ACTIVE else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out._leaf = False
        tape.nodes.append(_Node(op, out, tuple(inputs), backward))
    return out


def _branch(selector: np.ndarray) -> None:
    if _BRANCHES:
        _BRANCHES[-1].append(np.packbits(selector))


def backprop(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of scalar ``loss`` for every leaf on ``tape``.

    Leaf tensors receive their gradient in ``.grad``; the returned mapping is
    keyed by tensor name (unnamed leaves are keyed by ``id``).
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        culprit = next((n.op for n in tape.nodes if not np.isfinite(n.out.data).all()), "input")
        raise NumericError(f"non-finite loss; first non-finite value produced by op {culprit!r}")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if t._leaf:
                leaves[key] = t
    result = {}
    for key, t in leaves.items():
        t.grad = grads.get(key)
        result[t.name if t.name is not None else key] = t.grad
    return result


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _emit("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, g / n),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    _branch(on)
    return _emit("relu", np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def _horner(coeffs, x: np.ndarray) -> np.ndarray:
    """sum_i coeffs[i] * x**i, evaluated in place from the highest degree."""
    out = np.full_like(x, coeffs[-1])
    for c in coeffs[-2::-1]:
        out *= x
        out += c
    return out


def pau(x, num, den) -> Tensor:
    """Safe Padé activation ``P(x) / (1 + |sum_j b_j x^j|)``.

    ``num`` holds a_0..a_m and ``den`` holds b_1..b_n.
    """
    x, num, den = as_tensor(x), as_tensor(num), as_tensor(den)
    a, b = num.data, den.data
    xd = x.data
    P = _horner(a, xd)
    S = _horner(b, xd)
    S *= xd
    _branch(S > 0)
    Q = np.abs(S)
    Q += 1.0
    out = P / Q

    def backward(g):
        gq = g / Q
        sgn = np.sign(S)
        gx = None
        if x.requires_grad:
            dP = _horner(a[1:] * np.arange(1, len(a)), xd)
            dS = _horner(b * np.arange(1, len(b) + 1), xd)
            dS *= sgn
            dS *= out
            dP -= dS
            gx = gq * dP
        gnum = gden = None
        if num.requires_grad:
            gnum = _power_sums(gq, xd, len(a), 0)
        if den.requires_grad:
            common = gq * out
            common *= -sgn
            gden = _power_sums(common, xd, len(b), 1)
        return gx, gnum, gden

    return _emit("pau", out, (x, num, den), backward)


def _power_sums(w: np.ndarray, x: np.ndarray, count: int, first: int) -> np.ndarray:
    """[sum(w * x**i) for i in first .. first + count - 1]."""
    term = w * x if first else w.copy()
    sums = []
    for _ in range(count):
        sums.append(term.sum())
        term *= x
    return np.array(sums)


# ------------------------------------------------------------ structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` for x (N, I), w (I, O), b (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input {x.shape} does not match weight {w.shape}")
    inputs = (x, w) if b is None else (x, w, as_tensor(b))
    out = x.data @ w.data
    if b is not None:
        out = out + inputs[2].data

    def backward(g):
        grads = [g @ w.data.T if x.requires_grad else None,
                 x.data.T @ g if w.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit("linear", out, inputs, backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: np.split(g, splits, axis=axis))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take_rows(x, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; used to broadcast per-volume vectors to points."""
    x = as_tensor(x)
    index = np.asarray(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if len(x.data) <= 64:
            for row in range(len(x.data)):
                sel = index == row
                if sel.any():
                    gx[row] = g[sel].sum(axis=0)
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _emit("take_rows", x.data[index], (x,), backward)


def global_avg_pool(x) -> Tensor:
    """(N, D, H, W, C) -> (N, C)."""
    x = as_tensor(x)
    n_vox = np.prod(x.shape[1:4])
    return _emit("global_avg_pool", x.data.mean(axis=(1, 2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, None, None, None, :] / n_vox, x.shape).copy(),))


# ------------------------------------------------------------ convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    # (n, Do, Ho, Wo, C, k, k, k) -> rows ordered (kz, ky, kx, C)
    n, do, ho, wo = win.shape[:4]
    return win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(n * do * ho * wo, -1)


def _chunks(n: int, per_item: int):
    step = max(1, COL_BUDGET // max(per_item, 1))
    return [(i, min(i + step, n)) for i in range(0, n, step)]


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_dims, stride: int, padding: int):
    """Input gradient of a strided, padded correlation.

    Each kernel offset contributes one small GEMM whose result is added to a
    shifted, strided view of the padded input gradient.
    """
    k, cin, cout = w.shape[0], w.shape[3], w.shape[4]
    n, do, ho, wo, _ = g.shape
    gxp = np.zeros((n, *(s + 2 * padding for s in in_dims), cin))
    gflat = g.reshape(-1, cout)
    for dz, dy, dx in np.ndindex(k, k, k):
        part = (gflat @ w[dz, dy, dx].T).reshape(n, do, ho, wo, cin)
        gxp[:, dz:dz + stride * (do - 1) + 1:stride,
            dy:dy + stride * (ho - 1) + 1:stride,
            dx:dx + stride * (wo - 1) + 1:stride] += part
    if padding:
        d, h, wd = in_dims
        return gxp[:, padding:padding + d, padding:padding + h, padding:padding + wd]
    return gxp


def conv3d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation with zero padding on channels-last input."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and kernel, got {x.shape} and {w.shape}")
    k = w.shape[0]
    if w.shape[:3] != (k, k, k) or x.shape[4] != w.shape[3]:
        raise ShapeError(f"conv3d input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or not 0 <= padding < k:
        raise ValueError(f"need stride >= 1 and 0 <= padding < {k}")
    n, d, h, wd, cin = x.shape
    cout = w.shape[4]
    out_dims = [conv_output_size(s, k, stride, padding) for s in (d, h, wd)]
    if min(out_dims) < 1:
        raise ShapeError(f"conv3d kernel {k} too large for input {x.shape} with padding {padding}")
    pad = [(0, 0)] + [(padding, padding)] * 3 + [(0, 0)]
    xp = np.pad(x.data, pad) if padding else x.data
    wmat = w.data.reshape(-1, cout)
    per_item = int(np.prod(out_dims)) * wmat.shape[0]
    spans = _chunks(n, per_item)
    out = np.empty((n, *out_dims, cout))
    for lo, hi in spans:
        out[lo:hi] = (_im2col(xp[lo:hi], k, stride) @ wmat).reshape(hi - lo, *out_dims, cout)
    if b is not None:
        out += as_tensor(b).data
    inputs = (x, w) if b is None else (x, w, as_tensor(b))

    def backward(g):
        gw = None
        if w.requires_grad:
            gw = np.zeros_like(wmat)
            for lo, hi in spans:
                gw += _im2col(xp[lo:hi], k, stride).T @ g[lo:hi].reshape(-1, cout)
        gx = _conv_input_grad(g, w.data, (d, h, wd), stride, padding) if x.requires_grad else None
        grads = [gx, None if gw is None else gw.reshape(w.shape)]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2, 3)))
        return grads

    return _emit("conv3d", out, inputs, backward)


def _toeplitz_index(in_dims, k: int, cin: int, cout: int):
    out_dims = tuple(s - k + 1 for s in in_dims)
    o = np.indices(out_dims).reshape(3, -1).T
    kk = np.indices((k, k, k)).reshape(3, -1).T
    pos = o[:, None, :] + kk[None, :, :]
    in_lin = (pos[..., 0] * in_dims[1] + pos[..., 1]) * in_dims[2] + pos[..., 2]
    out_lin = (o[:, 0] * out_dims[1] + o[:, 1]) * out_dims[2] + o[:, 2]
    ci = np.arange(cin)[None, None, :, None]
    co = np.arange(cout)[None, None, None, :]
    rows = in_lin[:, :, None, None] * cin + ci
    cols = out_lin[:, None, None, None] * cout + co
    rows, cols = np.broadcast_arrays(rows, cols)
    return out_dims, rows, cols


def conv3d_matrix(w, in_dims) -> Tensor:
    """Dense matrix of a valid (unpadded, stride 1) convolution on one ``in_dims`` volume.

    Flattened channels-last inputs (N, prod(in_dims) * C_in) times the matrix
    give flattened outputs.  Worth it for many small volumes, where one large
    GEMM beats per-offset gathers.
    """
    w = as_tensor(w)
    k, cin, cout = w.shape[0], w.shape[3], w.shape[4]
    in_dims = tuple(int(s) for s in in_dims)
    out_dims, rows, cols = _toeplitz_index(in_dims, k, cin, cout)
    mat = np.zeros((int(np.prod(in_dims)) * cin, int(np.prod(out_dims)) * cout))
    wk = w.data.reshape(-1, cin, cout)
    mat[rows, cols] = np.broadcast_to(wk[None], rows.shape)
    return _emit("conv3d_matrix", mat, (w,),
                 lambda g: (g[rows, cols].sum(axis=0).reshape(w.shape),))


# ------------------------------------------------------------ normalisation

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_normalize(x, running_mean: np.ndarray, running_var: np.ndarray, mode: str,
                    eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                    update_stats: bool = True) -> Tensor:
    """Per-feature standardisation of (N, F) input, without affine terms.

    Train mode uses batch statistics and, if ``update_stats``, moves the
    running buffers in place; eval mode uses the running buffers.
    """
    x = as_tensor(x)
    if mode == "train":
        n = x.shape[0]
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = (centered ** 2).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        if update_stats:
            unbiased = var * n / (n - 1) if n > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased

        def backward(g):
            gsum = g.sum(axis=0)
            gdot = (g * xhat).sum(axis=0)
            return ((inv / n) * (n * g - gsum - xhat * gdot),)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv

        def backward(g):
            return (g * inv,)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return _emit("batch_normalize", xhat, (x,), backward)


def cond_batchnorm(x, latent, w_gamma, b_gamma, w_beta, b_beta, running_mean, running_var,
                   mode: str, groups: np.ndarray | None = None,
                   update_stats: bool = True) -> Tensor:
    """Batch norm whose scale and shift are linear functions of a conditioning latent.

    ``latent`` is (G, L); ``groups`` assigns each of the N rows of ``x`` to a
    latent row (all rows use row 0 when omitted).
    """
    latent = as_tensor(latent)
    if latent.shape[-1] != as_tensor(w_gamma).shape[0]:
        raise ShapeError(f"latent {latent.shape} does not match predictor {as_tensor(w_gamma).shape}")
    if groups is None:
        groups = np.zeros(as_tensor(x).shape[0], dtype=np.int64)
    xhat = batch_normalize(x, running_mean, running_var, mode, update_stats=update_stats)
    gamma = take_rows(linear(latent, w_gamma, b_gamma), groups)
    beta = take_rows(linear(latent, w_beta, b_beta), groups)
    return add(mul(gamma, xhat), beta)


# ------------------------------------------------------------ losses


def binary_cross_entropy(p, labels, eps: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities ``p`` against binary ``labels`` with clamping."""
    p = as_tensor(p)
    labels = np.asarray(labels, dtype=np.float64)
    if p.data.size != labels.size:
        raise ShapeError(f"{p.data.size} probabilities vs {labels.size} labels")
    labels = labels.reshape(p.shape)
    pc = np.clip(p.data, eps, 1.0 - eps)
    n = p.data.size
    loss = -(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc)).mean()
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    _branch(inside)

    def backward(g):
        return (g * inside * (pc - labels) / (pc * (1.0 - pc)) / n,)

    return _emit("binary_cross_entropy", np.asarray(loss), (p,), backward)


# ------------------------------------------------------------ gradient check


def _probe(loss_fn):
    _BRANCHES.append([])
    try:
        value = float(loss_fn().data)
    finally:
        branches = _BRANCHES.pop()
    return value, branches


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                            h: float = 1e-5, entries_per_tensor: int | None = None,
                            rng: np.random.Generator | None = None, min_h: float = 1e-9,
                            stats: dict | None = None) -> dict[str, float]:
    """Compare tape gradients with central differences.

    ``loss_fn`` must rebuild the forward pass from ``params`` on every call.
    Returns, per tensor, ``max |g_tape - g_fd| / max(1, |g_fd|)`` over the
    checked entries (all entries unless ``entries_per_tensor`` is given).

    Central differences are only meaningful where the loss is smooth on
    ``[x - h, x + h]``.  If a perturbation flips a branch of a piecewise op
    (ReLU side, PAU denominator sign, BCE clamp) the step is divided by 10
    until both sides match the unperturbed branches or ``min_h`` is reached.
    ``stats["reduced_steps"]`` counts entries that needed a smaller step.
    """
    rng = rng or np.random.default_rng(0)
    for t in params.values():
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backprop(tape, loss)
    _, base = _probe(loss_fn)
    reduced = 0
    errors = {}
    for name, t in params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if entries_per_tensor is None or entries_per_tensor >= flat.size:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=entries_per_tensor, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            step = h
            while True:
                flat[i] = orig + step
                up, up_branches = _probe(loss_fn)
                flat[i] = orig - step
                down, down_branches = _probe(loss_fn)
                flat[i] = orig
                smooth = _same_branches(up_branches, base) and _same_branches(down_branches, base)
                if smooth or step / 10 < min_h:
                    break
                step /= 10
            reduced += step != h
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd)))
        errors[name] = worst
    if stats is not None:
        stats["reduced_steps"] = reduced
    return errors
