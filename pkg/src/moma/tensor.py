"""Dense tensors with reverse-mode automatic differentiation.

Arrays are plain numpy (float32 by default, float64 for gradient-check
suites); the tape and every backward rule live here. Ops record onto the
active ComputationTape in creation order, which is a valid topological
order, so `backward` is a single reverse sweep. Selection ops (top-k,
argmax-style) are deliberately not differentiable and return raw index
arrays.

Two global switches:
  * set_validation(True) makes every op reject non-finite outputs.
  * the MAC counter (`mac_counter`) tallies multiply-accumulates of all
    matmuls, used by the FLOPs instrumentation tests.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_VALIDATE = False


def set_validation(enabled: bool) -> None:
    """Toggle rejection of NaN/Inf at op boundaries (debug mode)."""
    global _VALIDATE
    _VALIDATE = enabled


@contextlib.contextmanager
def validation(enabled: bool = True):
    global _VALIDATE
    prev = _VALIDATE
    _VALIDATE = enabled
    try:
        yield
    finally:
        _VALIDATE = prev


class MacCounter:
    """Counts multiply-accumulate operations performed by matmul."""

    def __init__(self):
        self.enabled = False
        self.macs = 0

    def reset(self):
        self.macs = 0

    def add(self, n: int):
        if self.enabled:
            self.macs += n

    @property
    def flops(self) -> int:
        # Convention: one multiply-accumulate = 2 FLOPs.
        return 2 * self.macs

    @contextlib.contextmanager
    def counting(self):
        prev = self.enabled
        self.enabled = True
        self.reset()
        try:
            yield self
        finally:
            self.enabled = prev


mac_counter = MacCounter()


class Tensor:
    """A dense array plus autodiff bookkeeping.

    `grad` is populated on leaves (requires_grad=True tensors created by
    the user) after a backward pass and accumulates across passes until
    `zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below are the real API.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)


class ComputationTape:
    """Ordered record of ops; reverse iteration is reverse topological order."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.enabled = True

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.entries.append((out, inputs, backward_fn))

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[ComputationTape] = [ComputationTape()]


def active_tape() -> ComputationTape:
    return _TAPE_STACK[-1]


@contextlib.contextmanager
def no_grad():
    tape = active_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def grad_enabled() -> bool:
    return active_tape().enabled


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _VALIDATE and not np.all(np.isfinite(out_data)):
        raise ContractError(f"non-finite values produced by op '{op}'")
    out = Tensor(out_data)
    tape = active_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep over the active tape, accumulating grads into leaves.

    The tape is consumed: entries are cleared afterwards so the next step
    starts fresh. Tensors recorded after `loss` cannot be its ancestors and
    are skipped naturally (their output grad is never created).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(out) for out, _, _ in tape.entries}
    for out, inputs, backward_fn in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in produced:
                acc = grads.get(id(t))
                # Never accumulate in place: backward rules may hand the
                # same array to several consumers (e.g. add returns its
                # upstream gradient twice).
                grads[id(t)] = gi if acc is None else acc + gi
            else:
                # Leaf: exactly one accumulated gradient lands here per pass.
                if t.grad is None:
                    t.grad = gi.astype(t.data.dtype, copy=True)
                else:
                    t.grad += gi
    tape.clear()


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def custom_op(
    out_data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward_fn: Callable,
    name: str,
) -> Tensor:
    """Record a caller-implemented op (fused forward + backward) on the tape."""
    return _finish(np.asarray(out_data), inputs, backward_fn, name)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum. `b` may be a Tensor of equal shape, a scalar, or a
    constant ndarray broadcastable to `a` (constants get no gradient)."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
        out = a.data + b.data

        def bwd(g):
            return g, g

        return _finish(out, (a, b), bwd, "add")
    const = np.asarray(b, dtype=a.data.dtype)
    out = a.data + const

    def bwd_const(g):
        return (g,)

    return _finish(out, (a,), bwd_const, "add")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with an equal-shape Tensor, a python scalar, or a
    broadcastable constant ndarray (constants get no gradient)."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
        out = a.data * b.data
        ad, bd = a.data, b.data

        def bwd(g):
            return g * bd, g * ad

        return _finish(out, (a, b), bwd, "mul")
    if isinstance(b, np.ndarray):
        const = b.astype(a.data.dtype, copy=False)
        out = a.data * const

        def bwd_const(g):
            gx = g * const
            if gx.shape != a.data.shape:  # undo broadcast
                extra = gx.ndim - a.data.ndim
                gx = gx.sum(axis=tuple(range(extra)))
            return (gx,)

        return _finish(out, (a,), bwd_const, "mul")
    c = float(b)
    out = a.data * np.asarray(c, dtype=a.data.dtype)

    def bwd_scalar(g):
        return (g * np.asarray(c, dtype=g.dtype),)

    return _finish(out, (a,), bwd_scalar, "mul")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x[N, D] by s[N] (per-token gate scaling)."""
    if x.data.ndim != 2 or s.data.shape != (x.data.shape[0],):
        raise ShapeError(f"scale_rows expects x[N,D], s[N]; got {x.data.shape}, {s.data.shape}")
    out = x.data * s.data[:, None]
    xd, sd = x.data, s.data

    def bwd(g):
        return g * sd[:, None], np.sum(g * xd, axis=1)

    return _finish(out, (x, s), bwd, "scale_rows")


def _pad_single_row(m: np.ndarray) -> tuple[np.ndarray, bool]:
    # BLAS dispatches 1-row products to gemv whose accumulation order differs
    # from gemm rows; padding to 2 rows keeps every row of every product
    # bitwise identical to the same row inside a larger gemm.
    if m.ndim == 2 and m.shape[0] == 1:
        return np.concatenate([m, m], axis=0), True
    return m, False


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (..., p, q) @ (q, r), or batched (B, p, q) @ (B, q, r)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {ad.shape} vs {bd.shape}")
    if bd.ndim == 2:
        lead = ad.shape[:-2]
        a2 = ad.reshape(-1, ad.shape[-1]) if ad.ndim > 2 else ad
        mac_counter.add(a2.shape[0] * a2.shape[1] * bd.shape[1])
        a2p, padded = _pad_single_row(a2)
        out2 = np.matmul(a2p, bd)
        if padded:
            out2 = out2[:1]
        out = out2.reshape(*lead, ad.shape[-2], bd.shape[-1]) if ad.ndim > 2 else out2

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1]) if g.ndim > 2 else g
            g2p, gp = _pad_single_row(g2)
            ga2 = np.matmul(g2p, bd.T)
            if gp:
                ga2 = ga2[:1]
            ga = ga2.reshape(ad.shape)
            a2g = ad.reshape(-1, ad.shape[-1]) if ad.ndim > 2 else ad
            gb = np.matmul(a2g.T, g2)
            return ga, gb

        return _finish(out, (a, b), bwd, "matmul")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {ad.shape} vs {bd.shape}")
    mac_counter.add(int(np.prod(ad.shape[:-2])) * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])
    out = np.matmul(ad, bd)

    def bwd_batched(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _finish(out, (a, b), bwd_batched, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # Clip first: sigmoid saturates far inside +-60, and the clip keeps
    # exp() from overflowing (never returns exactly 0, even at the floor).
    z = np.clip(x, -60.0, 60.0)
    np.negative(z, out=z)
    np.exp(z, out=z)
    z += 1.0
    np.divide(1.0, z, out=z)
    return z


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _finish(s, (x,), bwd, "sigmoid")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the gate nonlinearity of the expert FFNs."""
    s = _stable_sigmoid(x.data)
    out = x.data * s

    def bwd(g):
        return (g * (s + out * (1.0 - s)),)

    return _finish(out, (x,), bwd, "silu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction."""
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _finish(p, (x,), bwd, "softmax")


def layer_norm(x: Tensor, scale: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply a
    learnable per-feature scale (no bias)."""
    d = x.data.shape[-1]
    if scale.data.shape != (d,):
        raise ShapeError(f"layer_norm scale must be ({d},), got {scale.data.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = xhat * scale.data

    def bwd(g):
        gs = np.sum(g * xhat, axis=tuple(range(g.ndim - 1)))
        gx_hat = g * scale.data
        # d/dx of (x - mu) * inv with mu, inv functions of x.
        t1 = gx_hat
        t2 = np.mean(gx_hat, axis=-1, keepdims=True)
        t3 = xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True)
        gx = (t1 - t2 - t3) * inv
        return gx, gs

    return _finish(out, (x, scale), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# lookup / selection / indexing


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` [V, D] by integer ids (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(f"embedding ids out of range [0, {table.data.shape[0]})")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _finish(out, (table,), bwd, "embedding_lookup")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element negative log-likelihood from logits [N, V] and integer
    targets [N]. Returns a length-N vector; reduce with `mean` for training."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {ld.shape}")
    targets = np.asarray(targets)
    n, v = ld.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy targets must be ({n},), got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ContractError(f"target ids out of range [0, {v})")
    m = np.max(ld, axis=1, keepdims=True)
    e = np.exp(ld - m)
    z = np.sum(e, axis=1, keepdims=True)
    lse = (m + np.log(z)).reshape(-1)
    nll = lse - ld[np.arange(n), targets]

    def bwd(g):
        p = e / z
        p[np.arange(n), targets] -= 1.0
        return (p * g[:, None],)

    return _finish(nll, (logits,), bwd, "cross_entropy")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element binary cross-entropy from logits, numerically stable:
    max(z,0) - z*y + log1p(exp(-|z|)). Targets are 0/1 floats."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce targets shape {y.shape} != logits {z.shape}")
    out = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def bwd(g):
        return (g * (_stable_sigmoid(z) - y),)

    return _finish(out, (logits,), bwd, "bce_with_logits")


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries of a 1-d array, descending by value,
    equal values broken by ascending index. Non-differentiable."""
    values = np.asarray(values)
    if values.ndim != 1:
        raise ShapeError(f"top_k_indices expects a 1-d array, got shape {values.shape}")
    k = int(k)
    if not 1 <= k <= values.shape[0]:
        raise ContractError(f"k={k} outside [1, {values.shape[0]}]")
    order = np.argsort(-values, kind="stable")
    return order[:k]


def gather_rows(x: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Select rows of x[N, ...] by an integer index list. Pass unique=True
    when the caller guarantees distinct indices (skips the duplicate-safe
    scatter in the backward pass)."""
    idx = np.asarray(idx)
    out = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        if unique:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _finish(out, (x,), bwd, "gather_rows")


def scatter_add_rows(base: Tensor, idx: np.ndarray, rows: Tensor, unique: bool = False) -> Tensor:
    """out = base with rows[i] added at position idx[i] (duplicates sum)."""
    idx = np.asarray(idx)
    if rows.data.shape[1:] != base.data.shape[1:] or rows.data.shape[0] != idx.shape[0]:
        raise ShapeError(
            f"scatter_add_rows: base {base.data.shape}, rows {rows.data.shape}, idx {idx.shape}"
        )
    out = base.data.copy()
    if unique:
        out[idx] += rows.data
    else:
        np.add.at(out, idx, rows.data)

    def bwd(g):
        return g, g[idx]

    return _finish(out, (base, rows), bwd, "scatter_add_rows")


def zeros_like_rows(n: int, template: Tensor) -> Tensor:
    """A non-learnable all-zero [n, D] tensor matching template's trailing dims."""
    return Tensor(np.zeros((n,) + template.data.shape[1:], dtype=template.data.dtype))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _finish(out, (x,), bwd, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _finish(out, (x,), bwd, "transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(out, tuple(ts), bwd, "concat")


def split(x: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into `sections` equal parts along `axis` (each differentiable)."""
    if x.data.shape[axis] % sections:
        raise ShapeError(f"cannot split axis of size {x.data.shape[axis]} into {sections} parts")
    parts = np.split(x.data, sections, axis=axis)
    out = []
    for i, p in enumerate(parts):
        def make_bwd(i=i, shape=p.shape):
            def bwd(g):
                gx = np.zeros_like(x.data)
                sl = [slice(None)] * x.data.ndim
                size = shape[axis]
                sl[axis] = slice(i * size, (i + 1) * size)
                gx[tuple(sl)] = g
                return (gx,)

            return bwd

        out.append(_finish(p.copy(), (x,), make_bwd(), "split"))
    return out


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=False)
    out = np.asarray(out, dtype=x.data.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.data.shape).astype(x.data.dtype),)

    return _finish(out, (x,), bwd, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)
