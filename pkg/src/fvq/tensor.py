"""Dense tensors with reverse-mode autodiff on a dynamic tape.

Every differentiable computation in this package runs through the ops in
this module. Results are recorded as nodes on a thread-local tape
(append-only, so reverse append order is a valid backward order), and
``backward`` walks that tape once to fill in leaf gradients. Default
precision is float64; float32 is accepted for speed but the test suites
assume f64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float64

_DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: backward on an empty/spent tape, non-scalar loss, etc."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every op result (slow, for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class _Node:
    __slots__ = ("inputs", "vjp", "leaf")

    def __init__(self, inputs, vjp, leaf=None):
        self.inputs = inputs  # node ids of the inputs, -1 for constants
        self.vjp = vjp        # grad_out -> tuple of input grads, None for leaves
        self.leaf = leaf      # owning Tensor, set on leaf nodes only


class Tape:
    """Append-only computation record; one backward pass per recording.

    A tape and the tensors recorded on it belong to a single thread.
    ``reset`` clears the record so the same tape object can be reused;
    tensors from before the reset re-register as fresh leaves on next use.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._epoch = 0
        self._spent = False

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._epoch += 1
        self._spent = False

    def _append(self, node: _Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def backward(self, loss: "Tensor") -> None:
        if self._spent:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.values.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.values.shape}")
        if loss._idx is None or loss._tape is not self or loss._epoch != self._epoch:
            raise TapeError("loss is not recorded on this tape (empty record?)")
        self._spent = True
        grads: list = [None] * (loss._idx + 1)
        grads[loss._idx] = np.ones_like(loss.values)
        for i in range(loss._idx, -1, -1):
            g = grads[i]
            grads[i] = None
            if g is None:
                continue
            node = self._nodes[i]
            if node.vjp is None:
                t = node.leaf
                t.grad = g if t.grad is None else t.grad + g
                continue
            for inp, ig in zip(node.inputs, node.vjp(g)):
                if inp < 0 or ig is None:
                    continue
                grads[inp] = ig if grads[inp] is None else grads[inp] + ig


_state = threading.local()


def active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


@contextmanager
def use_tape(tape: Tape):
    """Record onto ``tape`` within the block (tapes are thread-confined)."""
    prev = getattr(_state, "tape", None)
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextmanager
def no_grad():
    """Disable recording within the block; ops return constant tensors."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def _recording() -> bool:
    return not getattr(_state, "no_grad", False)


class Tensor:
    """Dense n-d array plus a slot in the active computation record.

    ``values`` is never mutated by ops; optimizers replace the array
    wholesale so detached views stay valid.
    """

    __slots__ = ("values", "requires_grad", "grad", "_tape", "_epoch", "_idx")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype or DEFAULT_DTYPE)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._epoch = -1
        self._idx = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are lifted to constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _node_id(t: Tensor, tape: Tape) -> int:
    """Node id of ``t`` on ``tape``, registering a leaf on first use."""
    if t._tape is tape and t._epoch == tape._epoch and t._idx is not None:
        return t._idx
    if not t.requires_grad:
        return -1
    idx = tape._append(_Node((), None, leaf=t))
    t._tape, t._epoch, t._idx = tape, tape._epoch, idx
    return idx


def _result(values: np.ndarray, inputs: list[Tensor], vjp) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values produced by an op")
    out = Tensor(values)
    if not _recording():
        return out
    tape = active_tape()
    ids = tuple(_node_id(t, tape) for t in inputs)
    if all(i < 0 for i in ids):
        return out
    out.requires_grad = True
    out._tape, out._epoch = tape, tape._epoch
    out._idx = tape._append(_Node(ids, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a.values, b.values, "add")
    av, bv = a.values, b.values
    return _result(av + bv, [a, b],
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a.values, b.values, "sub")
    av, bv = a.values, b.values
    return _result(av - bv, [a, b],
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a.values, b.values, "mul")
    av, bv = a.values, b.values
    return _result(av * bv, [a, b],
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a.values, b.values, "div")
    av, bv = a.values, b.values
    return _result(av / bv, [a, b],
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * av / (bv * bv), bv.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.values * s, [a], lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    av = a.values
    return _result(av * av, [a], lambda g: (g * 2.0 * av,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)
    return _result(out, [a], lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _result(out, [a], lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _result(out, [a], lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# linear algebra and structure ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} are not m×k · k×n")
    return _result(av @ bv, [a, b], lambda g: (g @ bv.T, av.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on stacks of matrices with equal leading dims."""
    av, bv = a.values, b.values
    if av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"bmm: shapes {av.shape} and {bv.shape} are incompatible")
    return _result(np.matmul(av, bv), [a, b],
                   lambda g: (np.matmul(g, bv.swapaxes(-1, -2)),
                              np.matmul(av.swapaxes(-1, -2), g)))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    av = a.values
    _check_axis(av, axis)

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return _result(av.sum(axis=axis, keepdims=keepdims), [a], vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    av = a.values
    _check_axis(av, axis)
    count = av.size if axis is None else av.shape[axis]

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg / count, av.shape).copy(),)

    return _result(av.mean(axis=axis, keepdims=keepdims), [a], vjp)


def _check_axis(av, axis):
    if axis is not None and not -av.ndim <= axis < av.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {av.ndim}")


def gather_rows(table: Tensor, indices) -> Tensor:
    """Rows ``table[indices[i]]``; backward scatter-adds into those rows."""
    idx = np.asarray(indices, dtype=np.intp)
    tv = table.values
    if idx.ndim != 1:
        raise ShapeError(f"indices must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise IndexError(f"index out of range [0, {tv.shape[0]}) in gather_rows")

    def vjp(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(tv[idx], [table], vjp)


def reshape(a: Tensor, shape) -> Tensor:
    av = a.values
    return _result(av.reshape(shape), [a], lambda g: (g.reshape(av.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    av = a.values
    ax = tuple(axes) if axes is not None else tuple(reversed(range(av.ndim)))
    inv = np.argsort(ax)
    return _result(av.transpose(ax), [a], lambda g: (g.transpose(inv),))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    av = a.values

    def vjp(g):
        ga = np.zeros_like(av)
        ga[:, start:stop] = g
        return (ga,)

    return _result(av[:, start:stop], [a], vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    av = a.values

    def vjp(g):
        ga = np.zeros_like(av)
        ga[start:stop] = g
        return (ga,)

    return _result(av[start:stop], [a], vjp)


def concat_rows(parts: list[Tensor]) -> Tensor:
    sizes = [p.values.shape[0] for p in parts]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(sizes)))

    return _result(np.concatenate([p.values for p in parts], axis=0), list(parts), vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    sizes = [p.values.shape[1] for p in parts]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offs[i]:offs[i + 1]] for i in range(len(sizes)))

    return _result(np.concatenate([p.values for p in parts], axis=1), list(parts), vjp)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of a 2-d tensor along axis 0."""
    av = a.values
    n = av.shape[0]
    return _result(np.tile(av, (reps, 1)), [a],
                   lambda g: (g.reshape(reps, n, -1).sum(axis=0),))


def detach(a: Tensor) -> Tensor:
    """Same values, constant with respect to backward."""
    return Tensor(a.values)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from ``loss`` over its tape."""
    if loss._tape is None:
        raise TapeError("loss has no computation record (all-constant inputs?)")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f, x: Tensor, eps: float = 1e-5, coords=None) -> float:
    """Max relative error between autodiff and central differences at ``x``.

    ``f`` maps a Tensor to a scalar Tensor. ``coords`` optionally limits the
    comparison to a subset of flat coordinate indices (for large inputs).
    Relative error uses denominator max(|grad|, |fd|, 1e-8) per coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with use_tape(Tape()):
        probe = Tensor(x.values.copy(), requires_grad=True)
        out = f(probe)
        backward(out)
        grad = np.zeros_like(probe.values) if probe.grad is None else probe.grad
    flat = x.values.reshape(-1)
    gflat = grad.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    def eval_at(i, delta):
        shifted = flat.copy()
        shifted[i] += delta
        with no_grad():
            return f(Tensor(shifted.reshape(x.values.shape))).item()

    worst = 0.0
    for i in coords:
        fd = (eval_at(i, eps) - eval_at(i, -eps)) / (2.0 * eps)
        denom = max(abs(gflat[i]), abs(fd), 1e-8)
        worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
