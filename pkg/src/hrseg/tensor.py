"""Dense tensor with reverse-mode automatic differentiation.

Float32 is the working precision for training; float64 is used when
verifying gradients against central differences (see ``grad_check``).
Tensors are immutable after construction except for the ``grad`` slot.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _recording_enabled() -> bool:
    return getattr(_state, "record", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    prev = _recording_enabled()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


def _nan_guard_enabled() -> bool:
    return getattr(_state, "nan_guard", False)


@contextlib.contextmanager
def trace_kinks(sink: list):
    """Collect the active-side patterns of nondifferentiable ops.

    Ops with kinks (ReLU) append which side of the kink each element took.
    grad_check compares patterns between the two central-difference
    evaluations: a mismatch means the stencil straddles a kink and the
    numeric estimate there is meaningless.
    """
    prev = getattr(_state, "kink_sink", None)
    _state.kink_sink = sink
    try:
        yield sink
    finally:
        _state.kink_sink = prev


def report_kink_pattern(pattern: np.ndarray):
    sink = getattr(_state, "kink_sink", None)
    if sink is not None:
        sink.append(pattern)


def _kink_patterns_differ(a: list, b: list) -> bool:
    if len(a) != len(b):
        return True
    return any(x.shape != y.shape or not np.array_equal(x, y) for x, y in zip(a, b))


@contextlib.contextmanager
def nan_guard():
    """Check every op output for NaN/Inf inside the block (debug mode)."""
    prev = _nan_guard_enabled()
    _state.nan_guard = True
    try:
        yield
    finally:
        _state.nan_guard = prev


class OpRecord:
    """One applied operation: inputs, and how to push gradient back to them.

    ``backward_fn(upstream)`` returns one gradient array per input (None for
    inputs that need no gradient). Saved intermediates live in the closure.
    """

    __slots__ = ("name", "inputs", "backward_fn")

    def __init__(self, name, inputs, backward_fn):
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn


class ComputationRecord:
    """Topologically ordered list of the operations behind one output."""

    def __init__(self, root: "Tensor"):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            if t._record is None:
                continue
            stack.append((t, True))
            for inp in t._record.inputs:
                if id(inp) not in visited:
                    stack.append((inp, False))
        self.order = order  # inputs always precede outputs


class Tensor:
    """Rank-N real array with shape, row-major data, and optional grad."""

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad=False, dtype=None):
        # ndarrays keep their float precision (float64 carries verification
        # mode through); lists and scalars default to the working float32.
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None

    # --- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype.name}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._record = None
        return t

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    # --- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self):
        return sum_all(self)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(name, out: np.ndarray):
    if _nan_guard_enabled() and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values in output of {name}")


def make_op(name, inputs, out_data, backward_fn) -> Tensor:
    """Wrap an op result, recording it when any input participates in a graph."""
    _check_finite(name, out_data)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    track = _recording_enabled() and any(
        t.requires_grad or t._record is not None for t in inputs
    )
    out.requires_grad = track
    out._record = OpRecord(name, inputs, backward_fn) if track else None
    return out


# --- construction -------------------------------------------------------------


def tensor_new(shape, fill=0.0, seed=0, requires_grad=False, dtype=None) -> Tensor:
    """Create a tensor with a constant or seeded-random fill.

    ``fill`` is a number, ``"random-uniform(lo,hi)"`` or
    ``"random-normal(mu,sigma)"``. Content is deterministic per (fill, seed).
    """
    shape = list(shape)
    if len(shape) == 0:
        raise ValueError("shape must have at least one dimension")
    for d in shape:
        if not isinstance(d, (int, np.integer)) or d < 1:
            raise ValueError(f"invalid dimension {d!r} in shape {shape}")
    dtype = dtype if dtype is not None else DEFAULT_DTYPE
    if isinstance(fill, str):
        kind, args = _parse_fill(fill)
        rng = np.random.Generator(np.random.PCG64(seed))
        if kind == "random-uniform":
            data = rng.uniform(args[0], args[1], size=shape)
        else:
            data = rng.normal(args[0], args[1], size=shape)
        data = data.astype(dtype)
    else:
        data = np.full(shape, float(fill), dtype=dtype)
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _parse_fill(fill: str):
    for kind in ("random-uniform", "random-normal"):
        if fill.startswith(kind + "(") and fill.endswith(")"):
            body = fill[len(kind) + 1 : -1]
            parts = [p.strip() for p in body.split(",")]
            if len(parts) != 2:
                break
            return kind, (float(parts[0]), float(parts[1]))
    raise ValueError(f"unrecognized fill spec {fill!r}")


# --- elementwise ops -----------------------------------------------------------


def _broadcast_info(a: Tensor, b: Tensor):
    """Allow equal shapes, scalars, or per-channel [C] against [N,C,H,W]."""
    if a.shape == b.shape:
        return None
    if b.ndim == 0 or b.size == 1:
        return "scalar"
    if a.ndim == 4 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "channel"
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(b_mode, grad):
    if b_mode == "scalar":
        return grad.sum()
    if b_mode == "channel":
        return grad.sum(axis=(0, 2, 3))
    return grad


def _expand_b(b_mode, b_data):
    if b_mode == "channel":
        return b_data.reshape(1, -1, 1, 1)
    return b_data


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add/sub/mul; ``b`` may be scalar or per-channel [C]."""
    mode = _broadcast_info(a, b)
    bd = _expand_b(mode, b.data)
    if op == "add":
        out = a.data + bd

        def backward_fn(g):
            return [g, _reduce_to(mode, g)]

    elif op == "sub":
        out = a.data - bd

        def backward_fn(g):
            return [g, -_reduce_to(mode, g)]

    elif op == "mul":
        out = a.data * bd

        def backward_fn(g, bd=bd, ad=a.data):
            return [g * bd, _reduce_to(mode, g * ad)]

    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return make_op(op, [a, b], out, backward_fn)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no tensor operand recorded)."""
    out = a.data * c

    def backward_fn(g):
        return [g * c]

    return make_op("scale", [a], out, backward_fn)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(a.data.sum(dtype=a.dtype))

    def backward_fn(g):
        return [np.broadcast_to(np.asarray(g, dtype=a.dtype), a.shape)]

    return make_op("sum", [a], out, backward_fn)


# --- reverse-mode traversal -----------------------------------------------------


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar; grads accumulate until ``zero_grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    if loss._record is None:
        raise ValueError("loss has no computation record to backpropagate through")
    record = ComputationRecord(loss)
    # Pending buffers hold this call's gradients only; they merge into .grad at
    # the end, so a second backward() on the same graph adds an identical
    # contribution (accumulation is additive).
    pending = {id(loss): np.ones_like(loss.data)}
    totals = []  # (tensor, full per-call gradient), in completion order
    for t in reversed(record.order):
        g = pending.pop(id(t), None)
        if g is None:
            continue  # dead branch: nothing downstream consumed this op
        if t.requires_grad:
            totals.append((t, g))
        grads = t._record.backward_fn(g)
        for inp, gi in zip(t._record.inputs, grads):
            if gi is None or not (inp.requires_grad or inp._record is not None):
                continue
            gi = np.asarray(gi, dtype=inp.dtype)
            if gi.shape != inp.shape:
                gi = gi.reshape(inp.shape)
            if inp._record is not None:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
            else:
                inp.grad = gi if inp.grad is None else inp.grad + gi
    for t, g in totals:
        t.grad = g if t.grad is None else t.grad + g


# --- finite-difference oracle ----------------------------------------------------


@dataclass
class CheckReport:
    """Result of one analytic-vs-numeric gradient comparison."""

    name: str
    max_rel_err: float
    passed: bool
    num_checked: int
    worst_index: tuple = ()
    num_skipped: int = 0  # probes whose stencil straddled a kink

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        skipped = f", {self.num_skipped} kink-skipped" if self.num_skipped else ""
        return f"{self.name}: max_rel_err={self.max_rel_err:.3e} ({self.num_checked} probes{skipped}) {status}"


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    fn,
    input: Tensor,
    h: float = 1e-4,
    tol: float = 1e-3,
    name: str = "grad_check",
    min_magnitude: float = 0.0,
    max_probes: int | None = None,
    probe_seed: int = 0,
    kink_filter: bool = False,
) -> CheckReport:
    """Compare the analytic gradient of ``fn`` against central differences.

    ``fn`` maps one tensor to a scalar tensor and is evaluated in float64.
    Entries with |value| <= ``min_magnitude`` are skipped; set it to ~1e-5 when
    ``fn`` contains ReLU so central differences never straddle a kink at the
    input itself. ``kink_filter=True`` additionally drops probes whose +/-h
    evaluations land on different sides of any interior ReLU kink, where the
    central-difference estimate is invalid. ``max_probes`` caps the number of
    perturbed entries (deterministic choice) to bound runtime on large inputs.
    """
    x = Tensor(input.data.astype(np.float64), requires_grad=True)
    out = fn(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check requires fn to produce a scalar tensor")
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.zero_grad()

    flat = x.data.reshape(-1)
    candidates = np.nonzero(np.abs(flat) > min_magnitude)[0]
    if max_probes is not None and candidates.size > max_probes:
        rng = np.random.Generator(np.random.PCG64(probe_seed))
        candidates = rng.choice(candidates, size=max_probes, replace=False)
        candidates.sort()

    max_err = 0.0
    worst = ()
    skipped = 0
    base = flat.copy()
    for idx in candidates:
        flat[idx] = base[idx] + h
        plus_kinks: list = []
        with no_grad(), trace_kinks(plus_kinks):
            f_plus = fn(Tensor(x.data, dtype=np.float64)).item()
        flat[idx] = base[idx] - h
        minus_kinks: list = []
        with no_grad(), trace_kinks(minus_kinks):
            f_minus = fn(Tensor(x.data, dtype=np.float64)).item()
        flat[idx] = base[idx]
        if kink_filter and _kink_patterns_differ(plus_kinks, minus_kinks):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = _rel_err(float(analytic.reshape(-1)[idx]), numeric)
        if err > max_err:
            max_err = err
            worst = np.unravel_index(idx, x.shape)
    return CheckReport(
        name=name,
        max_rel_err=max_err,
        passed=max_err <= tol,
        num_checked=int(candidates.size) - skipped,
        worst_index=tuple(int(i) for i in worst),
        num_skipped=skipped,
    )
