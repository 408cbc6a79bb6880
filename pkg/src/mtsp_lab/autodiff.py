"""Minimal dense float64 tensor graph with reverse-mode differentiation.

The op set is deliberately small: matmul, add, multiply, tanh, row softmax,
log, exp, sum, mean, max-with-index, concatenate, gather, plus an explicit
``detach`` marker.  Every op records enough structure for a reverse sweep
(``backward``/``vjp_from``) and a forward tangent sweep (``jvp``).  All
published results are checked finite; violations raise instead of leaking
NaN/Inf downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


_ACTIVE_DTYPE = np.float64


class precision:
    """Temporarily change the dtype new tensors are created with.

    Used by the finite-difference oracle to evaluate probe points in
    extended precision, which pushes the rounding noise of the central
    difference well below the comparison tolerance.  Reverse sweeps are
    unaffected (gradients stay float64).
    """

    def __init__(self, dtype):
        self.dtype = dtype
        self._saved = None

    def __enter__(self):
        global _ACTIVE_DTYPE
        self._saved = _ACTIVE_DTYPE
        _ACTIVE_DTYPE = self.dtype
        return self

    def __exit__(self, *exc):
        global _ACTIVE_DTYPE
        _ACTIVE_DTYPE = self._saved
        return False


class AutodiffError(Exception):
    """Base class for graph construction and differentiation errors."""


class ShapeMismatch(AutodiffError):
    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NonFiniteValue(AutodiffError):
    def __init__(self, op: str):
        super().__init__(f"{op} produced a non-finite value")
        self.op = op


class NonScalarOutput(AutodiffError):
    pass


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray.  ``parents``/``_vjps``/``_jvp``
    are the recorded tape; leaves (constants and parameters) have none.
    Tensors are treated as immutable during the forward/backward of a
    single sample; parameter leaves are only rewritten between samples.
    """

    __slots__ = ("data", "op", "parents", "_vjps", "_jvp", "tie_flag")

    def __init__(self, data, op="const", parents=(), vjps=(), jvp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.op = op
        self.parents = parents
        self._vjps = vjps
        self._jvp = jvp
        self.tie_flag = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarOutput(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"


def const(values) -> Tensor:
    return Tensor(values, op="const")


def _publish(data, op, parents, vjps, jvp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(op)
    return Tensor(data, op=op, parents=parents, vjps=vjps, jvp=jvp)


def _tan(t, parent):
    # None tangent means an exact zero; materialize only when needed.
    return np.zeros_like(parent.data) if t is None else t


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Matrix/vector product.  ``transpose_b`` multiplies by b.T (2-D b only)."""
    A, B = a.data, b.data
    if transpose_b and B.ndim != 2:
        raise ShapeMismatch("matmul", f"transpose_b requires 2-D b, got {B.shape}")
    Bm = B.T if transpose_b else B
    if A.ndim not in (1, 2) or B.ndim not in (1, 2):
        raise ShapeMismatch("matmul", f"operands must be 1-D or 2-D, got {A.shape} @ {B.shape}")
    if A.shape[-1] != Bm.shape[0]:
        raise ShapeMismatch("matmul", f"inner dims differ: {A.shape} @ {Bm.shape}")
    out = A @ Bm

    def vjp_a(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ Bm.T
        if A.ndim == 1 and B.ndim == 2:
            return g @ Bm.T
        if A.ndim == 2 and B.ndim == 1:
            return np.outer(g, B)
        return g * B  # 1-D @ 1-D

    def vjp_b(g):
        if A.ndim == 2 and B.ndim == 2:
            gb = A.T @ g
            return gb.T if transpose_b else gb
        if A.ndim == 1 and B.ndim == 2:
            gb = np.outer(A, g)
            return gb.T if transpose_b else gb
        if A.ndim == 2 and B.ndim == 1:
            return A.T @ g
        return g * A

    def jvp(tans):
        ta, tb = tans
        out_t = np.zeros_like(out)
        if ta is not None:
            out_t = out_t + ta @ Bm
        if tb is not None:
            tbm = tb.T if transpose_b else tb
            out_t = out_t + A @ tbm
        return out_t

    return _publish(out, "matmul", (a, b), (vjp_a, vjp_b), jvp)


_ADD_MUL_DOC = """shapes must be equal, or one operand a scalar, or b a row bias
broadcast over a 2-D a (that is the full extent of supported broadcasting)."""


def _broadcast_ok(sa, sb) -> bool:
    if sa == sb:
        return True
    if np.prod(sa, dtype=int) == 1 or np.prod(sb, dtype=int) == 1:
        return True
    return len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if np.prod(shape, dtype=int) == 1:
        return np.sum(g).reshape(shape)
    # row bias (n,) accumulated over a (m, n) cotangent
    return np.sum(g, axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeMismatch("add", f"{a.shape} + {b.shape}; " + _ADD_MUL_DOC)
    out = a.data + b.data

    def jvp(tans):
        ta, tb = tans
        t = np.zeros_like(out)
        if ta is not None:
            t = t + ta
        if tb is not None:
            t = t + tb
        return t

    return _publish(out, "add", (a, b),
                    (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
                    jvp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeMismatch("multiply", f"{a.shape} * {b.shape}; " + _ADD_MUL_DOC)
    out = a.data * b.data

    def jvp(tans):
        ta, tb = tans
        t = np.zeros_like(out)
        if ta is not None:
            t = t + ta * b.data
        if tb is not None:
            t = t + a.data * tb
        return t

    return _publish(out, "multiply", (a, b),
                    (lambda g: _unbroadcast(g * b.data, a.shape),
                     lambda g: _unbroadcast(g * a.data, b.shape)),
                    jvp)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _publish(y, "tanh", (a,),
                    (lambda g: g * (1.0 - y * y),),
                    lambda tans: (1.0 - y * y) * _tan(tans[0], a))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by max subtraction."""
    if a.data.ndim != 2:
        raise ShapeMismatch("softmax", f"expected 2-D input, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return y * (g - np.sum(g * y, axis=1, keepdims=True))

    def jvp(tans):
        t = _tan(tans[0], a)
        return y * (t - np.sum(y * t, axis=1, keepdims=True))

    return _publish(y, "softmax", (a,), (vjp,), jvp)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _publish(y, "log", (a,),
                    (lambda g: g / a.data,),
                    lambda tans: _tan(tans[0], a) / a.data)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _publish(y, "exponent", (a,),
                    (lambda g: g * y,),
                    lambda tans: y * _tan(tans[0], a))


def tsum(a: Tensor) -> Tensor:
    out = np.sum(a.data)
    return _publish(out, "sum", (a,),
                    (lambda g: np.broadcast_to(g, a.shape).copy() if a.shape else np.asarray(g),),
                    lambda tans: np.sum(_tan(tans[0], a)))


def tmean(a: Tensor) -> Tensor:
    out = np.mean(a.data)
    n = a.data.size
    return _publish(out, "mean", (a,),
                    (lambda g: np.broadcast_to(g / n, a.shape).copy() if a.shape else np.asarray(g),),
                    lambda tans: np.mean(_tan(tans[0], a)))


def max_with_index(a: Tensor) -> tuple[Tensor, int]:
    """Maximum over all entries plus its flat index (ties: lowest index).

    A near-tie at the top (gap < 1e-12) marks the node non-smooth, which
    ``finite_diff_check`` surfaces in its report.
    """
    flat = a.data.ravel()
    idx = int(np.argmax(flat))
    out = flat[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        z.ravel()[idx] = g
        return z

    node = _publish(np.asarray(out), "max_with_index", (a,), (vjp,),
                    lambda tans: np.asarray(_tan(tans[0], a).ravel()[idx]))
    if flat.size > 1:
        top2 = np.partition(flat, -2)[-2]
        if out - top2 < 1e-12:
            node.tie_flag = True
    return node, idx


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[k], offsets[k + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    def jvp(tans):
        return np.concatenate([_tan(t, p) for t, p in zip(tans, tensors)], axis=axis)

    return _publish(out, "concatenate", tensors,
                    tuple(make_vjp(k) for k in range(len(tensors))), jvp)


def gather(a: Tensor, rows, cols) -> Tensor:
    """Pick entries a[rows[k], cols[k]] of a 2-D tensor into a 1-D result."""
    if a.data.ndim != 2:
        raise ShapeMismatch("gather", f"expected 2-D input, got {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeMismatch("gather", f"index vectors differ: {rows.shape} vs {cols.shape}")
    out = a.data[rows, cols]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (rows, cols), g)
        return z

    return _publish(out, "gather", (a,), (vjp,),
                    lambda tans: _tan(tans[0], a)[rows, cols])


def detach(a: Tensor) -> Tensor:
    """A constant view of ``a``: same values, no gradient flow through it."""
    return Tensor(a.data, op="detach")


# small conveniences built from the published ops
def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, const(s))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


# ---------------------------------------------------------------------------
# parameters and gradients
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered, named collection of trainable leaf tensors.

    Iteration order is insertion order and therefore deterministic for a
    fixed construction sequence.  ``role`` tags the store as holding the
    allocation-policy or the surrogate parameters.
    """

    def __init__(self, role: str):
        if role not in ("policy", "surrogate"):
            raise ValueError(f"unknown ParamStore role {role!r}")
        self.role = role
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), op="param")
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self):
        return list(self._entries.values())

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((name, t.shape) for name, t in self._entries.items())

    @property
    def total_size(self) -> int:
        return sum(t.size for t in self._entries.values())

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._entries.values()])

    def assign_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.total_size,):
            raise ShapeMismatch("assign_flat", f"expected ({self.total_size},), got {values.shape}")
        off = 0
        for t in self._entries.values():
            np.copyto(t.data, values[off:off + t.size].reshape(t.shape))
            off += t.size

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, t in self._entries.items():
            out[name] = np.asarray(flat[off:off + t.size]).reshape(t.shape)
            off += t.size
        return out

    def copy(self) -> "ParamStore":
        other = ParamStore(self.role)
        for name, t in self._entries.items():
            other.add(name, t.data.copy())
        return other


@dataclass
class GradientSample:
    """One flat gradient draw, aligned with a ParamStore layout."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        want = sum(int(np.prod(s, dtype=int)) for _, s in self.layout)
        if self.values.shape != (want,):
            raise ShapeMismatch("GradientSample", f"expected ({want},), got {self.values.shape}")

    def by_name(self, name: str) -> np.ndarray:
        off = 0
        for n, s in self.layout:
            size = int(np.prod(s, dtype=int))
            if n == name:
                return self.values[off:off + size].reshape(s)
            off += size
        raise KeyError(name)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children


def _accumulate(root: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
    order = _topo(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or not node.parents:
            continue
        for parent, vjp in zip(node.parents, node._vjps):
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    return grads


def _collect(grads: dict[int, np.ndarray], wrt: ParamStore) -> GradientSample:
    parts = []
    for t in wrt.tensors():
        g = grads.get(id(t))
        parts.append(np.zeros(t.size) if g is None else np.asarray(g, dtype=np.float64).ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteValue("backward")
    return GradientSample(flat, wrt.layout())


def backward(output: Tensor, wrt: ParamStore) -> GradientSample:
    """Exact reverse-mode gradient of a scalar output w.r.t. a ParamStore.

    Parameters absent from the recorded graph get gradient zero.
    """
    if output.data.size != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
    seed = np.ones_like(output.data)
    return _collect(_accumulate(output, seed), wrt)


def vjp_from(node: Tensor, cotangent: np.ndarray, wrt: ParamStore) -> GradientSample:
    """Reverse sweep seeded with an explicit cotangent at an interior node."""
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != node.shape:
        raise ShapeMismatch("vjp_from", f"cotangent {cotangent.shape} vs node {node.shape}")
    return _collect(_accumulate(node, cotangent), wrt)


def jvp(node: Tensor, wrt: ParamStore, direction: GradientSample) -> np.ndarray:
    """Forward tangent sweep: directional derivative of ``node`` along
    ``direction`` in parameter space."""
    if direction.layout != wrt.layout():
        raise ShapeMismatch("jvp", "direction layout does not match the store")
    seeds = wrt.unflatten(direction.values)
    by_id = {id(t): seeds[name] for name, t in wrt.items()}
    tans: dict[int, np.ndarray] = {}
    for n in _topo(node):
        if not n.parents:
            t = by_id.get(id(n))
            if t is not None:
                tans[id(n)] = t
            continue
        parent_tans = [tans.get(id(p)) for p in n.parents]
        if all(t is None for t in parent_tans):
            continue
        if n._jvp is None:
            raise AutodiffError(f"op {n.op!r} has no tangent rule")
        tans[id(n)] = np.asarray(n._jvp(parent_tans), dtype=np.float64)
    t = tans.get(id(node))
    return np.zeros_like(node.data) if t is None else t


# ---------------------------------------------------------------------------
# program evaluation and the finite-difference oracle
# ---------------------------------------------------------------------------

def forward_graph_eval(program, inputs, params: ParamStore) -> Tensor:
    """Evaluate ``program(inputs, params)`` where inputs are wrapped as
    constants.  The returned tensor carries the tape for ``backward``."""
    wrapped = [x if isinstance(x, Tensor) else const(x) for x in inputs]
    out = program(wrapped, params)
    if not isinstance(out, Tensor):
        raise AutodiffError("program must return a Tensor")
    return out


def _tie_flags(root: Tensor) -> tuple[str, ...]:
    return tuple(sorted({n.op for n in _topo(root) if n.tie_flag}))


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    non_smooth_ops: tuple[str, ...]
    n_params: int

    def __str__(self):
        flag = " (non-smooth: " + ",".join(self.non_smooth_ops) + ")" if self.non_smooth_ops else ""
        return f"finite-diff max rel err {self.max_rel_err:.3e} -> {'pass' if self.passed else 'FAIL'}{flag}"


def finite_diff_check(program, params: ParamStore, eps: float = 1e-5,
                      tol: float = 1e-4) -> FiniteDiffReport:
    """Compare ``backward`` against central differences, elementwise.

    ``program(params) -> Tensor`` must be scalar-valued.  Relative error
    uses max(|a|, |b|, 1e-8) as denominator.  Non-finite differences count
    as failure; hard-max ties encountered in the forward pass are reported
    as non-smooth.
    """
    out = program(params)
    analytic = backward(out, params).values
    non_smooth = _tie_flags(out)

    max_rel = 0.0
    finite = True
    k = 0
    for _, t in params.items():
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = program(params).item()
            flat[i] = orig - eps
            f_minus = program(params).item()
            flat[i] = orig
            d = (f_plus - f_minus) / (2.0 * eps)
            if not np.isfinite(d):
                finite = False
                continue
            a = analytic[k + i]
            max_rel = max(max_rel, abs(d - a) / max(abs(d), abs(a), 1e-8))
        k += flat.size
    passed = finite and max_rel <= tol
    return FiniteDiffReport(max_rel_err=max_rel, passed=passed,
                            non_smooth_ops=non_smooth, n_params=params.total_size)
