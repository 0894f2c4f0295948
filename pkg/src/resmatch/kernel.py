"""Dense float64 numeric kernel with a small reverse-mode tape.

Values are plain ``numpy.ndarray`` objects wrapped in :class:`Var`.  A
:class:`Tape` records every operation whose output depends on a
gradient-requiring input; :meth:`Tape.backward` then walks the record in
reverse and accumulates gradients (``+=``) into each input's ``grad`` slot.
A tape built with ``record=False`` evaluates the same graph without keeping
anything, which is what the finite-difference checker uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

DTYPE = np.float64
DEFAULT_SLOPE = 0.01


# ---------------------------------------------------------------------------
# pure kernels
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def softmax_rows(s: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row softmax of ``s / scale`` with max subtraction."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    z = s / scale if scale != 1.0 else s
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def lrelu(x: np.ndarray, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def logsumexp(x: np.ndarray, axis: int, keepdims: bool = True) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Var:
    """A value on (or off) a tape, with a gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"


class Param(Var):
    """Learnable leaf.  The gradient slot persists across tapes."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


@dataclass
class _Node:
    out: Var
    parents: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records operations for one forward pass."""

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list[_Node] = []
        self._done = False

    def __len__(self) -> int:
        return len(self._nodes)

    def op(self, value: np.ndarray, parents: Sequence[Var], vjp) -> Var:
        """Register a custom operation.

        ``vjp`` maps the upstream gradient of the output to one gradient (or
        ``None``) per parent, each already shaped like that parent.
        """
        needs = self.record and any(p.requires_grad for p in parents)
        out = Var(value, requires_grad=needs)
        if needs:
            self._nodes.append(_Node(out, tuple(parents), vjp))
        return out

    def backward(self, out: Var, upstream: np.ndarray | None = None) -> None:
        if self._done:
            raise UsageError("tape already consumed by a backward pass")
        if not self._nodes or not out.requires_grad:
            raise UsageError("backward called before a recorded forward pass produced this output")
        if upstream is None:
            if out.value.size != 1:
                raise UsageError("implicit upstream gradient needs a scalar output")
            upstream = np.ones_like(out.value)
        upstream = np.asarray(upstream, dtype=DTYPE)
        if upstream.shape != out.shape:
            raise ShapeError(f"upstream gradient {upstream.shape} vs output {out.shape}")
        out.grad = upstream if out.grad is None else out.grad + upstream
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                p.grad = gp if p.grad is None else p.grad + gp
            if not isinstance(node.out, Param):
                node.out.grad = None
        self._nodes.clear()
        self._done = True

    # -- elementwise / broadcasting ------------------------------------------

    def add(self, a, b) -> Var:
        a, b = as_var(a), as_var(b)
        return self.op(
            a.value + b.value,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    def sub(self, a, b) -> Var:
        a, b = as_var(a), as_var(b)
        return self.op(
            a.value - b.value,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        )

    def mul(self, a, b) -> Var:
        a, b = as_var(a), as_var(b)
        av, bv = a.value, b.value
        return self.op(
            av * bv,
            (a, b),
            lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
        )

    def scale(self, a: Var, c: float) -> Var:
        return self.op(a.value * c, (a,), lambda g: (g * c,))

    def lrelu(self, x: Var, slope: float = DEFAULT_SLOPE) -> Var:
        mask = x.value >= 0
        return self.op(
            np.where(mask, x.value, slope * x.value),
            (x,),
            lambda g: (np.where(mask, g, slope * g),),
        )

    def exp(self, x: Var) -> Var:
        y = np.exp(x.value)
        return self.op(y, (x,), lambda g: (g * y,))

    def log(self, x: Var) -> Var:
        xv = x.value
        return self.op(np.log(xv), (x,), lambda g: (g / xv,))

    # -- reductions -----------------------------------------------------------

    def sum(self, x: Var) -> Var:
        shape = x.shape
        return self.op(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, x: Var) -> Var:
        n = x.value.size
        shape = x.shape
        return self.op(
            np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),)
        )

    def logsumexp(self, x: Var, axis: int) -> Var:
        y = logsumexp(x.value, axis=axis, keepdims=True)
        xv = x.value

        def vjp(g):
            return (g * np.exp(xv - y),)

        return self.op(y, (x,), vjp)

    def softmax(self, x: Var, scale: float = 1.0) -> Var:
        """Softmax over the last axis of ``x / scale``."""
        y = softmax_rows(x.value, scale)

        def vjp(g):
            return ((g - (g * y).sum(axis=-1, keepdims=True)) * y / scale,)

        return self.op(y, (x,), vjp)

    # -- linear algebra -------------------------------------------------------

    def matmul(self, a, b) -> Var:
        a, b = as_var(a), as_var(b)
        av, bv = a.value, b.value
        out = matmul(av, bv)

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
            gb = np.matmul(np.swapaxes(av, -1, -2), g) if b.requires_grad else None
            return (
                None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape),
            )

        return self.op(out, (a, b), vjp)

    def linear(self, x: Var, weight: Var, bias: Var | None) -> Var:
        """``x @ weight.T + bias`` over the last axis of ``x``."""
        xv, wv = x.value, weight.value
        if xv.shape[-1] != wv.shape[1]:
            raise ShapeError(f"linear: input {xv.shape} vs weight {wv.shape}")
        out = xv @ wv.T
        if bias is not None:
            out = out + bias.value

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = xv.reshape(-1, xv.shape[-1])
            gx = (g @ wv) if x.requires_grad else None
            gw = g2.T @ x2
            grads = [gx, gw]
            if bias is not None:
                grads.append(g2.sum(axis=0))
            return grads

        parents = (x, weight) if bias is None else (x, weight, bias)
        return self.op(out, parents, vjp)

    # -- shape ----------------------------------------------------------------

    def reshape(self, x: Var, shape: tuple) -> Var:
        old = x.shape
        return self.op(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))

    def transpose(self, x: Var, axes: tuple) -> Var:
        inv = tuple(np.argsort(axes))
        return self.op(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))

    def concat(self, xs: Sequence[Var], axis: int = -1) -> Var:
        xs = [as_var(x) for x in xs]
        sizes = [x.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))

        return self.op(np.concatenate([x.value for x in xs], axis=axis), xs, vjp)

    def gather(self, x: Var, idx: np.ndarray, axis: int) -> Var:
        """``x.take(idx, axis)``; backward scatter-adds into the source."""
        axis = axis % x.value.ndim
        shape = x.shape

        def vjp(g):
            gx = np.zeros(shape, dtype=DTYPE)
            # move the gathered axes to the front for np.add.at
            src = np.moveaxis(gx, axis, 0)
            gi = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
            np.add.at(src, idx, gi)
            return (gx,)

        return self.op(np.take(x.value, idx, axis=axis), (x,), vjp)

    def take_along(self, x: Var, idx: np.ndarray, axis: int = -1) -> Var:
        shape = x.shape

        def vjp(g):
            gx = np.zeros(shape, dtype=DTYPE)
            _add_along_axis(gx, np.broadcast_to(idx, g.shape), g, axis)
            return (gx,)

        return self.op(np.take_along_axis(x.value, idx, axis=axis), (x,), vjp)

    def pick(self, x: Var, rows: np.ndarray, cols: np.ndarray) -> Var:
        """``x[rows, cols]`` for a 2-D ``x``."""
        shape = x.shape

        def vjp(g):
            gx = np.zeros(shape, dtype=DTYPE)
            np.add.at(gx, (rows, cols), g)
            return (gx,)

        return self.op(x.value[rows, cols], (x,), vjp)


def _add_along_axis(dst: np.ndarray, idx: np.ndarray, src: np.ndarray, axis: int) -> None:
    axis = axis % dst.ndim
    grids = list(np.indices(idx.shape, sparse=True))
    grids[axis] = idx
    np.add.at(dst, tuple(grids), src)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, out_dim: int, in_dim: int, a: float = math.sqrt(5.0)):
    """He-uniform with negative slope ``a``; the default gives bound 1/sqrt(in_dim)."""
    bound = math.sqrt(6.0 / ((1.0 + a**2) * in_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


class Linear:
    """Affine map ``x @ weight.T + bias``."""

    def __init__(self, weight, bias=None, name: str = "linear"):
        weight = np.asarray(weight, dtype=DTYPE)
        if weight.ndim != 2:
            raise ShapeError("weight must be 2-D (out x in)")
        if bias is None:
            bias = np.zeros(weight.shape[0])
        bias = np.asarray(bias, dtype=DTYPE)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}")
        self.name = name
        self.weight = Param(weight, name=f"{name}.weight")
        self.bias = Param(bias, name=f"{name}.bias")

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int, name: str = "linear"):
        return cls(kaiming_uniform(rng, out_dim, in_dim), np.zeros(out_dim), name=name)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, tape: Tape, x: Var) -> Var:
        return tape.linear(x, self.weight, self.bias)

    def params(self) -> dict[str, Param]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


class Mlp:
    """Linear layers with leaky ReLU between them (none after the last)."""

    def __init__(self, layers: Sequence[Linear], slope: float = DEFAULT_SLOPE, name: str = "mlp"):
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        if not 0.0 < slope < 1.0:
            raise ValueError("leaky ReLU slope must be in (0, 1)")
        self.layers = list(layers)
        self.slope = slope
        self.name = name

    @classmethod
    def init(cls, rng: np.random.Generator, dims: Sequence[int], slope: float = DEFAULT_SLOPE, name: str = "mlp"):
        layers = [
            Linear.init(rng, a, b, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(dims, dims[1:]))
        ]
        return cls(layers, slope=slope, name=name)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, tape: Tape, x: Var) -> Var:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.in_dim}")
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(tape, h)
            if i != last:
                h = tape.lrelu(h, self.slope)
        return h

    def params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for layer in self.layers:
            out.update(layer.params())
        return out


def mlp_forward(m: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate an MLP on a plain array without recording anything."""
    return m(Tape(record=False), Var(x)).value


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.errors.items() if e > self.tolerance]

    def summary(self) -> str:
        name, err = self.worst
        status = "PASS" if self.passed else "FAIL " + ",".join(self.failures)
        return f"{status} params={len(self.errors)} worst={name}:{err:.3e} tol={self.tolerance:g}"


def grad_check(
    loss_fn: Callable[[Tape], Var],
    params: Mapping[str, Var],
    tolerance: float,
    step: float = 1e-5,
    zero_floor: float = 1e-5,
    refine: Sequence[float] = (1e-6, 1e-7),
) -> GradCheckReport:
    """Compare tape gradients of a scalar loss with central differences.

    ``loss_fn`` builds the loss on the tape it is given.  Each entry of
    ``params`` must be a gradient-requiring leaf used by ``loss_fn``.  The
    error for one tensor is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, floor)`` with ``floor = zero_floor * max(1, |loss|)``; the
    floor keeps identically-zero gradients (e.g. a key bias under softmax)
    from dividing differencing noise by zero.

    Tensors that fail at ``step`` are re-differenced at each step in
    ``refine`` and keep the smallest error; pass ``refine=()`` to disable.
    """
    for p in params.values():
        if not p.requires_grad:
            raise UsageError(f"{p!r} does not require gradients")
        p.grad = np.zeros_like(p.value)

    tape = Tape()
    loss = loss_fn(tape)
    if not np.all(np.isfinite(loss.value)):
        raise NumericalError(f"non-finite loss {loss.value} in gradient check")
    tape.backward(loss)
    analytic = {name: np.array(p.grad, copy=True) for name, p in params.items()}
    floor = zero_floor * max(1.0, abs(float(loss.value)))

    def evaluate() -> float:
        v = float(loss_fn(Tape(record=False)).value)
        if not math.isfinite(v):
            raise NumericalError("non-finite loss during finite differencing")
        return v

    def differences(p: Var, h: float) -> np.ndarray:
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = evaluate()
            flat[k] = orig - h
            down = evaluate()
            flat[k] = orig
            nflat[k] = (up - down) / (2 * h)
        return numeric

    def error(a: np.ndarray, numeric: np.ndarray) -> float:
        denom = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        return float(np.abs(a - numeric).max(initial=0.0) / denom)

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        err = error(analytic[name], differences(p, step))
        # a LReLU kink closer than `step` to some pre-activation spoils the
        # difference quotient; a correct gradient agrees again at a finer step
        for h in refine:
            if err <= tolerance:
                break
            err = min(err, error(analytic[name], differences(p, h)))
        report.errors[name] = err
    return report
