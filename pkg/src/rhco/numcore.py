"""Dense float64 kernels with a recording tape for reverse-mode gradients.

Every value is a 2-D float64 array. A :class:`Tape` records the primitives
applied to parameters and replays them backwards in reverse recording order,
which is a reverse topological order by construction.

    tape = Tape()
    W = tape.param(params, "W")
    loss = tape.sum(tape.tanh(tape.matmul(x, W)))
    grads = tape.backward(loss)          # {"W": dloss/dW}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

LEAKY_SLOPE = 0.2


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}{self.value.shape}"


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {a.shape}")
    return a


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def scatter_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Row-wise scatter-add: ``out[index[i]] += values[i]``."""
    index = np.asarray(index, dtype=np.int64)
    if len(index) < 4096:
        # both paths add contributions in index order, so results agree bitwise
        out = np.zeros((n, values.shape[1]))
        np.add.at(out, index, values)
        return out
    m = sp.csr_matrix(
        (np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index))
    )
    return np.asarray(m @ values)


def segment_max(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.full((n, values.shape[1]), -np.inf)
    np.maximum.at(out, index, values)
    return out


class Tape:
    """Ordered record of primitive operations.

    With ``record=False`` the same methods only compute values, which is what
    inference passes use.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._params: dict[str, Tensor] = {}
        self._consumed = False

    # -- leaves ---------------------------------------------------------
    def param(self, store: dict, name: str) -> Tensor:
        if name in self._params:
            return self._params[name]
        t = Tensor(store[name], requires_grad=self.record, name=name)
        if self.record:
            self._params[name] = t
        return t

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    def const(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(as_matrix(x))

    def _emit(self, value, parents, backward) -> Tensor:
        if not np.isfinite(value).all():
            raise TrainingError("non-finite value produced by a tape primitive")
        needs = self.record and any(p.requires_grad for p in parents)
        out = Tensor(value, requires_grad=needs)
        if needs:
            self._nodes.append((out, parents, backward))
        return out

    # -- linear algebra -------------------------------------------------
    def matmul(self, a, b) -> Tensor:
        a, b = self.const(a), self.const(b)
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: left operand {a.shape} vs right operand {b.shape}")
        av, bv = a.value, b.value
        return self._emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def transpose(self, a) -> Tensor:
        a = self.const(a)
        return self._emit(a.value.T.copy(), (a,), lambda g: (g.T,))

    def spmm(self, s, a) -> Tensor:
        """Constant sparse matrix times a dense operand."""
        a = self.const(a)
        if s.shape[1] != a.shape[0]:
            raise DimensionError(f"spmm: sparse operand {s.shape} vs dense operand {a.shape}")
        st = s.T.tocsr()
        return self._emit(np.asarray(s @ a.value), (a,), lambda g: (np.asarray(st @ g),))

    # -- elementwise ----------------------------------------------------
    def _broadcast_check(self, op, a, b):
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"{op}: left operand {a.shape} vs right operand {b.shape}") from None
        return shape

    def add(self, a, b) -> Tensor:
        a, b = self.const(a), self.const(b)
        self._broadcast_check("add", a, b)
        sa, sb = a.shape, b.shape
        return self._emit(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Tensor:
        a, b = self.const(a), self.const(b)
        self._broadcast_check("sub", a, b)
        sa, sb = a.shape, b.shape
        return self._emit(a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a, b) -> Tensor:
        a, b = self.const(a), self.const(b)
        self._broadcast_check("mul", a, b)
        av, bv = a.value, b.value
        return self._emit(av * bv, (a, b),
                          lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, a, c: float) -> Tensor:
        a = self.const(a)
        return self._emit(a.value * c, (a,), lambda g: (g * c,))

    def dropout(self, a, mask) -> Tensor:
        """Multiply by a fixed mask (already scaled by 1/(1-p))."""
        return self.mul(a, mask)

    def add_n(self, terms) -> Tensor:
        out = terms[0]
        for t in terms[1:]:
            out = self.add(out, t)
        return out

    def leaky_relu(self, a, slope: float = LEAKY_SLOPE) -> Tensor:
        a = self.const(a)
        d = np.where(a.value > 0, 1.0, slope)
        return self._emit(a.value * d, (a,), lambda g: (g * d,))

    def elu(self, a) -> Tensor:
        a = self.const(a)
        pos = a.value > 0
        out = np.where(pos, a.value, np.expm1(np.minimum(a.value, 0.0)))
        d = np.where(pos, 1.0, out + 1.0)
        return self._emit(out, (a,), lambda g: (g * d,))

    def tanh(self, a) -> Tensor:
        a = self.const(a)
        out = np.tanh(a.value)
        return self._emit(out, (a,), lambda g: (g * (1.0 - out * out),))

    def exp(self, a) -> Tensor:
        a = self.const(a)
        with np.errstate(over="ignore"):
            out = np.exp(a.value)
        return self._emit(out, (a,), lambda g: (g * out,))

    def log(self, a, floor: float = 1e-12) -> Tensor:
        """Natural log clamped below at ``floor``; zero gradient where clamped."""
        a = self.const(a)
        av = a.value
        live = av > floor
        out = np.log(np.maximum(av, floor))
        return self._emit(out, (a,), lambda g: (np.where(live, g / np.where(live, av, 1.0), 0.0),))

    # -- structure ------------------------------------------------------
    def concat(self, parts, axis: int = 1) -> Tensor:
        parts = [self.const(p) for p in parts]
        other = 1 - axis
        if len({p.shape[other] for p in parts}) > 1:
            shapes = ", ".join(str(p.shape) for p in parts)
            raise DimensionError(f"concat along axis {axis}: operands {shapes}")
        bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

        def back(g):
            if axis == 1:
                return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

        return self._emit(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)

    def gather_rows(self, a, index) -> Tensor:
        a = self.const(a)
        index = np.asarray(index, dtype=np.int64)
        n = a.shape[0]
        return self._emit(a.value[index], (a,), lambda g: (scatter_rows(g, index, n),))

    def segment_sum(self, a, index, n: int) -> Tensor:
        a = self.const(a)
        index = np.asarray(index, dtype=np.int64)
        if len(index) != a.shape[0]:
            raise DimensionError(f"segment_sum: values {a.shape} vs index length {len(index)}")
        return self._emit(scatter_rows(a.value, index, n), (a,), lambda g: (g[index],))

    def segment_softmax(self, logits, index, n: int) -> Tensor:
        """Softmax of each column over rows sharing a segment id."""
        a = self.const(logits)
        index = np.asarray(index, dtype=np.int64)
        if len(index) != a.shape[0]:
            raise DimensionError(f"segment_softmax: logits {a.shape} vs index length {len(index)}")
        if len(index) == 0:
            return self._emit(a.value.copy(), (a,), lambda g: (g,))
        mx = segment_max(a.value, index, n)
        e = np.exp(a.value - mx[index])
        y = e / scatter_rows(e, index, n)[index]

        def back(g):
            gy = g * y
            return (gy - y * scatter_rows(gy, index, n)[index],)

        return self._emit(y, (a,), back)

    def masked_softmax(self, logits, mask) -> Tensor:
        """Row-wise softmax over entries where ``mask`` is true; other entries are 0."""
        a = self.const(logits)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise DimensionError(f"masked_softmax: logits {a.shape} vs mask {mask.shape}")
        x = np.where(mask, a.value, -np.inf)
        mx = x.max(axis=1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.where(mask, np.exp(np.where(mask, a.value - mx, 0.0)), 0.0)
        z = e.sum(axis=1, keepdims=True)
        y = e / np.where(z > 0, z, 1.0)

        def back(g):
            gy = g * y
            return (gy - y * gy.sum(axis=1, keepdims=True),)

        return self._emit(y, (a,), back)

    def softmax_rows(self, logits) -> Tensor:
        a = self.const(logits)
        return self.masked_softmax(a, np.ones(a.shape, dtype=bool))

    def masked_logsumexp(self, logits, mask) -> Tensor:
        """Row-wise log-sum-exp over masked entries, max-shifted; returns (n, 1)."""
        a = self.const(logits)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise DimensionError(f"masked_logsumexp: logits {a.shape} vs mask {mask.shape}")
        if not mask.any(axis=1).all():
            raise ContractError("masked_logsumexp: a row has no selected entries")
        mx = np.where(mask, a.value, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, a.value - mx, 0.0)), 0.0)
        z = e.sum(axis=1, keepdims=True)
        y = e / z
        return self._emit(mx + np.log(z), (a,), lambda g: (g * y,))

    def l2_normalize_rows(self, a, floor: float = 1e-12) -> Tensor:
        a = self.const(a)
        norm = np.maximum(np.sqrt((a.value ** 2).sum(axis=1, keepdims=True)), floor)
        out = a.value / norm

        def back(g):
            return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

        return self._emit(out, (a,), back)

    def cosine(self, a, b) -> Tensor:
        """Matrix of cosine similarities between rows of ``a`` and rows of ``b``."""
        a, b = self.const(a), self.const(b)
        if a.shape[1] != b.shape[1]:
            raise DimensionError(f"cosine: left operand {a.shape} vs right operand {b.shape}")
        return self.matmul(self.l2_normalize_rows(a), self.transpose(self.l2_normalize_rows(b)))

    # -- reductions -----------------------------------------------------
    def sum(self, a) -> Tensor:
        a = self.const(a)
        shape = a.shape
        return self._emit(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))

    def mean(self, a) -> Tensor:
        a = self.const(a)
        return self.scale(self.sum(a), 1.0 / max(a.value.size, 1))

    def sum_axis(self, a, axis: int) -> Tensor:
        a = self.const(a)
        shape = a.shape
        return self._emit(a.value.sum(axis=axis, keepdims=True), (a,),
                          lambda g: (np.broadcast_to(g, shape).copy(),))

    def row_dot(self, a, b) -> Tensor:
        return self.sum_axis(self.mul(a, b), axis=1)

    # -- reverse pass ---------------------------------------------------
    def backward(self, root: Tensor) -> dict[str, np.ndarray]:
        if self._consumed:
            raise ContractError("tape already consumed by a backward pass")
        if root.value.shape != (1, 1):
            raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
        grads = {id(root): np.ones((1, 1))}
        for out, parents, back in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, gp in zip(parents, back(g)):
                if not p.requires_grad:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + gp
                else:
                    grads[k] = np.array(gp, dtype=np.float64)
        result = {}
        for name, t in self._params.items():
            g = grads.get(id(t))
            result[name] = g if g is not None else np.zeros_like(t.value)
        self._nodes.clear()
        self._consumed = True
        return result


# -- initialisation, dropout ----------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def dropout_mask(rng: np.random.Generator | None, shape, p: float):
    """Inverted-dropout mask, or None when dropout is off."""
    if rng is None or p <= 0.0:
        return None
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


# -- finite differences -----------------------------------------------------

def _central(at, h, order):
    if order == 2:
        return (at(h) - at(-h)) / (2 * h)
    return (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)


def _refine(at, step, fallback, halvings=6):
    prev = _central(at, step, 4)
    for _ in range(halvings):
        step /= 2
        cur = _central(at, step, 4)
        if abs(cur - prev) <= 3e-5 * max(abs(cur), abs(prev)) + 1e-12:
            return cur
        prev = cur
    return fallback


def finite_diff_errors(loss_fn, params: dict, eps: float = 1e-5, max_coords: int | None = None,
                       rng: np.random.Generator | None = None, order: int = 2,
                       refine_step: float | None = 1e-2) -> dict[str, float]:
    """Per-parameter max relative error between tape gradients and central differences.

    ``loss_fn(tape)`` must read parameters through ``tape.param(params, name)``
    and return a scalar Tensor.  ``order`` picks the 3- or 5-point stencil.

    Round-off in the difference quotient is about ulp(loss)/eps, which the
    1e-8 floor of the error measure cannot absorb for gradients much smaller
    than 1e-5 (exact zeros from a cancelling softmax shift are common).  Such
    coordinates are re-measured with the 5-point stencil at ``refine_step``,
    then at successively halved steps, until two neighbouring estimates agree
    (3e-5 relative plus 1e-12, the resolution of the measure at its floor);
    the finer of that pair replaces the estimate.  If no pair agrees (kinks
    all the way down) the ``eps`` estimate stands.  The refinement never looks
    at the analytic value.  ``refine_step=None`` disables it.
    """
    if order not in (2, 4):
        raise ContractError("order must be 2 or 4")
    tape = Tape()
    root = loss_fn(tape)
    base = float(root.value[0, 0])
    grads = tape.backward(root)

    def value():
        return float(loss_fn(Tape(record=False)).value[0, 0])

    again = value()
    if again != base or value() != again:
        raise DeterminismError("loss_fn returned different values for identical parameters")

    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, g in grads.items():
        p = params[name]
        flat = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        worst = 0.0
        for k in flat:
            idx = np.unravel_index(k, p.shape)
            orig = p[idx]

            def at(h):
                p[idx] = orig + h
                return value()

            analytic = g[idx]
            numeric = _central(at, eps, order)
            if refine_step is not None and max(abs(analytic), abs(numeric)) < 1e-5:
                numeric = _refine(at, refine_step, numeric)
            p[idx] = orig
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    return errors


def finite_diff_check(loss_fn, params: dict, eps: float = 1e-5, max_coords: int | None = None,
                      rng: np.random.Generator | None = None, order: int = 2,
                      refine_step: float | None = 1e-2) -> float:
    errs = finite_diff_errors(loss_fn, params, eps, max_coords, rng, order, refine_step)
    return max(errs.values(), default=0.0)


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Bias-corrected Adam update, in place, for the parameters present in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"adam: gradient {g.shape} vs parameter {name!r} {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
