"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Everything is numpy underneath; this module only adds the bookkeeping needed
to run a forward pass, cut it anywhere, and resume the backward pass from a
gradient handed in from outside (which is exactly what the split-training
message protocol does). Tapes are single-use: backward() consumes them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LN_EPS = 1e-5  # layer-norm variance floor


def as_array(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 ndarray (0-d stays 0-d)."""
    a = np.asarray(x, dtype=np.float64)
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


class Var:
    """A value tracked on a tape. Leaves may carry a name; .grad is filled by backward()."""

    __slots__ = ("value", "tape", "name", "grad")

    def __init__(self, value: np.ndarray, tape: "Tape", name: str | None = None):
        self.value = value
        self.tape = tape
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def grad_or_zero(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.value)

    # operator sugar for the common binary ops
    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)


class Tape:
    """Ordered record of one forward pass. backward() may run exactly once."""

    def __init__(self):
        self._backward_fns: list[Callable[[], None]] = []
        self._consumed = False

    def leaf(self, value, name: str | None = None) -> Var:
        return Var(as_array(value), self, name)

    def record(self, fn: Callable[[], None]) -> None:
        self._backward_fns.append(fn)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def backward(self, out: Var, out_grad) -> None:
        """Seed `out` with `out_grad` and propagate to every reachable Var."""
        if self._consumed:
            raise RuntimeError("tape already consumed: backward() may run only once")
        g = as_array(out_grad)
        if g.shape != out.value.shape:
            raise ValueError(
                f"output_grad shape {g.shape} does not match output shape {out.value.shape}"
            )
        self._consumed = True
        out.accumulate(g)
        for fn in reversed(self._backward_fns):
            fn()


def _same_tape(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient `g` down to `shape` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Var(a.value @ b.value, tape)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(_unbroadcast(out.grad @ _swap_last(b.value), a.value.shape))
        b.accumulate(_unbroadcast(_swap_last(a.value) @ out.grad, b.value.shape))

    tape.record(bwd)
    return out


def add(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    out = Var(a.value + b.value, tape)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(_unbroadcast(out.grad, a.value.shape))
        b.accumulate(_unbroadcast(out.grad, b.value.shape))

    tape.record(bwd)
    return out


def sub(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    out = Var(a.value - b.value, tape)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(_unbroadcast(out.grad, a.value.shape))
        b.accumulate(_unbroadcast(-out.grad, b.value.shape))

    tape.record(bwd)
    return out


def mul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    out = Var(a.value * b.value, tape)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(_unbroadcast(out.grad * b.value, a.value.shape))
        b.accumulate(_unbroadcast(out.grad * a.value, b.value.shape))

    tape.record(bwd)
    return out


def scale(a: Var, c: float) -> Var:
    out = Var(a.value * c, a.tape)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(out.grad * c)

    a.tape.record(bwd)
    return out


def gelu(a: Var) -> Var:
    x = a.value
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Var(x * phi, a.tape)

    def bwd():
        if out.grad is None:
            return
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        a.accumulate(out.grad * (phi + x * pdf))

    a.tape.record(bwd)
    return out


def layer_norm(x: Var, gain: Var, bias: Var) -> Var:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    tape = _same_tape(x, gain, bias)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = Var(xhat * gain.value + bias.value, tape)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        gain.accumulate(_unbroadcast(g * xhat, gain.value.shape))
        bias.accumulate(_unbroadcast(g, bias.value.shape))
        dxhat = g * gain.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        x.accumulate(inv * (dxhat - m1 - xhat * m2))

    tape.record(bwd)
    return out


def softmax(a: Var) -> Var:
    """Numerically stable softmax over the last axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Var(y, a.tape)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        a.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    a.tape.record(bwd)
    return out


def transpose_last(a: Var) -> Var:
    out = Var(np.ascontiguousarray(_swap_last(a.value)), a.tape)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(_swap_last(out.grad))

    a.tape.record(bwd)
    return out


def mean_tokens(a: Var) -> Var:
    """Mean over the token axis of a (batch, tokens, width) tensor."""
    if a.value.ndim != 3:
        raise ValueError(f"mean_tokens expects (batch, tokens, width), got {a.shape}")
    n_tokens = a.value.shape[1]
    out = Var(a.value.mean(axis=1), a.tape)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(np.repeat(out.grad[:, None, :], n_tokens, axis=1) / n_tokens)

    a.tape.record(bwd)
    return out


def concat_tokens(a: Var, b: Var) -> Var:
    """Concatenate along the token axis (axis 1)."""
    tape = _same_tape(a, b)
    na = a.value.shape[1]
    out = Var(np.concatenate([a.value, b.value], axis=1), tape)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(out.grad[:, :na, :])
        b.accumulate(out.grad[:, na:, :])

    tape.record(bwd)
    return out


def broadcast_rows(a: Var, batch: int) -> Var:
    """Tile a (rows, width) tensor to (batch, rows, width)."""
    out = Var(np.broadcast_to(a.value, (batch,) + a.value.shape).copy(), a.tape)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(out.grad.sum(axis=0))

    a.tape.record(bwd)
    return out


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax over the last axis of a plain ndarray."""
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels: np.ndarray, n_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"label out of range: labels must lie in [0, {n_classes}), got "
            f"min={labels.min()} max={labels.max()}"
        )


def cross_entropy(logits: Var, labels) -> Var:
    """Mean softmax cross-entropy of a (batch, classes) logits Var against int labels."""
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    val = logits.value
    if val.ndim != 2 or val.shape[0] != lab.shape[0]:
        raise ValueError(f"logits {val.shape} incompatible with {lab.shape[0]} labels")
    _check_labels(lab, val.shape[1])
    logp = log_softmax_rows(val)
    rows = np.arange(lab.shape[0])
    out = Var(np.asarray(-logp[rows, lab].mean()), logits.tape)

    def bwd():
        if out.grad is None:
            return
        p = np.exp(logp)
        p[rows, lab] -= 1.0
        logits.accumulate(p * (float(out.grad) / lab.shape[0]))

    logits.tape.record(bwd)
    return out


def softmax_cross_entropy(logits, label: int) -> float:
    """Stable -log softmax(logits)[label] for a 1-D logits vector."""
    z = as_array(logits).reshape(-1)
    lab = np.asarray([label], dtype=np.int64)
    _check_labels(lab, z.shape[0])
    return float(-log_softmax_rows(z)[label])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered, named float64 parameter tensors with per-parameter freeze flags."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, value, frozen: bool = False) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._values[name] = as_array(value)
        self._frozen[name] = bool(frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._values.items())

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_frozen(self, name: str, flag: bool) -> None:
        self._frozen[name] = bool(flag)

    def freeze_all(self) -> "ParamSet":
        for name in self._frozen:
            self._frozen[name] = True
        return self

    def trainable_names(self) -> list[str]:
        return [n for n, f in self._frozen.items() if not f]

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self._values.values())

    @property
    def nbytes(self) -> int:
        return sum(v.nbytes for v in self._values.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self._values.items():
            out.add(name, value.copy(), frozen=self._frozen[name])
        return out

    def allequal(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self._values[n], other[n]) for n in self._values)


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> ParamSet:
    """In-place SGD update theta <- theta - lr * g on the non-frozen parameters.

    Supplying a gradient for a frozen or unknown parameter raises: the caller
    has a protocol bug, not a numerical problem.
    """
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if params.is_frozen(name):
            raise ValueError(f"gradient supplied for frozen parameter {name!r}")
        theta = params[name]
        if g.shape != theta.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} shape {theta.shape}"
            )
        theta -= lr * g
    return params


def finite_diff_grad(
    loss_fn: Callable[[ParamSet], float],
    params: ParamSet,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of loss_fn per scalar parameter.

    Perturbs parameters in place and restores them bit-exactly. Independent of
    the tape machinery by construction, so it can be used to check it.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    grads: dict[str, np.ndarray] = {}
    for name in (params.names() if names is None else list(names)):
        theta = params[name]
        flat = theta.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(params)
            flat[i] = orig - eps
            lm = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError(f"non-finite loss while perturbing {name!r}[{i}]")
            g[i] = (lp - lm) / (2.0 * eps)
        grads[name] = g.reshape(theta.shape)
    return grads
