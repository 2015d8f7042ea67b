"""Dense float64 tensors with a tape-based reverse-mode gradient.

Every differentiable op takes an optional ``tape``. With ``tape=None`` the op
is a plain forward computation (used for inference and evaluation); with a
tape it records a vector-Jacobian closure so that ``tape.backward(loss)`` can
replay adjoints in exact reverse order.

Ops work on single vectors and on row batches alike; a batch is a 2-D tensor
whose rows are independent samples.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEGENERATE_EPS = 1e-12

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericsError(Exception):
    """Base class for contract violations in tensor arithmetic."""


class DimensionError(NumericsError, ValueError):
    pass


class NonFiniteError(NumericsError, ArithmeticError):
    pass


class DegenerateVectorError(NumericsError, ValueError):
    pass


class TapeConsumedError(NumericsError, RuntimeError):
    pass


class Tensor:
    """Immutable float64 array. Values must be finite."""

    __slots__ = ("_data", "name")

    def __init__(self, data, name: str | None = None, *, check: bool = True):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".rstrip())
        arr.setflags(write=False)
        self._data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, name: str | None = None) -> "Tensor":
        # Internal fast path: takes ownership of a freshly computed array.
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced a non-finite value")
        t = cls.__new__(cls)
        arr = np.require(arr, dtype=np.float64, requirements="C")
        arr.setflags(write=False)
        t._data = arr
        t.name = name
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def item(self) -> float:
        return float(self._data)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Gradients:
    """Mapping from tensors to their accumulated gradient arrays."""

    def __init__(self, grads: dict[int, tuple[Tensor, np.ndarray]]):
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        hit = self._grads.get(id(tensor))
        if hit is None or hit[0] is not tensor:
            return np.zeros_like(tensor.data)
        return hit[1]

    def __contains__(self, tensor: Tensor) -> bool:
        hit = self._grads.get(id(tensor))
        return hit is not None and hit[0] is tensor

    def __len__(self) -> int:
        return len(self._grads)


_Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered record of primitive ops; consumed by a single backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], _Vjp]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: Iterable[Tensor], vjp: _Vjp) -> None:
        if self._consumed:
            raise TapeConsumedError("cannot record on a consumed tape")
        self._records.append((output, tuple(inputs), vjp))

    def backward(self, loss: Tensor, loss_seed: float = 1.0) -> Gradients:
        """Propagate ``d loss`` back through every recorded op.

        Returns gradients for every tensor reached, parameters included.
        Tensors that the loss does not depend on read back as zeros.
        """
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.full(loss.shape, float(loss_seed)))
        }
        for output, inputs, vjp in reversed(self._records):
            hit = grads.get(id(output))
            if hit is None or hit[0] is not output:
                continue
            for inp, g in zip(inputs, vjp(hit[1])):
                if g is None:
                    continue
                prev = grads.get(id(inp))
                if prev is None or prev[0] is not inp:
                    grads[id(inp)] = (inp, np.array(g, dtype=np.float64))
                else:
                    grads[id(inp)] = (inp, prev[1] + g)
        self._records.clear()
        return Gradients(grads)


def _record(tape: GradTape | None, out: Tensor, inputs, vjp: _Vjp) -> Tensor:
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# layers and activations


def linear_forward(weights: Tensor, bias: Tensor, input: Tensor, tape: GradTape | None = None) -> Tensor:
    """``weights @ input + bias`` for a vector, or row-wise for a batch."""
    W, b, x = weights.data, bias.data, input.data
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"linear shapes do not conform: weights {W.shape}, bias {b.shape}, input {x.shape}"
        )
    out = Tensor._wrap(x @ W.T + b)

    def vjp(g):
        if x.ndim == 1:
            return np.outer(g, x), g, g @ W
        return g.T @ x, g.sum(axis=0), g @ W

    return _record(tape, out, (weights, bias, input), vjp)


def gelu(input: Tensor, tape: GradTape | None = None) -> Tensor:
    """Exact (erf) GeLU: ``x * Phi(x)``."""
    x = input.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = Tensor._wrap(x * cdf)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record(tape, out, (input,), vjp)


def l2_normalize(v: Tensor, tape: GradTape | None = None) -> Tensor:
    """Scale a vector (or each row of a batch) to unit Euclidean norm."""
    x = v.data
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norm <= DEGENERATE_EPS):
        raise DegenerateVectorError("cannot normalize a vector with near-zero norm")
    y = x / norm
    out = Tensor._wrap(y)

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _record(tape, out, (v,), vjp)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cosine of mismatched shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= DEGENERATE_EPS or nb <= DEGENERATE_EPS:
        raise DegenerateVectorError("cosine similarity of a near-zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between rows of ``a`` and rows of ``b`` (no tape)."""
    an = np.linalg.norm(a, axis=1, keepdims=True)
    bn = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(an <= DEGENERATE_EPS) or np.any(bn <= DEGENERATE_EPS):
        raise DegenerateVectorError("cosine similarity of a near-zero vector")
    return np.clip((a / an) @ (b / bn).T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# generic differentiable building blocks


def matmul_nt(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """``a @ b.T`` for two row batches."""
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionError(f"matmul_nt shapes do not conform: {A.shape}, {B.shape}")
    out = Tensor._wrap(A @ B.T)
    return _record(tape, out, (a, b), lambda g: (g @ B, g.T @ A))


def reshape(a: Tensor, shape, tape: GradTape | None = None) -> Tensor:
    original = a.shape
    out = Tensor._wrap(a.data.reshape(shape))
    return _record(tape, out, (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor._wrap(a.data.T)
    return _record(tape, out, (a,), lambda g: (g.T,))


def scale(a: Tensor, factor: float, tape: GradTape | None = None) -> Tensor:
    out = Tensor._wrap(a.data * factor)
    return _record(tape, out, (a,), lambda g: (g * factor,))


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add of mismatched shapes {a.shape} and {b.shape}")
    out = Tensor._wrap(a.data + b.data)
    return _record(tape, out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub of mismatched shapes {a.shape} and {b.shape}")
    out = Tensor._wrap(a.data - b.data)
    return _record(tape, out, (a, b), lambda g: (g, -g))


def total(a: Tensor, tape: GradTape | None = None) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = a.shape
    out = Tensor._wrap(np.asarray(a.data.sum()))
    return _record(tape, out, (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor, tape: GradTape | None = None) -> Tensor:
    return scale(total(a, tape), 1.0 / a.data.size, tape)


def concat(tensors: Sequence[Tensor], axis: int = -1, tape: GradTape | None = None) -> Tensor:
    arrays = [t.data for t in tensors]
    out = Tensor._wrap(np.concatenate(arrays, axis=axis))
    splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
    return _record(tape, out, tuple(tensors), lambda g: np.split(g, splits, axis=axis))


def gather(a: Tensor, rows, cols, tape: GradTape | None = None) -> Tensor:
    """Pick entries ``a[rows[k], cols[k]]`` into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape
    out = Tensor._wrap(a.data[rows, cols])

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _record(tape, out, (a,), vjp)


def logsumexp_rows(a: Tensor, mask: np.ndarray | None = None, tape: GradTape | None = None) -> Tensor:
    """Row-wise ``log(sum(exp(a)))`` restricted to entries where ``mask`` is True."""
    x = a.data
    if x.ndim != 2:
        raise DimensionError(f"logsumexp_rows needs a matrix, got shape {x.shape}")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    elif mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {x.shape}")
    if not np.all(mask.any(axis=1)):
        raise DimensionError("every row needs at least one unmasked entry")
    shifted = np.where(mask, x, -np.inf)
    peak = shifted.max(axis=1, keepdims=True)
    weights = np.exp(shifted - peak)
    norm = weights.sum(axis=1, keepdims=True)
    out = Tensor._wrap((peak + np.log(norm))[:, 0])
    soft = weights / norm

    return _record(tape, out, (a,), lambda g: (soft * g[:, None],))


def additive_angular_margin(cosines: Tensor, labels, margin: float, scale_s: float,
                            tape: GradTape | None = None) -> Tensor:
    """Scaled logits with ``cos(theta + margin)`` on each row's labelled column.

    ``cosines`` is a (batch, classes) matrix of cosines; other columns are
    returned as ``scale_s * cos(theta)``.
    """
    c = np.clip(cosines.data, -1.0, 1.0)
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(c.shape[0])
    ct = c[rows, labels]
    st = np.sqrt(np.maximum(1.0 - ct * ct, 0.0))
    cos_m, sin_m = np.cos(margin), np.sin(margin)
    logits = c.copy()
    logits[rows, labels] = ct * cos_m - st * sin_m
    out = Tensor._wrap(scale_s * logits)

    def vjp(g):
        local = np.ones_like(c)
        # d cos(acos(c) + m) / dc = cos m + c sin m / sqrt(1 - c^2)
        safe = np.maximum(st, DEGENERATE_EPS)
        local[rows, labels] = cos_m + ct * sin_m / safe
        return (scale_s * g * local,)

    return _record(tape, out, (cosines,), vjp)


# ---------------------------------------------------------------------------
# test oracle


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6,
                               coords: Iterable[int] | None = None) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    ``coords`` restricts the sweep to the listed flat indices; other entries of
    the result stay zero.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in (range(flat.size) if coords is None else coords):
        keep = flat[i]
        flat[i] = keep + h
        up = float(f(base))
        flat[i] = keep - h
        down = float(f(base))
        flat[i] = keep
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(base.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference, zero when both are zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale_ = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale_ == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale_)
