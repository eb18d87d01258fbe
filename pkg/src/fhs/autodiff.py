"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every primitive applied to tensors that require
gradients.  ``tape.backward(out)`` walks the record in reverse and
accumulates ``d out / d leaf`` into each leaf's ``grad`` buffer.

Example::

    tape = Tape()
    w = Tensor([[0.5], [-1.0]], requires_grad=True)
    x = Tensor([[1.0, 2.0]])
    loss = tape.sum(tape.relu(tape.matmul(x, w)))
    tape.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_MAGIC = "FHS1"


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in a tensor."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _as_array(data) -> np.ndarray:
    return np.array(data, dtype=np.float64, order="C", copy=True)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _copy: bool = True):
        arr = _as_array(data) if _copy else data
        _check_finite(arr, name or "Tensor()")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def copy(self) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, name=self.name)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    kind: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive operations.

    Used either imperatively (call the primitive methods, then ``backward``)
    or as a declared program: ``Tape(fn, signature)`` followed by
    :func:`forward` and :func:`backward`.  ``signature`` is a list of input
    shapes; ``None`` in a shape matches any size along that axis.
    """

    def __init__(self, fn: Callable | None = None,
                 signature: Sequence[Sequence[int | None]] | None = None):
        self.fn = fn
        self.signature = None if signature is None else [tuple(s) for s in signature]
        self.ops: list[_Op] = []
        self.output: Tensor | None = None
        self._produced: set[int] = set()
        self.visits = 0

    # -- bookkeeping -----------------------------------------------------

    def reset(self) -> None:
        self.ops.clear()
        self._produced.clear()
        self.output = None
        self.visits = 0

    def record(self, kind: str, inputs: tuple[Tensor, ...], data: np.ndarray,
               backward: Callable[[np.ndarray], tuple]) -> Tensor:
        """Append a primitive; ``backward`` maps the output gradient to input gradients."""
        _check_finite(data, kind)
        out = Tensor(data, _copy=False)
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self.ops.append(_Op(kind, inputs, out, backward))
            self._produced.add(id(out))
        return out

    def run(self, *inputs) -> Tensor:
        if self.fn is None:
            raise TapeError("tape has no declared program")
        tensors = [as_tensor(x) for x in inputs]
        if self.signature is not None:
            if len(tensors) != len(self.signature):
                raise ShapeError(f"expected {len(self.signature)} inputs, got {len(tensors)}")
            for i, (t, sig) in enumerate(zip(tensors, self.signature)):
                if len(t.shape) != len(sig) or any(
                        s is not None and s != d for s, d in zip(sig, t.shape)):
                    raise ShapeError(f"input {i}: shape {t.shape} does not match {sig}")
        self.reset()
        out = self.fn(self, *tensors)
        self.output = out
        return out

    def backward(self, output: Tensor | None = None, output_grad=None) -> None:
        """Accumulate gradients of ``output`` into every leaf that requires them."""
        if output is None:
            output = self.output
            if output is None and self.ops:
                output = self.ops[-1].out
        if output is None:
            raise TapeError("backward called before forward")
        if output_grad is None:
            g0 = np.ones_like(output.data)
        else:
            g0 = _as_array(output_grad.data if isinstance(output_grad, Tensor) else output_grad)
            if g0.shape != output.shape:
                raise ShapeError(f"output_grad shape {g0.shape} != output shape {output.shape}")
        if id(output) not in self._produced:
            if output.requires_grad:
                output.accumulate(g0)
            return
        grads: dict[int, np.ndarray] = {id(output): g0}
        for op in reversed(self.ops):
            g = grads.pop(id(op.out), None)
            if g is None:
                continue
            self.visits += 1
            for inp, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in self._produced:
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    inp.accumulate(gi)

    # -- primitives ------------------------------------------------------

    def identity(self, x: Tensor) -> Tensor:
        return self.record("identity", (x,), x.data.copy(), lambda g: (g,))

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
        ad, bd = a.data, b.data
        return self.record("matmul", (a, b), ad @ bd,
                          lambda g: (g @ bd.T if a.requires_grad else None,
                                     ad.T @ g if b.requires_grad else None))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; ``b`` may also be a bias row broadcast over rows of ``a``."""
        if a.shape == b.shape:
            return self.record("add", (a, b), a.data + b.data, lambda g: (g, g))
        if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
            return self.record("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=0)))
        raise ShapeError(f"add shapes {a.shape} and {b.shape}")

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"sub shapes {a.shape} and {b.shape}")
        return self.record("sub", (a, b), a.data - b.data, lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes {a.shape} and {b.shape}")
        ad, bd = a.data, b.data
        return self.record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))

    def negate(self, x: Tensor) -> Tensor:
        return self.record("negate", (x,), -x.data, lambda g: (-g,))

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        return self.record("scale", (x,), x.data * c, lambda g: (g * c,))

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0.0
        return self.record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))

    def exp(self, x: Tensor) -> Tensor:
        with np.errstate(over="ignore"):
            out = np.exp(x.data)
        return self.record("exp", (x,), out, lambda g: (g * out,))

    def log(self, x: Tensor) -> Tensor:
        xd = x.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(xd)
        return self.record("log", (x,), out, lambda g: (g / xd,))

    def clamp(self, x: Tensor, lo: float, hi: float) -> Tensor:
        inside = (x.data >= lo) & (x.data <= hi)
        return self.record("clamp", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))

    def softmax(self, x: Tensor) -> Tensor:
        s = softmax_rows(x.data)
        return self.record("softmax", (x,), s,
                          lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))

    def log_softmax(self, x: Tensor) -> Tensor:
        out = log_softmax_rows(x.data)
        s = np.exp(out)
        return self.record("log_softmax", (x,), out,
                          lambda g: (g - s * g.sum(axis=-1, keepdims=True),))

    def sum(self, x: Tensor) -> Tensor:
        shape = x.shape
        return self.record("sum", (x,), np.array(x.data.sum()),
                          lambda g: (np.full(shape, float(g)),))

    def mean(self, x: Tensor) -> Tensor:
        shape, n = x.shape, max(x.data.size, 1)
        return self.record("mean", (x,), np.array(x.data.mean() if x.data.size else 0.0),
                          lambda g: (np.full(shape, float(g) / n),))

    def concat(self, xs: Sequence[Tensor], axis: int = -1) -> Tensor:
        xs = tuple(xs)
        ax = axis % xs[0].data.ndim
        for t in xs[1:]:
            if t.data.ndim != xs[0].data.ndim or any(
                    d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, xs[0].shape)) if i != ax):
                raise ShapeError(f"concat shapes {[t.shape for t in xs]}")
        cuts = np.cumsum([t.shape[ax] for t in xs])[:-1]
        return self.record("concat", xs, np.concatenate([t.data for t in xs], axis=ax),
                          lambda g: tuple(np.split(g, cuts, axis=ax)))

    def reparameterize(self, mean: Tensor, logvar: Tensor, noise: Tensor) -> Tensor:
        """``mean + exp(logvar / 2) * noise``."""
        if not (mean.shape == logvar.shape == noise.shape):
            raise ShapeError(f"reparameterize shapes {mean.shape}, {logvar.shape}, {noise.shape}")
        std = np.exp(0.5 * logvar.data)
        nd = noise.data
        return self.record("reparameterize", (mean, logvar, noise), mean.data + std * nd,
                          lambda g: (g, 0.5 * g * nd * std, g * std))

    def grl(self, x: Tensor, lambda_grl: float = 1.0) -> Tensor:
        """Identity forward; backward multiplies the upstream gradient by ``-lambda_grl``."""
        lam = float(lambda_grl)
        return self.record("grl", (x,), x.data.copy(), lambda g: (-lam * g,))

    def cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean negative log-likelihood of integer ``labels`` under row-softmax(logits)."""
        labels = np.asarray(labels, dtype=np.int64)
        n = logits.shape[0]
        if logits.data.ndim != 2 or labels.shape != (n,):
            raise ShapeError(f"cross_entropy logits {logits.shape}, labels {labels.shape}")
        if n == 0:
            raise ShapeError("cross_entropy on an empty batch")
        lsm = log_softmax_rows(logits.data)
        rows = np.arange(n)
        loss = -lsm[rows, labels].mean()

        def back(g):
            d = np.exp(lsm)
            d[rows, labels] -= 1.0
            return (d * (float(g) / n),)

        return self.record("cross_entropy", (logits,), np.array(loss), back)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward(tape: Tape, inputs: Sequence) -> Tensor:
    """Run the tape's declared program on ``inputs``."""
    return tape.run(*inputs)


def backward(tape: Tape, output_grad=None) -> None:
    tape.backward(None, output_grad)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    batch_size: int = 32

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size}")


def _param_list(params) -> list[Tensor]:
    if hasattr(params, "parameters"):
        return list(params.parameters())
    return list(params)


def sgd_step(params, config: SgdConfig | float) -> None:
    """One plain SGD update, then zero the gradients.

    ``config`` may be an :class:`SgdConfig` or a bare learning rate (a
    learning rate of 0 leaves every parameter unchanged).
    """
    lr = config.learning_rate if isinstance(config, SgdConfig) else float(config)
    tensors = _param_list(params)
    for t in tensors:
        if t.grad is None:
            raise TapeError(f"parameter {t.name or t!r} has no gradient")
    for t in tensors:
        if lr != 0.0:
            t.data -= lr * t.grad
        t.grad.fill(0.0)


# -- checkpoints -------------------------------------------------------------
#
# Layout:
#   b"FHS1 <n>\n"
#   repeated n times:
#     b"<name> <rank> <d0> ... <d_{rank-1}>\n"
#     prod(dims) little-endian IEEE-754 float64 values, row-major
# Names are ASCII without whitespace.


def save_checkpoint(path, tensors: dict) -> None:
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC} {len(tensors)}\n".encode("ascii"))
        for name, value in tensors.items():
            arr = np.array(value.data if isinstance(value, Tensor) else value,
                           dtype=np.float64, order="C")
            if not name or any(c.isspace() for c in name):
                raise ValueError(f"invalid tensor name {name!r}")
            dims = " ".join(str(d) for d in arr.shape)
            header = f"{name} {arr.ndim}" + (f" {dims}" if dims else "")
            f.write(header.encode("ascii") + b"\n")
            f.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise ValueError("truncated checkpoint header")
        text = blob[pos:end].decode("ascii")
        pos = end + 1
        return text

    magic, _, count = line().partition(" ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    out: dict[str, np.ndarray] = {}
    for _ in range(int(count)):
        parts = line().split(" ")
        name, rank = parts[0], int(parts[1])
        dims = tuple(int(d) for d in parts[2:2 + rank])
        if len(dims) != rank:
            raise ValueError(f"tensor {name}: rank {rank} but {len(dims)} dims")
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise ValueError(f"tensor {name}: truncated payload")
        out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                                  offset=pos).astype(np.float64).reshape(dims)
        pos += nbytes
    if pos != len(blob):
        raise ValueError("trailing bytes after last tensor")
    return out


__all__ = [
    "Tensor", "Tape", "SgdConfig", "NonFiniteError", "ShapeError", "TapeError",
    "forward", "backward", "sgd_step", "save_checkpoint", "load_checkpoint",
    "softmax_rows", "log_softmax_rows", "as_tensor",
]
