"""Dense tensor with a dynamic reverse-mode tape.

Every op in :mod:`recalnet.ops` builds a new :class:`Tensor` whose
``_backward`` closure pushes the upstream gradient into its parents.
The tape is rebuilt on every forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

_DTYPE = np.float64


class ConfigError(ValueError):
    """Shape or configuration mismatch detected before any arithmetic."""


class UsageError(RuntimeError):
    """API misuse, e.g. backward on a non-scalar or a stale tape."""


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Switch between float64 (default) and float32 for newly created tensors."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, accumulate: bool = False) -> None:
        backward(self, accumulate=accumulate)

    # Arithmetic sugar; defined in ops to keep the op set in one place.
    def __add__(self, other):
        from recalnet import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from recalnet import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from recalnet import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from recalnet import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from recalnet import ops
        return ops.scale(self, -1.0)


def _raise_item(shape):
    raise UsageError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Iterable[Tensor],
                backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``data`` as an op output, recording the tape edge only if needed."""
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, accumulate: bool = False) -> None:
    """Reverse-mode sweep from a single-element ``root``.

    Leaf gradients that are already populated raise :class:`UsageError`
    unless ``accumulate=True``; this makes micro-batch accumulation an
    explicit choice rather than an accident of forgetting ``zero_grad``.
    A tape can be swept only once.
    """
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("root does not depend on any tensor that requires grad")
    if root._consumed:
        raise UsageError("backward already ran on this tape; rebuild it with a new forward pass")

    order = _topo_order(root)
    leaves = [t for t in order if t._backward is None]
    if not accumulate:
        stale = [t for t in leaves if t.grad is not None]
        if stale:
            label = stale[0].name or repr(stale[0])
            raise UsageError(f"gradient of {label} not reset; call zero_grad() or pass accumulate=True")

    # intermediate grads are scratch space; leaves keep theirs
    upstream: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            accumulate_grad(node, g)
            continue
        node._backward(g)
        node._consumed = True
        for p in node._parents:
            if p.requires_grad and p.grad is not None and p._backward is not None:
                # interior node wrote into .grad; move it to the upstream table
                prev = upstream.get(id(p))
                upstream[id(p)] = p.grad if prev is None else prev + p.grad
                p.grad = None
