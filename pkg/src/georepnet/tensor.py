"""Dense tensors and the reverse-mode gradient tape.

A :class:`Tape` is created explicitly for one forward pass. Parameters enter
it through :meth:`Tape.param`; every operation whose inputs live on a tape
records a node there, and :func:`backward` replays the nodes in reverse.
Nothing is tracked globally.
"""

from collections import Counter

import numpy as np

from .errors import NonFiniteError, UsageError

FLOAT_TYPES = (np.float32, np.float64)


def as_float_array(value, dtype=None):
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.type not in FLOAT_TYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A float32/float64 array, optionally linked to a :class:`Tape`."""

    __slots__ = ("data", "tape", "handle", "name")
    __array_priority__ = 100

    def __init__(self, data, tape=None, handle=None, name=None):
        self.data = as_float_array(data)
        self.tape = tape
        self.handle = handle
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tracked = f", handle={self.handle}" if self.handle is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"

    # arithmetic sugar; the rules live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("rule", "inputs", "output", "backward")

    def __init__(self, rule, inputs, output, backward):
        self.rule = rule
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended as operations execute, so the record is already in
    topological order. A tape belongs to a single thread of execution.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}
        self.counts = Counter()
        self._next = 0
        self._consumed = False

    def _new_handle(self):
        h = self._next
        self._next += 1
        return h

    def param(self, name, array):
        """Register ``array`` as the leaf named ``name`` (idempotent per name)."""
        leaf = self.params.get(name)
        if leaf is not None:
            if leaf.data is not array:
                raise UsageError(f"parameter {name!r} registered twice with different arrays")
            return leaf
        leaf = Tensor(array, tape=self, handle=self._new_handle(), name=name)
        self.params[name] = leaf
        return leaf

    def record(self, rule, inputs, out, backward):
        """Append a node computing ``out`` from ``inputs`` and return the output tensor."""
        self.counts[rule] += 1
        handle = self._new_handle()
        handles = tuple(t.handle if isinstance(t, Tensor) and t.tape is self else None for t in inputs)
        self.nodes.append(_Node(rule, handles, handle, backward))
        return Tensor(out, tape=self, handle=handle)

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise UsageError("loss is not connected to this tape")
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise UsageError("tape already consumed by a previous backward pass")
        self._consumed = True

        grads = {loss.handle: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for h, gi in zip(node.inputs, in_grads):
                if h is None or gi is None:
                    continue
                if h in grads:
                    grads[h] = grads[h] + gi
                else:
                    grads[h] = gi

        out = {}
        for name, leaf in self.params.items():
            g = grads.get(leaf.handle)
            if g is None:
                g = np.zeros_like(leaf.data)
            out[name] = Tensor(np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape), name=name)
        return out


def backward(loss):
    """Gradients of a scalar ``loss`` for every parameter on its tape, keyed by name.

    Parameters registered on the tape but not on the path to ``loss`` get zeros.
    """
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise UsageError("loss is not attached to a gradient tape")
    return loss.tape.backward(loss)


def check_finite(arr, rule):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{rule} produced non-finite values")
    return arr
