"""Parameter containers and the per-forward context."""

from collections import Counter

import numpy as np

from .tensor import Tensor


class Module:
    """Holds named numpy parameters/buffers and child modules.

    Names are dotted paths assigned by :meth:`assign_names` on the root.
    Parameter arrays are updated in place by the optimizer, so a module's
    arrays keep their identity for its whole life.
    """

    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}
        self.path = ""

    def add_param(self, name, array):
        self._params[name] = array
        return array

    def add_buffer(self, name, array):
        self._buffers[name] = array
        return array

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def assign_names(self, prefix=""):
        self.path = prefix
        for name, child in self._children.items():
            child.assign_names(f"{prefix}{name}.")
        return self

    def named_parameters(self):
        out = {f"{self.path}{k}": v for k, v in self._params.items()}
        for child in self._children.values():
            out.update(child.named_parameters())
        return out

    def named_buffers(self):
        out = {f"{self.path}{k}": v for k, v in self._buffers.items()}
        for child in self._children.values():
            out.update(child.named_buffers())
        return out

    def state_dict(self):
        state = self.named_parameters()
        state.update(self.named_buffers())
        return state

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def astype(self, dtype):
        for m in self.modules():
            for store in (m._params, m._buffers):
                for k, v in store.items():
                    store[k] = v.astype(dtype)
        return self


class Context:
    """What a forward pass needs besides its inputs.

    ``tape``: optional gradient tape parameters are registered on.
    ``training``: batch statistics instead of running statistics.
    ``update_stats``: whether training-mode batch norms refresh running stats.
    ``counter``: optional Counter receiving structural call counts.
    """

    def __init__(self, tape=None, training=False, update_stats=None, counter=None):
        self.tape = tape
        self.training = training
        self.update_stats = training if update_stats is None else update_stats
        self.counter = counter if counter is not None else Counter()

    def param(self, module, name):
        arr = module._params[name]
        if self.tape is None:
            return Tensor(arr)
        return self.tape.param(module.path + name, arr)


def kaiming_normal(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
