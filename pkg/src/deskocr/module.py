"""Tiny parameter-container base class.

Modules discover parameters (Tensors with requires_grad) and buffers
(plain numpy arrays, e.g. batch-norm running stats) by walking attributes,
including lists of sub-modules. Names are dotted attribute paths, stable
across runs, and used for checkpointing and weight transfer.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Module:
    def __init__(self):
        self.training = True

    def _children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        # underscore-prefixed arrays are caches, not state worth checkpointing
        for name, v in vars(self).items():
            if isinstance(v, np.ndarray) and not name.startswith("_"):
                yield prefix + name, v
        for cname, child in self._children():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_arrays(self):
        """Parameters and buffers together; this is what checkpoints store."""
        for name, p in self.named_parameters():
            yield name, p.data
        for name, b in self.named_buffers():
            yield name, b

    def param_count(self, include_buffers: bool = True) -> int:
        n = sum(p.size for p in self.parameters())
        if include_buffers:
            n += sum(b.size for _, b in self.named_buffers())
        return n

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def load_arrays(module: Module, arrays: dict, strict: bool = True):
    """Copy `arrays` (name -> ndarray) into matching params/buffers.

    Returns (loaded_names, missing_names, fresh_names). Shape mismatches
    raise with a per-parameter report; fingerprint-level checks live in
    the checkpoint layer.
    """
    loaded, missing, fresh = [], [], []
    mismatches = []
    own = dict(module.named_arrays())
    for name, dst in own.items():
        src = arrays.get(name)
        if src is None:
            fresh.append(name)
            continue
        if tuple(src.shape) != tuple(dst.shape):
            mismatches.append(f"{name}: checkpoint {tuple(src.shape)} vs model {tuple(dst.shape)}")
            continue
        dst[...] = src
        loaded.append(name)
    for name in arrays:
        if name not in own:
            missing.append(name)
    if mismatches:
        raise ShapeError("shape mismatch on transfer:\n  " + "\n  ".join(mismatches))
    if strict and (fresh or missing):
        raise ConfigError(f"strict load failed: fresh={fresh[:5]} unused={missing[:5]}")
    return loaded, missing, fresh
