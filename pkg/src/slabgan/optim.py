"""Named parameter storage and the Adam optimizer.

A ParamStore maps hierarchical names like ``"g_a/conv2/weight"`` to
tensors and owns the per-parameter Adam state (first/second moment and
step count). Non-trainable state such as spectral-norm power-iteration
vectors or batch-norm running statistics lives in a separate buffer map
so checkpoints can restore it bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .tensor import METER, Tensor


class ParamStore:
    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        # name -> [m, v, step]
        self.adam_state: dict[str, list] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name '{name}'")
        tensor.is_param = True
        tensor._meter_cell[2] = True
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def register_buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise KeyError(f"duplicate buffer name '{name}'")
        self.buffers[name] = arr
        return arr

    def names(self):
        return list(self.params.keys())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def set_trainable(self, prefixes, trainable: bool = True) -> None:
        """Flip requires_grad for every parameter under the given prefixes."""
        if isinstance(prefixes, str):
            prefixes = [prefixes]
        for name, p in self.params.items():
            if any(name.startswith(pre) for pre in prefixes):
                p.requires_grad = trainable

    def parameter_hash(self, prefix: str = "") -> int:
        """Order-stable hash of raw parameter bytes, for update-isolation checks."""
        h = 0
        for name in sorted(self.params):
            if name.startswith(prefix):
                h = hash((h, name, self.params[name].data.tobytes()))
        return h

    def total_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


def adam_step(store: ParamStore, lr: float, beta1: float = 0.0,
              beta2: float = 0.999, eps: float = 1e-8,
              prefixes=None) -> None:
    """One bias-corrected Adam update over the trainable parameters.

    Applies to parameters with ``requires_grad`` set (optionally further
    restricted by name prefixes). A trainable parameter without a gradient
    is a contract violation and raises. Gradients are left in place; the
    caller zeroes them explicitly.
    """
    if isinstance(prefixes, str):
        prefixes = [prefixes]
    for name, p in store.params.items():
        if not p.requires_grad:
            continue
        if prefixes is not None and not any(name.startswith(pre) for pre in prefixes):
            continue
        if p.grad is None:
            raise RuntimeError(f"adam_step: trainable parameter '{name}' has no gradient")
        state = store.adam_state.get(name)
        if state is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            METER.register_opt(m.nbytes + v.nbytes)
            state = [m, v, 0]
            store.adam_state[name] = state
        m, v, t = state
        t += 1
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        state[2] = t
