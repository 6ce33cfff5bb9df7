"""Record which parameters a forward pass actually reads."""
from __future__ import annotations

from torch import nn
from torch.overrides import TorchFunctionMode
from torch.utils._pytree import tree_flatten


class ParameterTouchRecorder(TorchFunctionMode):
    """Collects the names of ``model`` parameters passed to any torch function inside the context."""

    def __init__(self, model: nn.Module):
        super().__init__()
        self._names = {id(p): n for n, p in model.named_parameters()}
        self.touched: set[str] = set()

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        leaves, _ = tree_flatten((args, kwargs))
        for leaf in leaves:
            name = self._names.get(id(leaf))
            if name is not None:
                self.touched.add(name)
        return func(*args, **kwargs)


def touched_parameters(model: nn.Module, fn, *args, **kwargs) -> set[str]:
    with ParameterTouchRecorder(model) as rec:
        fn(*args, **kwargs)
    return rec.touched
