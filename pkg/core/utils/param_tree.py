"""Flat name -> Tensor parameter containers shared by backbones and heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..exceptions import ConfigError
from .tensor import Tensor


@dataclass
class ParameterTree:
    config: Any
    params: dict[str, Tensor] = field(default_factory=dict)

    def named_parameters(self):
        return self.params.items()

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def copy(self, requires_grad: bool | None = None):
        return type(self)(self.config, {k: v.clone(requires_grad) for k, v in self.params.items()})

    def astype(self, dtype):
        return type(self)(self.config, {
            k: Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype, name=k) for k, v in self.params.items()
        })

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ConfigError(f'Checkpoint is missing parameters: {sorted(missing)}')
        for name, tensor in self.params.items():
            if arrays[name].shape != tensor.shape:
                raise ConfigError(f'Parameter {name}: checkpoint shape {arrays[name].shape} != {tensor.shape}')
            tensor.data = np.array(arrays[name], dtype=tensor.dtype)
            tensor.zero_grad()

    def is_finite(self) -> bool:
        return all(t.is_finite() for t in self.params.values())

    def same_structure(self, other: 'ParameterTree') -> bool:
        if self.params.keys() != other.params.keys():
            return False
        return all(self.params[k].shape == other.params[k].shape for k in self.params)
