"""
DINO / iBOT projection heads: a GELU MLP down to an L2-normalized bottleneck,
followed by a prototype layer whose rows are kept on the unit sphere.
"""
from dataclasses import dataclass

import numpy as np

from ..exceptions import ConfigError
from ..utils import functional as F
from ..utils.param_tree import ParameterTree
from ..utils.tensor import Tensor, get_default_dtype


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 64
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    prototype_count: int = 128
    layer_count: int = 3

    def validate(self) -> 'HeadConfig':
        if self.prototype_count < 2:
            raise ConfigError(f'prototype_count must be >= 2, got {self.prototype_count}')
        if self.layer_count < 1:
            raise ConfigError('A projection head needs at least one MLP layer')
        return self

    def extents(self) -> list[int]:
        """MLP layer widths, e.g. [64, 256, 256, 64] for the toy default."""
        return [self.in_dim] + [self.hidden_dim] * (self.layer_count - 1) + [self.bottleneck_dim]


@dataclass
class HeadState(ParameterTree):
    config: HeadConfig

    @property
    def prototypes(self) -> Tensor:
        return self.params['prototypes']


def init_head(config: HeadConfig, rng: np.random.Generator) -> HeadState:
    config.validate()
    arrays = {}
    widths = config.extents()
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        arrays[f'mlp.{i}.weight'] = np.clip(rng.standard_normal((fan_in, fan_out)), -2, 2) * 0.02
        arrays[f'mlp.{i}.bias'] = np.zeros(fan_out)
    prototypes = rng.standard_normal((config.prototype_count, config.bottleneck_dim))
    arrays['prototypes'] = prototypes / np.linalg.norm(prototypes, axis=1, keepdims=True)
    dtype = get_default_dtype()
    return HeadState(config, {k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in arrays.items()})


def head_forward(head: HeadState, x: Tensor) -> Tensor:
    """[..., in_dim] features -> [..., prototype_count] prototype scores."""
    if x.shape[-1] != head.config.in_dim:
        raise ConfigError(f'Head expects {head.config.in_dim}-d inputs, got {x.shape[-1]}')
    layers = head.config.layer_count
    for i in range(layers):
        x = F.matmul(x, head.params[f'mlp.{i}.weight']) + head.params[f'mlp.{i}.bias']
        if i < layers - 1:
            x = F.gelu(x)
    z = F.l2_normalize(x, axis=-1, eps=1e-6)
    return F.matmul(z, F.swap_last(head.prototypes))


def normalize_prototypes(head: HeadState) -> None:
    """Project prototype rows back onto the unit sphere (after every update)."""
    proto = head.prototypes
    proto.data = (proto.data / np.maximum(np.linalg.norm(proto.data, axis=1, keepdims=True), 1e-12)).astype(proto.dtype)


def head_config_from_arrays(arrays) -> HeadConfig:
    """Recover a HeadConfig from stored head arrays (keys relative to the head)."""
    layer_count = sum(1 for key in arrays if key.startswith('mlp.') and key.endswith('.weight'))
    if layer_count == 0 or 'prototypes' not in arrays:
        raise ConfigError('Stored arrays do not hold a projection head')
    first, last = arrays['mlp.0.weight'], arrays[f'mlp.{layer_count - 1}.weight']
    hidden = first.shape[1] if layer_count > 1 else 0
    return HeadConfig(in_dim=first.shape[0], hidden_dim=hidden, bottleneck_dim=last.shape[1],
                      prototype_count=arrays['prototypes'].shape[0], layer_count=layer_count).validate()
