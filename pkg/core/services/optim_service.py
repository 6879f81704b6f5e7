"""
AdamW with decoupled weight decay, per-parameter lr multipliers (layer-wise
decay) and global-norm gradient clipping over several parameter trees.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..exceptions import ConfigError, NumericFault
from ..utils.param_tree import ParameterTree
from ..utils.tensor import Tensor
from .vit_service import ViTState, param_layer_id, skips_weight_decay

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.04
    layerwise_decay: float = 0.98
    clip_grad: float = 3.0

    def validate(self) -> 'OptimizerConfig':
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f'AdamW betas must lie in [0, 1), got ({self.beta1}, {self.beta2})')
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError('AdamW eps must be > 0 and weight_decay >= 0')
        if not 0 < self.layerwise_decay <= 1:
            raise ConfigError(f'layerwise_decay must be in (0, 1], got {self.layerwise_decay}')
        return self


@dataclass(frozen=True)
class ParamSpec:
    tensor: Tensor
    lr_scale: float
    apply_wd: bool


def param_groups(trees: Mapping[str, ParameterTree], layerwise_decay: float = 0.98) -> dict[str, ParamSpec]:
    """
    Flatten `trees` into 'tree/param' -> ParamSpec.

    Backbone parameters get lr x decay^(depth - layer_id); head parameters sit
    on the top layer (multiplier 1). Biases, norms, tokens and prototypes are
    not weight-decayed.
    """
    specs = {}
    for tree_name, tree in trees.items():
        is_backbone = isinstance(tree, ViTState)
        depth = tree.config.depth if is_backbone else 0
        for name, tensor in tree.named_parameters():
            if is_backbone:
                scale = layerwise_decay ** (depth - param_layer_id(name, depth))
                apply_wd = not skips_weight_decay(name)
            else:
                scale = 1.0
                apply_wd = not (name.endswith('.bias') or name == 'prototypes')
            specs[f'{tree_name}/{name}'] = ParamSpec(tensor, scale, apply_wd)
    return specs


def clip_grad_norm(tensors, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is <= max_norm; returns the pre-clip norm."""
    grads = [t.grad for t in tensors if t.grad is not None]
    total = math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if not math.isfinite(total):
        raise NumericFault('Gradient norm is not finite')
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for t in tensors:
            if t.grad is not None:
                t.grad = (t.grad * factor).astype(t.dtype)
    return total


class AdamW:
    """AdamW over a fixed ParamSpec table; moments are kept per parameter name."""

    def __init__(self, specs: dict[str, ParamSpec], config: OptimizerConfig | None = None):
        self.specs = specs
        self.config = (config or OptimizerConfig()).validate()
        self.step_count = 0
        self.exp_avg = {name: np.zeros_like(spec.tensor.data) for name, spec in specs.items()}
        self.exp_avg_sq = {name: np.zeros_like(spec.tensor.data) for name, spec in specs.items()}

    @property
    def tensors(self) -> list[Tensor]:
        return [spec.tensor for spec in self.specs.values()]

    def zero_grad(self) -> None:
        for tensor in self.tensors:
            tensor.zero_grad()

    def step(self, lr: float, weight_decay: float | None = None) -> float:
        """One update at base learning rate `lr`; returns the (pre-clip) gradient norm."""
        cfg = self.config
        wd = cfg.weight_decay if weight_decay is None else weight_decay
        grad_norm = clip_grad_norm(self.tensors, cfg.clip_grad)
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1 ** self.step_count
        bias2 = 1.0 - cfg.beta2 ** self.step_count
        for name, spec in self.specs.items():
            param = spec.tensor
            if param.grad is None:
                continue
            group_lr = lr * spec.lr_scale
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * param.grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(param.grad)
            data = param.data
            if spec.apply_wd and wd:
                data = data * (1.0 - group_lr * wd)
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            param.data = (data - group_lr * update).astype(param.dtype)
        return grad_norm

    # ---- checkpoint state ----
    def state_arrays(self, prefix: str = 'optim') -> dict[str, np.ndarray]:
        arrays = {f'{prefix}.step': np.array([self.step_count], dtype=np.int64)}
        for name in self.specs:
            arrays[f'{prefix}.m.{name}'] = self.exp_avg[name]
            arrays[f'{prefix}.v.{name}'] = self.exp_avg_sq[name]
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = 'optim') -> None:
        key = f'{prefix}.step'
        if key not in arrays:
            raise ConfigError('Checkpoint has no optimizer state')
        self.step_count = int(np.asarray(arrays[key]).reshape(-1)[0])
        for name, spec in self.specs.items():
            for slot, table in (('m', self.exp_avg), ('v', self.exp_avg_sq)):
                stored = arrays.get(f'{prefix}.{slot}.{name}')
                if stored is None or stored.shape != spec.tensor.shape:
                    raise ConfigError(f'Optimizer state for {name} missing or mis-shaped in checkpoint')
                table[name] = np.array(stored, dtype=spec.tensor.dtype)
