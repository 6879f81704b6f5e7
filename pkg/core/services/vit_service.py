"""
Tiny Vision Transformer: patch embedding, CLS + register tokens, axial RoPE,
pre-norm blocks with SwiGLU feed-forward, optional stochastic depth, and one
output layer norm per crop kind (global / local).

Parameters live in a flat name -> Tensor dict (ViTState.params) so the same
container serves the student, the EMA teacher, the Gram teacher and the
checkpoint files.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ..exceptions import ConfigError, GeometryError
from ..utils import functional as F
from ..utils.param_tree import ParameterTree
from ..utils.rope import ROPE_BASE, apply_rope, check_head_dim, patch_coordinates
from ..utils.tensor import Tensor, as_tensor, get_default_dtype

logger = logging.getLogger(__name__)

OUTLIER_STRATEGIES = ('registers', 'attention_bias', 'value_gating', 'none')
CROP_KINDS = ('global', 'local')
INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 4
    embed_dim: int = 64
    ffn_hidden_dim: int = 128
    head_count: int = 4
    head_dim: int = 16
    patch_size: int = 8
    in_channels: int = 3
    register_count: int = 4
    rope_jitter_range: tuple = (0.5, 2.0)
    outlier_strategy: str = 'registers'
    stochastic_depth_rate: float = 0.0
    separate_output_norms: bool = True
    layer_norm_eps: float = 1e-6
    rope_base: float = ROPE_BASE

    def validate(self) -> 'ViTConfig':
        if self.embed_dim != self.head_count * self.head_dim:
            raise ConfigError(
                f'embed_dim ({self.embed_dim}) must equal head_count x head_dim '
                f'({self.head_count} x {self.head_dim})'
            )
        if self.depth < 1 or self.patch_size < 1 or self.ffn_hidden_dim < 1:
            raise ConfigError('depth, patch_size and ffn_hidden_dim must be positive')
        if self.register_count < 0:
            raise ConfigError(f'register_count must be >= 0, got {self.register_count}')
        if not 0 <= self.stochastic_depth_rate < 1:
            raise ConfigError(f'stochastic_depth_rate must be in [0, 1), got {self.stochastic_depth_rate}')
        if self.outlier_strategy not in OUTLIER_STRATEGIES:
            raise ConfigError(f'outlier_strategy must be one of {OUTLIER_STRATEGIES}, got {self.outlier_strategy!r}')
        if self.outlier_strategy == 'registers' and self.register_count == 0:
            raise ConfigError('outlier_strategy=registers needs register_count > 0')
        s_min, s_max = self.rope_jitter_range
        if not 0 < s_min <= s_max:
            raise ConfigError(f'rope_jitter_range must satisfy 0 < s_min <= s_max, got {self.rope_jitter_range}')
        check_head_dim(self.head_dim)
        return self

    def grid(self, height: int, width: int) -> tuple[int, int]:
        if height % self.patch_size or width % self.patch_size:
            raise GeometryError(
                f'Image {height}x{width} is not divisible by patch size {self.patch_size}'
            )
        return height // self.patch_size, width // self.patch_size

    def token_count(self, height: int, width: int) -> int:
        gh, gw = self.grid(height, width)
        return 1 + self.register_count + gh * gw

    def to_text(self) -> str:
        """Canonical key=value block stored in checkpoints."""
        lines = []
        for key, value in sorted(asdict(self).items()):
            if isinstance(value, (tuple, list)):
                value = ','.join(repr(float(v)) for v in value)
            lines.append(f'{key} = {value}')
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'ViTConfig':
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition('=')
            key, raw = key.strip(), raw.strip()
            if key not in types:
                raise ConfigError(f'Unknown ViT config key {key!r}')
            default = getattr(cls, key)
            if isinstance(default, bool):
                values[key] = raw == 'True'
            elif isinstance(default, int):
                values[key] = int(raw)
            elif isinstance(default, float):
                values[key] = float(raw)
            elif isinstance(default, tuple):
                values[key] = tuple(float(v) for v in raw.split(','))
            else:
                values[key] = raw
        return cls(**values).validate()


@dataclass
class ViTState(ParameterTree):
    config: ViTConfig


@dataclass
class BackboneOutput:
    cls: Tensor
    registers: Tensor
    patches: Tensor
    grid: tuple[int, int]
    taps: list[Tensor] = field(default_factory=list)
    prenorm_patches: np.ndarray | None = None

    @property
    def token_count(self) -> int:
        return 1 + self.registers.shape[1] + self.patches.shape[1]


def _normal(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * INIT_STD


def init_vit(config: ViTConfig, rng: np.random.Generator) -> ViTState:
    """Fresh parameters for `config` (truncated-normal weights, unit norms)."""
    config.validate()
    d, hidden, p = config.embed_dim, config.ffn_hidden_dim, config.patch_size
    arrays: dict[str, np.ndarray] = {
        'patch_embed.weight': _normal(rng, p * p * config.in_channels, d),
        'patch_embed.bias': np.zeros(d),
        'cls_token': _normal(rng, d),
        'mask_token': np.zeros(d),
    }
    if config.register_count:
        arrays['register_tokens'] = _normal(rng, config.register_count, d)
    for i in range(config.depth):
        prefix = f'blocks.{i}.'
        arrays.update({
            prefix + 'norm1.weight': np.ones(d),
            prefix + 'norm1.bias': np.zeros(d),
            prefix + 'attn.qkv.weight': _normal(rng, d, 3 * d),
            prefix + 'attn.qkv.bias': np.zeros(3 * d),
            prefix + 'attn.proj.weight': _normal(rng, d, d),
            prefix + 'attn.proj.bias': np.zeros(d),
            prefix + 'norm2.weight': np.ones(d),
            prefix + 'norm2.bias': np.zeros(d),
            prefix + 'mlp.w12.weight': _normal(rng, d, 2 * hidden),
            prefix + 'mlp.w12.bias': np.zeros(2 * hidden),
            prefix + 'mlp.w3.weight': _normal(rng, hidden, d),
            prefix + 'mlp.w3.bias': np.zeros(d),
        })
        if config.outlier_strategy == 'attention_bias':
            arrays[prefix + 'attn.k_bias'] = np.zeros((config.head_count, config.head_dim))
        if config.outlier_strategy in ('attention_bias', 'value_gating'):
            arrays[prefix + 'attn.v_bias'] = np.zeros((config.head_count, config.head_dim))
    arrays['norm.weight'] = np.ones(d)
    arrays['norm.bias'] = np.zeros(d)
    if config.separate_output_norms:
        arrays['local_norm.weight'] = np.ones(d)
        arrays['local_norm.bias'] = np.zeros(d)
    dtype = get_default_dtype()
    params = {name: Tensor(value, requires_grad=True, dtype=dtype, name=name) for name, value in arrays.items()}
    return ViTState(config, params)


def param_layer_id(name: str, depth: int) -> int:
    """Layer index used by layer-wise lr decay: embeddings 0, block i -> i + 1, output norms -> depth."""
    if name.startswith('blocks.'):
        return int(name.split('.')[1]) + 1
    if name.startswith(('patch_embed', 'cls_token', 'register_tokens', 'mask_token')):
        return 0
    return depth


def skips_weight_decay(name: str) -> bool:
    return (name.endswith('.bias') or 'norm' in name or name.endswith('_token')
            or name == 'register_tokens' or name.endswith(('k_bias', 'v_bias')))


# --------------------
# Attention
# --------------------
def attention(q: Tensor, k: Tensor, v: Tensor, strategy: str = 'none',
              k_bias: Tensor | None = None, v_bias: Tensor | None = None,
              return_weights: bool = False):
    """
    Scaled dot-product attention over the last two axes with the outlier strategies.

    `none` / `registers`: softmax(QK^T / sqrt(d)) V.
    `value_gating`: the same plus the learned value bias v'.
    `attention_bias`: keys and values extended with one learned slot (k', v').
    k' / v' must broadcast to one token row of K / V (e.g. [heads, 1, head_dim]).
    """
    if strategy not in OUTLIER_STRATEGIES:
        raise ConfigError(f'Unknown attention strategy {strategy!r}')
    if strategy == 'value_gating' and v_bias is None:
        raise ConfigError('value_gating attention needs the v_bias parameter')
    if strategy == 'attention_bias' and (k_bias is None or v_bias is None):
        raise ConfigError('attention_bias attention needs both k_bias and v_bias parameters')
    scale = 1.0 / math.sqrt(q.shape[-1])
    if strategy == 'attention_bias':
        slot_shape = tuple(k.shape[:-2]) + (1, k.shape[-1])
        k = F.concat([k, F.broadcast_to(k_bias, slot_shape)], axis=-2)
        v = F.concat([v, F.broadcast_to(v_bias, slot_shape)], axis=-2)
    logits = F.matmul(q, F.swap_last(k)) * scale
    weights = F.softmax(logits, axis=-1)
    out = F.matmul(weights, v)
    if strategy == 'value_gating':
        out = out + v_bias
    return (out, weights) if return_weights else out


def _rope_patch_tokens(x: Tensor, prefix: int, coords: np.ndarray, jitter_scale: float, base: float) -> Tensor:
    """Apply RoPE to the patch tokens only; CLS and registers carry no position."""
    patches = apply_rope(x[:, :, prefix:], coords, jitter_scale, base=base)
    if prefix == 0:
        return patches
    return F.concat([x[:, :, :prefix], patches], axis=2)


def _attention_block(state: ViTState, i: int, h: Tensor, coords: np.ndarray, jitter_scale: float) -> Tensor:
    cfg = state.config
    p = state.params
    prefix = f'blocks.{i}.attn.'
    batch, tokens, d = h.shape
    qkv = F.matmul(h, p[prefix + 'qkv.weight']) + p[prefix + 'qkv.bias']
    qkv = qkv.reshape(batch, tokens, 3, cfg.head_count, cfg.head_dim).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    n_prefix = 1 + cfg.register_count
    q = _rope_patch_tokens(q, n_prefix, coords, jitter_scale, cfg.rope_base)
    k = _rope_patch_tokens(k, n_prefix, coords, jitter_scale, cfg.rope_base)
    k_bias = p.get(prefix + 'k_bias')
    v_bias = p.get(prefix + 'v_bias')
    heads = cfg.head_count
    out = attention(
        q, k, v, cfg.outlier_strategy,
        k_bias=k_bias.reshape(heads, 1, cfg.head_dim) if k_bias is not None else None,
        v_bias=v_bias.reshape(heads, 1, cfg.head_dim) if v_bias is not None else None,
    )
    out = out.transpose(0, 2, 1, 3).reshape(batch, tokens, d)
    return F.matmul(out, p[prefix + 'proj.weight']) + p[prefix + 'proj.bias']


def _ffn_block(state: ViTState, i: int, h: Tensor) -> Tensor:
    p = state.params
    prefix = f'blocks.{i}.mlp.'
    hidden = state.config.ffn_hidden_dim
    gate_up = F.matmul(h, p[prefix + 'w12.weight']) + p[prefix + 'w12.bias']
    gated = F.swiglu(gate_up[..., :hidden], gate_up[..., hidden:])
    return F.matmul(gated, p[prefix + 'w3.weight']) + p[prefix + 'w3.bias']


def _drop_path(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * as_tensor(keep.reshape(-1, 1, 1), x)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, H, W, C] -> [B, P, patch*patch*C] in row-major patch order."""
    b, h, w, c = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def _as_batch(images) -> np.ndarray:
    array = images.data if isinstance(images, Tensor) else np.asarray(images)
    if array.ndim == 3:
        array = array[None]
    if array.ndim != 4:
        raise GeometryError(f'Expected [H, W, C] or [B, H, W, C] images, got shape {array.shape}')
    return array


def _output_norm(state: ViTState, crop_kind: str) -> tuple[Tensor, Tensor]:
    if crop_kind not in CROP_KINDS:
        raise ConfigError(f'crop_kind must be one of {CROP_KINDS}, got {crop_kind!r}')
    p = state.params
    if crop_kind == 'local' and state.config.separate_output_norms:
        return p['local_norm.weight'], p['local_norm.bias']
    return p['norm.weight'], p['norm.bias']


def forward(state: ViTState, images, crop_kind: str = 'global', mask=None, jitter_scale: float | None = None,
            drop_rng: np.random.Generator | None = None, return_taps: bool = False,
            norm_taps: bool = False) -> BackboneOutput:
    """
    Run the backbone on a batch of images ([B, H, W, C]; a single [H, W, C] image is a batch of one).

    `mask` ([B, P] or [P] booleans) replaces the masked patch embeddings with
    the learned mask token. `jitter_scale` rescales the RoPE box (None means
    inference, s = 1). Stochastic depth is active only when `drop_rng` is given.
    """
    cfg = state.config
    p = state.params
    batch_images = _as_batch(images)
    b, height, width, _ = batch_images.shape
    gh, gw = cfg.grid(height, width)
    n_patches = gh * gw
    dtype = p['patch_embed.weight'].dtype
    s = 1.0 if jitter_scale is None else float(jitter_scale)

    x = F.matmul(as_tensor(patchify(batch_images.astype(dtype), cfg.patch_size), p['patch_embed.weight']),
                 p['patch_embed.weight']) + p['patch_embed.bias']
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.ndim == 1:
            m = np.broadcast_to(m, (b, n_patches))
        if m.shape != (b, n_patches):
            raise GeometryError(f'mask shape {m.shape} does not match {(b, n_patches)} patches')
        if m.any():
            weight = m[..., None].astype(dtype)
            x = x * as_tensor(1.0 - weight, x) + F.broadcast_to(p['mask_token'], x.shape) * as_tensor(weight, x)

    d = cfg.embed_dim
    pieces = [F.broadcast_to(p['cls_token'].reshape(1, 1, d), (b, 1, d))]
    if cfg.register_count:
        pieces.append(F.broadcast_to(p['register_tokens'].reshape(1, cfg.register_count, d),
                                     (b, cfg.register_count, d)))
    pieces.append(x)
    x = F.concat(pieces, axis=1)

    coords = patch_coordinates(gh, gw)
    n_prefix = 1 + cfg.register_count
    eps = cfg.layer_norm_eps
    final_w, final_b = _output_norm(state, crop_kind)
    taps = []
    for i in range(cfg.depth):
        prefix = f'blocks.{i}.'
        h = F.layer_norm(x, p[prefix + 'norm1.weight'], p[prefix + 'norm1.bias'], eps)
        x = x + _drop_path(_attention_block(state, i, h, coords, s), cfg.stochastic_depth_rate, drop_rng)
        h = F.layer_norm(x, p[prefix + 'norm2.weight'], p[prefix + 'norm2.bias'], eps)
        x = x + _drop_path(_ffn_block(state, i, h), cfg.stochastic_depth_rate, drop_rng)
        if return_taps:
            tap = x[:, n_prefix:]
            taps.append(F.layer_norm(tap, final_w, final_b, eps) if norm_taps else tap)

    prenorm = x.data[:, n_prefix:].copy()
    out = F.layer_norm(x, final_w, final_b, eps)
    return BackboneOutput(
        cls=out[:, 0],
        registers=out[:, 1:n_prefix],
        patches=out[:, n_prefix:],
        grid=(gh, gw),
        taps=taps,
        prenorm_patches=prenorm,
    )


def extract_layer_features(state: ViTState, images, layer_index: int, apply_norm: bool = False,
                           crop_kind: str = 'global') -> Tensor:
    """Residual-stream patch tokens after block `layer_index` (1-based), optionally through the output norm."""
    if not 1 <= layer_index <= state.config.depth:
        raise ConfigError(f'layer_index must be in [1, {state.config.depth}], got {layer_index}')
    truncated = ViTState(replace(state.config, depth=layer_index), state.params)
    output = forward(truncated, images, crop_kind=crop_kind, return_taps=True, norm_taps=apply_norm)
    return output.taps[-1]
