"""
Finite-difference checks of every differentiable operation and of the
composite training loss, run at float64 on tiny inputs.

Each case builds `(fn, inputs)` from its own seed stream so a failing case
can be re-run alone; `run_checks` collects one GradcheckResult per case.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..utils import functional as F
from ..utils.gradcheck import gradcheck
from ..utils.rope import apply_rope, patch_coordinates
from ..utils.seeding import derive_rng, stream_code
from ..utils.tensor import Tensor, precision
from .crop_service import CropConfig, build_crop_batch
from .dataset_service import DatasetConfig, SyntheticShapes
from .head_service import HeadConfig, head_forward, init_head
from .loss_service import LossWeights, composite_loss, gram_loss, koleo_loss
from .training_service import LossSettings, compute_teacher_targets, student_losses
from .vit_service import ViTConfig, attention, init_vit

logger = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-4
COMPOSITE_PARAMS = ('blocks.0.attn.qkv.weight', 'blocks.0.mlp.w3.weight', 'norm.weight', 'patch_embed.bias')
COMPOSITE_HEAD_PARAMS = ('mlp.1.weight', 'prototypes')


@dataclass
class GradcheckResult:
    name: str
    passed: bool
    worst_error: float
    error: str = ''

    def as_dict(self) -> dict:
        return {'name': self.name, 'passed': self.passed, 'worst_error': self.worst_error, 'error': self.error}


def _t(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce `out` to a scalar with fixed random weights so every output element matters."""
    weights = rng.standard_normal(out.shape)
    return F.sum(out * Tensor(weights, dtype=np.float64))


def _away_from_zero(rng, *shape, low=0.5, high=2.0):
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], size=shape)


# --------------------
# Operation cases
# --------------------
def _elementwise_cases(rng):
    a, b = rng.standard_normal((3, 4)), _away_from_zero(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    return {
        'add': (lambda x, y: _weighted(x + y, np.random.default_rng(1)), [_t(a), _t(b[:1])]),
        'sub': (lambda x, y: _weighted(x - y, np.random.default_rng(1)), [_t(a), _t(b)]),
        'mul': (lambda x, y: _weighted(x * y, np.random.default_rng(1)), [_t(a), _t(b)]),
        'div': (lambda x, y: _weighted(F.div(x, y), np.random.default_rng(1)), [_t(a), _t(b)]),
        'neg': (lambda x: F.sum(F.neg(x) * Tensor(w)), [_t(a)]),
        'exp': (lambda x: F.sum(F.exp(x) * Tensor(w)), [_t(a)]),
        'log': (lambda x: F.sum(F.log(x) * Tensor(w)), [_t(np.abs(b))]),
        'sqrt': (lambda x: F.sum(F.sqrt(x) * Tensor(w)), [_t(np.abs(b))]),
        'clamp_min': (lambda x: F.sum(F.clamp_min(x, 0.0) * Tensor(w)), [_t(b)]),
        'silu': (lambda x: F.sum(F.silu(x) * Tensor(w)), [_t(a)]),
        'gelu': (lambda x: F.sum(F.gelu(x) * Tensor(w)), [_t(a)]),
        'swiglu': (lambda g, u: F.sum(F.swiglu(g, u) * Tensor(w)), [_t(a), _t(rng.standard_normal((3, 4)))]),
    }


def _shape_cases(rng):
    a = rng.standard_normal((2, 3, 4))
    return {
        'matmul': (lambda x, y: _weighted(F.matmul(x, y), np.random.default_rng(2)),
                   [_t(a), _t(rng.standard_normal((4, 5)))]),
        'transpose': (lambda x: _weighted(F.transpose(x, (2, 0, 1)), np.random.default_rng(2)), [_t(a)]),
        'reshape': (lambda x: _weighted(F.reshape(x, (6, 4)), np.random.default_rng(2)), [_t(a)]),
        'broadcast_to': (lambda x: _weighted(F.broadcast_to(x, (2, 3, 4)), np.random.default_rng(2)),
                         [_t(rng.standard_normal((1, 3, 1)))]),
        'concat': (lambda x, y: _weighted(F.concat([x, y], axis=1), np.random.default_rng(2)),
                   [_t(a), _t(rng.standard_normal((2, 2, 4)))]),
        'getitem': (lambda x: _weighted(x[:, 1:, ::2], np.random.default_rng(2)), [_t(a)]),
        'gather_rows': (lambda x: _weighted(F.gather_rows(x, np.array([2, 0, 2, 1])), np.random.default_rng(2)),
                        [_t(rng.standard_normal((3, 4)))]),
        'sum': (lambda x: _weighted(F.sum(x, axis=1, keepdims=True), np.random.default_rng(2)), [_t(a)]),
        'mean': (lambda x: _weighted(F.mean(x, axis=(0, 2)), np.random.default_rng(2)), [_t(a)]),
    }


def _normalization_cases(rng):
    x = rng.standard_normal((3, 6))
    probs = rng.random((3, 6))
    probs /= probs.sum(axis=1, keepdims=True)
    gram_target = _unit_rows(rng, 2, 4, 3)
    return {
        'softmax': (lambda z: _weighted(F.softmax(z, temperature=0.5), np.random.default_rng(3)), [_t(x)]),
        'log_softmax': (lambda z: _weighted(F.log_softmax(z, temperature=0.1), np.random.default_rng(3)), [_t(x)]),
        'layer_norm': (lambda z, g, b: _weighted(F.layer_norm(z, g, b), np.random.default_rng(3)),
                       [_t(x), _t(rng.uniform(0.5, 1.5, 6)), _t(rng.standard_normal(6))]),
        'l2_normalize': (lambda z: _weighted(F.l2_normalize(z), np.random.default_rng(3)), [_t(x)]),
        'norm': (lambda z: _weighted(F.norm(z, axis=-1), np.random.default_rng(3)), [_t(x)]),
        'cross_entropy_soft': (lambda z: F.cross_entropy_soft(z, probs, temperature=0.1), [_t(x)]),
        'koleo': (lambda z: koleo_loss(z, group_size=4), [_t(rng.standard_normal((6, 5)))]),
        'gram': (lambda z: gram_loss(F.l2_normalize(z), gram_target), [_t(rng.standard_normal((2, 4, 3)))]),
    }


def _unit_rows(rng, *shape):
    rows = rng.standard_normal(shape)
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def _attention_cases(rng):
    heads, tokens, dim = 2, 5, 4
    q, k, v = (rng.standard_normal((1, heads, tokens, dim)) for _ in range(3))
    coords = patch_coordinates(2, 2)
    bias = rng.standard_normal((heads, 1, dim))
    cases = {
        'apply_rope': (lambda x: _weighted(apply_rope(x, coords, jitter_scale=1.3), np.random.default_rng(4)),
                       [_t(rng.standard_normal((heads, 4, dim)))]),
    }
    for strategy in ('none', 'registers'):
        cases[f'attention_{strategy}'] = (
            lambda a, b, c, s=strategy: _weighted(attention(a, b, c, s), np.random.default_rng(4)),
            [_t(q), _t(k), _t(v)],
        )
    cases['attention_value_gating'] = (
        lambda a, b, c, vb: _weighted(attention(a, b, c, 'value_gating', v_bias=vb), np.random.default_rng(4)),
        [_t(q), _t(k), _t(v), _t(bias)],
    )
    cases['attention_attention_bias'] = (
        lambda a, b, c, kb, vb: _weighted(attention(a, b, c, 'attention_bias', k_bias=kb, v_bias=vb),
                                          np.random.default_rng(4)),
        [_t(q), _t(k), _t(v), _t(bias), _t(rng.standard_normal((heads, 1, dim)))],
    )
    head_config = HeadConfig(in_dim=4, hidden_dim=6, bottleneck_dim=3, prototype_count=5, layer_count=2)
    with precision(np.float64):
        head = init_head(head_config, rng)
    names = sorted(head.params)

    def head_fn(*tensors):
        head.params.update(zip(names, tensors))
        return _weighted(head_forward(head, Tensor(np.linspace(-1, 1, 12).reshape(3, 4))), np.random.default_rng(4))

    cases['projection_head'] = (head_fn, [_t(head.params[n].data * 10) for n in names])
    return cases


# --------------------
# Composite loss
# --------------------
def toy_models(seed: int = 0):
    """A one-block backbone with small heads, sized for finite differences."""
    vit_config = ViTConfig(depth=1, embed_dim=8, ffn_hidden_dim=8, head_count=2, head_dim=4, patch_size=4,
                           register_count=1)
    head_config = HeadConfig(in_dim=8, hidden_dim=8, bottleneck_dim=4, prototype_count=6, layer_count=2)
    with precision(np.float64):
        student = init_vit(vit_config, derive_rng(seed, 'init', 0))
        teacher = init_vit(vit_config, derive_rng(seed, 'init', 1))
        dino_head = init_head(head_config, derive_rng(seed, 'init', 2))
        ibot_head = init_head(head_config, derive_rng(seed, 'init', 3))
    # larger weights than the training init so every term has a visible gradient
    for tree in (student, dino_head, ibot_head):
        for name, tensor in tree.params.items():
            if name.endswith('weight') and tensor.ndim == 2:
                tensor.data = tensor.data * 20.0
    return student, teacher, dino_head, ibot_head


def composite_case(seed: int = 0):
    """
    The weighted refine objective (DINO + iBOT + Koleo + Gram) as a function of
    a handful of student backbone and head parameters; teacher targets and
    Gram targets are fixed.
    """
    student, teacher, dino_head, ibot_head = toy_models(seed)
    dataset = SyntheticShapes(DatasetConfig(image_size=16, length=2), seed=seed)
    crop_config = CropConfig(global_size=8, local_size=4, n_local=2, patch_size=4, mask_probability=1.0,
                             mask_ratio=(0.25, 0.5)).validate()
    batch = build_crop_batch(dataset.images(range(2)), [0, 1], crop_config, derive_rng(seed, 'crops', 0),
                             derive_rng(seed, 'masks', 0))
    settings = LossSettings(weights=LossWeights.refine(gram=2.0), koleo_group_size=2)
    with precision(np.float64):
        targets = compute_teacher_targets(teacher, dino_head.copy(), ibot_head.copy(), batch, teacher_temp=0.07)
    grid = (crop_config.global_size // 4, crop_config.global_size // 4)
    gram_targets = _unit_rows(derive_rng(seed, 'jitter', 0), 2 * batch.batch_size, grid[0] * grid[1], 8)

    trees = [(student, name) for name in COMPOSITE_PARAMS] + [(dino_head, name) for name in COMPOSITE_HEAD_PARAMS]

    def fn(*tensors):
        for (tree, name), tensor in zip(trees, tensors):
            tree.params[name] = tensor
        components, _, s_global = student_losses(student, dino_head, ibot_head, batch, targets, settings)
        components['gram'] = gram_loss(F.l2_normalize(s_global.patches, axis=-1), gram_targets)
        total, _ = composite_loss(components, settings.weights, 'refine', gram_teacher_present=True)
        return total

    return fn, [_t(tree.params[name].data) for tree, name in trees]


def all_cases(seed: int = 0) -> dict[str, Callable[[], tuple]]:
    """Case name -> zero-argument builder of (fn, inputs)."""
    builders = {}
    for group in (_elementwise_cases, _shape_cases, _normalization_cases, _attention_cases):
        for name in group(np.random.default_rng(0)):
            builders[name] = (lambda g=group, n=name: g(derive_rng(seed, 'init', stream_code(g.__name__)))[n])
    builders['composite_loss'] = lambda: composite_case(seed)
    return builders


def check_case(name: str, builder: Callable[[], tuple], rtol: float = DEFAULT_RTOL) -> GradcheckResult:
    with precision(np.float64):
        fn, inputs = builder()
        try:
            worst = gradcheck(fn, inputs, h=1e-6, rtol=rtol)
        except AssertionError as exc:
            logger.warning(f'gradcheck {name}: {exc}')
            return GradcheckResult(name, False, float('nan'), str(exc))
    return GradcheckResult(name, True, max(worst.values(), default=0.0))


def run_checks(names=None, seed: int = 0, rtol: float = DEFAULT_RTOL) -> list[GradcheckResult]:
    builders = all_cases(seed)
    unknown = sorted(set(names or ()) - set(builders))
    if unknown:
        raise KeyError(f'Unknown gradcheck cases: {unknown}')
    selected = names or list(builders)
    return [check_case(name, builders[name], rtol) for name in selected]
