"""The classification module: a small CNN over 64x64 RGB images.

Layout: a strided 3x3 stem, then one stage per entry of ``stage_channels``
(each stage = strided 3x3 conv + 3x3 conv, both ReLU), then global average
pooling and a dense classifier head.  Every stage's post-ReLU output is a
feature grid that training-time heads may attach to; inference consumes
only the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import Rng, derive_seed


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    stem_channels: int = 8
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stem_stride: int = 2
    stage_strides: tuple[int, ...] = (2, 2, 2)
    class_count: int = 8
    seed: int = 0

    def grid_sides(self) -> tuple[int, ...]:
        """Spatial side of each stage's feature grid."""
        side = _out_side(self.input_size, self.stem_stride)
        sides = []
        for s in self.stage_strides:
            side = _out_side(side, s)
            sides.append(side)
        return tuple(sides)

    def stage_for_side(self, side: int) -> int:
        sides = self.grid_sides()
        if side not in sides:
            raise ShapeError(f"no stage with grid side {side}; have {sides}")
        return sides.index(side)


def _out_side(side: int, stride: int) -> int:
    return (side - 1) // stride + 1  # 'same' padding


def init_params(config: BackboneConfig) -> dict[str, T.Value]:
    """Fan-in-scaled uniform weights, zero biases, fixed draw order."""
    rng = Rng(derive_seed(config.seed, 1))
    params: dict[str, T.Value] = {}

    def conv(name, k, cin, cout):
        limit = np.sqrt(3.0 / (k * k * cin))
        params[f"{name}.w"] = T.param(rng.uniform(-limit, limit, (k, k, cin, cout)))
        params[f"{name}.b"] = T.param(np.zeros(cout))

    conv("backbone.stem", 3, 3, config.stem_channels)
    cin = config.stem_channels
    for i, cout in enumerate(config.stage_channels):
        conv(f"backbone.stage{i}.conv1", 3, cin, cout)
        conv(f"backbone.stage{i}.conv2", 3, cout, cout)
        cin = cout
    limit = np.sqrt(3.0 / cin)
    params["backbone.fc.w"] = T.param(rng.uniform(-limit, limit, (cin, config.class_count)))
    params["backbone.fc.b"] = T.param(np.zeros(config.class_count))
    return params


def _conv_block(x, params, name, stride):
    y = T.conv2d(x, params[f"{name}.w"], stride=stride, padding="same")
    return T.relu(T.add(y, params[f"{name}.b"]))


def forward(params: dict, images, config: BackboneConfig, upto: int | None = None):
    """Run the backbone.

    ``images`` is (H, W, 3) or (B, H, W, 3) in [0, 1].  Returns
    (feature grids, logits); with ``upto`` set, stops after that stage
    index and returns logits=None.
    """
    x = images if isinstance(images, T.Value) else T.const(images)
    if x.shape[-3] != config.input_size or x.shape[-2] != config.input_size or x.shape[-1] != 3:
        raise ShapeError(f"expected {config.input_size}x{config.input_size}x3 images, got {x.shape}")
    x = _conv_block(x, params, "backbone.stem", config.stem_stride)
    grids = []
    for i, stride in enumerate(config.stage_strides):
        x = _conv_block(x, params, f"backbone.stage{i}.conv1", stride)
        x = _conv_block(x, params, f"backbone.stage{i}.conv2", 1)
        grids.append(x)
        if upto is not None and i == upto:
            return grids, None
    pooled = T.global_avg_pool(x)
    logits = T.dense(pooled, params["backbone.fc.w"], params["backbone.fc.b"])
    return grids, logits


def forward_raw(params: dict, images: np.ndarray, config: BackboneConfig,
                upto: int) -> list[np.ndarray]:
    """Gradient-free twin of forward for stop-gradient feature targets.

    Runs the identical op sequence on plain arrays up to stage ``upto``
    and returns the stage grids; bit-identical to forward's .data.
    """
    def block(x, name, stride):
        y = T.conv2d_raw(x, params[f"{name}.w"].data, stride=stride, padding="same")
        return np.maximum(y + params[f"{name}.b"].data, 0.0)

    x = block(np.asarray(images, dtype=np.float64), "backbone.stem", config.stem_stride)
    grids = []
    for i, stride in enumerate(config.stage_strides):
        x = block(x, f"backbone.stage{i}.conv1", stride)
        x = block(x, f"backbone.stage{i}.conv2", 1)
        grids.append(x)
        if i == upto:
            break
    return grids


def classification_loss(logits: T.Value, onehot) -> T.Value:
    """Cross-entropy against one-hot labels, averaged over the batch."""
    ce = T.softmax_cross_entropy(logits, onehot)
    if ce.ndim == 0:
        return ce
    return T.reduce_mean(ce)


def head_parameter_count(channels: int, proj_channels: int) -> int:
    """Learnable scalars of one stage's head set: mask conv, projection conv,
    coordinate regressor."""
    mask = channels * 1 + 1
    proj = channels * proj_channels + proj_channels
    fc = 2 * proj_channels * 2 + 2
    return mask + proj + fc


def parameter_count(config: BackboneConfig, include_lio_heads: bool,
                    attached_stages: tuple[int, ...] = (1,), proj_channels: int = 32) -> int:
    """Exact count of learnable scalars; the inference path never includes heads."""
    n = 3 * 3 * 3 * config.stem_channels + config.stem_channels
    cin = config.stem_channels
    for cout in config.stage_channels:
        n += 3 * 3 * cin * cout + cout
        n += 3 * 3 * cout * cout + cout
        cin = cout
    n += cin * config.class_count + config.class_count
    if include_lio_heads:
        for s in attached_stages:
            n += head_parameter_count(config.stage_channels[s], proj_channels)
    return n
