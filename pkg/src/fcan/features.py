"""Shared convolutional backbone and the grid <-> pixel geometry around it."""

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as tn
from .tensor import LayerParams, ShapeError, Tensor


@dataclass
class FeatureMap:
    activations: Tensor
    stride: int
    source_size: tuple

    @property
    def grid_size(self):
        return self.activations.shape[-2:]


@dataclass(frozen=True)
class RegionSpec:
    """Part size in feature cells for timestep ``t``; pixels follow from the stride."""
    t: int
    cells_h: int
    cells_w: int

    def pixels(self, stride):
        return self.cells_h * stride, self.cells_w * stride


@dataclass(frozen=True)
class GlimpseLocation:
    """Region centre in feature cells."""
    t: int
    row: int
    col: int


@dataclass
class Backbone:
    layers: list
    pools: list = field(default_factory=list)

    @property
    def downsample(self):
        f = 1
        for layer, pool in zip(self.layers, self.pools):
            f *= layer.stride * (2 if pool else 1)
        return f

    @property
    def out_channels(self):
        return self.layers[-1].kernels.shape[0]

    @property
    def in_channels(self):
        return self.layers[0].kernels.shape[1]

    @property
    def tensors(self):
        return [t for layer in self.layers for t in layer.tensors]

    def forward(self, x):
        h = x
        for layer, pool in zip(self.layers, self.pools):
            h = tn.conv2d(h, layer)
            # relu and max-pool commute; pooling first is cheaper
            if pool:
                h = tn.max_pool2d(h)
            h = tn.relu(h)
        return h

    def copy(self):
        return Backbone([layer.copy() for layer in self.layers], list(self.pools))

    def state(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.w"] = layer.kernels.data
            out[f"{prefix}.{i}.b"] = layer.bias.data
        return out

    def load_state(self, state, prefix):
        for i, layer in enumerate(self.layers):
            layer.kernels.data = np.array(state[f"{prefix}.{i}.w"])
            layer.bias.data = np.array(state[f"{prefix}.{i}.b"])


def default_backbone(rng, in_channels=1, channels=(8, 16, 32)):
    """conv3x3(pad 1) -> relu -> maxpool2 per block; downsample 2**len(channels)."""
    layers = []
    c = in_channels
    for out in channels:
        layers.append(LayerParams.init(rng, c, out, k=3, stride=1, padding=1))
        c = out
    return Backbone(layers, [True] * len(layers))


def extract_features(image, backbone):
    """Run the backbone on a C x H x W image (or N x C x H x W batch)."""
    h, w = image.shape[-2:]
    f = backbone.downsample
    if h % f or w % f:
        need_h, need_w = (-h) % f, (-w) % f
        raise ShapeError(
            f"image {h}x{w} not divisible by downsample {f}; pad by {need_h} rows and {need_w} columns")
    return FeatureMap(backbone.forward(image), f, (h, w))


def clamp_region(loc, spec, grid_h, grid_w):
    """Cell rectangle (top, left, h, w) centred on ``loc`` and pushed inside the grid."""
    h, w = min(spec.cells_h, grid_h), min(spec.cells_w, grid_w)
    top = min(max(loc.row - h // 2, 0), grid_h - h)
    left = min(max(loc.col - w // 2, 0), grid_w - w)
    return top, left, h, w


def grid_rect_to_pixels(cells, stride, source_size):
    """Scale a cell rectangle by the stride, keeping it inside the source image."""
    top, left, h, w = cells
    ph, pw = h * stride, w * stride
    return min(top * stride, source_size[0] - ph), min(left * stride, source_size[1] - pw), ph, pw


def region_to_patch(loc, spec, fmap):
    """Pixel rectangle (top, left, h, w) whose extent matches the part size."""
    gh, gw = fmap.grid_size
    return grid_rect_to_pixels(clamp_region(loc, spec, gh, gw), fmap.stride, fmap.source_size)


def select_region_features(fmap, loc, spec):
    gh, gw = fmap.grid_size
    top, left, h, w = clamp_region(loc, spec, gh, gw)
    return tn.crop(fmap.activations, top, left, h, w)


def crop_and_resize(image, rect, size):
    """Pixel crop followed by bilinear resize to ``size`` = (h, w)."""
    top, left, h, w = rect
    if h <= 0 or w <= 0:
        raise ValueError(f"degenerate rectangle {rect}")
    image = tn.as_tensor(image)
    patch = tn.crop(image, top, left, h, w)
    if (h, w) == tuple(size):
        return patch
    return tn.resize_bilinear(patch, size)


def crop_batch(images, rects, size):
    """Crop-and-resize every image in an N x C x H x W array; returns an array.

    Rectangles sharing one shape reuse a single pair of interpolation matrices.
    """
    images = np.asarray(images)
    n, c = images.shape[:2]
    out = np.empty((n, c) + tuple(size))
    cache = {}
    for i, (top, left, h, w) in enumerate(rects):
        if (h, w) not in cache:
            cache[(h, w)] = (tn.bilinear_matrix(h, size[0]), tn.bilinear_matrix(w, size[1]))
        ry, rx = cache[(h, w)]
        patch = images[i, :, top:top + h, left:left + w]
        out[i] = np.einsum("ih,chw,jw->cij", ry, patch, rx, optimize=True)
    return out


def save_feature_cache(path, activations, stride, source_size, sample_ids=None):
    """Write N x C x H x W activations as ``feat.<id>`` records in the checkpoint container."""
    activations = np.asarray(activations)
    ids = range(len(activations)) if sample_ids is None else sample_ids
    records = {"meta.stride": np.array([stride], dtype=float),
               "meta.source_size": np.array(source_size, dtype=float)}
    for i, a in zip(ids, activations):
        records[f"feat.{int(i)}"] = a
    checkpoint.save(path, records)


def load_feature_cache(path):
    """Returns ({sample_id: C x H x W array}, stride, source_size)."""
    records = checkpoint.load(path)
    try:
        stride = int(records.pop("meta.stride")[0])
        source = tuple(int(v) for v in records.pop("meta.source_size"))
    except KeyError as e:
        raise ValueError(f"{path}: feature cache lacks {e.args[0]}") from None
    feats = {int(k.split(".", 1)[1]): v for k, v in records.items() if k.startswith("feat.")}
    return feats, stride, source
