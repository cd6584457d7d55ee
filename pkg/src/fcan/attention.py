"""Per-timestep fully convolutional attention heads and location selection."""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .features import FeatureMap, GlimpseLocation, RegionSpec
from .tensor import LayerParams, ShapeError


@dataclass
class AttentionHead:
    t: int
    conv1: LayerParams
    conv2: LayerParams
    region: RegionSpec
    version: int = 0

    @classmethod
    def init(cls, rng, t, in_channels, region, hidden=64, out_gain=0.01):
        """Kernels ~ N(0, gain / fan_in), zero bias.  The small output gain keeps
        the initial confidence map nearly flat, so the first policy is close to
        uniform over the grid."""
        conv1 = LayerParams.init(rng, in_channels, hidden, k=3, padding=1)
        conv2 = LayerParams.init(rng, hidden, 1, k=3, padding=1, gain=out_gain)
        return cls(t, conv1, conv2, region)

    @property
    def tensors(self):
        return self.conv1.tensors + self.conv2.tensors

    def state(self):
        p = f"attn.{self.t}"
        return {f"{p}.conv1.w": self.conv1.kernels.data, f"{p}.conv1.b": self.conv1.bias.data,
                f"{p}.conv2.w": self.conv2.kernels.data, f"{p}.conv2.b": self.conv2.bias.data}

    def load_state(self, state):
        p = f"attn.{self.t}"
        self.conv1.kernels.data = np.array(state[f"{p}.conv1.w"])
        self.conv1.bias.data = np.array(state[f"{p}.conv1.b"])
        self.conv2.kernels.data = np.array(state[f"{p}.conv2.w"])
        self.conv2.bias.data = np.array(state[f"{p}.conv2.b"])
        self.version += 1


@dataclass
class AttentionDistribution:
    probs: np.ndarray
    t: int = 0


def score_map(features, head):
    """conv1 -> relu -> conv2: C x H x W features -> 1 x H x W confidence."""
    x = features.activations if isinstance(features, FeatureMap) else features
    c = x.shape[-3]
    if c != head.conv1.kernels.shape[1]:
        raise ShapeError(f"attention head {head.t}: features have {c} channels, "
                         f"head expects {head.conv1.kernels.shape[1]}")
    return tn.conv2d(tn.relu(tn.conv2d(x, head.conv1)), head.conv2)


def attention_distribution(confidence, t=0):
    probs = tn.spatial_softmax(tn.as_tensor(confidence))
    return AttentionDistribution(probs.data, t)


def sample_locations(dist, k, rng):
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    h, w = dist.probs.shape
    idx = rng.categorical(dist.probs.reshape(-1), k)
    return [GlimpseLocation(dist.t, int(i // w), int(i % w)) for i in idx]


def argmax_location(dist):
    # np.argmax returns the first maximum in row-major order
    h, w = dist.probs.shape
    i = int(np.argmax(dist.probs))
    return GlimpseLocation(dist.t, i // w, i % w)


def batch_policy(features, head):
    """Probability grids N x H x W for a batch of cached feature arrays (no graph)."""
    conf = score_map(tn.Tensor(features), head)
    return tn.spatial_softmax(conf).data


def batch_argmax(probs):
    n, h, w = probs.shape
    idx = probs.reshape(n, -1).argmax(axis=1)
    return np.stack([idx // w, idx % w], axis=1)
