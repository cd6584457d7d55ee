"""Whole-image and per-part classifiers, score averaging, and inference."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .attention import AttentionHead, attention_distribution, argmax_location, score_map
from .features import (Backbone, GlimpseLocation, RegionSpec, crop_and_resize, default_backbone,
                       extract_features, region_to_patch)
from .rng import Rng
from .tensor import LayerParams, ShapeError


@dataclass
class PartClassifier:
    """Classifier for timestep ``t`` (0 = whole image).

    ``head`` is a 1x1 convolution from pooled features to class logits.  Part
    classifiers (t >= 1) also own ``stack``, a backbone applied to the resized
    high-resolution crop, and ``region_head``, which scores pooled region
    features sliced from the shared feature map while attention is trained.
    """
    t: int
    head: LayerParams
    num_classes: int
    stack: Backbone = None
    region_head: LayerParams = None
    input_size: tuple = None

    @property
    def tensors(self):
        out = list(self.head.tensors)
        if self.stack is not None:
            out = self.stack.tensors + out
        return out

    def state(self):
        name = "clf.image" if self.t == 0 else f"clf.part.{self.t}"
        out = {f"{name}.head.w": self.head.kernels.data, f"{name}.head.b": self.head.bias.data}
        if self.stack is not None:
            out.update(self.stack.state(f"{name}.stack"))
        if self.region_head is not None:
            out[f"{name}.region.w"] = self.region_head.kernels.data
            out[f"{name}.region.b"] = self.region_head.bias.data
        return out

    def load_state(self, state):
        name = "clf.image" if self.t == 0 else f"clf.part.{self.t}"
        self.head.kernels.data = np.array(state[f"{name}.head.w"])
        self.head.bias.data = np.array(state[f"{name}.head.b"])
        if self.stack is not None:
            self.stack.load_state(state, f"{name}.stack")
        if self.region_head is not None:
            self.region_head.kernels.data = np.array(state[f"{name}.region.w"])
            self.region_head.bias.data = np.array(state[f"{name}.region.b"])


def pooled_logits(features, head):
    """Global average pool then the 1x1 head: (N x) C x H x W -> (N x) classes."""
    return tn.linear(tn.global_avg_pool(features), head)


def classify_part(patch, clf):
    """Class-probability vector for one patch (C x H x W) or a batch."""
    patch = tn.as_tensor(patch)
    if clf.input_size is not None and tuple(patch.shape[-2:]) != tuple(clf.input_size):
        raise ShapeError(f"classifier {clf.t} expects {clf.input_size} input, got {patch.shape[-2:]}")
    feats = clf.stack.forward(patch) if clf.stack is not None else patch
    return tn.softmax(pooled_logits(feats, clf.head))


def average_scores(scores):
    """Element-wise mean of a non-empty list of probability vectors."""
    if len(scores) == 0:
        raise ValueError("average_scores needs at least one score vector")
    arr = np.stack([np.asarray(s, dtype=np.float64) for s in scores])
    return arr.mean(axis=0)


@dataclass
class StepScores:
    scores: list
    averages: list = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores):
        return cls(list(scores), [average_scores(scores[:i + 1]) for i in range(len(scores))])

    @property
    def final(self):
        return self.averages[-1]


@dataclass
class ModelParams:
    """Feature backbone, whole-image classifier, attention heads, part classifiers."""
    backbone: Backbone
    image_clf: PartClassifier
    heads: list
    parts: list
    image_size: tuple
    part_size: tuple

    @property
    def num_classes(self):
        return self.image_clf.num_classes

    @property
    def T(self):
        return len(self.heads)

    def state(self):
        """Named arrays for the checkpoint container, plus ``meta.*`` geometry."""
        out = {"meta.image_size": np.array(self.image_size, dtype=float),
               "meta.part_size": np.array(self.part_size, dtype=float),
               "meta.regions": np.array([[h.region.cells_h, h.region.cells_w] for h in self.heads],
                                        dtype=float).reshape(-1, 2)}
        out.update(self.backbone.state("backbone"))
        out.update(self.image_clf.state())
        for head in self.heads:
            out.update(head.state())
        for part in self.parts:
            out.update(part.state())
        return out

    def load_state(self, state):
        self.backbone.load_state(state, "backbone")
        k = state["clf.image.head.w"].shape[0]
        if k != self.num_classes:
            raise ValueError(f"checkpoint has {k} classes, model expects {self.num_classes}")
        self.image_clf.load_state(state)
        for head in self.heads:
            head.load_state(state)
        for part in self.parts:
            part.load_state(state)


def build_model(rng, num_classes, image_size=(64, 64), part_size=(64, 64), in_channels=1,
                channels=(8, 16, 32), region_sizes=((2, 2), (4, 4)), hidden=64):
    backbone = default_backbone(rng, in_channels, channels)
    c = backbone.out_channels
    image_clf = PartClassifier(0, LayerParams.init(rng, c, num_classes, k=1, padding=0, gain=1.0),
                               num_classes, input_size=tuple(image_size))
    heads, parts = [], []
    for t, (ch, cw) in enumerate(region_sizes, start=1):
        heads.append(AttentionHead.init(rng, t, c, RegionSpec(t, ch, cw), hidden=hidden))
        parts.append(PartClassifier(t, image_clf.head.copy(), num_classes, stack=backbone.copy(),
                                    region_head=image_clf.head.copy(), input_size=tuple(part_size)))
    return ModelParams(backbone, image_clf, heads, parts, tuple(image_size), tuple(part_size))


def predict(image, model, locations=None):
    """Argmax-attention inference on one C x H x W image.

    Returns (label, StepScores, locations).  ``locations`` may override the
    attention heads (one GlimpseLocation per part), which is how the random
    and centre-region baselines are evaluated.
    """
    image = tn.as_tensor(image)
    fmap = extract_features(image, model.backbone)
    scores = [tn.softmax(pooled_logits(fmap.activations, model.image_clf.head)).data]
    chosen = []
    for i, (head, part) in enumerate(zip(model.heads, model.parts)):
        if locations is None:
            loc = argmax_location(attention_distribution(score_map(fmap, head), head.t))
        else:
            loc = locations[i]
        rect = region_to_patch(loc, head.region, fmap)
        patch = crop_and_resize(image, rect, model.part_size)
        scores.append(classify_part(patch, part).data)
        chosen.append(loc)
    steps = StepScores.from_scores(scores)
    return int(np.argmax(steps.final)), steps, chosen


def model_from_state(state):
    """Rebuild a ModelParams whose shapes match a checkpoint, then load it."""
    n_layers = sum(1 for k in state if k.startswith("backbone.") and k.endswith(".w"))
    if n_layers == 0 or "clf.image.head.w" not in state or "meta.regions" not in state:
        raise ValueError("checkpoint lacks backbone, image classifier or geometry records")
    w0 = state["backbone.0.w"]
    channels = tuple(int(state[f"backbone.{i}.w"].shape[0]) for i in range(n_layers))
    num_classes = int(state["clf.image.head.w"].shape[0])
    regions = tuple((int(h), int(w)) for h, w in np.asarray(state["meta.regions"]).reshape(-1, 2))
    hidden = int(state["attn.1.conv1.w"].shape[0]) if regions else 64
    image_size = tuple(int(v) for v in state["meta.image_size"])
    part_size = tuple(int(v) for v in state["meta.part_size"])
    model = build_model(Rng(0), num_classes, image_size, part_size, int(w0.shape[1]), channels,
                        regions, hidden)
    model.load_state(state)
    return model
