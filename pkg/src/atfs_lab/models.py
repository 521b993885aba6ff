"""Classifiers exposing their penultimate-layer features.

Every model maps inputs to logits with ``model(x)`` and additionally offers
``model.forward_with_features(x) -> (logits, features)`` where ``features``
is the output of the second-last layer (the input of the final linear head).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHITECTURES = ("mlp", "small-cnn", "resnet18-shape")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "mlp"
    width: int = 64
    depth: int = 2
    feature_dim: int = 32

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}, expected one of {ARCHITECTURES}")
        if self.width < 1 or self.depth < 0 or self.feature_dim < 1:
            raise ValueError("width, feature_dim must be >= 1 and depth >= 0")


class FeatureClassifier(nn.Module):
    """Body producing features followed by a linear head."""

    feature_dim: int

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward_with_features(self, x):
        feats = self.features(x)
        return self.head(feats), feats

    def forward(self, x):
        return self.head(self.features(x))


class MLP(FeatureClassifier):
    def __init__(self, in_dim: int, num_classes: int, width: int = 64, depth: int = 2, feature_dim: int = 32):
        super().__init__()
        layers, d = [], in_dim
        for _ in range(depth):
            layers += [nn.Linear(d, width), nn.ReLU()]
            d = width
        layers += [nn.Linear(d, feature_dim), nn.ReLU()]
        self.body = nn.Sequential(nn.Flatten(), *layers)
        self.head = nn.Linear(feature_dim, num_classes)
        self.feature_dim = feature_dim

    def features(self, x):
        return self.body(x)


class SmallCNN(FeatureClassifier):
    """Two conv/pool stages and one hidden dense layer; ``width`` is the first conv's channel count."""

    def __init__(self, in_shape, num_classes: int, width: int = 16, feature_dim: int = 64):
        super().__init__()
        c, h, w = in_shape
        self.conv1 = nn.Conv2d(c, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        flat = 2 * width * (h // 4) * (w // 4)
        self.fc = nn.Linear(flat, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)
        self.feature_dim = feature_dim

    def features(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        return F.relu(self.fc(x.flatten(1)))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(FeatureClassifier):
    """CIFAR-style ResNet18: 3x3 stem, four stages of two basic blocks, global average pool.

    ``width`` is the stem channel count (64 in the standard layout) and the
    feature dimension is ``8 * width``.
    """

    def __init__(self, in_shape, num_classes: int, width: int = 64):
        super().__init__()
        c = in_shape[0]
        self.conv1 = nn.Conv2d(c, width, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.in_planes = width
        self.layer1 = self._make_layer(width, stride=1)
        self.layer2 = self._make_layer(2 * width, stride=2)
        self.layer3 = self._make_layer(4 * width, stride=2)
        self.layer4 = self._make_layer(8 * width, stride=2)
        self.feature_dim = 8 * width
        self.head = nn.Linear(self.feature_dim, num_classes)

    def _make_layer(self, planes, stride):
        blocks = []
        for s in (stride, 1):
            blocks.append(BasicBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*blocks)

    def features(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


def build_model(spec: ModelSpec, input_shape, num_classes: int, seed: int = 0) -> FeatureClassifier:
    """Instantiate ``spec`` with parameters drawn from a private RNG stream seeded by ``seed``."""
    input_shape = tuple(input_shape)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.architecture == "mlp":
            model = MLP(math.prod(input_shape), num_classes, spec.width, spec.depth, spec.feature_dim)
        elif spec.architecture == "small-cnn":
            if len(input_shape) != 3:
                raise ValueError(f"small-cnn needs [C, H, W] inputs, got {input_shape}")
            model = SmallCNN(input_shape, num_classes, spec.width, spec.feature_dim)
        else:
            if len(input_shape) != 3:
                raise ValueError(f"resnet18-shape needs [C, H, W] inputs, got {input_shape}")
            if spec.feature_dim != 8 * spec.width:
                raise ValueError(f"resnet18-shape feature_dim is 8 * width = {8 * spec.width}, "
                                 f"spec says {spec.feature_dim}")
            model = ResNet18(input_shape, num_classes, spec.width)
    return model
