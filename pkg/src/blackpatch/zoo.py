"""Trainable desk-scale models: a small victim CNN and a tiny style backbone.

Both train in seconds on the synthetic object dataset, which is enough
to exercise every attack end to end without any downloaded weights.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import SyntheticObjects, paint_object
from .textures import StyleBackbone
from .victim import VictimHandle, register_adapter

DESK_MEAN = (0.5, 0.5, 0.5)
DESK_STD = (0.25, 0.25, 0.25)


class SmallConvNet(nn.Module):
    """Four conv layers, global average pooling, one linear head."""

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(64, num_classes)

    def forward(self, x):
        return self.head(self.body(x))


def _normalize_batch(images: np.ndarray) -> torch.Tensor:
    mean = np.asarray(DESK_MEAN, dtype=np.float32)
    std = np.asarray(DESK_STD, dtype=np.float32)
    x = (images.astype(np.float32) - mean) / std
    return torch.from_numpy(x.transpose(0, 3, 1, 2).copy())


def _occlude_batch(
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    rng: np.random.Generator,
    prob: float,
) -> np.ndarray:
    """Paste distracting rectangles over a fraction of the images.

    Half the rectangles are flat random colors, half carry the stripe
    pattern of a random class; labels stay untouched either way.
    Training against this makes the classifier hold its prediction
    unless the evidence is actually covered, so attacks have to place
    patches deliberately instead of anywhere.
    """
    out = images.copy()
    n, size = out.shape[0], out.shape[1]
    for i in range(n):
        if rng.random() >= prob:
            continue
        for _ in range(int(rng.integers(1, 4))):
            h = int(rng.integers(6, 17))
            w = int(rng.integers(6, 17))
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            if rng.random() < 0.5:
                out[i, top : top + h, left : left + w] = rng.random(3).astype(
                    np.float32
                )
            else:
                paint_object(out[i], int(rng.integers(num_classes)),
                             num_classes, top, left, h, w, rng)
    return out


def train_on_synthetic(
    model: nn.Module,
    dataset: SyntheticObjects,
    train_count: int = 4000,
    epochs: int = 8,
    batch_size: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
    milestones: Sequence[int] = (),
    occlusion_prob: float = 0.0,
) -> nn.Module:
    """Cross-entropy training loop over the synthetic train split.

    The model is assumed to consume normalized NCHW input. Shuffling
    uses an explicit generator so retraining with one seed reproduces
    the same weights on the same software stack. Learning rate drops
    by 0.3 at each milestone epoch; plain conv stacks without
    normalization layers need the decay to settle. occlusion_prob > 0
    re-augments the raw images every epoch with random colored
    rectangles (labels unchanged).
    """
    images, labels = dataset.batch("train", 0, train_count)
    x = _normalize_batch(images)
    y = torch.from_numpy(labels)
    gen = torch.Generator()
    gen.manual_seed(seed)
    aug_rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(
        opt, milestones=list(milestones), gamma=0.3
    )
    model.train()
    for _ in range(epochs):
        if occlusion_prob > 0:
            x = _normalize_batch(
                _occlude_batch(images, labels, dataset.num_classes,
                               aug_rng, occlusion_prob)
            )
        order = torch.randperm(train_count, generator=gen)
        for i in range(0, train_count, batch_size):
            idx = order[i : i + batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
        sched.step()
    model.eval()
    return model


def train_desk_victim(
    dataset: Optional[SyntheticObjects] = None,
    seed: int = 0,
    train_count: int = 4000,
    epochs: int = 8,
    occlusion_prob: float = 0.0,
) -> VictimHandle:
    if dataset is None:
        dataset = SyntheticObjects()
    torch.manual_seed(seed)
    model = SmallConvNet(dataset.num_classes)
    train_on_synthetic(model, dataset, train_count=train_count,
                       epochs=epochs, seed=seed,
                       occlusion_prob=occlusion_prob)
    return VictimHandle(
        model,
        (dataset.size, dataset.size),
        dataset.num_classes,
        DESK_MEAN,
        DESK_STD,
    )


def desk_backbone(num_classes: int = 10, size: int = 32) -> StyleBackbone:
    """Five tiny conv blocks; Gram embedding length 16²+32²+64²+96² = 14592."""
    return StyleBackbone(
        (16, 32, 64, 96, 96),
        (2, 2, 2, 2, 2),
        num_classes,
        size,
        DESK_MEAN,
        DESK_STD,
        "desk5_avgpool",
    )


def train_desk_backbone(
    dataset: Optional[SyntheticObjects] = None,
    seed: int = 1,
    train_count: int = 4000,
    epochs: int = 30,
) -> StyleBackbone:
    """Backbone trained as a classifier so its attention maps mean something.

    The plain averaged-pool stack underfits at short schedules, so this
    runs longer than the victim and steps the learning rate down twice.
    """
    if dataset is None:
        dataset = SyntheticObjects()
    torch.manual_seed(seed)
    net = desk_backbone(dataset.num_classes, dataset.size)
    train_on_synthetic(net, dataset, train_count=train_count,
                       epochs=epochs, seed=seed, lr=3e-3,
                       milestones=(18, 25))
    return net


def classifier_accuracy(handle: VictimHandle, dataset: SyntheticObjects,
                        split: str = "test", count: int = 500,
                        batch_size: int = 100) -> float:
    hits = 0
    for start in range(0, count, batch_size):
        n = min(batch_size, count - start)
        images, labels = dataset.batch(split, start, n)
        hits += int((handle.predict(images) == labels).sum())
    return hits / count


@register_adapter("synthetic_small_cnn")
def synthetic_victim_adapter(
    num_classes: int = 10,
    size: int = 32,
    dataset_seed: int = 0,
    train_seed: int = 0,
    train_count: int = 4000,
    epochs: int = 8,
    occlusion_prob: float = 0.0,
) -> VictimHandle:
    """Victim trained on the fly; the synthetic data makes this cheap."""
    dataset = SyntheticObjects(num_classes, size, dataset_seed)
    return train_desk_victim(dataset, seed=train_seed,
                             train_count=train_count, epochs=epochs,
                             occlusion_prob=occlusion_prob)
