"""Shared fixtures: dataset, trained victim, backbone, texture dictionary.

Heavy artifacts (trained weights, the synthesized dictionary) are cached
under tests/.cache keyed by a version tag, because they are pure
functions of pinned seeds. Delete the directory to force a rebuild;
results are bit-identical either way on the same software stack.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from blackpatch.data import SyntheticObjects
from blackpatch.textures import SynthesisConfig, TextureDictionary, build_dictionary
from blackpatch.victim import VictimHandle
from blackpatch.zoo import (
    DESK_MEAN,
    DESK_STD,
    SmallConvNet,
    desk_backbone,
    train_desk_backbone,
    train_desk_victim,
)

CACHE = Path(__file__).parent / ".cache"

# bump when any training/build recipe in the fixtures changes
VICTIM_TAG = "victim_occl_v1"
BACKBONE_TAG = "backbone_v1"
DICT_TAG = "dict_v1"


@pytest.fixture(scope="session")
def dataset() -> SyntheticObjects:
    return SyntheticObjects(num_classes=10, size=32, seed=0)


@pytest.fixture(scope="session")
def victim_handle(dataset) -> VictimHandle:
    """Victim hardened with occlusion augmentation.

    Plain training leaves the classifier so brittle that random single
    patches succeed, which erases the gap between learned and sampled
    placement; augmentation restores the regime where placement must be
    searched for.
    """
    CACHE.mkdir(exist_ok=True)
    path = CACHE / f"{VICTIM_TAG}.pt"
    if path.exists():
        model = SmallConvNet(dataset.num_classes)
        model.load_state_dict(torch.load(path, map_location="cpu"))
        return VictimHandle(model, (dataset.size, dataset.size),
                            dataset.num_classes, DESK_MEAN, DESK_STD)
    handle = train_desk_victim(dataset, seed=0, epochs=12, occlusion_prob=0.5)
    torch.save(handle.model.state_dict(), path)
    return handle


@pytest.fixture(scope="session")
def backbone(dataset):
    CACHE.mkdir(exist_ok=True)
    path = CACHE / f"{BACKBONE_TAG}.pt"
    if path.exists():
        net = desk_backbone(dataset.num_classes, dataset.size)
        net.load_state_dict(torch.load(path, map_location="cpu"))
        net.eval()
        return net
    net = train_desk_backbone(dataset)
    torch.save(net.state_dict(), path)
    return net


@pytest.fixture(scope="session")
def desk_dictionary(backbone, dataset) -> TextureDictionary:
    """Full 10-category dictionary used by the end-to-end criteria."""
    CACHE.mkdir(exist_ok=True)
    path = CACHE / DICT_TAG
    if (path / "manifest.json").exists():
        return TextureDictionary.load(path)
    dico = build_dictionary(
        backbone,
        dataset,
        range(dataset.num_classes),
        per_class=100,
        synthesis=SynthesisConfig(resolution=24, iterations=500),
        clusters=30,
        seed=3,
    )
    dico.save(path)
    return dico


@pytest.fixture()
def toy_dictionary() -> TextureDictionary:
    """Tiny handcrafted dictionary for fast unit tests: 2 categories x 4."""
    rng = np.random.default_rng(7)
    dico = TextureDictionary(resolution=12)
    for cat in (0, 1):
        textures = [rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
                    for _ in range(4)]
        embeddings = [rng.random(8, dtype=np.float32) for _ in range(4)]
        dico.add_category(cat, textures, embeddings)
    return dico
