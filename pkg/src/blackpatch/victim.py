"""Query-metered access to the classifier under attack.

Attacks only ever see softmax score vectors: images in, probabilities
out, one query charged per image. Normalization lives inside the handle
so every caller works in float HWC [0, 1].
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import BudgetExceeded, ShapeMismatch, UnknownAdapter, WeightsUnavailable


def _as_batch(images) -> np.ndarray:
    if isinstance(images, (list, tuple)):
        images = np.stack([np.asarray(im) for im in images], axis=0)
    else:
        images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ShapeMismatch(f"expected HWC or NHWC array, got shape {images.shape}")
    return images


class VictimHandle:
    """Black-box view of a classifier.

    `model` maps normalized NCHW float tensors to logits. Images arrive
    as float HWC in [0, 1]; per-channel mean/std normalization happens
    here, behind the interface.
    """

    def __init__(
        self,
        model: torch.nn.Module,
        input_size: tuple[int, int],
        num_classes: int,
        mean: Sequence[float],
        std: Sequence[float],
        device: str = "cpu",
        labels: Optional[Sequence[str]] = None,
    ):
        self.model = model.to(device).eval()
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.num_classes = int(num_classes)
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.device = device
        self.labels = list(labels) if labels is not None else None

    def _validate(self, batch: np.ndarray) -> None:
        h, w = self.input_size
        if batch.shape[1:3] != (h, w) or batch.shape[3] != 3:
            raise ShapeMismatch(
                f"victim expects {h}x{w}x3 images, got {batch.shape[1:]}"
            )
        if not np.issubdtype(batch.dtype, np.floating):
            raise ShapeMismatch(f"images must be float in [0, 1], got {batch.dtype}")

    @torch.no_grad()
    def scores(self, images) -> np.ndarray:
        """Softmax probabilities, shape (N, num_classes)."""
        batch = _as_batch(images)
        self._validate(batch)
        x = (batch.astype(np.float32) - self.mean) / self.std
        t = torch.from_numpy(x.transpose(0, 3, 1, 2).copy()).to(self.device)
        logits = self.model(t)
        return torch.softmax(logits, dim=1).cpu().numpy()

    def predict(self, images) -> np.ndarray:
        return self.scores(images).argmax(axis=1)


class QueryLedger:
    """Counts victim queries against an optional hard budget.

    A batch that would overshoot raises before anything runs, so the
    count never exceeds the budget and the failed batch costs nothing.
    """

    def __init__(self, budget: Optional[int] = None):
        self.budget = budget
        self.used = 0

    def charge(self, n: int) -> None:
        if self.budget is not None and self.used + n > self.budget:
            raise BudgetExceeded(self.used, self.budget, n)
        self.used += n

    @property
    def remaining(self) -> Optional[int]:
        if self.budget is None:
            return None
        return self.budget - self.used


class MeteredVictim:
    """VictimHandle façade that charges a ledger per image queried."""

    def __init__(self, handle: VictimHandle, ledger: QueryLedger):
        self.handle = handle
        self.ledger = ledger

    @property
    def num_classes(self) -> int:
        return self.handle.num_classes

    @property
    def input_size(self) -> tuple[int, int]:
        return self.handle.input_size

    def scores(self, images) -> np.ndarray:
        batch = _as_batch(images)
        self.ledger.charge(batch.shape[0])
        return self.handle.scores(batch)

    def predict(self, images) -> np.ndarray:
        return self.scores(images).argmax(axis=1)


_ADAPTERS: dict[str, Callable[..., VictimHandle]] = {}


def register_adapter(name: str):
    """Decorator: make a victim constructor reachable by config name."""

    def deco(fn: Callable[..., VictimHandle]):
        _ADAPTERS[name] = fn
        return fn

    return deco


def build_victim(name: str, **kwargs) -> VictimHandle:
    if name not in _ADAPTERS:
        # bundled adapters register on import; zoo is not imported at
        # module load (it pulls in training code), so pull it in here
        from . import zoo  # noqa: F401

    if name not in _ADAPTERS:
        raise UnknownAdapter(
            f"{name!r} (registered: {sorted(_ADAPTERS) or 'none'})"
        )
    return _ADAPTERS[name](**kwargs)


IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@register_adapter("torchvision")
def torchvision_victim(
    arch: str = "resnet50", weights: str = "DEFAULT", device: str = "cpu"
) -> VictimHandle:
    """Any torchvision classifier as a 224x224 ImageNet victim."""
    try:
        import torchvision.models as tvm
    except ImportError as e:
        raise WeightsUnavailable(f"torchvision not installed: {e}") from e
    try:
        model = getattr(tvm, arch)(weights=weights)
    except AttributeError as e:
        raise UnknownAdapter(f"torchvision has no model {arch!r}") from e
    except Exception as e:
        raise WeightsUnavailable(f"could not load weights for {arch}: {e}") from e
    return VictimHandle(
        model, (224, 224), 1000, IMAGENET_MEAN, IMAGENET_STD, device=device
    )
