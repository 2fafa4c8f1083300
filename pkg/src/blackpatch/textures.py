"""Class-conditional texture dictionary.

Pipeline: Gram-matrix style embeddings from a VGG-style backbone (with
average pooling in place of max), gradient-based attention to mask out
background before embedding, per-category k-means to 30 clusters, and
noise-to-texture synthesis against each centroid. The finished
dictionary maps (category, index) to a small RGB texture image.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InsufficientSamples, MissingTexture, WeightsUnavailable

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class StyleBackbone(nn.Module):
    """Stacked conv blocks with average pooling, plus a classifier head.

    Gram embeddings tap the ReLU after the second convolution of blocks
    1 through 4; the attention map taps the last ReLU of block 5. Average
    pooling (kernel and stride 2) stands in for max pooling everywhere so
    texture statistics survive downsampling.
    """

    def __init__(
        self,
        block_widths: Sequence[int],
        convs_per_block: Sequence[int],
        num_classes: int,
        input_size: int,
        mean: Sequence[float],
        std: Sequence[float],
        arch_id: str,
        classifier: Optional[nn.Module] = None,
    ):
        super().__init__()
        assert len(block_widths) == 5 and len(convs_per_block) == 5
        layers: list[nn.Module] = []
        gram_taps = []
        attention_tap = -1
        in_ch = 3
        for b, (width, n_convs) in enumerate(zip(block_widths, convs_per_block)):
            for j in range(n_convs):
                layers.append(nn.Conv2d(in_ch, width, kernel_size=3, padding=1))
                layers.append(nn.ReLU(inplace=False))
                in_ch = width
                if b < 4 and j == 1:
                    gram_taps.append(len(layers) - 1)
                if b == 4 and j == n_convs - 1:
                    attention_tap = len(layers) - 1
            layers.append(nn.AvgPool2d(kernel_size=2, stride=2))
        self.features = nn.Sequential(*layers)
        self.gram_taps = tuple(gram_taps)
        self.attention_tap = attention_tap
        self.block_widths = tuple(block_widths)
        self.input_size = input_size
        self.num_classes = num_classes
        self.arch_id = arch_id
        self.register_buffer(
            "norm_mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
        )
        self.register_buffer(
            "norm_std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
        )
        if classifier is None:
            classifier = nn.Sequential(
                nn.Flatten(), nn.Linear(block_widths[4], num_classes)
            )
            self.avgpool = nn.AdaptiveAvgPool2d((1, 1))
        self.classifier = classifier

    @property
    def embedding_length(self) -> int:
        return sum(w * w for w in self.block_widths[:4])

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.norm_mean) / self.norm_std

    def taps(self, x: torch.Tensor, need_attention: bool = False):
        """Run the feature stack up to the last needed tap.

        Returns (gram feature maps, block-5 map or None). Stopping at
        the last tap lets Gram embeddings run on inputs smaller than
        the classifier path could pool down.
        """
        last = self.attention_tap if need_attention else max(self.gram_taps)
        grams = []
        attn = None
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.gram_taps:
                grams.append(x)
            if i == self.attention_tap:
                attn = x
            if i == last:
                break
        return grams, attn

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        if hasattr(self, "avgpool"):
            x = self.avgpool(x)
        return self.classifier(x)


def vgg19_backbone(
    weights_path: Optional[str] = None, num_classes: int = 1000
) -> StyleBackbone:
    """Full-size 224px backbone matching the classic 19-layer layout.

    A state dict trained on the max-pool variant loads directly (pooling
    layers carry no parameters). Raises WeightsUnavailable when the
    given weights file cannot be read.
    """
    classifier = nn.Sequential(
        nn.Flatten(),
        nn.Linear(512 * 7 * 7, 4096),
        nn.ReLU(inplace=False),
        nn.Dropout(),
        nn.Linear(4096, 4096),
        nn.ReLU(inplace=False),
        nn.Dropout(),
        nn.Linear(4096, num_classes),
    )
    net = StyleBackbone(
        (64, 128, 256, 512, 512),
        (2, 2, 4, 4, 4),
        num_classes,
        224,
        IMAGENET_MEAN,
        IMAGENET_STD,
        "vgg19_avgpool",
        classifier=classifier,
    )
    net.avgpool = nn.AdaptiveAvgPool2d((7, 7))
    if weights_path is not None:
        try:
            state = torch.load(weights_path, map_location="cpu")
        except (OSError, RuntimeError) as e:
            raise WeightsUnavailable(f"cannot load {weights_path}: {e}") from e
        # accept either this module's own dict or a torchvision-style one
        renamed = {}
        for k, v in state.items():
            if k.startswith("classifier."):
                # torchvision indexes the classifier without the Flatten
                idx, rest = k.split(".", 2)[1:]
                renamed[f"classifier.{int(idx) + 1}.{rest}"] = v
            else:
                renamed[k] = v
        try:
            net.load_state_dict(renamed, strict=False)
        except RuntimeError as e:
            raise WeightsUnavailable(f"incompatible weights: {e}") from e
    net.eval()
    return net


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """(C, H, W) or (1, C, H, W) feature map -> C x C Gram, divided by H*W.

    Entry (i, j) is the mean over spatial positions of channel i times
    channel j, so the statistic is comparable across resolutions.
    """
    if features.dim() == 4:
        features = features.squeeze(0)
    c = features.shape[0]
    f = features.reshape(c, -1)
    return f @ f.t() / f.shape[1]


def _to_nchw(image, device="cpu") -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        t = image.float()
        if t.dim() == 3 and t.shape[-1] == 3:
            t = t.permute(2, 0, 1)
        return t.unsqueeze(0).to(device) if t.dim() == 3 else t.to(device)
    arr = np.asarray(image, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).unsqueeze(0).to(device)


def _embedding_from_maps(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat([gram_matrix(m).reshape(-1) for m in maps])


def extract_gram(backbone: StyleBackbone, image) -> np.ndarray:
    """Flattened concatenation of the four tap Gram matrices."""
    with torch.no_grad():
        x = backbone.normalize(_to_nchw(image))
        maps, _ = backbone.taps(x)
        return _embedding_from_maps(maps).numpy().astype(np.float32)


def attention_map(backbone: StyleBackbone, image, label: int) -> np.ndarray:
    """Gradient-weighted class activation map at the block-5 tap.

    Per-channel weights are the spatial means of d logit[label] / d A;
    the weighted channel sum is rectified, upsampled to image size, and
    min-max normalized. A constant map (no usable gradient signal)
    falls back to all ones so the image is used unmasked downstream.
    """
    x = backbone.normalize(_to_nchw(image))
    maps_out = {}

    def keep(module, inputs, output):
        maps_out["a"] = output

    hook = backbone.features[backbone.attention_tap].register_forward_hook(keep)
    try:
        logits = backbone(x)
    finally:
        hook.remove()
    act = maps_out["a"]
    grad = torch.autograd.grad(logits[0, label], act)[0]
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * act).sum(dim=1, keepdim=True))
    h, w = x.shape[2], x.shape[3]
    cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)
    cam = cam.squeeze().detach().numpy().astype(np.float32)
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo < 1e-12:
        return np.ones_like(cam)
    return (cam - lo) / (hi - lo)


def masked_gram(
    backbone: StyleBackbone, image, label: int, threshold: float = 0.8
) -> np.ndarray:
    """Gram embedding with low-attention pixels filled by the dataset mean.

    Mean fill equals zero in normalized space, so masked regions carry
    no activation energy into the Grams.
    """
    attn = attention_map(backbone, image, label)
    keep = attn > threshold
    arr = np.asarray(image, dtype=np.float32).copy()
    mean = backbone.norm_mean.view(3).numpy()
    arr[~keep] = mean
    return extract_gram(backbone, arr)


def cluster_category(
    embeddings: Sequence[np.ndarray],
    k: int = 30,
    seed: int = 0,
    pca_dims: Optional[int] = None,
) -> list[np.ndarray]:
    """K-means the embeddings of one category into k centroids.

    Uses k-means++ with 10 restarts and keeps the best inertia. When
    pca_dims is set the assignment runs in the reduced space but the
    returned centroids are full-dimensional member means, so synthesis
    targets stay in embedding space. Centroids come back sorted by
    per-cluster inertia then cluster label, for a reproducible order.
    """
    from sklearn.cluster import KMeans

    if len(embeddings) < k:
        raise InsufficientSamples(
            f"{len(embeddings)} embeddings for k={k} clusters"
        )
    X = np.stack([np.asarray(e, dtype=np.float32) for e in embeddings])
    Xr = X
    if pca_dims is not None and pca_dims < X.shape[1]:
        from sklearn.decomposition import PCA

        Xr = PCA(n_components=min(pca_dims, len(embeddings)),
                 random_state=seed).fit_transform(X)
    km = KMeans(n_clusters=k, init="k-means++", n_init=10,
                random_state=seed).fit(Xr)
    labels = km.labels_
    order = []
    for j in range(k):
        members = Xr[labels == j]
        inertia = float(((members - km.cluster_centers_[j]) ** 2).sum())
        order.append((inertia, j))
    order.sort()
    centroids = []
    for _, j in order:
        mask = labels == j
        if mask.any():
            centroids.append(X[mask].mean(axis=0).astype(np.float32))
        else:
            # near-duplicate inputs can leave a cluster with no members;
            # fall back to the point nearest its center
            near = int(((Xr - km.cluster_centers_[j]) ** 2).sum(axis=1).argmin())
            centroids.append(X[near].astype(np.float32))
    return centroids


@dataclass
class SynthesisConfig:
    resolution: int
    iterations: int = 10000
    learning_rate: float = 0.01
    weight: float = 1e6

    def __post_init__(self):
        assert self.resolution > 0 and self.iterations > 0
        assert self.learning_rate > 0 and self.weight > 0


@dataclass
class SynthesisResult:
    image: np.ndarray  # float32 HWC in [0, 1], the best iterate
    loss: float
    initial_loss: float
    loss_history: list[float] = field(repr=False, default_factory=list)


def synthesize_texture(
    backbone: StyleBackbone,
    target: np.ndarray,
    cfg: SynthesisConfig,
    generator: Optional[torch.Generator] = None,
) -> SynthesisResult:
    """Optimize an image from uniform noise to match a Gram embedding.

    Loss is weight * sum((embedding - target)^2) over the concatenated
    vector; pixels are clamped to [0, 1] after every Adam step and the
    best iterate by loss is what gets returned.
    """
    tgt = torch.from_numpy(np.asarray(target, dtype=np.float32))
    if not torch.isfinite(tgt).all():
        raise ValueError("synthesis target contains non-finite entries")
    x = torch.rand(
        1, 3, cfg.resolution, cfg.resolution, generator=generator
    ).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=cfg.learning_rate)
    best_loss = math.inf
    best = None
    history = []
    initial = None
    for _ in range(cfg.iterations):
        opt.zero_grad()
        maps, _ = backbone.taps(backbone.normalize(x))
        emb = _embedding_from_maps(maps)
        loss = cfg.weight * ((emb - tgt) ** 2).sum()
        value = float(loss.detach())
        history.append(value)
        if initial is None:
            initial = value
        if value < best_loss:
            best_loss = value
            best = x.detach().clone()
        loss.backward()
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
    img = best.squeeze(0).permute(1, 2, 0).numpy().astype(np.float32)
    return SynthesisResult(img, best_loss, initial, history)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


class TextureDictionary:
    """Two-level store: category -> 30 (texture image, embedding) pairs.

    Textures are held quantized to 8-bit RGB so that a save/load round
    trip through PNG files is bit-exact.
    """

    def __init__(self, resolution: int, manifest: Optional[dict] = None):
        self.resolution = int(resolution)
        self.textures: dict[int, list[np.ndarray]] = {}
        self.embeddings: dict[int, list[np.ndarray]] = {}
        self.manifest = manifest or {}

    def add_category(self, category: int, textures, embeddings) -> None:
        assert len(textures) == len(embeddings)
        quantized = []
        for t in textures:
            t = np.asarray(t)
            if t.dtype != np.uint8:
                t = _quantize(t)
            assert t.shape == (self.resolution, self.resolution, 3)
            quantized.append(t)
        self.textures[int(category)] = quantized
        self.embeddings[int(category)] = [
            np.asarray(e, dtype=np.float32) for e in embeddings
        ]

    def categories(self) -> list[int]:
        return sorted(self.textures)

    def size(self, category: int) -> int:
        return len(self.textures.get(int(category), ()))

    def lookup(self, category, index: int) -> np.ndarray:
        cat = int(category)
        if cat not in self.textures:
            raise MissingTexture(category, index)
        entries = self.textures[cat]
        if not 0 <= int(index) < len(entries):
            raise MissingTexture(category, index)
        return entries[int(index)]

    def save(self, out_dir) -> None:
        from PIL import Image

        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        for cat in self.categories():
            cdir = root / str(cat)
            cdir.mkdir(exist_ok=True)
            for i, tex in enumerate(self.textures[cat]):
                Image.fromarray(tex, mode="RGB").save(
                    cdir / f"texture_{i:02d}.png"
                )
            with open(cdir / "embeddings.bin", "wb") as fh:
                vecs = self.embeddings[cat]
                fh.write(struct.pack("<I", len(vecs)))
                for v in vecs:
                    data = np.asarray(v, dtype="<f4")
                    fh.write(struct.pack("<I", data.size))
                    fh.write(data.tobytes())
        manifest = dict(self.manifest)
        manifest["resolution"] = self.resolution
        manifest["categories"] = {
            str(c): len(self.textures[c]) for c in self.categories()
        }
        with open(root / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "TextureDictionary":
        from PIL import Image

        root = Path(path)
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
        dict_ = cls(manifest["resolution"], manifest=manifest)
        for cat_str, count in manifest["categories"].items():
            cat = int(cat_str)
            cdir = root / cat_str
            textures = [
                np.asarray(Image.open(cdir / f"texture_{i:02d}.png").convert("RGB"))
                for i in range(count)
            ]
            vecs = []
            with open(cdir / "embeddings.bin", "rb") as fh:
                (n,) = struct.unpack("<I", fh.read(4))
                for _ in range(n):
                    (length,) = struct.unpack("<I", fh.read(4))
                    vecs.append(
                        np.frombuffer(fh.read(4 * length), dtype="<f4").copy()
                    )
            dict_.textures[cat] = textures
            dict_.embeddings[cat] = vecs
        return dict_


def build_dictionary(
    backbone: StyleBackbone,
    dataset,
    categories: Sequence[int],
    per_class: int,
    synthesis: SynthesisConfig,
    clusters: int = 30,
    threshold: float = 0.8,
    seed: int = 0,
    pca_dims: Optional[int] = None,
    progress=None,
) -> TextureDictionary:
    """Extract, mask, cluster, synthesize: one category at a time.

    `dataset` needs class_images(category, limit) -> list of float HWC
    images. Every synthesis seeds its own torch generator from (seed,
    category, index) so a rebuild with the same seed is bit-identical.
    """
    dict_ = TextureDictionary(
        synthesis.resolution,
        manifest={
            "backbone": backbone.arch_id,
            "seed": seed,
            "clusters": clusters,
            "per_class": per_class,
            "threshold": threshold,
            "weight": synthesis.weight,
            "iterations": synthesis.iterations,
            "learning_rate": synthesis.learning_rate,
            "embedding_length": backbone.embedding_length,
            "gram_normalization": "spatial_mean",
            "pca_dims": pca_dims,
        },
    )
    for cat in categories:
        images = dataset.class_images(int(cat), per_class)
        if len(images) < per_class:
            raise InsufficientSamples(
                f"category {cat}: {len(images)} images, need {per_class}"
            )
        embs = [masked_gram(backbone, im, int(cat), threshold) for im in images]
        centroids = cluster_category(embs, k=clusters, seed=seed, pca_dims=pca_dims)
        textures = []
        for i, centroid in enumerate(centroids):
            gen = torch.Generator()
            gen.manual_seed(
                int(np.random.SeedSequence([seed, int(cat), i]).generate_state(1)[0])
            )
            result = synthesize_texture(backbone, centroid, synthesis, gen)
            textures.append(result.image)
            if progress is not None:
                progress(int(cat), i, result.loss)
        dict_.add_category(int(cat), textures, centroids)
    return dict_
