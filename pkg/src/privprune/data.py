"""Dataset ingestion: a built-in synthetic image task and image-folder loading.

The synthetic task draws class-coded striped/blob images with per-instance
phase, position and background variation, so a small CNN separates the
classes easily while reconstruction quality still varies per image. All
generation and splitting is deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ConfigurationError, IngestionError, ValidationError

DATASET_NAMES = ("synthetic", "imagefolder")


@dataclass
class DatasetSpec:
    name: str = "synthetic"
    root: str | None = None
    resolution: int = 32
    num_classes: int = 10        # identities in embedding mode
    train_size: int = 2048
    eval_size: int = 512
    attacker_size: int = 1024

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigurationError(f"unknown dataset {self.name!r}; known: {DATASET_NAMES}")
        if self.name == "imagefolder" and not self.root:
            raise ConfigurationError("dataset.root is required for imagefolder datasets")
        if self.resolution < 8:
            raise ConfigurationError("resolution must be >= 8")


class ArrayDataset:
    """In-memory image dataset: float images in [0,1] plus integer labels."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor):
        if images.shape[0] != labels.shape[0]:
            raise ValidationError("images/labels length mismatch")
        self.images = images
        self.labels = labels.long()

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices) -> "ArrayDataset":
        indices = torch.as_tensor(indices, dtype=torch.long)
        return ArrayDataset(self.images[indices], self.labels[indices])

    def batches(self, batch_size: int, shuffle: bool = False, generator=None):
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


@dataclass
class DatasetBundle:
    train: ArrayDataset
    eval: ArrayDataset
    attacker: ArrayDataset
    num_classes: int
    resolution: int
    in_channels: int = 3


def _hue_to_rgb(h: torch.Tensor) -> torch.Tensor:
    """(n,) hues in [0,1) -> (n,3) saturated RGB."""
    phases = torch.tensor([0.0, 2 * math.pi / 3, 4 * math.pi / 3])
    return 0.5 + 0.45 * torch.cos(2 * math.pi * h.unsqueeze(1) + phases)


def synthetic_images(n: int, num_classes: int, resolution: int, seed: int = 0):
    """Generate n labeled images.

    Class evidence is stripe orientation + spatial frequency (needing real
    oriented-filter capacity); colors, stripe phase, blob placement and
    background vary per instance, so reconstruction quality is measurable
    image by image while color alone carries no class signal.
    """
    g = torch.Generator().manual_seed(seed)
    labels = torch.arange(n) % num_classes
    labels = labels[torch.randperm(n, generator=g)]

    lin = torch.linspace(-1.0, 1.0, resolution)
    yy, xx = torch.meshgrid(lin, lin, indexing="ij")

    angle = math.pi * labels.float() / num_classes \
        + 0.06 * (torch.rand(n, generator=g) - 0.5)
    freq = 3.0 + 2.0 * (labels % 3).float() + 0.2 * (torch.rand(n, generator=g) - 0.5)
    phase = 2 * math.pi * torch.rand(n, generator=g)
    proj = (torch.cos(angle).view(n, 1, 1) * xx + torch.sin(angle).view(n, 1, 1) * yy)
    stripes = 0.5 * (1 + torch.sin(math.pi * freq.view(n, 1, 1) * proj + phase.view(n, 1, 1)))

    cx = 1.2 * (torch.rand(n, generator=g) - 0.5)
    cy = 1.2 * (torch.rand(n, generator=g) - 0.5)
    r2 = (xx - cx.view(n, 1, 1)) ** 2 + (yy - cy.view(n, 1, 1)) ** 2
    blob = torch.exp(-r2 / 0.08)

    gdir = 2 * math.pi * torch.rand(n, generator=g)
    grad = 0.25 * (1 + torch.cos(gdir).view(n, 1, 1) * xx
                   + torch.sin(gdir).view(n, 1, 1) * yy)

    stripe_col = _hue_to_rgb(torch.rand(n, generator=g)).view(n, 3, 1, 1)
    blob_col = _hue_to_rgb(torch.rand(n, generator=g)).view(n, 3, 1, 1)
    img = (0.55 * stripes.unsqueeze(1) * stripe_col
           + 0.35 * blob.unsqueeze(1) * blob_col
           + 0.25 * grad.unsqueeze(1))
    img = img + 0.02 * torch.randn(img.shape, generator=g)
    return img.clamp(0.0, 1.0).float(), labels


def _load_image_folder(root: str, resolution: int):
    from PIL import Image

    root_path = Path(root)
    if not root_path.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root_path.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class subdirectories under {root}")
    images, labels, bad = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((resolution, resolution))
                    arr = torch.frombuffer(bytearray(im.tobytes()), dtype=torch.uint8)
                    images.append(arr.reshape(resolution, resolution, 3).permute(2, 0, 1))
                    labels.append(label)
            except Exception:
                bad.append(str(f))
    if bad:
        raise IngestionError(f"corrupt or unreadable images: {bad}")
    if not images:
        raise IngestionError(f"no images found under {root}")
    stack = torch.stack(images).float() / 255.0
    return stack, torch.tensor(labels), [d.name for d in class_dirs]


def ingest_dataset(spec: DatasetSpec, seed: int = 0) -> DatasetBundle:
    """Build train/eval/attacker splits, deterministic given the seed. The
    attacker split is disjoint from the defense-training split."""
    if spec.name == "synthetic":
        total = spec.train_size + spec.eval_size + spec.attacker_size
        images, labels = synthetic_images(total, spec.num_classes, spec.resolution, seed=seed)
        num_classes = spec.num_classes
    else:
        images, labels, class_names = _load_image_folder(spec.root, spec.resolution)
        num_classes = len(class_names)
        total = images.shape[0]
        want = spec.train_size + spec.eval_size + spec.attacker_size
        if want > total:
            # fall back to proportional split of what exists
            train_n = int(total * 0.6)
            eval_n = int(total * 0.2)
        else:
            train_n, eval_n = spec.train_size, spec.eval_size

    g = torch.Generator().manual_seed(seed + 1)
    perm = torch.randperm(images.shape[0], generator=g)
    if spec.name == "synthetic":
        train_n, eval_n = spec.train_size, spec.eval_size
    train_idx = perm[:train_n]
    eval_idx = perm[train_n:train_n + eval_n]
    attacker_idx = perm[train_n + eval_n:]
    if spec.name == "synthetic":
        attacker_idx = attacker_idx[:spec.attacker_size]

    ds = ArrayDataset(images, labels)
    return DatasetBundle(
        train=ds.subset(train_idx),
        eval=ds.subset(eval_idx),
        attacker=ds.subset(attacker_idx),
        num_classes=num_classes,
        resolution=spec.resolution,
        in_channels=images.shape[1],
    )
