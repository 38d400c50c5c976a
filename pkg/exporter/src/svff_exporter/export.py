"""Folder-to-SVFF export: scan classes, embed images, write bytes.

SVFF v1 layout, all little-endian: magic "SVFF", u32 version (=1), u32
n_samples, u32 dim, u32 n_classes, then per sample [u32 label][dim x f32].
No padding, no checksum. The byte layout is the contract with consumers;
this writer is deliberately standalone.
"""

import os
import struct
import sys
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .backbones import DEFAULT_BACKBONE, make_backbone
from .errors import DatasetError

SVFF_HEADER = struct.Struct("<4sIIII")
SVFF_MAGIC = b"SVFF"
SVFF_VERSION = 1

IMAGE_EXTENSIONS = {
    ".bmp", ".gif", ".jpeg", ".jpg", ".png", ".ppm", ".tif", ".tiff", ".webp",
}

BATCH = 32


@dataclass(frozen=True)
class ExportManifest:
    """One export job: where to read, how to embed, where to write."""

    dataset_root: str
    output: str
    backbone: str = DEFAULT_BACKBONE
    image_size: int = 224

    def __post_init__(self):
        if self.image_size < 1:
            raise DatasetError(f"image_size must be >= 1, got {self.image_size}")

    @property
    def mapping_path(self) -> str:
        return self.output + ".mapping"


@dataclass(frozen=True)
class ExportResult:
    n_samples: int
    dim: int
    n_classes: int
    output: str
    mapping_path: str
    skipped: tuple = field(default_factory=tuple)


def scan_classes(root) -> list:
    """(class_name, sorted image paths) in ascending lexicographic name order."""
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} is not a directory")
    classes = []
    for name in sorted(os.listdir(root)):
        class_dir = os.path.join(root, name)
        if not os.path.isdir(class_dir) or name.startswith("."):
            continue
        files = sorted(
            f
            for f in os.listdir(class_dir)
            if os.path.splitext(f)[1].lower() in IMAGE_EXTENSIONS
        )
        classes.append((name, [os.path.join(class_dir, f) for f in files]))
    if not classes:
        raise DatasetError(f"no class subdirectories under {root!r}")
    empty = [name for name, files in classes if not files]
    if empty:
        raise DatasetError(f"classes without images: {empty}")
    return classes


def load_image(path, size):
    """Decoded, shorter-side resized, center-cropped image in [0,1]; None if unreadable."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            w, h = img.size
            scale = size / min(w, h)
            img = img.resize(
                (max(size, round(w * scale)), max(size, round(h * scale))),
                Image.Resampling.BILINEAR,
            )
            w, h = img.size
            left, top = (w - size) // 2, (h - size) // 2
            img = img.crop((left, top, left + size, top + size))
            return np.asarray(img, dtype=np.float32) / 255.0
    except Exception:
        return None


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


def export(manifest: ExportManifest, warn=_warn) -> ExportResult:
    """Embed every readable image and write the SVFF plus its mapping file."""
    backbone = make_backbone(manifest.backbone)
    classes = scan_classes(manifest.dataset_root)

    embeddings = []
    labels = []
    skipped = []
    for idx, (name, files) in enumerate(classes):
        images = []
        for path in files:
            img = load_image(path, manifest.image_size)
            if img is None:
                skipped.append(path)
                warn(f"skipping unreadable image {path}")
            else:
                images.append(img)
        if not images:
            raise DatasetError(f"class {name!r} has no readable images")
        for start in range(0, len(images), BATCH):
            embeddings.append(backbone.embed(np.stack(images[start : start + BATCH])))
        labels.extend([idx] * len(images))

    x = np.concatenate(embeddings).astype("<f4")
    y = np.asarray(labels, dtype=np.uint32)
    n, dim = x.shape

    with open(manifest.output, "wb") as fh:
        fh.write(SVFF_HEADER.pack(SVFF_MAGIC, SVFF_VERSION, n, dim, len(classes)))
        for i in range(n):
            fh.write(struct.pack("<I", int(y[i])))
            fh.write(x[i].tobytes())

    with open(manifest.mapping_path, "w", encoding="utf-8") as fh:
        fh.write(f"# backbone: {backbone.identifier}\n")
        fh.write(f"# image_size: {manifest.image_size}\n")
        for idx, (name, _) in enumerate(classes):
            fh.write(f"{name},{idx}\n")

    return ExportResult(
        n_samples=n,
        dim=dim,
        n_classes=len(classes),
        output=manifest.output,
        mapping_path=manifest.mapping_path,
        skipped=tuple(skipped),
    )
