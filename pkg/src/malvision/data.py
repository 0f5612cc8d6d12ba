"""Synthetic datasets, manifests, and sample ingestion.

Scenes are random geometric shapes (circle / square / triangle) on a gray
background.  Every target is analytically known at render time: the depth
map is the per-pixel depth of the nearest surface, the segmentation mask
is the shape-type id of that surface, and the class label is the dominant
(most visible) shape type.  Nearer shapes are drawn brighter, so depth,
segmentation, and classification are all learnable from appearance.

Images and dense targets are stored as MALTNSR1 tensors; 8-bit gray/RGB
PNG ingestion is supported for external images.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import load_tensor, save_tensor

SHAPE_NAMES = ("circle", "square", "triangle")
TASKS = ("ar", "depth", "seg", "classify")
BACKGROUND_DEPTH = 1.0


def worker_count() -> int:
    """Worker cap for concurrent sample decoding (MAL_THREADS, default 1)."""
    try:
        return max(1, int(os.environ.get("MAL_THREADS", "1")))
    except ValueError:
        return 1


# -- rendering ----------------------------------------------------------------


def _shape_mask(kind: int, cy: float, cx: float, r: float,
                size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:  # circle
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == 1:  # square
        half = 0.82 * r
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if kind == 2:  # triangle, apex up
        inside_band = (yy >= cy - r) & (yy <= cy + r)
        return inside_band & (np.abs(xx - cx) <= (yy - cy + r) / 2.0)
    raise DataError(f"unknown shape kind {kind}")


def render_scene(rng: np.random.Generator, size: int, channels: int = 3,
                 shape_types: list[int] | None = None, noise: float = 0.02
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Render one scene; returns (image, depth, seg, label).

    image is (C, H, W) float32 in [0, 1]; depth is (H, W) with the
    background plane at depth 1.0; seg is (H, W) int64 with 0 for
    background and shape type + 1 elsewhere; label is the type covering
    the most pixels (0 when the scene is empty).  Shape color is random
    and carries no type information: type must be read from the
    silhouette.  Nearer surfaces render brighter, so depth is readable
    from appearance.
    """
    if shape_types is None:
        shape_types = list(rng.integers(0, len(SHAPE_NAMES),
                                        size=int(rng.integers(1, 4))))
    bg = float(rng.uniform(0.12, 0.35))
    img = np.full((channels, size, size), bg, dtype=np.float64)
    depth = np.full((size, size), BACKGROUND_DEPTH, dtype=np.float64)
    seg = np.zeros((size, size), dtype=np.int64)

    margin = size / 6.0
    for kind in shape_types:
        cy = float(rng.uniform(margin, size - margin))
        cx = float(rng.uniform(margin, size - margin))
        r = float(rng.uniform(size / 6.0, size / 3.5))
        z = float(rng.uniform(0.2, 0.9))
        mask = _shape_mask(int(kind), cy, cx, r, size)
        nearer = mask & (z < depth)
        shade = 0.45 + 0.5 * (1.0 - z)  # nearer surfaces render brighter
        tint = rng.uniform(0.55, 1.0, size=channels)
        color = np.clip(shade * tint, 0.05, 1.0)
        for c in range(channels):
            img[c][nearer] = color[c]
        depth[nearer] = z
        seg[nearer] = int(kind) + 1

    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    if seg.max() > 0:
        counts = np.bincount(seg[seg > 0] - 1, minlength=len(SHAPE_NAMES))
        label = int(np.argmax(counts))
    else:
        label = 0
    return img, depth.astype(np.float32), seg, label


# -- manifests ----------------------------------------------------------------


@dataclass
class SampleEntry:
    image: str
    label: int | None = None
    depth: str | None = None
    seg: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    task: str
    image_size: int
    channels: int
    stats: dict[str, list[float]]
    splits: dict[str, list[SampleEntry]] = field(default_factory=dict)

    def split_size(self, split: str) -> int:
        return len(self.splits.get(split, []))

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "image_size": self.image_size,
            "channels": self.channels,
            "stats": self.stats,
            "splits": {
                name: [{"image": e.image, "label": e.label,
                        "depth": e.depth, "seg": e.seg} for e in entries]
                for name, entries in self.splits.items()
            },
        }


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(manifest.to_json(), fp, indent=1, sort_keys=True)
        fp.write("\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fp:
            raw = json.load(fp)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    try:
        splits = {
            name: [SampleEntry(image=e["image"], label=e.get("label"),
                               depth=e.get("depth"), seg=e.get("seg"))
                   for e in entries]
            for name, entries in raw["splits"].items()
        }
        manifest = DatasetManifest(
            root=path.parent, task=raw["task"], image_size=raw["image_size"],
            channels=raw["channels"], stats=raw["stats"], splits=splits)
    except KeyError as exc:
        raise DataError(f"manifest {path} is missing field {exc}") from exc
    if manifest.task not in TASKS:
        raise DataError(f"manifest {path} declares unknown task {manifest.task!r}")
    for name, entries in manifest.splits.items():
        for e in entries:
            for ref in (e.image, e.depth, e.seg):
                if ref is not None and not (manifest.root / ref).exists():
                    raise DataError(f"manifest references missing file {ref}")
            if manifest.task == "classify" and e.label is None:
                raise DataError(f"classify manifest entry {e.image} has no label")
    return manifest


def gen_synthetic(task: str, n: int, size: int, seed: int, out_dir,
                  n_test: int = 0, channels: int = 3,
                  noise: float = 0.02) -> Path:
    """Generate a synthetic dataset; returns the manifest path.

    Fully deterministic under the seed: rerunning produces byte-identical
    tensors and manifest.
    """
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    if n < 1:
        raise DataError("need at least one sample")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    splits: dict[str, list[SampleEntry]] = {}
    sums = np.zeros(channels, dtype=np.float64)
    sqsums = np.zeros(channels, dtype=np.float64)
    train_pixels = 0
    serial = 0
    for split, count in (("train", n), ("test", n_test)):
        if count == 0:
            continue
        (out_dir / split).mkdir(exist_ok=True)
        entries = []
        for i in range(count):
            if task == "classify":
                shape_types = [serial % len(SHAPE_NAMES)]  # balanced classes
            else:
                shape_types = None
            img, depth, seg, label = render_scene(rng, size, channels,
                                                  shape_types, noise)
            stem = f"{split}/{task}_{i:05d}"
            save_tensor(out_dir / f"{stem}_img.tnsr", img)
            entry = SampleEntry(image=f"{stem}_img.tnsr")
            if task == "classify":
                entry.label = label
            elif task == "depth":
                save_tensor(out_dir / f"{stem}_depth.tnsr", depth)
                entry.depth = f"{stem}_depth.tnsr"
            elif task == "seg":
                save_tensor(out_dir / f"{stem}_seg.tnsr",
                            seg.astype(np.float32))
                entry.seg = f"{stem}_seg.tnsr"
            entries.append(entry)
            if split == "train":
                sums += img.sum(axis=(1, 2))
                sqsums += (img.astype(np.float64) ** 2).sum(axis=(1, 2))
                train_pixels += size * size
            serial += 1
        splits[split] = entries

    mean = sums / train_pixels
    var = sqsums / train_pixels - mean ** 2
    std = np.sqrt(np.maximum(var, 1e-12))
    manifest = DatasetManifest(
        root=out_dir, task=task, image_size=size, channels=channels,
        stats={"mean": [float(m) for m in mean],
               "std": [float(s) for s in std]},
        splits=splits)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path


# -- ingestion ----------------------------------------------------------------


def load_image_file(path) -> np.ndarray:
    """Decode one image file ((C, H, W) float32); .png or MALTNSR1."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image

            with Image.open(path) as im:
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                arr = np.asarray(im, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                return arr[None, :, :]
            return np.ascontiguousarray(arr.transpose(2, 0, 1))
        arr = load_tensor(path)
        if arr.ndim != 3:
            raise DataError(f"image tensor {path} must be (C, H, W)")
        return arr.astype(np.float32)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot ingest {path}: {exc}") from exc


def load_sample(manifest: DatasetManifest, index: int, split: str = "train"
                ) -> tuple[np.ndarray, dict]:
    """Load and normalize one sample; returns (image, targets)."""
    entries = manifest.splits.get(split)
    if entries is None:
        raise DataError(f"manifest has no split {split!r}")
    if not 0 <= index < len(entries):
        raise DataError(f"index {index} outside split of {len(entries)}")
    e = entries[index]
    img = load_image_file(manifest.root / e.image)
    mean = np.asarray(manifest.stats["mean"], dtype=np.float32)[:, None, None]
    std = np.asarray(manifest.stats["std"], dtype=np.float32)[:, None, None]
    img = (img - mean) / std
    targets: dict = {}
    if e.label is not None:
        targets["label"] = int(e.label)
    if e.depth is not None:
        targets["depth"] = load_tensor(manifest.root / e.depth).astype(np.float32)
    if e.seg is not None:
        targets["seg"] = load_tensor(manifest.root / e.seg).astype(np.int64)
    return img, targets


def load_batch(manifest: DatasetManifest, indices, split: str = "train"
               ) -> tuple[np.ndarray, list[dict]]:
    """Load several samples, optionally with concurrent decoding."""
    indices = list(indices)
    workers = worker_count()
    if workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: load_sample(manifest, i, split),
                                    indices))
    else:
        results = [load_sample(manifest, i, split) for i in indices]
    images = np.stack([r[0] for r in results])
    return images, [r[1] for r in results]
