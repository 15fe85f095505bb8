"""Manifest-backed multi-view datasets.

A manifest is a JSON Lines file; each line describes one grasp with the four
view images (back, front, left, right), its object count and optionally its
split. Images are composited into a 2x2 grid (back, front / left, right)
before they reach a model.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

logger = logging.getLogger(__name__)

VIEW_NAMES = ("back", "front", "left", "right")
SPLITS = ("train", "test")


@dataclass
class ViewSet:
    views: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    count: int
    source_id: str = ""
    split: Optional[str] = None

    def __post_init__(self):
        if len(self.views) != 4:
            raise ValueError(f"a ViewSet needs exactly 4 views, got {len(self.views)}")
        self.views = tuple(np.asarray(v) for v in self.views)
        for v in self.views:
            if v.ndim != 3 or v.shape[2] != 3 or v.dtype != np.uint8:
                raise ValueError("views must be H x W x 3 uint8 arrays")
        if len({v.shape for v in self.views}) != 1:
            raise ValueError(f"view dimensions differ: {[v.shape for v in self.views]}")
        if self.count < 0:
            raise ValueError("count must be nonnegative")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    # absolute paths, in VIEW_NAMES order
    views: Tuple[Path, Path, Path, Path]
    count: int
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    num_classes: int = 5
    root: Optional[Path] = None

    def __post_init__(self):
        for e in self.entries:
            if not 0 <= e.count < self.num_classes:
                raise ValueError(f"entry {e.id}: count {e.count} outside 0..{self.num_classes - 1}")

    def __len__(self):
        return len(self.entries)

    def class_counts(self, split: Optional[str] = None) -> List[int]:
        counts = [0] * self.num_classes
        for e in self.entries:
            if split is None or e.split == split:
                counts[e.count] += 1
        return counts

    def subset(self, split: str) -> "DatasetManifest":
        return replace(self, entries=[e for e in self.entries if e.split == split])

    def with_entries(self, entries: Sequence[ManifestEntry]) -> "DatasetManifest":
        return replace(self, entries=list(entries))

    @classmethod
    def from_jsonl(cls, path, num_classes: int = 5, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        root = path.parent.resolve()
        entries = []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                views = tuple(root / rec[f"view_{name}"] for name in VIEW_NAMES)
                if check_files:
                    for v in views:
                        if not v.is_file():
                            raise FileNotFoundError(f"{path}:{lineno}: missing image {v}")
                split = rec.get("split")
                if split is not None and split not in SPLITS:
                    raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
                entries.append(
                    ManifestEntry(
                        id=str(rec.get("id", f"{lineno:06d}")),
                        views=views,
                        count=int(rec["count"]),
                        split=split,
                    )
                )
        return cls(entries=entries, num_classes=num_classes, root=root)

    def to_jsonl(self, path) -> None:
        path = Path(path)
        root = path.parent.resolve()
        with open(path, "w") as f:
            for e in self.entries:
                rec = {"id": e.id}
                for name, v in zip(VIEW_NAMES, e.views):
                    rec[f"view_{name}"] = Path(v).resolve().relative_to(root).as_posix()
                rec["count"] = e.count
                if e.split is not None:
                    rec["split"] = e.split
                f.write(json.dumps(rec) + "\n")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG", optimize=False)


def load_viewset(entry: ManifestEntry) -> ViewSet:
    return ViewSet(tuple(read_png(p) for p in entry.views), entry.count, entry.id, entry.split)


def compose_views(vs: ViewSet) -> np.ndarray:
    """Tile the four views into a 2H x 2W x 3 image: back, front on top; left, right below."""
    back, front, left, right = vs.views
    return np.concatenate(
        [np.concatenate([back, front], axis=1), np.concatenate([left, right], axis=1)], axis=0
    )


def decompose_composite(composite: np.ndarray) -> Tuple[np.ndarray, ...]:
    h, w = composite.shape[0] // 2, composite.shape[1] // 2
    return (composite[:h, :w], composite[:h, w:], composite[h:, :w], composite[h:, w:])


def single_view_composite(view: np.ndarray, position: int = 0) -> np.ndarray:
    """A composite frame holding one view in quadrant ``position``, other quadrants zero."""
    blank = np.zeros_like(view)
    views = [blank] * 4
    views[position] = view
    return compose_views(ViewSet(tuple(views), 0))


def flip_views(composite: np.ndarray, flips: Sequence[bool]) -> np.ndarray:
    """Mirror the selected quadrants of a composite left-right."""
    views = [v[:, ::-1] if f else v for v, f in zip(decompose_composite(composite), flips)]
    return compose_views(ViewSet(tuple(np.ascontiguousarray(v) for v in views), 0))


def balance_classes(manifest: DatasetManifest, split: Optional[str] = "train") -> List[ManifestEntry]:
    """Oversample every class to the size of the largest one.

    Smaller classes are repeated sequentially (looping over their entries in
    original order). The result is grouped by class, classes ascending.
    """
    by_class: Dict[int, List[ManifestEntry]] = defaultdict(list)
    for e in manifest.entries:
        if split is None or e.split == split:
            by_class[e.count].append(e)
    for c in range(manifest.num_classes):
        if not by_class[c]:
            raise ValueError(f"class {c} has no {split or 'any'} entries; cannot balance")
    target = max(len(v) for v in by_class.values())
    out: List[ManifestEntry] = []
    for c in range(manifest.num_classes):
        items = by_class[c]
        out.extend(items[i % len(items)] for i in range(target))
    return out


def split_manifest(
    manifest: DatasetManifest, ratio: float = 0.9, seed: int = 0
) -> Tuple[DatasetManifest, DatasetManifest]:
    """Stratified train/test split with ``floor(ratio * k)`` of each class in train.

    Classes with fewer than two entries cannot be stratified; their entries go
    to train with a warning. Neither part is balanced.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    by_class: Dict[int, List[ManifestEntry]] = defaultdict(list)
    for e in manifest.entries:
        by_class[e.count].append(e)
    train, test = [], []
    for c in sorted(by_class):
        items = by_class[c]
        if len(items) < 2:
            logger.warning("class %d has %d entries; sending them to train", c, len(items))
            train.extend(replace(e, split="train") for e in items)
            continue
        # guard against 0.9 * 100 = 89.999...
        n_train = math.floor(ratio * len(items) + 1e-9)
        order = rng.permutation(len(items))
        chosen = set(order[:n_train].tolist())
        for i, e in enumerate(items):
            (train if i in chosen else test).append(replace(e, split="train" if i in chosen else "test"))
    return manifest.with_entries(train), manifest.with_entries(test)


class CompositeStore:
    """Memoizes composite images per entry id as uint8 arrays."""

    def __init__(self):
        self._cache: Dict[str, np.ndarray] = {}

    def composite(self, entry: ManifestEntry) -> np.ndarray:
        key = str(entry.views[0])
        if key not in self._cache:
            self._cache[key] = compose_views(load_viewset(entry))
        return self._cache[key]

    def views(self, entry: ManifestEntry) -> Tuple[np.ndarray, ...]:
        return decompose_composite(self.composite(entry))


def to_model_input(images: Sequence[np.ndarray], input_size: Optional[int] = None) -> torch.Tensor:
    """Stack uint8 H x W x 3 images into a float B x 3 x S x S tensor in [0, 1]."""
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float().div_(255.0)
    if input_size is not None and x.shape[-1] != input_size:
        x = F.interpolate(x, size=(input_size, input_size), mode="area")
    return x


def load_batches(
    samples: Sequence[ManifestEntry],
    batch_size: int = 32,
    seed: Optional[int] = 0,
    *,
    train: bool = True,
    input_size: Optional[int] = None,
    store: Optional[CompositeStore] = None,
    view: Optional[int] = None,
    single_view_seed: Optional[int] = None,
    augment_seed: Optional[int] = None,
) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(images, labels)`` batches of composites.

    Samples are shuffled with ``seed`` (``None`` keeps order). In training mode
    the last partial batch is dropped; in evaluation mode it is kept.

    ``view`` replaces each composite by the single-view frame of that view;
    ``single_view_seed`` does the same with a seeded random view per sample.
    ``augment_seed`` mirrors each view horizontally with probability 1/2
    (count-preserving) before compositing.
    """
    if batch_size < 2 and train:
        raise ValueError("contrastive training needs batch_size >= 2")
    store = store or CompositeStore()
    order = np.arange(len(samples))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(samples))
    n = len(samples)
    stop = n - n % batch_size if train else n
    view_rng = np.random.default_rng(single_view_seed) if single_view_seed is not None else None
    aug_rng = np.random.default_rng(augment_seed) if augment_seed is not None else None
    for start in range(0, stop, batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        if view is not None:
            frames = [single_view_composite(store.views(e)[view], view) for e in chunk]
        elif view_rng is not None:
            picks = view_rng.integers(0, 4, size=len(chunk))
            frames = [single_view_composite(store.views(e)[k], k) for e, k in zip(chunk, picks.tolist())]
        else:
            frames = [store.composite(e) for e in chunk]
        if aug_rng is not None:
            flips = aug_rng.random((len(frames), 4)) < 0.5
            frames = [flip_views(f, fl) for f, fl in zip(frames, flips)]
        images = to_model_input(frames, input_size)
        labels = torch.tensor([e.count for e in chunk], dtype=torch.long)
        yield images, labels


def num_batches(n_samples: int, batch_size: int, train: bool = True) -> int:
    return n_samples // batch_size if train else math.ceil(n_samples / batch_size)
