"""Procedural four-view grasp scenes with exact count labels.

Objects are placed in a small 3D volume above a palm. Each view is an
orthographic side projection (back, front, left, right) drawn far-to-near, so
objects hide each other differently per view, and three finger bars are
painted over every view at per-view positions. The object count is known by
construction.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import VIEW_NAMES, DatasetManifest, ManifestEntry, ViewSet, split_manifest, write_png

logger = logging.getLogger(__name__)

SHAPES = ("sphere", "cylinder", "cube")

# camera azimuths for back, front, left, right
_VIEW_ANGLES = (np.pi, 0.0, np.pi / 2, -np.pi / 2)
_BACKGROUND = np.array([40, 44, 52], dtype=np.float64)
_PALM = np.array([150, 130, 115], dtype=np.float64)
_FINGER = np.array([95, 95, 100], dtype=np.float64)

# id-map codes for non-object pixels
BACKGROUND_ID = -1
FINGER_ID = -2

# half-extent of object centres in the palm plane, pixels at 64 px views
_PALM_SPAN = 9.0
# fewest visible pixels (at 64 px views) that still make a distinct silhouette
SILHOUETTE_MIN_PIXELS = 10
# camera framing: pixels per scene unit at image_size 64
_ZOOM = 1.5


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "sphere"
    count: int = 0
    seed: int = 0
    image_size: int = 64
    occlusion_level: float = 0.25
    max_count: int = 4

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if not 0 <= self.count <= self.max_count:
            raise ValueError(f"count {self.count} outside 0..{self.max_count}")
        if not 0.0 <= self.occlusion_level <= 1.0:
            raise ValueError("occlusion_level must be in [0, 1]")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")


@dataclass(frozen=True)
class ClassDistribution:
    weights: Tuple[float, ...] = (0.22, 0.30, 0.24, 0.14, 0.10)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) < 2 or (w < 0).any() or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be a nonnegative vector summing to 1")

    @property
    def num_classes(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, num_classes: int = 5) -> "ClassDistribution":
        return cls(tuple([1.0 / num_classes] * num_classes))

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "ClassDistribution":
        total = float(sum(counts))
        return cls(tuple(c / total for c in counts))

    @classmethod
    def one_hot(cls, cls_index: int, num_classes: int = 5) -> "ClassDistribution":
        w = [0.0] * num_classes
        w[cls_index] = 1.0
        return cls(tuple(w))


@dataclass
class SceneObject:
    center: np.ndarray  # (x, y, z), z up
    color: np.ndarray


@dataclass
class RenderedScene:
    viewset: ViewSet
    # per view: H x W int map of object index, BACKGROUND_ID or FINGER_ID
    id_maps: List[np.ndarray] = field(default_factory=list)
    objects: List[SceneObject] = field(default_factory=list)

    def visible_counts(self, min_pixels: Optional[int] = None) -> List[int]:
        """Number of objects showing a silhouette in each view.

        An object counts when at least ``min_pixels`` of it are visible; the
        default is ``SILHOUETTE_MIN_PIXELS`` scaled to the view area.
        """
        out = []
        for m in self.id_maps:
            if min_pixels is None:
                min_pixels = max(1, round(SILHOUETTE_MIN_PIXELS * m.size / 64**2))
            ids, px = np.unique(m[m >= 0], return_counts=True)
            out.append(int((px >= min_pixels).sum()))
        return out


def _extent(shape: str, s: float) -> Tuple[float, float, float]:
    """(horizontal half-width, half-height, footprint radius) in pixels."""
    if shape == "sphere":
        return 7.0 * s, 7.0 * s, 7.0 * s
    if shape == "cylinder":
        return 4.0 * s, 8.5 * s, 4.0 * s
    return 6.0 * s, 6.0 * s, 6.5 * s


def _place_objects(rng: np.random.Generator, spec: SceneSpec) -> List[SceneObject]:
    s = spec.image_size / 64.0 * _ZOOM
    half_w, half_h, radius = _extent(spec.shape, s)
    span = _PALM_SPAN * s
    objs: List[SceneObject] = []
    for _ in range(spec.count):
        for _attempt in range(200):
            xy = rng.uniform(-span, span, size=2)
            z = half_h + rng.uniform(0.0, 10.0 * s)
            cand = np.array([xy[0], xy[1], z])
            if all(_separated(cand, o.center, radius, half_h) for o in objs):
                break
        # reject sampling can fail in a crowded palm; keep the last candidate
        color = rng.integers(0, 256, size=3).astype(np.float64)
        objs.append(SceneObject(center=cand, color=color))
    return objs


def _separated(a, b, radius, half_h) -> bool:
    horizontal = np.hypot(a[0] - b[0], a[1] - b[1])
    vertical = abs(a[2] - b[2])
    return horizontal >= 1.9 * radius or vertical >= 1.9 * half_h


def _draw_object(img, ids, idx, shape, u, v, half_w, half_h, color, xx, yy):
    """Paint one silhouette centred at image coords (u, v) with simple shading."""
    if shape == "sphere":
        d2 = ((xx - u) ** 2 + (yy - v) ** 2) / (half_w**2)
        mask = d2 <= 1.0
        # light from the upper left
        lx, ly = (xx - u + 0.35 * half_w) / half_w, (yy - v + 0.35 * half_w) / half_w
        shade = np.clip(1.05 - 0.55 * (lx**2 + ly**2), 0.35, 1.15)
        rim = d2 > 0.72
    else:
        nx, ny = (xx - u) / half_w, (yy - v) / half_h
        mask = (np.abs(nx) <= 1.0) & (np.abs(ny) <= 1.0)
        if shape == "cylinder":
            shade = np.clip(1.0 - 0.45 * np.abs(nx + 0.3), 0.4, 1.1)
            rim = (np.abs(nx) > 0.8) | (np.abs(ny) > 0.88)
        else:
            shade = np.where(ny < -0.55, 1.15, 0.9)
            rim = (np.abs(nx) > 0.84) | (np.abs(ny) > 0.84)
    shade = np.where(rim, 0.45, shade)
    painted = np.clip(color[None, None, :] * shade[..., None] + 12.0, 0, 255)
    img[mask] = painted[mask]
    ids[mask] = idx


def render_scene_full(spec: SceneSpec) -> RenderedScene:
    """Render ``spec`` and keep per-view object-id maps for visibility checks."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _shape_code(spec.shape)]))
    size = spec.image_size
    s = size / 64.0 * _ZOOM
    objs = _place_objects(rng, spec)
    half_w, half_h, _ = _extent(spec.shape, s)

    # per-view geometry drawn up front so it never depends on occlusion_level
    jitter = rng.uniform(-2.0 * s, 2.0 * s, size=(4, 2))
    finger_x = rng.uniform(0.12 * size, 0.88 * size, size=(4, 3))
    finger_len = rng.uniform(0.55 * size, 0.9 * size, size=(4, 3))
    palm_shift = rng.uniform(-1.5 * s, 1.5 * s, size=4)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ground = 0.82 * size
    views, id_maps = [], []
    for k, angle in enumerate(_VIEW_ANGLES):
        img = np.empty((size, size, 3), dtype=np.float64)
        img[:] = _BACKGROUND
        ids = np.full((size, size), BACKGROUND_ID, dtype=np.int64)
        palm_top = ground + palm_shift[k]
        img[yy >= palm_top] = _PALM

        c, sn = np.cos(angle), np.sin(angle)
        placed = []
        for i, o in enumerate(objs):
            h = o.center[0] * c + o.center[1] * sn
            depth = -o.center[0] * sn + o.center[1] * c
            placed.append((depth, i, h, o))
        # far to near
        for depth, i, h, o in sorted(placed, key=lambda t: -t[0]):
            u = size / 2 + h + jitter[k, 0]
            v = palm_top - o.center[2] + jitter[k, 1] * 0.5
            _draw_object(img, ids, i, spec.shape, u, v, half_w, half_h, o.color, xx, yy)

        if spec.occlusion_level > 0:
            for j in range(3):
                length = finger_len[k, j]
                width = spec.occlusion_level * size * size / (3.0 * length)
                x0 = finger_x[k, j]
                inside = (np.abs(xx - x0) <= width / 2) & (yy <= length)
                # rounded fingertip
                tip = ((xx - x0) ** 2 + (yy - length) ** 2) <= (width / 2) ** 2
                mask = inside | tip
                shade = 1.0 - 0.35 * np.abs(xx - x0) / max(width / 2, 1e-6)
                img[mask] = (_FINGER[None, None, :] * shade[..., None])[mask]
                ids[mask] = FINGER_ID
        views.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        id_maps.append(ids)

    vs = ViewSet(tuple(views), spec.count, source_id=f"{spec.shape}-{spec.seed}")
    return RenderedScene(viewset=vs, id_maps=id_maps, objects=objs)


def render_scene(spec: SceneSpec) -> ViewSet:
    return render_scene_full(spec).viewset


def _shape_code(shape: str) -> int:
    return SHAPES.index(shape)


def sample_seed(seed: int, index: int) -> int:
    """Per-sample scene seed derived from the global seed and sample index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


@dataclass
class GenConfig:
    shape: str = "sphere"
    n_samples: int = 1000
    seed: int = 0
    image_size: int = 64
    occlusion_level: float = 0.25
    weights: Tuple[float, ...] = ClassDistribution().weights
    split_ratio: float = 0.9


def generate_dataset(
    shape: str,
    n_samples: int,
    dist: ClassDistribution,
    seed: int,
    outdir,
    *,
    image_size: int = 64,
    occlusion_level: float = 0.25,
    split_ratio: Optional[float] = 0.9,
) -> DatasetManifest:
    """Render ``n_samples`` scenes to ``outdir`` and write ``manifest.jsonl``.

    Counts are drawn from ``dist``; when ``split_ratio`` is set the manifest
    carries a stratified train/test split seeded by ``seed``.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    k = dist.num_classes
    if n_samples < k:
        raise ValueError(f"n_samples ({n_samples}) must be >= number of classes ({k})")
    outdir = Path(outdir)
    imgdir = outdir / "images"
    imgdir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0A7]))
    counts = rng.choice(k, size=n_samples, p=np.asarray(dist.weights))
    entries = []
    for i, count in enumerate(counts.tolist()):
        sid = f"{shape}_{i:06d}"
        spec = SceneSpec(
            shape=shape,
            count=count,
            seed=sample_seed(seed, i),
            image_size=image_size,
            occlusion_level=occlusion_level,
            max_count=k - 1,
        )
        vs = render_scene(spec)
        paths = []
        for name, view in zip(VIEW_NAMES, vs.views):
            p = imgdir / f"{sid}_{name}.png"
            write_png(p, view)
            paths.append(p.resolve())
        entries.append(ManifestEntry(id=sid, views=tuple(paths), count=count))

    manifest = DatasetManifest(entries=entries, num_classes=k, root=outdir.resolve())
    if split_ratio is not None:
        train, test = split_manifest(manifest, split_ratio, seed)
        split_of = {e.id: e.split for e in train.entries + test.entries}
        manifest = manifest.with_entries(
            [ManifestEntry(e.id, e.views, e.count, split_of[e.id]) for e in entries]
        )
    manifest.to_jsonl(outdir / "manifest.jsonl")

    config = GenConfig(shape, n_samples, seed, image_size, occlusion_level, tuple(dist.weights), split_ratio)
    summary = {
        "config": asdict(config),
        "class_counts": manifest.class_counts(),
        "train_counts": manifest.class_counts("train"),
        "test_counts": manifest.class_counts("test"),
        "manifest_sha256": hashlib.sha256((outdir / "manifest.jsonl").read_bytes()).hexdigest(),
    }
    with open(outdir / "genconfig.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    logger.info("wrote %d samples to %s, per-class %s", n_samples, outdir, summary["class_counts"])
    return manifest
