"""Synthetic shapes domain: rendering, condition extraction, class hierarchy, masks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.path import Path as MplPath
from scipy import ndimage

CONDITION_KINDS = ("silhouette", "edge", "depthlike")

BACKGROUND_COLOR = (0.08, 0.08, 0.10)
PALETTE = (
    (0.92, 0.22, 0.20),
    (0.20, 0.80, 0.32),
    (0.25, 0.42, 0.95),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.85),
    (0.20, 0.85, 0.85),
)

MIN_AREA_FRACTION = 0.30
SUPERSAMPLE = 4


def _star(points: int, inner: float, phase: float) -> np.ndarray:
    angles = phase + np.arange(2 * points) * math.pi / points
    radii = np.where(np.arange(2 * points) % 2 == 0, 1.0, inner)
    return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


def _cross(half_width: float) -> np.ndarray:
    w = half_width
    return np.array(
        [(w, -1), (w, -w), (1, -w), (1, w), (w, w), (w, 1),
         (-w, 1), (-w, w), (-1, w), (-1, -w), (-w, -w), (-w, -1)],
        dtype=float,
    )


# Unit-frame geometry. Image coordinates: x to the right, y downwards.
POLYGONS = {
    "square": np.array([(-0.8, -0.8), (0.8, -0.8), (0.8, 0.8), (-0.8, 0.8)]),
    "triangle": np.array([(0.0, -1.0), (1.0, 0.8), (-1.0, 0.8)]),
    "diamond": np.array([(0.0, -1.0), (0.85, 0.0), (0.0, 1.0), (-0.85, 0.0)]),
    "star4": _star(4, 0.5, math.pi / 4),
    "star5": _star(5, 0.55, -math.pi / 2),
    "cross": _cross(0.32),
}
ELLIPSE_MINOR = 0.55
RING_INNER = 0.5

CLASS_NAMES = (
    "circle", "ellipse", "ring",
    "square", "triangle", "diamond",
    "star4", "star5", "cross",
)


@dataclass(frozen=True)
class ClassHierarchy:
    """Two-level taxonomy: every class has one parent, every parent has >= 2 children."""

    parents: dict[str, tuple[int, ...]]
    names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        seen: list[int] = []
        for parent, children in self.parents.items():
            if len(children) < 2:
                raise ValueError(f"parent {parent!r} needs at least two children")
            seen.extend(children)
        if sorted(seen) != sorted(set(seen)):
            raise ValueError("a class appears under more than one parent")

    @property
    def classes(self) -> list[int]:
        return sorted(c for children in self.parents.values() for c in children)

    def parent_of(self, cls: int) -> str:
        for parent, children in self.parents.items():
            if cls in children:
                return parent
        raise KeyError(f"class {cls} is not in the hierarchy")

    def siblings(self, cls: int) -> tuple[int, ...]:
        children = self.parents[self.parent_of(cls)]
        return tuple(c for c in children if c != cls)

    def to_json(self) -> str:
        return json.dumps(
            {"names": list(self.names), "parents": {k: list(v) for k, v in self.parents.items()}},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "ClassHierarchy":
        raw = json.loads(text)
        return cls(
            parents={k: tuple(v) for k, v in raw["parents"].items()},
            names=tuple(raw["names"]),
        )


DEFAULT_HIERARCHY = ClassHierarchy(
    parents={"rounded": (0, 1, 2), "angular": (3, 4, 5), "spiky": (6, 7, 8)}
)


def sample_alternate_class(cls: int, hierarchy: ClassHierarchy, rng: np.random.Generator) -> int:
    """Pick a sibling of ``cls`` uniformly at random."""
    siblings = hierarchy.siblings(cls)
    if not siblings:
        raise ValueError(f"class {cls} has no siblings")
    return int(siblings[rng.integers(len(siblings))])


@dataclass(frozen=True)
class ShapeSpec:
    class_id: int
    cx: float
    cy: float
    scale: float
    rotation: float
    fill: tuple[float, float, float]
    background: tuple[float, float, float] = BACKGROUND_COLOR
    size: int = 32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        d = dict(d)
        d["fill"] = tuple(d["fill"])
        d["background"] = tuple(d["background"])
        return cls(**d)


def _outline(class_id: int) -> np.ndarray:
    name = CLASS_NAMES[class_id]
    if name in POLYGONS:
        return POLYGONS[name]
    theta = np.linspace(0, 2 * math.pi, 256, endpoint=False)
    minor = ELLIPSE_MINOR if name == "ellipse" else 1.0
    return np.stack([np.cos(theta), minor * np.sin(theta)], axis=1)


def _to_image_frame(points: np.ndarray, spec: ShapeSpec) -> np.ndarray:
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T * spec.scale + np.array([spec.cx, spec.cy])


def _to_unit_frame(xy: np.ndarray, spec: ShapeSpec) -> np.ndarray:
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    rot = np.array([[c, -s], [s, c]])
    return (xy - np.array([spec.cx, spec.cy])) / spec.scale @ rot


def coverage(spec: ShapeSpec, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Fraction of each pixel covered by the shape, shape [size, size]."""
    n = spec.size * supersample
    offsets = (np.arange(n) + 0.5) / supersample
    xx, yy = np.meshgrid(offsets, offsets)
    pts = _to_unit_frame(np.stack([xx.ravel(), yy.ravel()], axis=1), spec)
    name = CLASS_NAMES[spec.class_id]
    if name in POLYGONS:
        inside = MplPath(POLYGONS[name]).contains_points(pts)
    else:
        minor = ELLIPSE_MINOR if name == "ellipse" else 1.0
        r2 = pts[:, 0] ** 2 + (pts[:, 1] / minor) ** 2
        inside = r2 <= 1.0
        if name == "ring":
            inside &= r2 >= RING_INNER ** 2
    inside = inside.reshape(n, n).astype(np.float64)
    return inside.reshape(spec.size, supersample, spec.size, supersample).mean(axis=(1, 3))


def check_spec(spec: ShapeSpec) -> None:
    pts = _to_image_frame(_outline(spec.class_id), spec)
    if pts.min() < 0 or pts.max() > spec.size:
        raise ValueError("shape extends outside the canvas")


def render(spec: ShapeSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render ``spec``; returns (image [3, H, W] float in [0, 1], silhouette [H, W] bool)."""
    check_spec(spec)
    cov = coverage(spec)
    fill = np.asarray(spec.fill, dtype=np.float64)[:, None, None]
    bg = np.asarray(spec.background, dtype=np.float64)[:, None, None]
    image = bg * (1.0 - cov) + fill * cov
    return image, cov >= 0.5


def random_spec(
    class_id: int,
    rng: np.random.Generator,
    size: int = 32,
    max_rotation: float = math.radians(15),
    min_area: float = MIN_AREA_FRACTION,
    scale_range: tuple[float, float] = (0.75, 1.0),
    fill=None,
    max_tries: int = 200,
) -> ShapeSpec:
    """Draw a random pose for ``class_id`` that fits the canvas and covers >= ``min_area``."""
    outline = _outline(class_id)
    if fill is None:
        fill = PALETTE[rng.integers(len(PALETTE))]
    margin = 1.0
    for _ in range(max_tries):
        rotation = float(rng.uniform(-max_rotation, max_rotation))
        probe = ShapeSpec(class_id, 0.0, 0.0, 1.0, rotation, fill, size=size)
        pts = _to_image_frame(outline, probe)
        extent = pts.max(axis=0) - pts.min(axis=0)
        s_max = (size - 2 * margin) / extent.max()
        scale = float(rng.uniform(scale_range[0] * s_max, scale_range[1] * s_max))
        lo = margin - pts.min(axis=0) * scale
        hi = size - margin - pts.max(axis=0) * scale
        cx, cy = rng.uniform(lo, hi)
        spec = ShapeSpec(class_id, float(cx), float(cy), scale, rotation, fill, size=size)
        if coverage(spec).mean() >= min_area:
            return spec
    raise RuntimeError(f"could not place class {class_id} with area >= {min_area}")


def extract_condition(image: np.ndarray, mask: np.ndarray, kind: str) -> np.ndarray:
    """Condition map [H, W] in [0, 1] derived from a silhouette.

    ``image`` is accepted for interface symmetry with real estimators; the toy
    estimators only look at the mask.
    """
    if kind not in CONDITION_KINDS:
        raise ValueError(f"unknown condition kind {kind!r}")
    m = np.asarray(mask, dtype=bool)
    if kind == "silhouette":
        return m.astype(np.float64)
    if kind == "edge":
        eroded = ndimage.binary_erosion(m, structure=np.ones((3, 3)), border_value=0)
        return (m & ~eroded).astype(np.float64)
    dist = ndimage.distance_transform_edt(m)
    peak = dist.max()
    return dist / peak if peak > 0 else dist


def condition_support(cond: np.ndarray, kind: str) -> np.ndarray:
    """Object region described by a condition map."""
    if kind not in CONDITION_KINDS:
        raise ValueError(f"unknown condition kind {kind!r}")
    c = np.asarray(cond)
    if kind == "silhouette":
        return c >= 0.5
    if kind == "edge":
        return ndimage.binary_fill_holes(c >= 0.5)
    return c > 0


def segment(image: np.ndarray, background=BACKGROUND_COLOR, threshold: float = 0.25) -> np.ndarray:
    """Foreground mask of an image [3, H, W] by distance from the known background colour."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    bg = np.asarray(background, dtype=np.float64)[:, None, None]
    return np.abs(img - bg).max(axis=0) > threshold


@dataclass(frozen=True)
class MaskPair:
    m_init: np.ndarray
    m_alt: np.ndarray
    m_conflict: np.ndarray
    m_bg: np.ndarray


def _binary(m) -> np.ndarray:
    a = np.asarray(m)
    if a.dtype == bool:
        return a
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("mask is not binary")
    return a.astype(bool)


def binarize(m, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(m, dtype=np.float64) >= threshold


def compute_masks(m_init, m_alt) -> MaskPair:
    """Conflict mask |m_alt - m_init| and background mask 1 - (m_alt or m_init)."""
    a, b = _binary(m_init), _binary(m_alt)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    conflict = np.abs(b.astype(np.int8) - a.astype(np.int8)).astype(bool)
    bg = ~(b | a)
    return MaskPair(a, b, conflict, bg)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Disk dilation; radius 0 returns the mask unchanged."""
    m = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return m.copy()
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = xx ** 2 + yy ** 2 <= radius ** 2
    return ndimage.binary_dilation(m, structure=disk)


def conflict_ratio(m_init: np.ndarray, m_alt: np.ndarray) -> float:
    union = np.logical_or(m_init, m_alt).sum()
    return float(np.logical_xor(m_init, m_alt).sum() / union) if union else 0.0


def aligned_alternate(spec: ShapeSpec, alt_class: int) -> ShapeSpec:
    """``spec`` with the class swapped, rescaled to the same bounding extent.

    Used only to estimate how strongly two classes conflict at a given pose.
    """
    def extent(s):
        p = _to_image_frame(_outline(s.class_id), s)
        return p.max(axis=0) - p.min(axis=0), (p.max(axis=0) + p.min(axis=0)) / 2

    src_ext, src_mid = extent(spec)
    probe = ShapeSpec(alt_class, 0.0, 0.0, 1.0, spec.rotation, spec.fill, spec.background, spec.size)
    alt_ext, alt_mid = extent(probe)
    scale = float(np.min(src_ext / alt_ext))
    cx, cy = src_mid - alt_mid * scale
    return ShapeSpec(alt_class, float(cx), float(cy), scale, spec.rotation, spec.fill, spec.background, spec.size)


@dataclass
class AlignedSet:
    """Aligned renders: images in [0, 1], silhouettes and class labels."""

    images: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    specs: list[ShapeSpec] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def conditions(self, kind: str) -> np.ndarray:
        return np.stack([extract_condition(im, m, kind) for im, m in zip(self.images, self.masks)])


def render_aligned_set(n: int, seed: int, size: int = 32, hierarchy: ClassHierarchy = DEFAULT_HIERARCHY) -> AlignedSet:
    """``n`` renders with classes cycled evenly and poses drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    classes = hierarchy.classes
    images, masks, labels, specs = [], [], [], []
    for i in range(n):
        cls = classes[i % len(classes)]
        spec = random_spec(cls, rng, size=size)
        img, m = render(spec)
        images.append(img)
        masks.append(m)
        labels.append(cls)
        specs.append(spec)
    if n == 0:
        return AlignedSet(np.zeros((0, 3, size, size)), np.zeros((0, size, size), bool), np.zeros(0, int))
    return AlignedSet(np.stack(images), np.stack(masks), np.array(labels), specs)


def save_aligned_set(data: AlignedSet, out: Path, hierarchy: ClassHierarchy = DEFAULT_HIERARCHY) -> None:
    """Persist renders as PNGs plus a JSON index of specs and the hierarchy."""
    from .io import save_mask_png, save_rgb_png

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, m, spec) in enumerate(zip(data.images, data.masks, data.specs)):
        save_rgb_png(out / f"{i:05d}_image.png", img)
        save_mask_png(out / f"{i:05d}_mask.png", m)
        entries.append({"id": i, "image": f"{i:05d}_image.png", "mask": f"{i:05d}_mask.png",
                        "spec": spec.to_dict()})
    (out / "hierarchy.json").write_text(hierarchy.to_json())
    (out / "shapes.json").write_text(json.dumps({"schema": "roughctl.shapes/1", "items": entries}, indent=1))
