"""Broden-style concept datasets: on-disk ingestion and a synthetic micro-Broden.

Dataset root layout::

    index.csv      image,split,ih,iw,sh,sw,<category>...
    concepts.csv   concept_id,name,category
    images/        RGB images
    labels/<category>/   label maps, concept id encoded as R + 256 * G

Category columns of ``index.csv`` hold a label-map path relative to the root,
or are empty when the image carries no labels of that category. Concept id 0
means "unlabeled".
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

CATEGORIES = ("color", "texture", "material", "part", "object", "scene")

# Fixed 11-color quantization used by the micro-Broden color concepts.
BASIC_COLORS: dict[str, tuple[int, int, int]] = {
    "black": (0, 0, 0),
    "white": (255, 255, 255),
    "red": (255, 0, 0),
    "green": (0, 160, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "orange": (255, 128, 0),
    "purple": (128, 0, 160),
    "pink": (255, 150, 200),
    "brown": (140, 80, 20),
    "gray": (128, 128, 128),
}

MAX_SHADING = 0.15

SHAPES = ("square", "disk", "triangle", "cross", "ring", "bar")
TEXTURES = ("solid", "stripes", "checker", "dots")


class IngestionError(Exception):
    """A file referenced by a concept dataset is missing or unreadable."""

    def __init__(self, path, message="missing file"):
        super().__init__(f"{message}: {path}")
        self.path = str(path)


class SchemaError(ValueError):
    pass


class UnknownConceptError(KeyError):
    pass


@dataclass(frozen=True)
class Concept:
    concept_id: int
    name: str
    category: str


@dataclass(frozen=True)
class ConceptIndex:
    concepts: tuple[Concept, ...]
    categories: tuple[str, ...]

    def __post_init__(self):
        ids = [c.concept_id for c in self.concepts]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise SchemaError(f"duplicate concept_id {dup}")
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise SchemaError("concept_id values must be dense from 1")
        for c in self.concepts:
            if c.category not in self.categories:
                raise SchemaError(f"concept {c.name!r} has unknown category {c.category!r}")

    def __len__(self):
        return len(self.concepts)

    def get(self, concept_id: int) -> Concept:
        if not 1 <= concept_id <= len(self.concepts):
            raise UnknownConceptError(concept_id)
        return self._by_id[concept_id]

    @property
    def _by_id(self) -> dict[int, Concept]:
        return {c.concept_id: c for c in self.concepts}

    def by_name(self, name: str) -> Concept:
        for c in self.concepts:
            if c.name == name:
                return c
        raise UnknownConceptError(name)

    def in_category(self, category: str) -> list[Concept]:
        return [c for c in self.concepts if c.category == category]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    split: str
    image_size: tuple[int, int]
    label_size: tuple[int, int]
    label_paths: dict[str, str]


def _read_csv(path: Path) -> list[dict[str, str]]:
    if not path.is_file():
        raise IngestionError(path)
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _read_concepts(root: Path) -> ConceptIndex:
    rows = _read_csv(root / "concepts.csv")
    concepts = []
    for line, row in enumerate(rows, start=2):
        try:
            concepts.append(Concept(int(row["concept_id"]), row["name"], row["category"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"concepts.csv line {line}: {exc}") from None
    present = {c.category for c in concepts}
    categories = tuple(c for c in CATEGORIES if c in present)
    unknown = present - set(CATEGORIES)
    if unknown:
        raise SchemaError(f"unknown categories {sorted(unknown)}")
    return ConceptIndex(tuple(concepts), categories)


def _read_records(root: Path, index: ConceptIndex) -> list[ImageRecord]:
    rows = _read_csv(root / "index.csv")
    records = []
    for line, row in enumerate(rows, start=2):
        try:
            ih, iw, sh, sw = (int(row[k]) for k in ("ih", "iw", "sh", "sw"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"index.csv line {line}: {exc}") from None
        if ih % sh or iw % sw or ih // sh != iw // sw:
            raise SchemaError(
                f"index.csv line {line}: label size {sh}x{sw} is not an integer "
                f"downscale of {ih}x{iw}"
            )
        image = row["image"]
        if not (root / image).is_file():
            raise IngestionError(root / image)
        paths = {}
        for category in index.categories:
            rel = row.get(category) or ""
            if rel:
                if not (root / rel).is_file():
                    raise IngestionError(root / rel)
                paths[category] = rel
        records.append(ImageRecord(image, row.get("split", ""), (ih, iw), (sh, sw), paths))
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate image entries in index.csv")
    return records


def load_concept_index(root_path) -> ConceptIndex:
    """Read and validate ``concepts.csv`` and check every file ``index.csv`` references."""
    root = Path(root_path)
    index = _read_concepts(root)
    _read_records(root, index)
    return index


def encode_label_map(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = labels % 256
    rgb[..., 1] = labels // 256
    return rgb


def decode_label_map(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.int64)
    if rgb.ndim == 2:
        return rgb
    return rgb[..., 0] + 256 * rgb[..., 1]


def upscale_nearest(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = labels.shape
    rows = np.arange(size[0]) * h // size[0]
    cols = np.arange(size[1]) * w // size[1]
    return labels[rows[:, None], cols[None, :]]


class ConceptDataset:
    """Read-only view of a concept dataset; loaded arrays are cached."""

    def __init__(self, root, index: ConceptIndex, records: Sequence[ImageRecord]):
        self.root = Path(root)
        self.index = index
        self.records = list(records)
        self._by_id = {r.image_id: r for r in self.records}
        self._images: dict[str, np.ndarray] = {}
        self._labels: dict[tuple[str, str], np.ndarray] = {}
        self._category_ids = {
            cat: np.array([c.concept_id for c in index.in_category(cat)], dtype=np.int64)
            for cat in index.categories
        }

    def __len__(self):
        return len(self.records)

    def image_ids(self, split: str | None = None) -> list[str]:
        return [r.image_id for r in self.records if split is None or r.split == split]

    def record(self, image_id: str) -> ImageRecord:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise KeyError(f"unknown image {image_id!r}") from None

    def image(self, image_id: str) -> np.ndarray:
        """H x W x 3 uint8 array."""
        if image_id not in self._images:
            rec = self.record(image_id)
            with Image.open(self.root / rec.image_id) as im:
                arr = np.asarray(im.convert("RGB"))
            if arr.shape[:2] != rec.image_size:
                raise SchemaError(f"{rec.image_id}: size {arr.shape[:2]} != index {rec.image_size}")
            arr.setflags(write=False)
            self._images[image_id] = arr
        return self._images[image_id]

    def label_map(self, image_id: str, category: str) -> np.ndarray:
        """Concept ids for ``category`` at image resolution (zeros when unlabeled)."""
        key = (image_id, category)
        if key not in self._labels:
            rec = self.record(image_id)
            if category not in self.index.categories:
                raise UnknownConceptError(category)
            rel = rec.label_paths.get(category)
            if rel is None:
                labels = np.zeros(rec.image_size, dtype=np.int64)
            else:
                with Image.open(self.root / rel) as im:
                    labels = decode_label_map(np.asarray(im))
                if labels.shape != rec.label_size:
                    raise SchemaError(f"{rel}: size {labels.shape} != index {rec.label_size}")
                stray = np.setdiff1d(np.unique(labels), self._category_ids[category])
                stray = stray[stray != 0]
                if stray.size:
                    raise SchemaError(f"{rel}: ids {stray.tolist()} not in category {category!r}")
                if labels.shape != rec.image_size:
                    labels = upscale_nearest(labels, rec.image_size)
            labels.setflags(write=False)
            self._labels[key] = labels
        return self._labels[key]

    def content_hash(self) -> str:
        """sha256 over the index tables and every referenced file."""
        h = hashlib.sha256()
        files = ["concepts.csv", "index.csv"]
        for r in self.records:
            files.append(r.image_id)
            files.extend(r.label_paths[c] for c in sorted(r.label_paths))
        for rel in files:
            h.update(rel.encode())
            h.update((self.root / rel).read_bytes())
        return h.hexdigest()


def load_concept_dataset(root_path) -> ConceptDataset:
    root = Path(root_path)
    index = _read_concepts(root)
    return ConceptDataset(root, index, _read_records(root, index))


def resolve_label_mask(dataset: ConceptDataset, image_id: str, concept_id: int) -> np.ndarray:
    """Boolean H x W mask of the pixels labeled ``concept_id``."""
    concept = dataset.index.get(concept_id)
    return dataset.label_map(image_id, concept.category) == concept_id


# ---------------------------------------------------------------------------
# synthetic scenes


def quantize_colors(image: np.ndarray, names: Sequence[str] = tuple(BASIC_COLORS)) -> np.ndarray:
    """Index into ``names`` of the nearest basic color for every pixel."""
    table = np.array([BASIC_COLORS[n] for n in names], dtype=np.float64)
    px = np.asarray(image, dtype=np.float64)[..., None, :]
    return np.argmin(((px - table) ** 2).sum(-1), axis=-1)


@dataclass(frozen=True)
class Scene:
    """Parameters of one synthetic image: a textured shape on a flat background."""

    background: str
    shape: str
    fill: str
    texture: str
    accent: str
    center: tuple[float, float]
    radius: float
    light: float = 0.0  # direction of the brightness gradient, radians
    shading: float = 0.0  # darkest pixel is scaled by 1 - shading


def shape_mask(shape: str, size: tuple[int, int], center, radius) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = yy - center[0], xx - center[1]
    r = radius
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "triangle":
        # apex up, base at dy = r / 2
        return (dy <= r * 0.6) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        arm = r * 0.35
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "bar":
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)
    raise ValueError(f"unknown shape {shape!r}")


def texture_mask(texture: str, size: tuple[int, int]) -> np.ndarray:
    """Pixels painted with the accent color for ``texture``."""
    yy, xx = np.mgrid[0 : size[0], 0 : size[1]]
    if texture == "solid":
        return np.zeros(size, dtype=bool)
    if texture == "stripes":
        return (xx // 2) % 2 == 1
    if texture == "checker":
        return ((yy // 2) + (xx // 2)) % 2 == 1
    if texture == "dots":
        return (yy % 3 == 1) & (xx % 3 == 1)
    raise ValueError(f"unknown texture {texture!r}")


def paint_scene(scene: Scene, size: tuple[int, int]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Render ``scene``; returns the uint8 image and named boolean regions.

    Regions: ``"shape"`` (object pixels) and ``"accent"`` (textured pixels
    inside the shape).
    """
    shape = shape_mask(scene.shape, size, scene.center, scene.radius)
    accent = shape & texture_mask(scene.texture, size)
    img = np.empty(size + (3,), dtype=np.float64)
    img[...] = BASIC_COLORS[scene.background]
    img[shape] = BASIC_COLORS[scene.fill]
    img[accent] = BASIC_COLORS[scene.accent]
    if scene.shading:
        h, w = size
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        g = (yy / h - 0.5) * np.cos(scene.light) + (xx / w - 0.5) * np.sin(scene.light)
        img *= (1.0 - scene.shading * (0.5 + g / np.sqrt(2)))[..., None]
    return np.round(img).astype(np.uint8), {"shape": shape, "accent": accent}


def sample_scene(
    rng: np.random.Generator,
    size: tuple[int, int],
    palette: Sequence[str],
    shapes: Sequence[str],
    textures: Sequence[str],
    shape: str | None = None,
    radius_range: tuple[float, float] = (0.14, 0.24),
    backgrounds: Sequence[str] = (),
    shading: float = 0.0,
) -> Scene:
    """Random scene; the background comes from ``backgrounds`` (or ``palette`` if empty)."""
    pool = backgrounds or palette
    background = pool[rng.integers(len(pool))]
    others = [c for c in palette if c != background]
    fill = others[rng.integers(len(others))]
    accents = [c for c in others if c != fill]
    usable = list(textures) if accents else [t for t in textures if t == "solid"] or ["solid"]
    texture = usable[rng.integers(len(usable))]
    accent = accents[rng.integers(len(accents))] if accents and texture != "solid" else fill
    if shape is None:
        shape = shapes[rng.integers(len(shapes))]
    h, w = size
    radius = float(rng.uniform(*radius_range) * min(h, w))
    cy = float(rng.uniform(radius, h - radius))
    cx = float(rng.uniform(radius, w - radius))
    light = float(rng.uniform(0, 2 * np.pi))
    return Scene(background, shape, fill, texture, accent, (cy, cx), radius, light, shading)


def scene_labels(scene: Scene, size, index: ConceptIndex) -> dict[str, np.ndarray]:
    """Per-category label maps for a painted scene."""
    img, regions = paint_scene(scene, size)
    colors = [c.name for c in index.in_category("color")]
    color_ids = {c.name: c.concept_id for c in index.in_category("color")}
    quant = quantize_colors(img)
    names = list(BASIC_COLORS)
    color_map = np.zeros(size, dtype=np.int64)
    for name in colors:
        color_map[quant == names.index(name)] = color_ids[name]
    out = {"color": color_map}
    if "texture" in index.categories:
        tex = np.zeros(size, dtype=np.int64)
        tex[regions["shape"]] = index.by_name(scene.texture).concept_id
        out["texture"] = tex
    if "object" in index.categories:
        obj = np.zeros(size, dtype=np.int64)
        obj[regions["shape"]] = index.by_name(scene.shape).concept_id
        out["object"] = obj
    return out


@dataclass
class MicroBrodenSpec:
    image_size: tuple[int, int] = (32, 32)
    n_images: dict[str, int] = field(default_factory=lambda: {"dissect": 200})
    palette: tuple[str, ...] = ("red", "green", "blue", "yellow", "white", "black")
    shapes: tuple[str, ...] = ("square", "disk", "triangle", "cross")
    textures: tuple[str, ...] = ("solid", "stripes", "checker")
    seed: int = 0
    radius_range: tuple[float, float] = (0.14, 0.24)
    # Neutral backgrounds keep each object color to a few percent of the pixels.
    backgrounds: tuple[str, ...] = ("gray",)
    # Mild lighting gradient; above 0.15 some colors would quantize to a neighbour.
    shading: float = 0.1

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.radius_range = tuple(float(v) for v in self.radius_range)
        if not 0 < self.radius_range[0] <= self.radius_range[1] < 0.5:
            raise ValueError("radius_range must satisfy 0 < lo <= hi < 0.5")
        self.palette, self.shapes, self.textures, self.backgrounds = (
            tuple(self.palette), tuple(self.shapes), tuple(self.textures), tuple(self.backgrounds)
        )
        if not self.palette:
            raise ValueError("palette must be non-empty")
        if sum(self.n_images.values()) <= 0 or min(self.n_images.values()) < 0:
            raise ValueError("n_images must be positive")
        for name in self.palette + self.backgrounds:
            if name not in BASIC_COLORS:
                raise ValueError(f"unknown color {name!r}")
        for name in self.shapes:
            shape_mask(name, (2, 2), (1, 1), 1)
        for name in self.textures:
            texture_mask(name, (2, 2))
        if not 0 <= self.shading <= MAX_SHADING:
            raise ValueError(f"shading must be in [0, {MAX_SHADING}]")
        if len(set(self.palette)) < 2:
            raise ValueError("palette needs at least two colors")

    def concept_index(self) -> ConceptIndex:
        concepts, cid = [], 1
        colors = self.palette + tuple(c for c in dict.fromkeys(self.backgrounds) if c not in self.palette)
        for category, names in (("color", colors), ("texture", self.textures), ("object", self.shapes)):
            for name in names:
                concepts.append(Concept(cid, name, category))
                cid += 1
        cats = tuple(c for c in CATEGORIES if any(x.category == c for x in concepts))
        return ConceptIndex(tuple(concepts), cats)

    def scenes(self) -> Iterator[tuple[str, str, Scene]]:
        """(image_id, split, scene) for every image, in a fixed order."""
        rng = np.random.default_rng(self.seed)
        for split in sorted(self.n_images):
            for i in range(self.n_images[split]):
                scene = sample_scene(rng, self.image_size, self.palette, self.shapes, self.textures,
                                     radius_range=self.radius_range, backgrounds=self.backgrounds,
                                     shading=self.shading)
                yield f"images/{split}_{i:05d}.png", split, scene


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_concept_dataset(root, index: ConceptIndex, items) -> None:
    """Write ``items`` of (image_id, split, image, {category: labels}) to ``root``.

    Label maps may be downscaled by an integer factor relative to the image.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    for cat in index.categories:
        (root / "labels" / cat).mkdir(parents=True, exist_ok=True)
    rows = []
    for image_id, split, image, labels in items:
        (root / image_id).parent.mkdir(parents=True, exist_ok=True)
        (root / image_id).write_bytes(_png_bytes(image))
        stem = Path(image_id).stem
        cols, lsize = [], image.shape[:2]
        for cat in index.categories:
            if cat in labels:
                rel = f"labels/{cat}/{stem}.png"
                (root / rel).write_bytes(_png_bytes(encode_label_map(labels[cat])))
                lsize = labels[cat].shape
                cols.append(rel)
            else:
                cols.append("")
        rows.append([image_id, split, image.shape[0], image.shape[1], lsize[0], lsize[1], *cols])
    _write_csv(root / "index.csv", ["image", "split", "ih", "iw", "sh", "sw", *index.categories], rows)
    _write_csv(
        root / "concepts.csv",
        ["concept_id", "name", "category"],
        [[c.concept_id, c.name, c.category] for c in index.concepts],
    )


def generate_micro_broden(spec: MicroBrodenSpec, root) -> Path:
    """Write a deterministic synthetic concept dataset under ``root``."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        if not os.access(root, os.W_OK):
            raise PermissionError(f"not writable: {root}")
    except OSError as exc:
        raise OSError(f"cannot write micro-Broden to {root}: {exc}") from exc
    index = spec.concept_index()

    def items():
        for image_id, split, scene in spec.scenes():
            img, _ = paint_scene(scene, spec.image_size)
            yield image_id, split, img, scene_labels(scene, spec.image_size, index)

    write_concept_dataset(root, index, items())
    return root


# ---------------------------------------------------------------------------
# classification task


@dataclass
class ArrayDataset:
    """Images (N x C x H x W float32) with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)


def to_model_input(images: np.ndarray) -> np.ndarray:
    """uint8 N x H x W x 3 -> float32 N x 3 x H x W centered at zero."""
    x = np.asarray(images, dtype=np.float32) / 255.0 - 0.5
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def make_shape_task(
    n: int,
    spec: MicroBrodenSpec,
    seed: int,
    noise: float = 0.0,
) -> ArrayDataset:
    """Shape classification over micro-Broden scenes; class = shape index.

    Classes are balanced; ``noise`` is the std of additive Gaussian pixel
    noise in [0, 1] intensity units.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(spec.shapes)
    rng.shuffle(labels)
    imgs = np.empty((n, *spec.image_size, 3), dtype=np.uint8)
    for i, k in enumerate(labels):
        scene = sample_scene(rng, spec.image_size, spec.palette, spec.shapes, spec.textures, spec.shapes[k],
                             spec.radius_range, spec.backgrounds, spec.shading)
        imgs[i], _ = paint_scene(scene, spec.image_size)
    x = to_model_input(imgs)
    if noise:
        x = x + rng.normal(0.0, noise, size=x.shape).astype(np.float32)
    return ArrayDataset(x, labels.astype(np.int64), spec.shapes)
