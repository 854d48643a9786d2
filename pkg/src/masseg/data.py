"""Synthetic multimodal scenes with controlled per-modality class visibility.

A scene is a label map painted with random rectangles, discs and triangles.
Each modality renders a class with a colour signature scaled by the
visibility matrix and multiplied by a modality-specific texture:

* ``flat``   - solid fill (rgb-like)
* ``radial`` - brightness falling off from each shape's centre (depth-like)
* ``edge``   - only the shape outline (event-like)
* ``dots``   - a 1-in-4 pixel raster (lidar-like)

On disk a split is a directory holding ``manifest.txt`` (INI text) and one
sub-directory per scene with ``<modality>.f32`` (little-endian float32,
[3,H,W] row-major) and ``labels.u16`` (header line "H W" then little-endian
uint16 pixels).
"""

from __future__ import annotations

import colorsys
import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .modality import DEFAULT_NAMES

TEXTURES = ("flat", "radial", "edge", "dots")
_NAME_TEXTURE = {"rgb": "flat", "depth": "radial", "event": "edge", "lidar": "dots"}
SHAPE_KINDS = ("rectangle", "disc", "triangle")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    modalities: tuple[str, ...] = DEFAULT_NAMES
    min_shapes: int = 3
    max_shapes: int = 6
    min_size: int = 12
    max_size: int = 30
    noise: float = 0.05
    edge_width: int = 2
    channels: int = 3

    def __post_init__(self):
        if self.height % 32 or self.width % 32 or self.height <= 0 or self.width <= 0:
            raise ValueError("scene height and width must be positive multiples of 32")
        if self.num_classes < 3:
            raise ValueError("need at least 3 classes (background + 2)")
        if not 2 <= len(self.modalities) <= 4:
            raise ValueError("need between 2 and 4 modalities")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("invalid shape count range")
        if not 2 <= self.min_size <= self.max_size:
            raise ValueError("invalid shape size range")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def textures(self) -> tuple[str, ...]:
        return tuple(_NAME_TEXTURE.get(n, TEXTURES[i % len(TEXTURES)])
                     for i, n in enumerate(self.modalities))


def class_signatures(num_classes: int, channels: int = 3) -> np.ndarray:
    """Distinct colour per class [K, channels]; background is all zeros."""
    sig = np.zeros((num_classes, channels))
    for k in range(1, num_classes):
        rgb = colorsys.hsv_to_rgb((k - 1) / (num_classes - 1), 0.75, 0.9)
        sig[k] = np.resize(np.asarray(rgb), channels)
    return sig


@dataclass(frozen=True)
class VisibilityMatrix:
    values: np.ndarray  # [K, M]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or ((v < 0) | (v > 1)).any():
            raise ValueError("visibility must be a [K, M] matrix with entries in [0, 1]")
        if not (v[1:] >= 0.5).any(axis=1).all():
            raise ValueError("every non-background class must be visible (>= 0.5) somewhere")
        if not (v[1:] == 0).any():
            raise ValueError("at least one class must be invisible in at least one modality")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def default(cls, num_classes: int = 5, num_modalities: int = 4, faint: float = 0.2):
        """Class k fully visible in modality (k-1) mod M, faint in one partner."""
        v = np.zeros((num_classes, num_modalities))
        for k in range(1, num_classes):
            m = (k - 1) % num_modalities
            v[k, m] = 1.0
            partner = num_modalities - 1 - m
            if partner == m:
                partner = (m + 1) % num_modalities
            if v[k, partner] == 0:
                v[k, partner] = faint
        if not (v[1:] == 0).any():
            v[1, v[1] < 1.0] = 0.0
        return cls(v)


@dataclass
class Sample:
    images: dict[int, np.ndarray]  # modality index -> [C,H,W] in [0,1]
    labels: np.ndarray  # [H,W] integer class ids
    modalities: tuple[str, ...] = DEFAULT_NAMES
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# generation

def _paint_shape(kind: str, rng: np.random.Generator, spec: SceneSpec, yy, xx):
    h, w = spec.height, spec.width
    size = rng.integers(spec.min_size, spec.max_size + 1)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    if kind == "rectangle":
        ry = size * rng.uniform(0.35, 0.65)
        rx = size * rng.uniform(0.35, 0.65)
        mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        radius = math.hypot(ry, rx)
    elif kind == "disc":
        radius = size / 2.0
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    else:
        radius = size * 0.6
        angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, 3)
        py = cy + radius * np.sin(angles)
        px = cx + radius * np.cos(angles)
        mask = np.ones((h, w), dtype=bool)
        sign = None
        for i in range(3):
            j = (i + 1) % 3
            cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
            area_sign = np.sign((px[j] - px[i]) * (py[(i + 2) % 3] - py[i])
                                - (py[j] - py[i]) * (px[(i + 2) % 3] - px[i]))
            sign = area_sign
            mask &= cross * sign >= 0
    return mask, (cy, cx), max(radius, 1.0)


def _textures(spec: SceneSpec, instances: np.ndarray, centres: list, radii: list) -> dict:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    out = {"flat": (instances > 0).astype(float)}
    radial = np.zeros((h, w))
    edge = np.zeros((h, w))
    for idx, ((cy, cx), r) in enumerate(zip(centres, radii), start=1):
        region = instances == idx
        if not region.any():
            continue
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / r
        radial[region] = np.clip(1.0 - 0.7 * d[region], 0.3, 1.0)
        inner = ndimage.binary_erosion(region, iterations=spec.edge_width, border_value=1)
        edge[region & ~inner] = 1.0
    dots = np.zeros((h, w))
    dots[0::2, 0::2] = 1.0
    out["radial"] = radial
    out["edge"] = edge
    out["dots"] = dots * out["flat"]
    return out


def generate(seed, spec: SceneSpec = SceneSpec(), visibility: VisibilityMatrix | None = None) -> Sample:
    """Deterministic scene for ``seed`` (an int or a sequence of ints)."""
    if visibility is None:
        visibility = VisibilityMatrix.default(spec.num_classes, len(spec.modalities))
    if visibility.shape != (spec.num_classes, len(spec.modalities)):
        raise ValueError(f"visibility shape {visibility.shape} does not match "
                         f"({spec.num_classes}, {len(spec.modalities)})")
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    labels = np.zeros((h, w), dtype=np.int64)
    instances = np.zeros((h, w), dtype=np.int64)
    centres, radii = [], []
    n_shapes = rng.integers(spec.min_shapes, spec.max_shapes + 1)
    for i in range(n_shapes):
        kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
        cls = rng.integers(1, spec.num_classes)
        mask, centre, radius = _paint_shape(kind, rng, spec, yy, xx)
        labels[mask] = cls
        instances[mask] = i + 1
        centres.append(centre)
        radii.append(radius)
    tex = _textures(spec, instances, centres, radii)
    sig = class_signatures(spec.num_classes, spec.channels)
    images = {}
    for m, kind in enumerate(spec.textures):
        strength = visibility.values[labels, m] * tex[kind]  # [H,W]
        img = sig[labels].transpose(2, 0, 1) * strength[None]
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
        images[m] = np.clip(img, 0.0, 1.0)
    return Sample(images=images, labels=labels, modalities=spec.modalities,
                  meta={"seed": seed, "shapes": int(n_shapes)})


def mask_blocks(sample: Sample, modality: int, block_size: int, keep_fraction: float,
                rng: np.random.Generator) -> Sample:
    """Zero all but ceil(keep_fraction * n_blocks) random blocks of one modality."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    img = sample.images[modality]
    h, w = img.shape[-2:]
    if block_size <= 0 or h % block_size or w % block_size:
        raise ValueError(f"block size {block_size} does not divide {h}x{w}")
    gh, gw = h // block_size, w // block_size
    n_blocks = gh * gw
    keep = math.ceil(keep_fraction * n_blocks - 1e-9)
    kept = np.zeros(n_blocks, dtype=bool)
    kept[rng.choice(n_blocks, size=keep, replace=False)] = True
    mask = np.kron(kept.reshape(gh, gw), np.ones((block_size, block_size)))
    images = dict(sample.images)
    images[modality] = img * mask[None]
    meta = dict(sample.meta, kept_blocks={**sample.meta.get("kept_blocks", {}), modality: kept})
    return Sample(images=images, labels=sample.labels, modalities=sample.modalities, meta=meta)


def degrade(sample: Sample, modality: int, severity: float, rng: np.random.Generator) -> Sample:
    """Blend one modality toward uniform noise: (1-severity)*x + severity*noise."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    img = sample.images[modality]
    noise = rng.random(img.shape)
    images = dict(sample.images)
    images[modality] = (1.0 - severity) * img + severity * noise
    return Sample(images=images, labels=sample.labels, modalities=sample.modalities,
                  meta=dict(sample.meta))


# ---------------------------------------------------------------------------
# datasets

SPLIT_CODES = {"train": 0, "eval": 1}


def scene_seed(seed: int, split: str, index: int) -> tuple[int, int, int]:
    return (int(seed), SPLIT_CODES.get(split, 2), int(index))


def make_split(seed: int, split: str, count: int, spec: SceneSpec = SceneSpec(),
               visibility: VisibilityMatrix | None = None) -> list[Sample]:
    return [generate(scene_seed(seed, split, i), spec, visibility) for i in range(count)]


def collate(samples: Sequence[Sample], modalities: Iterable[int] | None = None):
    """Stack samples into ({m: [N,C,H,W] float64}, labels [N,H,W])."""
    if not samples:
        raise ValueError("empty batch")
    keys = sorted(samples[0].images) if modalities is None else list(modalities)
    images = {m: np.stack([s.images[m] for s in samples]).astype(np.float64) for m in keys}
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return images, labels


def write_label_raster(path: Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 0xFFFF:
        raise ValueError("labels do not fit in 16 bits")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"{h} {w}\n".encode("ascii"))
        fh.write(labels.astype("<u2").tobytes())


def read_label_raster(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        h, w = int(header[0]), int(header[1])
        data = np.frombuffer(fh.read(), dtype="<u2")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} labels, found {data.size}")
    return data.reshape(h, w).astype(np.int64)


def write_tensor(path: Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path: Path, shape: Sequence[int]) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape)


@dataclass
class DatasetInfo:
    split: str
    seed: int
    spec: SceneSpec
    visibility: VisibilityMatrix
    scenes: list[str]


def _fmt_row(row) -> str:
    return ",".join(repr(float(x)) for x in row)


def write_split(out_dir, split: str, seed: int, count: int, spec: SceneSpec = SceneSpec(),
                visibility: VisibilityMatrix | None = None) -> DatasetInfo:
    """Generate ``count`` scenes and write them under ``out_dir/split``."""
    if visibility is None:
        visibility = VisibilityMatrix.default(spec.num_classes, len(spec.modalities))
    root = Path(out_dir) / split
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        sample = generate(scene_seed(seed, split, i), spec, visibility)
        name = f"scene_{i:05d}"
        sdir = root / name
        sdir.mkdir(exist_ok=True)
        for m, mod in enumerate(spec.modalities):
            write_tensor(sdir / f"{mod}.f32", sample.images[m])
        write_label_raster(sdir / "labels.u16", sample.labels)
        names.append(name)
    info = DatasetInfo(split, seed, spec, visibility, names)
    write_manifest(root / "manifest.txt", info)
    return info


def write_manifest(path: Path, info: DatasetInfo) -> None:
    spec = info.spec
    cp = configparser.ConfigParser()
    cp["dataset"] = {
        "split": info.split,
        "seed": str(info.seed),
        "height": str(spec.height),
        "width": str(spec.width),
        "channels": str(spec.channels),
        "num_classes": str(spec.num_classes),
        "modalities": ",".join(spec.modalities),
        "min_shapes": str(spec.min_shapes),
        "max_shapes": str(spec.max_shapes),
        "min_size": str(spec.min_size),
        "max_size": str(spec.max_size),
        "noise": repr(spec.noise),
        "edge_width": str(spec.edge_width),
        "scene_count": str(len(info.scenes)),
    }
    cp["visibility"] = {f"class{k}": _fmt_row(row) for k, row in enumerate(info.visibility.values)}
    cp["scenes"] = {name: ",".join(map(str, scene_seed(info.seed, info.split, i)))
                    for i, name in enumerate(info.scenes)}
    with open(path, "w") as fh:
        cp.write(fh)


def read_manifest(path) -> DatasetInfo:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    cp = configparser.ConfigParser()
    cp.read(path)
    d = cp["dataset"]
    spec = SceneSpec(
        height=d.getint("height"), width=d.getint("width"), channels=d.getint("channels"),
        num_classes=d.getint("num_classes"), modalities=tuple(d["modalities"].split(",")),
        min_shapes=d.getint("min_shapes"), max_shapes=d.getint("max_shapes"),
        min_size=d.getint("min_size"), max_size=d.getint("max_size"),
        noise=d.getfloat("noise"), edge_width=d.getint("edge_width"),
    )
    vis = np.array([[float(x) for x in cp["visibility"][f"class{k}"].split(",")]
                    for k in range(spec.num_classes)])
    scenes = list(cp["scenes"].keys())
    if len(scenes) != d.getint("scene_count"):
        raise ValueError(f"{path}: scene_count does not match the scene list")
    return DatasetInfo(d["split"], d.getint("seed"), spec, VisibilityMatrix(vis), scenes)


def load_split(split_dir) -> tuple[DatasetInfo, list[Sample]]:
    split_dir = Path(split_dir)
    info = read_manifest(split_dir)
    spec = info.spec
    shape = (spec.channels, spec.height, spec.width)
    samples = []
    for name in info.scenes:
        sdir = split_dir / name
        images = {m: read_tensor(sdir / f"{mod}.f32", shape) for m, mod in enumerate(spec.modalities)}
        labels = read_label_raster(sdir / "labels.u16")
        samples.append(Sample(images=images, labels=labels, modalities=spec.modalities,
                              meta={"scene": name}))
    return info, samples


def load_sample_dir(scene_dir, modalities: Sequence[str], shape: Sequence[int]) -> Sample:
    """Read one scene directory (labels optional)."""
    scene_dir = Path(scene_dir)
    images = {}
    for m, mod in enumerate(modalities):
        p = scene_dir / f"{mod}.f32"
        if p.exists():
            images[m] = read_tensor(p, shape)
    lp = scene_dir / "labels.u16"
    labels = read_label_raster(lp) if lp.exists() else np.zeros(tuple(shape[-2:]), dtype=np.int64)
    return Sample(images=images, labels=labels, modalities=tuple(modalities))
