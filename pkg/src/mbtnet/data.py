"""Synthetic cell mosaics, equalization, patch sampling and dataset manifests."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import dataclass_from_kv, read_kv, write_kv
from .supervision import MaskTriplet, make_triplet

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass
class SynthConfig:
    image_size: tuple[int, int] = (128, 128)
    cell_count: int = 40
    jitter: float = 0.3
    border_width: int = 2
    brightness: tuple[float, float] = (0.55, 0.85)
    border_level: float = 0.2
    shading_falloff: float = 2.0
    illumination: float = 0.15
    noise: float = 0.05
    fuzzy_fraction: float = 0.15
    fuzzy_sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.brightness = tuple(float(b) for b in self.brightness)
        if self.cell_count < 4:
            raise ValueError(f"cell_count must be >= 4, got {self.cell_count}")
        if self.border_width < 1:
            raise ValueError(f"border_width must be >= 1, got {self.border_width}")
        if not 0 <= self.fuzzy_fraction <= 1:
            raise ValueError(f"fuzzy_fraction must be in [0, 1], got {self.fuzzy_fraction}")
        if self.noise < 0 or self.fuzzy_sigma <= 0:
            raise ValueError("noise must be >= 0 and fuzzy_sigma > 0")

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        return dataclass_from_kv(cls, read_kv(path))

    def save(self, path) -> None:
        write_kv(path, asdict(self))


@dataclass
class SampleRecord:
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    masks: MaskTriplet
    ident: str = ""

    def __post_init__(self):
        if self.image.shape[1:] != self.masks.final.shape:
            raise ValueError(f"image {self.image.shape} and masks {self.masks.final.shape} differ")


# ---------------------------------------------------------------- mosaics

def voronoi_geometry(shape: tuple[int, int], points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-seed label and distance to the nearest cell boundary for every pixel.

    The boundary distance of pixel x in the cell of seed a is the smallest
    distance from x to a bisector between a and another seed b,
    ``(|x-b|^2 - |x-a|^2) / (2|a-b|)``.
    """
    points = np.asarray(points, dtype=np.float64)
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W]
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    nearest = np.empty(len(pix), dtype=np.int64)
    border = np.empty(len(pix))
    chunk = max(1, 2 ** 22 // max(len(points), 1))  # bounds the pixel x seed temporaries
    for lo in range(0, len(pix), chunk):
        sub = pix[lo:lo + chunk]
        d2 = ((sub[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        near = np.argmin(d2, axis=1)
        rows = np.arange(len(sub))
        own = d2[rows, near]
        sep = np.linalg.norm(points[near][:, None, :] - points[None, :, :], axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = (d2 - own[:, None]) / (2 * sep)
        dist[rows, near] = np.inf
        dist[sep == 0] = np.inf
        nearest[lo:lo + chunk] = near
        border[lo:lo + chunk] = dist.min(axis=1)
    return nearest.reshape(shape), border.reshape(shape)


def voronoi_border_mask(shape: tuple[int, int], points: np.ndarray,
                        border_width: float) -> np.ndarray:
    _, dist = voronoi_geometry(shape, points)
    return (dist <= border_width / 2).astype(np.uint8)


def jittered_seeds(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Hexagonal lattice of seed points with uniform jitter, covering the image margin."""
    H, W = config.image_size
    spacing = math.sqrt(2 * H * W / (math.sqrt(3) * config.cell_count))
    if spacing < 3 * config.border_width + 2:
        raise ValueError(f"{config.cell_count} cells of spacing {spacing:.1f}px do not fit "
                         f"borders of width {config.border_width}")
    row_step = spacing * math.sqrt(3) / 2
    origin = rng.uniform(0, spacing, size=2)
    points = []
    for r in range(-1, int(H / row_step) + 2):
        shift = spacing / 2 if r % 2 else 0.0
        for c in range(-1, int(W / spacing) + 2):
            points.append((origin[0] + r * row_step, origin[1] + c * spacing + shift))
    points = np.array(points)
    points += rng.uniform(-config.jitter, config.jitter, size=points.shape) * spacing
    return points


def generate_voronoi_mosaic(config: SynthConfig,
                            points: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Render a cell mosaic and its border mask, both uint8 of ``config.image_size``.

    Cells get a random base brightness that darkens toward their borders;
    a smooth illumination field, Gaussian noise and a blurred rectangle
    covering ``fuzzy_fraction`` of the image are layered on top.
    """
    rng = np.random.default_rng(config.seed)
    if points is None:
        points = jittered_seeds(config, rng)
    shape = config.image_size
    labels, dist = voronoi_geometry(shape, points)
    mask = (dist <= config.border_width / 2).astype(np.uint8)

    lo, hi = config.brightness
    base = rng.uniform(lo, hi, size=len(points))[labels]
    profile = 1 - np.exp(-np.maximum(dist - config.border_width / 2, 0) / config.shading_falloff)
    img = config.border_level + (base - config.border_level) * profile

    H, W = shape
    coarse = rng.uniform(-1, 1, size=(3, 3))
    field_ = ndimage.zoom(coarse, (H / 3, W / 3), order=1)[:H, :W]
    img = img * (1 + config.illumination * field_)
    if config.noise > 0:
        img = img + rng.normal(0, config.noise, size=shape)
    if config.fuzzy_fraction > 0:
        area = config.fuzzy_fraction * H * W
        aspect = rng.uniform(0.6, 1.6)
        fh = int(min(H, max(1, round(math.sqrt(area * aspect)))))
        fw = int(min(W, max(1, round(area / fh))))
        top = rng.integers(0, H - fh + 1)
        left = rng.integers(0, W - fw + 1)
        blurred = ndimage.gaussian_filter(img, config.fuzzy_sigma, mode="nearest")
        img[top:top + fh, left:left + fw] = blurred[top:top + fh, left:left + fw]
    image = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return image, mask


# ---------------------------------------------------------------- equalization & patches

def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def histogram_equalize(image: np.ndarray) -> np.ndarray:
    """256-bin global equalization: level v maps to round(255 * CDF(v))."""
    image = to_uint8(image)
    if image.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {image.shape}")
    hist = np.bincount(image.ravel(), minlength=256)
    cdf = np.cumsum(hist) / image.size
    lut = np.round(255 * cdf).astype(np.uint8)
    return lut[image]


def extract_patches(image: np.ndarray, mask: np.ndarray, patch: tuple[int, int], count: int,
                    seed: int, ident: str = "", **mask_options) -> list[SampleRecord]:
    """Crop ``count`` aligned image/mask patches at uniformly random corners."""
    image = np.asarray(image)
    H, W = image.shape
    h, w = patch
    if mask.shape != image.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ")
    if h > H or w > W:
        raise ValueError(f"patch {patch} does not fit in image {image.shape}")
    rng = np.random.default_rng(seed)
    tops = rng.integers(0, H - h + 1, size=count)
    lefts = rng.integers(0, W - w + 1, size=count)
    scale = 255.0 if image.dtype == np.uint8 else 1.0
    records = []
    for i, (t, l) in enumerate(zip(tops, lefts)):
        crop = image[t:t + h, l:l + w].astype(np.float32) / np.float32(scale)
        records.append(SampleRecord(
            image=crop[None],
            masks=make_triplet(mask[t:t + h, l:l + w], **mask_options),
            ident=f"{ident}{i:03d}@{t},{l}",
        ))
    return records


# ---------------------------------------------------------------- PNG io

def read_png_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("L"))


def write_png_gray(path, array: np.ndarray) -> None:
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="L").save(path)


def write_png_rgb(path, array: np.ndarray) -> None:
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="RGB").save(path)


def read_mask(path) -> np.ndarray:
    return (read_png_gray(path) > 127).astype(np.uint8)


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestRecord:
    split: str
    image: str
    mask: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, relpath: str) -> Path:
        p = Path(relpath)
        return p if p.is_absolute() else self.root / p

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def validate(self, check_files: bool = True) -> None:
        owner: dict[str, str] = {}
        for r in self.records:
            if r.split not in SPLITS:
                raise ManifestError(f"unknown split {r.split!r}")
            for relpath in (r.image, r.mask):
                key = str(self.resolve(relpath).resolve())
                if owner.setdefault(key, r.split) != r.split:
                    raise ManifestError(f"{relpath} appears in both the {owner[key]} and "
                                        f"{r.split} splits; splits must not overlap")
                if check_files and not self.resolve(relpath).is_file():
                    raise ManifestError(f"missing file: {self.resolve(relpath)}")

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and self.records == other.records


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = [f"{r.split}\t{r.image}\t{r.mask}\n" for r in manifest.records]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise ManifestError(f"{path}:{lineno}: expected '<split>\\t<image>\\t<mask>'")
        if parts[0] not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {parts[0]!r}")
        records.append(ManifestRecord(*parts))
    manifest = DatasetManifest(records, root=path.parent)
    manifest.validate(check_files)
    return manifest


def load_split(manifest: DatasetManifest, split: str, **mask_options) -> list[SampleRecord]:
    out = []
    for r in manifest.split(split):
        image = read_png_gray(manifest.resolve(r.image)).astype(np.float32) / np.float32(255)
        final = read_mask(manifest.resolve(r.mask))
        out.append(SampleRecord(image[None], make_triplet(final, **mask_options),
                                ident=Path(r.image).stem))
    return out


@dataclass
class DatasetPlan:
    """How many patches of what size each split gets."""

    patch: tuple[int, int] = (64, 64)
    train: int = 64
    val: int = 8
    test: int = 8
    patches_per_image: int = 4


def synthesize_dataset(out_dir, synth: SynthConfig = SynthConfig(),
                       plan: DatasetPlan = DatasetPlan()) -> DatasetManifest:
    """Write equalized patch images, border masks and ``manifest.tsv`` under ``out_dir``.

    Each split draws from its own source mosaics, so splits never share pixels.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "edges", "bodies"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for split_index, split in enumerate(SPLITS):
        want = getattr(plan, split)
        n_images = math.ceil(want / plan.patches_per_image) if want else 0
        made = 0
        for img_index in range(n_images):
            seed = int(np.random.SeedSequence([synth.seed, split_index, img_index])
                       .generate_state(1)[0])
            cfg = SynthConfig(**{**asdict(synth), "seed": seed})
            image, mask = generate_voronoi_mosaic(cfg)
            image = histogram_equalize(image)
            take = min(plan.patches_per_image, want - made)
            patches = extract_patches(image, mask, plan.patch, take, seed)
            for rec in patches:
                name = f"{split}_{made:04d}.png"
                write_png_gray(out / "images" / name, np.round(rec.image[0] * 255))
                write_png_gray(out / "masks" / name, rec.masks.final * 255)
                write_png_gray(out / "edges" / name, rec.masks.edge * 255)
                write_png_gray(out / "bodies" / name, np.round(rec.masks.body * 255))
                records.append(ManifestRecord(split, f"images/{name}", f"masks/{name}"))
                made += 1
    manifest = DatasetManifest(records, root=out)
    save_manifest(manifest, out / "manifest.tsv")
    synth.save(out / "synth.cfg")
    return manifest
