"""Bitemporal image pairs: PNG ingest, patch tiling, and a synthetic generator."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SUBDIRS = ("A", "B", "label")


class DataError(ValueError):
    pass


@dataclass
class ImagePair:
    a: np.ndarray  # H0 x W0 x 3 in [0, 1]
    b: np.ndarray
    label: np.ndarray | None = None  # H0 x W0 uint8 {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.a.shape != self.b.shape or self.a.ndim != 3 or self.a.shape[2] != 3:
            raise DataError(f"pair {self.id!r}: images must share an H x W x 3 shape, got {self.a.shape} / {self.b.shape}")
        if self.label is not None and self.label.shape != self.a.shape[:2]:
            raise DataError(f"pair {self.id!r}: label {self.label.shape} vs images {self.a.shape[:2]}")

    @property
    def size(self) -> tuple:
        return self.a.shape[:2]


# -- PNG I/O ------------------------------------------------------------------


def _read_png(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_pair(path_a, path_b, path_label=None, pair_id: str | None = None) -> ImagePair:
    a = _read_png(path_a, "RGB").astype(np.float64) / 255.0
    b = _read_png(path_b, "RGB").astype(np.float64) / 255.0
    if a.shape != b.shape:
        raise DataError(f"image sizes differ: {path_a} {a.shape[:2]} vs {path_b} {b.shape[:2]}")
    label = None
    if path_label is not None:
        raw = _read_png(path_label, "L")
        if raw.shape != a.shape[:2]:
            raise DataError(f"label size {raw.shape} differs from image size {a.shape[:2]}")
        label = (raw > 127).astype(np.uint8)
    return ImagePair(a, b, label, pair_id if pair_id is not None else Path(path_a).stem)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def save_gray(path, values: np.ndarray) -> None:
    """Write values in [0, 1] as 8-bit grayscale, ``round(255 * v)``."""
    Image.fromarray(to_uint8(values), mode="L").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def write_pair(root, pair: ImagePair) -> None:
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_rgb(root / "A" / f"{pair.id}.png", pair.a)
    save_rgb(root / "B" / f"{pair.id}.png", pair.b)
    if pair.label is not None:
        save_mask(root / "label" / f"{pair.id}.png", pair.label)


# -- dataset directories --------------------------------------------------------


def list_ids(root, split: str | None = None) -> list[str]:
    """Pair ids under ``root/A``; restricted to ``root/<split>.txt`` when given."""
    root = Path(root)
    if split is not None:
        listing = root / f"{split}.txt"
        if not listing.exists():
            raise DataError(f"split list {listing} not found")
        return [ln.strip() for ln in listing.read_text().splitlines() if ln.strip()]
    if not (root / "A").is_dir():
        raise DataError(f"{root} has no A/ subdirectory")
    return sorted(p.stem for p in (root / "A").glob("*.png"))


def load_dataset(root, split: str | None = None, patch: int | None = None) -> list[ImagePair]:
    root = Path(root)
    out = []
    for pid in list_ids(root, split):
        lab = root / "label" / f"{pid}.png"
        pair = load_pair(root / "A" / f"{pid}.png", root / "B" / f"{pid}.png", lab if lab.exists() else None, pid)
        out.extend(tile(pair, patch) if patch else [pair])
    return out


def write_split_lists(root, splits: dict[str, list[str]]) -> None:
    for name, ids in splits.items():
        Path(root, f"{name}.txt").write_text("".join(f"{i}\n" for i in ids))


def split_by_hash(ids, val_frac: float = 0.1, test_frac: float = 0.2) -> dict[str, list[str]]:
    """Stable, disjoint train/val/test assignment from a hash of each id."""
    out = {"train": [], "val": [], "test": []}
    for pid in ids:
        u = int.from_bytes(hashlib.sha256(pid.encode()).digest()[:8], "big") / 2**64
        key = "test" if u < test_frac else "val" if u < test_frac + val_frac else "train"
        out[key].append(pid)
    return out


# -- tiling --------------------------------------------------------------------


def tile(pair: ImagePair, patch: int = 256) -> list[ImagePair]:
    """Non-overlapping row-major ``patch`` x ``patch`` tiles; remainders are dropped."""
    h, w = pair.size
    if patch < 1 or patch > h or patch > w:
        raise DataError(f"patch {patch} does not fit a {h}x{w} image")
    rows, cols = h // patch, w // patch
    if rows * patch != h or cols * patch != w:
        warnings.warn(f"{pair.id}: dropping {h - rows * patch} rows / {w - cols * patch} cols not covered by {patch}px tiles")
    tiles = []
    for r in range(rows):
        for c in range(cols):
            sl = (slice(r * patch, (r + 1) * patch), slice(c * patch, (c + 1) * patch))
            tiles.append(ImagePair(
                pair.a[sl].copy(), pair.b[sl].copy(),
                None if pair.label is None else pair.label[sl].copy(),
                f"{pair.id}_r{r}_c{c}",
            ))
    return tiles


def untile(tiles: list[ImagePair], rows: int, cols: int) -> ImagePair:
    def stitch(get):
        return np.concatenate(
            [np.concatenate([get(tiles[r * cols + c]) for c in range(cols)], axis=1) for r in range(rows)], axis=0
        )

    label = None if tiles[0].label is None else stitch(lambda t: t.label)
    base = tiles[0].id.rsplit("_r", 1)[0]
    return ImagePair(stitch(lambda t: t.a), stitch(lambda t: t.b), label, base)


# -- synthetic pairs -------------------------------------------------------------


@dataclass
class SyntheticConfig:
    size: int = 64
    num_shapes: tuple = (3, 6)
    toggle_prob: float = 0.5
    brightness_jitter: float = 0.1
    noise_std: float = 0.02
    seed: int = 0
    rect_extent: tuple = (6, 18)
    disc_radius: tuple = (3.0, 8.0)

    def validate(self, downsample_factor: int = 8) -> None:
        if self.size % downsample_factor:
            raise ValueError(f"size {self.size} not divisible by {downsample_factor}")
        lo, hi = self.num_shapes
        if lo < 0 or hi < lo:
            raise ValueError("num_shapes must be a (min, max) range")
        if self.rect_extent[1] > self.size or 2 * self.disc_radius[1] > self.size:
            raise ValueError(f"shape extents {self.rect_extent} / radius {self.disc_radius} do not fit size {self.size}")


@dataclass
class Shape:
    kind: str  # "rect" | "disc"
    params: tuple  # rect: (y0, x0, h, w); disc: (cy, cx, r)
    color: tuple
    presence: str = "both"  # "both" | "a" (removed) | "b" (added)


def rasterize(shape: Shape, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if shape.kind == "rect":
        y0, x0, h, w = shape.params
        mask[y0 : y0 + h, x0 : x0 + w] = True
    else:
        cy, cx, r = shape.params
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return mask


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.3, 0.6, 3)
    field_ = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(1, 6, 2)
        ph = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    field_ /= 4
    tint = rng.uniform(0.5, 1.0, 3)
    return np.clip(base + 0.1 * field_[:, :, None] * tint, 0, 1)


def _sample_shapes(rng: np.random.Generator, cfg: SyntheticConfig) -> list[Shape]:
    n = int(rng.integers(cfg.num_shapes[0], cfg.num_shapes[1] + 1))
    occupied = np.zeros((cfg.size, cfg.size), dtype=bool)
    shapes = []
    for _ in range(50 * max(n, 1)):
        if len(shapes) == n:
            break
        if rng.random() < 0.5:
            h, w = (int(v) for v in rng.integers(cfg.rect_extent[0], cfg.rect_extent[1] + 1, 2))
            y0, x0 = int(rng.integers(0, cfg.size - h + 1)), int(rng.integers(0, cfg.size - w + 1))
            s = Shape("rect", (y0, x0, h, w), ())
        else:
            r = float(rng.uniform(*cfg.disc_radius))
            cy, cx = rng.uniform(r, cfg.size - r, 2)
            s = Shape("disc", (float(cy), float(cx), r), ())
        m = rasterize(s, cfg.size)
        grown = m.copy()
        grown[1:] |= m[:-1]
        grown[:-1] |= m[1:]
        grown[:, 1:] |= m[:, :-1]
        grown[:, :-1] |= m[:, 1:]
        if (grown & occupied).any():
            continue
        occupied |= m
        # bright roofs or dark tarmac, well away from the mid-tone background
        tone = rng.uniform(0.8, 1.0) if rng.random() < 0.6 else rng.uniform(0.0, 0.15)
        s.color = tuple(np.clip(tone + rng.uniform(-0.1, 0.1, 3), 0, 1))
        shapes.append(s)
    return shapes


def synthetic_pair(cfg: SyntheticConfig, index: int) -> tuple[ImagePair, list[Shape]]:
    scene_rng = np.random.default_rng([cfg.seed, index, 0])
    nuisance_rng = np.random.default_rng([cfg.seed, index, 1])
    bg = _background(scene_rng, cfg.size)
    shapes = _sample_shapes(scene_rng, cfg)
    toggles = scene_rng.random(len(shapes)) < cfg.toggle_prob
    sides = scene_rng.random(len(shapes)) < 0.5
    a, b = bg.copy(), bg.copy()
    label = np.zeros((cfg.size, cfg.size), dtype=np.uint8)
    for s, toggled, added in zip(shapes, toggles, sides):
        s.presence = ("b" if added else "a") if toggled else "both"
        m = rasterize(s, cfg.size)
        if s.presence in ("both", "a"):
            a[m] = s.color
        if s.presence in ("both", "b"):
            b[m] = s.color
        if toggled:
            label[m] = 1
    shift = nuisance_rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter) if cfg.brightness_jitter else 0.0
    if cfg.noise_std:
        a = a + nuisance_rng.normal(0.0, cfg.noise_std, a.shape)
        b = b + nuisance_rng.normal(0.0, cfg.noise_std, b.shape)
    b = b + shift
    pair = ImagePair(np.clip(a, 0, 1), np.clip(b, 0, 1), label, f"synth{cfg.seed}_{index:05d}")
    return pair, shapes


def generate_synthetic(cfg: SyntheticConfig, n: int, start: int = 0) -> list[ImagePair]:
    cfg.validate()
    return [synthetic_pair(cfg, i)[0] for i in range(start, start + n)]
