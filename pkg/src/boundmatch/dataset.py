"""Synthetic shape scenes, labeled/unlabeled splits, and PPM/PGM persistence.

Scenes are a textured background (class 0) with opaque circles, rectangles
and triangles stacked on top, each assigned a shape class with a
class-correlated color plus per-instance jitter and pixel noise. Label maps
are exact by construction. Images are stored as binary PPM (P6), labels as
binary PGM (P5), with a JSON manifest; round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np


class DataError(Exception):
    """Raised for dataset I/O and consistency failures."""


class PnmParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class SceneConfig:
    size: int = 64
    num_classes: int = 5  # background + shape classes
    shapes_min: int = 2
    shapes_max: int = 5
    noise: float = 0.06  # Gaussian pixel noise, [0,1] units
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.size % 16:
            raise ValueError(f"size must be divisible by 16, got {self.size}")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ValueError("need 1 <= shapes_min <= shapes_max")


@dataclass
class DatasetSplit:
    labeled: List[int]
    unlabeled: List[int]


def _palette(num_classes: int) -> np.ndarray:
    """Fixed class-correlated base colors in [0,1], class 0 dull gray-green."""
    cols = np.zeros((num_classes, 3), dtype=np.float64)
    cols[0] = (0.35, 0.40, 0.35)
    for c in range(1, num_classes):
        ang = 2.0 * np.pi * (c - 1) / max(num_classes - 1, 1)
        cols[c] = 0.55 + 0.35 * np.array(
            [np.cos(ang), np.cos(ang - 2.0 * np.pi / 3), np.cos(ang + 2.0 * np.pi / 3)]
        )
    return np.clip(cols, 0.05, 0.95)


def _raster_shape(rng: np.random.Generator, size: int) -> np.ndarray:
    """Boolean mask of one random circle, rectangle or triangle."""
    yy, xx = np.mgrid[0:size, 0:size]
    kind = rng.integers(0, 3)
    if kind == 0:  # circle
        r = rng.uniform(0.06, 0.22) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:  # rectangle
        h = rng.uniform(0.12, 0.45) * size
        w = rng.uniform(0.12, 0.45) * size
        top = rng.uniform(0, size - h)
        left = rng.uniform(0, size - w)
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    # triangle: three vertices with a minimum spread
    for _ in range(32):
        pts = rng.uniform(0.05 * size, 0.95 * size, size=(3, 2))
        area = 0.5 * abs(
            (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
            - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1])
        )
        if area >= (0.04 * size) ** 2:
            break
    def side(p, q):
        return (xx - p[1]) * (q[0] - p[0]) - (yy - p[0]) * (q[1] - p[1])
    s1 = side(pts[0], pts[1])
    s2 = side(pts[1], pts[2])
    s3 = side(pts[2], pts[0])
    return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))


def generate_scene(cfg: SceneConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """One scene: (uint8 image (3,H,W), uint8 label map (H,W))."""
    rng = np.random.default_rng((cfg.seed, seed))
    size = cfg.size
    palette = _palette(cfg.num_classes)

    yy, xx = np.mgrid[0:size, 0:size]
    direction = rng.uniform(-1.0, 1.0, size=2)
    ramp = (direction[0] * yy + direction[1] * xx) / size
    img = palette[0][:, None, None] + 0.12 * ramp[None] + 0.05 * np.cos(
        2 * np.pi * (xx[None] / size) * rng.uniform(1, 3)
    )
    labels = np.zeros((size, size), dtype=np.uint8)

    n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, cfg.num_classes))
        mask = _raster_shape(rng, size)
        color = palette[cls] * rng.uniform(0.8, 1.2) + rng.uniform(-0.06, 0.06, 3)
        img[:, mask] = color[:, None]
        labels[mask] = cls

    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    img8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img8, labels


def make_split(n_train: int, fraction: float, seed: int) -> DatasetSplit:
    """Deterministic labeled/unlabeled partition of the train indices."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"label fraction must be in (0, 1], got {fraction}")
    n_labeled = int(np.floor(n_train * fraction))
    if n_labeled < 1:
        raise ValueError(f"fraction {fraction} keeps no labeled image of {n_train}")
    order = np.random.default_rng((seed, 0xB0D)).permutation(n_train)
    return DatasetSplit(
        labeled=sorted(int(i) for i in order[:n_labeled]),
        unlabeled=sorted(int(i) for i in order[n_labeled:]),
    )


# -- PPM / PGM I/O ---------------------------------------------------------------


def _write_pnm(path: Path, magic: bytes, arr_hw: np.ndarray) -> None:
    h, w = arr_hw.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    path.write_bytes(header + arr_hw.astype(np.uint8).tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """image: uint8 (3,H,W) -> binary P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"write_ppm expects (3,H,W), got {image.shape}")
    _write_pnm(Path(path), b"P6", image.transpose(1, 2, 0))


def write_pgm(path, labels: np.ndarray) -> None:
    """labels: uint8 (H,W) -> binary P5."""
    if labels.ndim != 2:
        raise DataError(f"write_pgm expects (H,W), got {labels.shape}")
    _write_pnm(Path(path), b"P5", labels)


def _read_pnm(path) -> Tuple[bytes, int, int, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 2 or raw[:2] not in (b"P5", b"P6"):
        raise PnmParseError(f"{path}: not a binary PGM/PPM file", 0)
    magic = raw[:2]
    pos = 2
    fields: List[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PnmParseError(f"{path}: malformed header token", pos)
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise PnmParseError(f"{path}: missing whitespace after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise PnmParseError(f"{path}: unsupported maxval {maxval}", pos)
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = raw[pos : pos + need]
    if len(payload) != need:
        raise PnmParseError(
            f"{path}: truncated payload, expected {need} bytes got {len(payload)}",
            pos + len(payload),
        )
    data = np.frombuffer(payload, dtype=np.uint8)
    return magic, w, h, data


def read_ppm(path) -> np.ndarray:
    magic, w, h, data = _read_pnm(path)
    if magic != b"P6":
        raise PnmParseError(f"{path}: expected P6", 0)
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    magic, w, h, data = _read_pnm(path)
    if magic != b"P5":
        raise PnmParseError(f"{path}: expected P5", 0)
    return data.reshape(h, w).copy()


# -- dataset directory -------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # uint8 (N,3,H,W)
    labels: np.ndarray  # uint8 (N,H,W)
    train_indices: List[int]
    val_indices: List[int]
    num_classes: int
    size: int
    seed: int

    @property
    def n_train(self) -> int:
        return len(self.train_indices)


def generate_dataset(
    out_dir,
    n_train: int = 320,
    n_val: int = 64,
    scene: SceneConfig | None = None,
    force: bool = False,
) -> Path:
    out = Path(out_dir)
    scene = scene or SceneConfig()
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use force)")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(n_train + n_val):
        img, lab = generate_scene(scene, i)
        image_rel = f"images/{i:04d}.ppm"
        label_rel = f"labels/{i:04d}.pgm"
        write_ppm(out / image_rel, img)
        write_pgm(out / label_rel, lab)
        files.append({"image": image_rel, "label": label_rel})
    manifest = {
        "schema_version": 1,
        "num_classes": scene.num_classes,
        "size": scene.size,
        "seed": scene.seed,
        "n_train": n_train,
        "n_val": n_val,
        "scene": asdict(scene),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: invalid JSON ({e})") from e
    for key in ("num_classes", "size", "n_train", "n_val", "files", "seed"):
        if key not in manifest:
            raise DataError(f"{mpath}: missing key {key!r}")
    num_classes = int(manifest["num_classes"])
    size = int(manifest["size"])
    files = manifest["files"]
    if len(files) != manifest["n_train"] + manifest["n_val"]:
        raise DataError(
            f"{mpath}: file list length {len(files)} != n_train+n_val"
        )
    images = np.empty((len(files), 3, size, size), dtype=np.uint8)
    labels = np.empty((len(files), size, size), dtype=np.uint8)
    for i, entry in enumerate(files):
        img = read_ppm(root / entry["image"])
        lab = read_pgm(root / entry["label"])
        if img.shape != (3, size, size) or lab.shape != (size, size):
            raise DataError(f"{entry['image']}: unexpected shape {img.shape}")
        if int(lab.max()) >= num_classes:
            raise DataError(
                f"{entry['label']}: label {int(lab.max())} >= num_classes "
                f"{num_classes}"
            )
        images[i] = img
        labels[i] = lab
    return Dataset(
        images=images,
        labels=labels,
        train_indices=list(range(manifest["n_train"])),
        val_indices=list(
            range(manifest["n_train"], manifest["n_train"] + manifest["n_val"])
        ),
        num_classes=num_classes,
        size=size,
        seed=int(manifest["seed"]),
    )
