"""Synthetic brain-like phantoms and the on-disk dataset format.

Phantoms are layered ellipses composited back to front: scalp/skull ring,
a CSF rim, grey matter, white matter, a few internal structures (ventricles
and grey-matter islands) and finally hyperintense lesions inside the white
matter.  Each pixel's label is the tissue of the topmost ellipse covering
its center.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# Foreground tissues in label order; a C-class phantom keeps the last C-1.
TISSUES = ("csf", "gray_matter", "white_matter", "lesion")
INTENSITY = {"skull": 0.85, "csf": 0.18, "gray_matter": 0.45, "white_matter": 0.65, "lesion": 1.0}

MAGIC = b"MTMR1"
DTYPE_CODES = {np.dtype("<f4"): b"f", np.dtype("u1"): b"u"}
SPLITS = ("train", "val", "test")
NORMALIZATIONS = ("min-max", "z-score")


class InvalidConfigError(ValueError):
    pass


class CorruptFileError(ValueError):
    pass


@dataclass
class PhantomConfig:
    height: int = 64
    width: int = 64
    n_ellipses: int = 4
    lesion_count: int = 2
    n_classes: int = 2
    supersample: int = 4
    lesion_radius: tuple[float, float] = (0.06, 0.14)

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise InvalidConfigError(f"H and W must be >= 16, got {self.height}x{self.width}")
        if not 2 <= self.n_classes <= len(TISSUES) + 1:
            raise InvalidConfigError(f"n_classes must be in [2, {len(TISSUES) + 1}], got {self.n_classes}")
        if self.n_ellipses < 0 or self.lesion_count < 0 or self.supersample < 1:
            raise InvalidConfigError("n_ellipses, lesion_count must be >= 0 and supersample >= 1")

    def class_names(self) -> list[str]:
        return ["background", *TISSUES[len(TISSUES) - (self.n_classes - 1):]]


@dataclass
class Phantom:
    image: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Phantom):
            return NotImplemented
        return (np.array_equal(self.image, other.image) and np.array_equal(self.labels, other.labels)
                and self.class_names == other.class_names and self.seed == other.seed)


@dataclass
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    tissue: str
    value: float

    def coverage(self, ys: np.ndarray, xs: np.ndarray, ss: int) -> np.ndarray:
        """Fraction of each pixel inside the ellipse, estimated on an ss x ss sub-grid."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        dx, dy = xs - self.cx, ys - self.cy
        u = (c * dx + s * dy) / self.a
        v = (-s * dx + c * dy) / self.b
        inside = (u * u + v * v) <= 1.0
        h, w = inside.shape[0] // ss, inside.shape[1] // ss
        return inside.reshape(h, ss, w, ss).mean(axis=(1, 3))

    def contains(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        dx, dy = x - self.cx, y - self.cy
        u = (c * dx + s * dy) / self.a
        v = (-s * dx + c * dy) / self.b
        return u * u + v * v <= 1.0


def _layout(cfg: PhantomConfig, rng: np.random.Generator) -> list[Ellipse]:
    """Random ellipse stack in normalised coordinates ([-1, 1] on both axes)."""
    u = rng.uniform
    tilt = u(-0.2, 0.2)
    head_a, head_b = u(0.78, 0.9), u(0.85, 0.95)
    cx, cy = u(-0.04, 0.04), u(-0.04, 0.04)
    ells = [
        Ellipse(cx, cy, head_a, head_b, tilt, "skull", INTENSITY["skull"]),
        Ellipse(cx, cy, head_a - 0.07, head_b - 0.07, tilt, "csf", INTENSITY["csf"]),
        Ellipse(cx, cy, head_a - 0.11, head_b - 0.11, tilt, "gray_matter", INTENSITY["gray_matter"]),
    ]
    wm_a, wm_b = head_a - u(0.2, 0.26), head_b - u(0.2, 0.26)
    ells.append(Ellipse(cx, cy, wm_a, wm_b, tilt, "white_matter", INTENSITY["white_matter"]))
    for i in range(cfg.n_ellipses):
        tissue = "csf" if i % 2 == 0 else "gray_matter"
        r = u(0.0, 0.45)
        phi = u(0, 2 * np.pi)
        ells.append(Ellipse(
            cx + r * wm_a * np.cos(phi), cy + r * wm_b * np.sin(phi),
            u(0.04, 0.12), u(0.1, 0.25), u(-np.pi, np.pi),
            tissue, INTENSITY[tissue] * u(0.9, 1.1),
        ))
    lo, hi = cfg.lesion_radius
    for _ in range(cfg.lesion_count):
        r = u(0.0, 0.6)
        phi = u(0, 2 * np.pi)
        ells.append(Ellipse(
            cx + r * wm_a * np.cos(phi), cy + r * wm_b * np.sin(phi),
            u(lo, hi), u(lo, hi), u(-np.pi, np.pi),
            "lesion", INTENSITY["lesion"] * u(0.9, 1.0),
        ))
    return ells


def generate_phantom(cfg: PhantomConfig, seed: int) -> Phantom:
    """Render a deterministic phantom for ``(cfg, seed)``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    ells = _layout(cfg, rng)
    h, w, ss = cfg.height, cfg.width, cfg.supersample
    # sub-pixel sample centres and pixel centres in normalised coordinates
    sy = (np.arange(h * ss) + 0.5) / (h * ss) * 2 - 1
    sx = (np.arange(w * ss) + 0.5) / (w * ss) * 2 - 1
    SY, SX = np.meshgrid(sy, sx, indexing="ij")
    py = (np.arange(h) + 0.5) / h * 2 - 1
    px = (np.arange(w) + 0.5) / w * 2 - 1
    PY, PX = np.meshgrid(py, px, indexing="ij")

    names = cfg.class_names()
    class_of = {t: names.index(t) if t in names else 0 for t in ("skull", *TISSUES)}
    image = np.zeros((h, w))
    labels = np.zeros((h, w), dtype=np.uint8)
    for e in ells:
        cov = e.coverage(SY, SX, ss)
        image = image * (1 - cov) + e.value * cov
        labels[e.contains(PY, PX)] = class_of[e.tissue]
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Phantom(image, labels, names, int(seed))


# -- on-disk format ---------------------------------------------------------

def write_array(path: Path, arr: np.ndarray) -> None:
    """Write a 2D array as ``MTMR1 | dtype code | H | W | row-major little-endian data``."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        arr = arr.astype("<f4")
    elif arr.dtype != np.uint8:
        arr = arr.astype("u1")
    code = DTYPE_CODES[arr.dtype]
    h, w = arr.shape
    Path(path).write_bytes(MAGIC + code + struct.pack("<II", h, w) + arr.tobytes(order="C"))


def read_array(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CorruptFileError(f"{path}: bad magic")
    dtype = {v: k for k, v in DTYPE_CODES.items()}.get(raw[5:6])
    if dtype is None:
        raise CorruptFileError(f"{path}: unknown dtype code {raw[5:6]!r}")
    h, w = struct.unpack("<II", raw[6:14])
    body = raw[14:]
    if len(body) != h * w * dtype.itemsize:
        raise CorruptFileError(f"{path}: expected {h}x{w} {dtype}, got {len(body)} bytes")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).copy()


@dataclass
class ManifestItem:
    image: str
    label: str
    volume_id: int
    slice_index: int


@dataclass
class DatasetManifest:
    root: str
    split: str = "train"
    items: list[ManifestItem] = field(default_factory=list)
    normalization: str = "min-max"
    class_names: list[str] = field(default_factory=lambda: ["background", "lesion"])

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.normalization not in NORMALIZATIONS:
            raise InvalidConfigError(f"normalization must be one of {NORMALIZATIONS}")
        self.items = [i if isinstance(i, ManifestItem) else ManifestItem(**i) for i in self.items]

    def __len__(self):
        return len(self.items)

    def volumes(self) -> dict[int, list[int]]:
        """Item indices grouped by volume id, slices in ascending order."""
        groups: dict[int, list[int]] = {}
        for idx, it in enumerate(self.items):
            groups.setdefault(it.volume_id, []).append(idx)
        return {v: sorted(ix, key=lambda i: self.items[i].slice_index) for v, ix in sorted(groups.items())}

    @property
    def path(self) -> Path:
        return Path(self.root) / self.split / "manifest.json"

    def save(self, path: Path | None = None) -> Path:
        """Write the manifest; ``root`` is stored relative to the file so datasets can be moved."""
        path = Path(path) if path is not None else self.path
        path.parent.mkdir(parents=True, exist_ok=True)
        d = asdict(self)
        d["root"] = os.path.relpath(os.path.abspath(self.root), os.path.abspath(path.parent))
        path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        d["root"] = os.path.normpath(path.parent / d["root"])
        return cls(**d)


def build_dataset(cfg: PhantomConfig, n_items: int, seed: int, out_root, split: str = "train",
                  slices_per_volume: int = 10, normalization: str = "min-max") -> DatasetManifest:
    """Render ``n_items`` phantoms to ``out_root/split`` and write the manifest.

    Item ``i`` belongs to volume ``i // slices_per_volume``; its phantom seed is
    derived from ``(seed, i)`` so datasets with different sizes share a prefix.
    """
    if n_items < 1:
        raise InvalidConfigError("n_items must be >= 1")
    cfg.validate()
    root = Path(out_root)
    split_dir = root / split
    try:
        split_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {split_dir}: {exc}") from exc
    items = []
    for i in range(n_items):
        vol, sl = divmod(i, slices_per_volume)
        ph = generate_phantom(cfg, item_seed(seed, i))
        vdir = split_dir / f"{vol:04d}"
        vdir.mkdir(exist_ok=True)
        write_array(vdir / f"{sl:03d}.img.npyish", ph.image)
        write_array(vdir / f"{sl:03d}.lbl.npyish", ph.labels)
        items.append(ManifestItem(f"{vol:04d}/{sl:03d}.img.npyish", f"{vol:04d}/{sl:03d}.lbl.npyish", vol, sl))
    manifest = DatasetManifest(str(root), split, items, normalization, cfg.class_names())
    manifest.save()
    return manifest


def item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def normalize(image: np.ndarray, method: str) -> np.ndarray:
    image = image.astype(np.float64)
    if method == "min-max":
        lo, hi = image.min(), image.max()
        if hi == lo:
            return np.zeros_like(image, dtype=np.float32)
        return ((image - lo) / (hi - lo)).astype(np.float32)
    if method == "z-score":
        sd = image.std()
        if sd == 0:
            return np.zeros_like(image, dtype=np.float32)
        return ((image - image.mean()) / sd).astype(np.float32)
    raise InvalidConfigError(f"unknown normalization {method!r}")


def load_sample(manifest: DatasetManifest, index: int) -> tuple[np.ndarray, np.ndarray, int]:
    if not 0 <= index < len(manifest.items):
        raise IndexError(f"index {index} out of range for {len(manifest.items)} items")
    it = manifest.items[index]
    base = Path(manifest.root) / manifest.split
    image = read_array(base / it.image)
    labels = read_array(base / it.label)
    if image.shape != labels.shape:
        raise CorruptFileError(f"item {index}: image {image.shape} vs labels {labels.shape}")
    return normalize(image, manifest.normalization), labels.astype(np.int64), it.volume_id


def dataset_hash(root) -> str:
    """SHA-256 over every file under ``root`` (relative path + bytes), in sorted order."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
