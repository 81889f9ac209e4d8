"""Manifests, synthetic datasets, augmentations, evaluation splits and embedding files."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

EMBEDDING_MAGIC = b"STIRE01\0"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 1, np.dtype("float64"): 2}

SPLITS = ("train", "test")
ROLES = ("query", "gallery", "both")
PROTOCOLS = ("fixed", "leave_one_out")


class DataError(ValueError):
    """Malformed manifest, split or embedding file."""


@dataclass(frozen=True)
class Record:
    item_id: str
    label_id: int
    split: str
    role: str
    source: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"{self.item_id}: split must be one of {SPLITS}")
        if self.role not in ROLES:
            raise DataError(f"{self.item_id}: role must be one of {ROLES}")


@dataclass
class Manifest:
    records: list[Record]

    def __post_init__(self):
        ids = [r.item_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("manifest item_ids are not unique")

    def __len__(self) -> int:
        return len(self.records)

    def select(self, split: str | None = None, roles: Iterable[str] | None = None) -> list[Record]:
        roles = set(roles) if roles is not None else None
        return [r for r in self.records if (split is None or r.split == split) and (roles is None or r.role in roles)]

    def by_id(self) -> dict[str, Record]:
        return {r.item_id: r for r in self.records}

    def save(self, path) -> None:
        lines = [json.dumps(asdict(r), sort_keys=True, ensure_ascii=False) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Manifest:
        records = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                records.append(
                    Record(str(raw["item_id"]), int(raw["label_id"]), raw["split"], raw["role"], str(raw["source"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest record") from exc
        return cls(records)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 16
    items_per_class: int = 12
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    noise_sigma: float = 0.1
    flip: bool = True
    crop_scale: tuple[float, float] | None = (0.6, 1.0)
    test_fraction: float = 0.5
    holdout: str = "items"  # "items": every class split across train/test; "classes": disjoint classes
    family_size: int = 1  # classes per family; siblings share a texture and differ only in the disc
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "items_per_class", "image_h", "image_w", "channels"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be nonnegative")
        if self.crop_scale is not None:
            lo, hi = self.crop_scale
            if not 0 < lo <= hi <= 1:
                raise DataError("crop_scale must lie within (0, 1]")
        if not 0 <= self.test_fraction <= 1:
            raise DataError("test_fraction must lie in [0, 1]")
        if self.holdout not in ("items", "classes"):
            raise DataError("holdout must be 'items' or 'classes'")
        if self.family_size < 1:
            raise DataError("family_size must be >= 1")


# -- augmentations ---------------------------------------------------------------------
def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def resized_crop(image: np.ndarray, top: float, left: float, height: float, width: float) -> np.ndarray:
    """Bilinear resample of the window back to the full image size."""
    h, w = image.shape[:2]
    ys = top + (np.arange(h) + 0.5) * height / h - 0.5
    xs = left + (np.arange(w) + 0.5) * width / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.map_coordinates(image[..., c], [yy, xx], order=1, mode="nearest")
    return out


def random_resized_crop(
    image: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float],
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> np.ndarray:
    h, w = image.shape[:2]
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = math.sqrt(target * aspect)
        ch = math.sqrt(target / aspect)
        if cw <= w and ch <= h:
            top = rng.uniform(0, h - ch)
            left = rng.uniform(0, w - cw)
            return resized_crop(image, top, left, ch, cw)
    side = min(h, w) * math.sqrt(scale[1])
    return resized_crop(image, (h - side) / 2, (w - side) / 2, side, side)


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    flip: bool = True,
    crop_scale: tuple[float, float] | None = (0.2, 1.0),
) -> np.ndarray:
    if crop_scale is not None:
        image = random_resized_crop(image, rng, crop_scale)
    if flip and rng.random() < 0.5:
        image = hflip(image)
    return image


def augment_batch(images: np.ndarray, rng: np.random.Generator, flip: bool, crop_scale) -> np.ndarray:
    if not flip and crop_scale is None:
        return images
    return np.stack([augment(img, rng, flip, crop_scale) for img in images])


# -- synthetic data ------------------------------------------------------------------------
def _texture(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, c = spec.image_h, spec.image_w, spec.channels
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    img = np.zeros((h, w, c))
    # oriented sinusoid texture with a shared palette so colour means carry little class signal
    for _ in range(2):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        colour = rng.normal(0, 1, c)
        img += 0.25 * wave[..., None] * colour / np.linalg.norm(colour)
    return img


def _disc(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, c = spec.image_h, spec.image_w, spec.channels
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    cy, cx = rng.uniform(0.25, 0.75, size=2)
    radius = rng.uniform(0.12, 0.22)
    disc = ((yy - cy) ** 2 + (xx - cx) ** 2) < radius**2
    shade = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.5)
    return shade * disc[..., None] * np.ones(c)


def _class_patterns(spec: SyntheticSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """One clean image per class: a family texture plus a class-unique disc."""
    patterns = []
    texture = None
    for label in range(spec.num_classes):
        if label % spec.family_size == 0:
            texture = _texture(spec, rng)
        patterns.append(0.5 + texture + _disc(spec, rng))
    return patterns


def generate_synthetic(spec: SyntheticSpec) -> tuple[Manifest, np.ndarray]:
    """Build a labelled toy dataset; images are ``float32 [N, h, w, c]``."""
    rng = np.random.default_rng(spec.seed)
    patterns = _class_patterns(spec, rng)
    images = []
    records = []
    n_test_items = int(round(spec.items_per_class * spec.test_fraction))
    test_classes = set()
    if spec.holdout == "classes":
        n_test_classes = int(round(spec.num_classes * spec.test_fraction))
        test_classes = set(range(spec.num_classes - n_test_classes, spec.num_classes))
    for label, base in enumerate(patterns):
        for j in range(spec.items_per_class):
            img = augment(base, rng, spec.flip, spec.crop_scale)
            if spec.noise_sigma > 0:
                img = img + rng.normal(0, spec.noise_sigma, img.shape)
            idx = len(images)
            images.append(img.astype(np.float32))
            if spec.holdout == "classes":
                split = "test" if label in test_classes else "train"
            else:
                split = "test" if j >= spec.items_per_class - n_test_items else "train"
            records.append(Record(f"{idx:06d}", label, split, "both", f"images.npy#{idx}"))
    return Manifest(records), np.stack(images)


def load_images(manifest: Manifest, root) -> dict[str, np.ndarray]:
    """Resolve ``file.npy#row`` (stacked) or ``file.npy`` (single image) sources under ``root``."""
    root = Path(root)
    cache: dict[str, np.ndarray] = {}
    out = {}
    for r in manifest.records:
        path, _, row = r.source.partition("#")
        if path not in cache:
            full = root / path
            if not full.exists():
                raise DataError(f"image payload {full} not found")
            cache[path] = np.load(full, mmap_mode="r")
        arr = cache[path][int(row)] if row else cache[path]
        out[r.item_id] = np.asarray(arr, dtype=np.float32)
    return out


# -- evaluation splits -----------------------------------------------------------------------
@dataclass
class Split:
    train: list[Record]
    query: list[Record]
    gallery: list[Record]
    protocol: str
    manifest: Manifest = field(repr=False, default=None)


def split_protocol(manifest: Manifest, protocol: str, rng: np.random.Generator, query_fraction: float = 1 / 3) -> Split:
    """Assign test items to query/gallery (``fixed``) or use all as both (``leave_one_out``).

    Under ``fixed`` every test class gets at least one query and one gallery item,
    so every query has a relevant gallery item.
    """
    if protocol not in PROTOCOLS:
        raise DataError(f"protocol must be one of {PROTOCOLS}")
    train = manifest.select("train")
    test = manifest.select("test")
    if protocol == "leave_one_out":
        updated = [replace(r, role="both") if r.split == "test" else r for r in manifest.records]
        test = [replace(r, role="both") for r in test]
        return Split(train, test, test, protocol, Manifest(updated))

    by_label: dict[int, list[Record]] = {}
    for r in test:
        by_label.setdefault(r.label_id, []).append(r)
    roles: dict[str, str] = {}
    for label in sorted(by_label):
        members = by_label[label]
        if len(members) < 2:
            raise DataError(f"test class {label} has a single item; cannot form query and gallery")
        n_query = min(len(members) - 1, max(1, int(round(len(members) * query_fraction))))
        order = rng.permutation(len(members))
        for rank, k in enumerate(order):
            roles[members[k].item_id] = "query" if rank < n_query else "gallery"
    updated = [replace(r, role=roles[r.item_id]) if r.item_id in roles else r for r in manifest.records]
    new = Manifest(updated)
    query = [r for r in new.records if r.split == "test" and r.role == "query"]
    gallery = [r for r in new.records if r.split == "test" and r.role == "gallery"]
    return Split(train, query, gallery, protocol, new)


def split_from_manifest(manifest: Manifest) -> Split:
    """Recover a split from roles already stored in a manifest."""
    test = manifest.select("test")
    train = manifest.select("train")
    if test and all(r.role == "both" for r in test):
        return Split(train, test, test, "leave_one_out", manifest)
    query = [r for r in test if r.role == "query"]
    gallery = [r for r in test if r.role == "gallery"]
    if not query or not gallery or len(query) + len(gallery) != len(test):
        raise DataError("test records must all be 'both' or partition into query and gallery")
    return Split(train, query, gallery, "fixed", manifest)


# -- embedding files ---------------------------------------------------------------------------
def write_embeddings(path, ids: Sequence[str], matrix: np.ndarray) -> None:
    """Header (magic, dim, count, dtype code) + length-prefixed UTF-8 ids + row-major LE floats."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DataError("embedding matrix must be [count, dim] aligned with ids")
    code = _CODE_FOR.get(matrix.dtype)
    if code is None:
        raise DataError(f"unsupported embedding dtype {matrix.dtype}")
    count, dim = matrix.shape
    parts = [EMBEDDING_MAGIC, struct.pack("<III", dim, count, code)]
    for item_id in ids:
        raw = item_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(np.ascontiguousarray(matrix, dtype=_DTYPE_CODES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    buf = Path(path).read_bytes()
    header = len(EMBEDDING_MAGIC) + 12
    if len(buf) < header:
        raise DataError(f"{path}: truncated header")
    if buf[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise DataError(f"{path}: bad magic")
    dim, count, code = struct.unpack("<III", buf[len(EMBEDDING_MAGIC) : header])
    if code not in _DTYPE_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    pos = header
    ids = []
    for _ in range(count):
        if pos + 4 > len(buf):
            raise DataError(f"{path}: truncated id table")
        (n,) = struct.unpack("<I", buf[pos : pos + 4])
        pos += 4
        if pos + n > len(buf):
            raise DataError(f"{path}: truncated id table")
        ids.append(buf[pos : pos + n].decode("utf-8"))
        pos += n
    dtype = _DTYPE_CODES[code]
    expected = count * dim * dtype.itemsize
    if len(buf) - pos != expected:
        raise DataError(f"{path}: expected {expected} payload bytes for {count}x{dim}, found {len(buf) - pos}")
    matrix = np.frombuffer(buf, dtype=dtype, offset=pos, count=count * dim).reshape(count, dim).copy()
    return ids, matrix.astype(dtype.newbyteorder("="))


# -- real dataset layouts -------------------------------------------------------------------------
def inshop_manifest(root) -> Manifest:
    """Manifest from the In-Shop ``list_eval_partition.txt`` layout.

    Expects ``<root>/list_eval_partition.txt`` (two header lines, then
    ``image_name item_id evaluation_status``) and images pre-decoded to
    ``<root>/<image_name>.npy`` as ``[h, w, c]`` float arrays.
    """
    path = Path(root) / "list_eval_partition.txt"
    lines = path.read_text(encoding="utf-8").splitlines()[2:]
    item_labels: dict[str, int] = {}
    records = []
    for line in lines:
        if not line.strip():
            continue
        name, item, status = line.split()
        label = item_labels.setdefault(item, len(item_labels))
        split, role = ("train", "both") if status == "train" else ("test", status)
        records.append(Record(name, label, split, role, name + ".npy"))
    return Manifest(records)


def sop_manifest(root) -> Manifest:
    """Manifest from SOP ``Ebay_train.txt`` / ``Ebay_test.txt`` (leave-one-out test set).

    Rows are ``image_id class_id super_class_id path`` after one header line;
    images are expected pre-decoded at ``<root>/<path>.npy``.
    """
    records = []
    for split, fname in (("train", "Ebay_train.txt"), ("test", "Ebay_test.txt")):
        for line in (Path(root) / fname).read_text(encoding="utf-8").splitlines()[1:]:
            if not line.strip():
                continue
            image_id, class_id, _super, rel = line.split()
            records.append(Record(f"{split}_{image_id}", int(class_id), split, "both", rel + ".npy"))
    return Manifest(records)
