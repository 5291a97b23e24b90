"""Dataset loading, FoV masks, normalization, patching, stitching and CV folds.

Supported layouts (paths relative to the dataset root)::

    DRIVE       images/NN_<split>.tif, 1st_manual/NN_manual1.gif, mask/NN_<split>_mask.gif
                (or the same under training/ and test/ subdirectories)
    CHASE_DB1   Image_NNx.jpg, Image_NNx_1stHO.png, Image_NNx_2ndHO.png   (flat)
    STARE       stare-images/imNNNN.ppm[.gz], labels-ah/imNNNN.ah.ppm[.gz], labels-vk/...

Arrays are stored row-major as ``(height, width[, 3])``; the published
sizes are quoted as width x height.
"""

from __future__ import annotations

import enum
import gzip
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .container import read_container, write_container

log = logging.getLogger(__name__)

PATCH_SIZE = 128
TRAIN_STRIDE = 32
TEST_STRIDE = 3
FOV_THRESHOLD = 0.08
FOV_CLOSING_RADIUS = 5
GT_THRESHOLD = 127


class DatasetError(Exception):
    """Missing files, unexpected layout or wrong image dimensions."""


class FovError(ValueError):
    pass


class DatasetId(str, enum.Enum):
    DRIVE = "DRIVE"
    CHASE_DB1 = "CHASE_DB1"
    STARE = "STARE"


# (width, height) as published
IMAGE_DIMS = {
    DatasetId.DRIVE: (565, 584),
    DatasetId.CHASE_DB1: (999, 960),
    DatasetId.STARE: (700, 605),
}

# (train, test) image counts; DRIVE uses its official split
SPLIT_COUNTS = {
    DatasetId.DRIVE: (20, 20),
    DatasetId.CHASE_DB1: (20, 8),
    DatasetId.STARE: (16, 4),
}


@dataclass
class ImageRecord:
    fundus: np.ndarray
    vessel_gt: np.ndarray
    fov_mask: np.ndarray
    dataset_id: DatasetId
    image_id: str
    fov_generated: bool = False

    def __post_init__(self):
        h, w = self.fundus.shape[:2]
        if self.fundus.ndim != 3 or self.fundus.shape[2] != 3:
            raise DatasetError(f"{self.image_id}: fundus must be RGB (H, W, 3), got {self.fundus.shape}")
        for name in ("vessel_gt", "fov_mask"):
            arr = getattr(self, name)
            if arr.shape != (h, w):
                raise DatasetError(f"{self.image_id}: {name} shape {arr.shape} != fundus {(h, w)}")
            if not np.isin(arr, (0, 1)).all():
                raise DatasetError(f"{self.image_id}: {name} must be binary")

    @property
    def shape(self) -> tuple[int, int]:
        return self.fundus.shape[:2]


def _read_image(path: Path) -> np.ndarray:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            img = Image.open(io.BytesIO(fh.read()))
            img.load()
    else:
        img = Image.open(path)
    # palette images (DRIVE's GIFs) hold indices, not intensities
    if img.mode == "P":
        img = img.convert("RGB")
    elif img.mode == "1":
        img = img.convert("L")
    return np.asarray(img)


def _to_rgb(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return np.ascontiguousarray(arr[..., :3]).astype(np.uint8)


def _to_binary(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    return (arr > GT_THRESHOLD).astype(np.uint8)


def _first_existing(*candidates: Path) -> Path | None:
    for c in candidates:
        if c.exists():
            return c
    return None


def _glob_one(directory: Path, pattern: str) -> Path | None:
    hits = sorted(directory.glob(pattern))
    return hits[0] if hits else None


def _drive_entries(root: Path):
    subdirs = [d for d in (root / "training", root / "test") if d.is_dir()]
    dirs = subdirs or [root]
    entries = []
    for d in dirs:
        img_dir = d / "images"
        if not img_dir.is_dir():
            raise DatasetError(f"DRIVE: missing directory {img_dir}")
        images = sorted(img_dir.glob("*.tif"))
        for img in images:
            stem = img.stem  # e.g. "21_training"
            num = stem.split("_")[0]
            gt = _glob_one(d / "1st_manual", f"{num}_manual1.*")
            if gt is None:
                raise DatasetError(f"DRIVE: no manual annotation for {stem} in {d / '1st_manual'}")
            fov = _glob_one(d / "mask", f"{stem}_mask.*")
            entries.append((stem, img, gt, fov))
    return entries


def _chase_entries(root: Path):
    entries = []
    for img in sorted(root.glob("Image_*.jpg")):
        stem = img.stem
        gt = _first_existing(*(root / f"{stem}_{tag}.png" for tag in ("1stHO", "2ndHO")))
        if gt is None:
            raise DatasetError(f"CHASE_DB1: no manual annotation for {stem}")
        entries.append((stem, img, gt, None))
    return entries


def _stare_entries(root: Path):
    img_dir = _first_existing(root / "stare-images", root / "images")
    if img_dir is None:
        raise DatasetError(f"STARE: missing stare-images/ under {root}")
    entries = []
    for img in sorted(list(img_dir.glob("*.ppm")) + list(img_dir.glob("*.ppm.gz"))):
        stem = img.name.split(".")[0]
        gt = None
        for labels, tag in (("labels-ah", "ah"), ("labels-vk", "vk")):
            gt = gt or _glob_one(root / labels, f"{stem}.{tag}.ppm*")
        if gt is None:
            raise DatasetError(f"STARE: no manual annotation for {stem}")
        entries.append((stem, img, gt, None))
    return entries


_ENTRY_FINDERS = {
    DatasetId.DRIVE: _drive_entries,
    DatasetId.CHASE_DB1: _chase_entries,
    DatasetId.STARE: _stare_entries,
}


def _load_entry(entry, dataset_id: DatasetId) -> ImageRecord:
    image_id, img_path, gt_path, fov_path = entry
    fundus = _to_rgb(_read_image(img_path))
    expected = IMAGE_DIMS[dataset_id]
    got = (fundus.shape[1], fundus.shape[0])
    if got != expected:
        raise DatasetError(f"{dataset_id.value} image {image_id} is {got[0]}x{got[1]}, "
                           f"expected {expected[0]}x{expected[1]} (wrong dataset?)")
    gt = _to_binary(_read_image(gt_path))
    if fov_path is not None:
        fov, generated = _to_binary(_read_image(fov_path)), False
    else:
        fov, generated = generate_fov_mask(fundus), True
    return ImageRecord(fundus, gt, fov, dataset_id, image_id, fov_generated=generated)


def load_dataset(root: str | Path, dataset_id: DatasetId | str, workers: int = 1) -> list[ImageRecord]:
    """Load every image of a dataset root, sorted by image id."""
    dataset_id = DatasetId(dataset_id)
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    entries = _ENTRY_FINDERS[dataset_id](root)
    if not entries:
        raise DatasetError(f"no {dataset_id.value} images found under {root}")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(lambda e: _load_entry(e, dataset_id), entries))
    return sorted(records, key=lambda r: r.image_id)


def split_train_test(records: Sequence[ImageRecord]) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Fixed train/test split.

    DRIVE follows its official ``_training``/``_test`` naming; the other
    datasets take the first images (sorted by id) for training.
    """
    if not records:
        return [], []
    dataset_id = records[0].dataset_id
    if dataset_id is DatasetId.DRIVE:
        train = [r for r in records if r.image_id.endswith("_training")]
        test = [r for r in records if r.image_id.endswith("_test")]
        return train, test
    n_train, _ = SPLIT_COUNTS[dataset_id]
    ordered = sorted(records, key=lambda r: r.image_id)
    return ordered[:n_train], ordered[n_train:]


def generate_fov_mask(fundus: np.ndarray, threshold: float = FOV_THRESHOLD,
                      closing_radius: int = FOV_CLOSING_RADIUS) -> np.ndarray:
    """Field-of-view mask: largest bright connected region after closing and hole filling."""
    rgb = fundus.astype(np.float64) / 255.0
    luminance = rgb @ np.array([0.2125, 0.7154, 0.0721])
    bright = luminance > threshold
    if not bright.any():
        raise FovError("no field of view found: image is uniformly dark")
    r = closing_radius
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = (xx ** 2 + yy ** 2) <= r ** 2
    padded = np.pad(bright, r, mode="edge")
    closed = ndimage.binary_closing(padded, structure=disk)[r:-r, r:-r] if r else bright
    filled = ndimage.binary_fill_holes(closed)
    labels, n = ndimage.label(filled)
    if n == 0:
        raise FovError("no field of view found after morphology")
    sizes = ndimage.sum_labels(filled, labels, index=np.arange(1, n + 1))
    return (labels == 1 + int(np.argmax(sizes))).astype(np.uint8)


def normalize(image: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1] via ``v / 127.5 - 1``."""
    return (np.asarray(image, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def denormalize(t: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(t, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    source_shape: tuple[int, int]
    origins: tuple[tuple[int, int], ...]

    @property
    def n_rows(self) -> int:
        return len({r for r, _ in self.origins})

    @property
    def n_cols(self) -> int:
        return len({c for _, c in self.origins})

    def __len__(self):
        return len(self.origins)

    @property
    def covered_shape(self) -> tuple[int, int]:
        last_r, last_c = self.origins[-1]
        return last_r + self.patch_size, last_c + self.patch_size


def patches_per_axis(dim: int, patch_size: int = PATCH_SIZE, stride: int = TRAIN_STRIDE) -> int:
    if dim < patch_size:
        raise ValueError(f"dimension {dim} smaller than patch size {patch_size}")
    return (dim - patch_size) // stride + 1


def make_grid(height: int, width: int, patch_size: int = PATCH_SIZE, stride: int = TRAIN_STRIDE) -> PatchGrid:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if height < patch_size or width < patch_size:
        raise ValueError(f"image {height}x{width} smaller than patch {patch_size}x{patch_size}")
    rows = range(0, (patches_per_axis(height, patch_size, stride)) * stride, stride)
    cols = range(0, (patches_per_axis(width, patch_size, stride)) * stride, stride)
    return PatchGrid(patch_size, stride, (height, width), tuple((r, c) for r in rows for c in cols))


def cut_patches(array: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Stack the grid's patches from ``array`` (H, W[, C]) into (N, p, p[, C])."""
    if array.shape[:2] != grid.source_shape:
        raise ValueError(f"array shape {array.shape[:2]} does not match grid source {grid.source_shape}")
    p = grid.patch_size
    out = np.empty((len(grid), p, p) + array.shape[2:], dtype=array.dtype)
    for i, (r, c) in enumerate(grid.origins):
        out[i] = array[r:r + p, c:c + p]
    return out


@dataclass
class PatchSet:
    fundus: np.ndarray          # (N, p, p, 3) uint8
    vessel: np.ndarray          # (N, p, p) uint8 in {0, 1}
    fov: np.ndarray             # (N, p, p) uint8 in {0, 1}
    image_index: np.ndarray     # (N,) index into image_ids
    image_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.fundus)

    def subset(self, image_ids: Sequence[str]) -> "PatchSet":
        wanted = set(image_ids)
        missing = wanted - set(self.image_ids)
        if missing:
            raise DatasetError(f"image ids not present in patch set: {sorted(missing)}")
        keep_ids = [i for i, name in enumerate(self.image_ids) if name in wanted]
        mask = np.isin(self.image_index, keep_ids)
        return PatchSet(self.fundus[mask], self.vessel[mask], self.fov[mask],
                        self.image_index[mask], list(self.image_ids))

    @classmethod
    def concatenate(cls, sets: Sequence["PatchSet"]) -> "PatchSet":
        ids, index = [], []
        for s in sets:
            offset = len(ids)
            ids.extend(s.image_ids)
            index.append(s.image_index + offset)
        return cls(np.concatenate([s.fundus for s in sets]), np.concatenate([s.vessel for s in sets]),
                   np.concatenate([s.fov for s in sets]), np.concatenate(index).astype(np.int32), ids)


def extract_patches(record: ImageRecord, patch_size: int = PATCH_SIZE,
                    stride: int = TRAIN_STRIDE) -> tuple[PatchSet, PatchGrid]:
    h, w = record.shape
    grid = make_grid(h, w, patch_size, stride)
    ps = PatchSet(cut_patches(record.fundus, grid), cut_patches(record.vessel_gt, grid),
                  cut_patches(record.fov_mask, grid), np.zeros(len(grid), dtype=np.int32),
                  [record.image_id])
    return ps, grid


def extract_dataset_patches(records: Sequence[ImageRecord], patch_size: int = PATCH_SIZE,
                            stride: int = TRAIN_STRIDE, workers: int = 1) -> PatchSet:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sets = list(pool.map(lambda r: extract_patches(r, patch_size, stride)[0], records))
    return PatchSet.concatenate(sets)


class Stitched(NamedTuple):
    confidence: np.ndarray
    covered: np.ndarray     # bool map, False where values were mirror-filled


def stitch_predictions(patch_preds: np.ndarray, grid: PatchGrid) -> Stitched:
    """Average overlapping patch predictions into a full-size map.

    Pixels beyond the last patch (right/bottom margins narrower than a stride)
    are filled by mirroring the covered region and marked in ``covered``.
    """
    patch_preds = np.asarray(patch_preds)
    if patch_preds.ndim == 4 and patch_preds.shape[1] == 1:
        patch_preds = patch_preds[:, 0]
    p = grid.patch_size
    if patch_preds.shape != (len(grid), p, p):
        raise ValueError(f"expected {len(grid)} predictions of {p}x{p}, got array {patch_preds.shape}")
    ch, cw = grid.covered_shape
    acc = np.zeros((ch, cw), dtype=np.float64)
    count = np.zeros((ch, cw), dtype=np.int32)
    for pred, (r, c) in zip(patch_preds, grid.origins):
        acc[r:r + p, c:c + p] += pred
        count[r:r + p, c:c + p] += 1
    mean = acc / count
    h, w = grid.source_shape
    full = np.pad(mean, ((0, h - ch), (0, w - cw)), mode="symmetric")
    covered = np.zeros((h, w), dtype=bool)
    covered[:ch, :cw] = True
    return Stitched(full, covered)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"fold_index": self.fold_index, "train_ids": list(self.train_ids), "val_ids": list(self.val_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSplit":
        return cls(int(d["fold_index"]), tuple(d["train_ids"]), tuple(d["val_ids"]))


def make_folds(records_or_ids: Sequence, n_folds: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Deterministic shuffled k-fold partition of the given images."""
    ids = sorted(r.image_id if isinstance(r, ImageRecord) else str(r) for r in records_or_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids")
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} images for {n_folds}-fold CV, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, n_folds)
    folds = []
    for k, chunk in enumerate(chunks):
        val = {ids[i] for i in chunk}
        folds.append(FoldSplit(k, tuple(i for i in ids if i not in val), tuple(sorted(val))))
    return folds


def save_folds(path: str | Path, folds: Sequence[FoldSplit], seed: int):
    Path(path).write_text(json.dumps({"seed": seed, "folds": [f.to_dict() for f in folds]}, indent=2) + "\n")


def load_folds(path: str | Path) -> list[FoldSplit]:
    return [FoldSplit.from_dict(d) for d in json.loads(Path(path).read_text())["folds"]]


def save_patch_cache(path: str | Path, patches: PatchSet, meta: dict | None = None) -> Path:
    arrays = {"fundus": patches.fundus, "vessel": patches.vessel, "fov": patches.fov,
              "image_index": patches.image_index.astype(np.int32)}
    return write_container(path, arrays, {"kind": "patch_cache", "image_ids": list(patches.image_ids),
                                          **(meta or {})})


def load_patch_cache(path: str | Path) -> tuple[PatchSet, dict]:
    arrays, meta = read_container(path)
    if meta.get("kind") != "patch_cache":
        raise DatasetError(f"{path} is not a patch cache")
    ps = PatchSet(arrays["fundus"], arrays["vessel"], arrays["fov"], arrays["image_index"], list(meta["image_ids"]))
    return ps, meta


def patches_to_tensors(patches: PatchSet):
    """Normalized ``(x, y)`` float32 torch tensors of shape (N, 3, p, p) and (N, 1, p, p)."""
    import torch

    x = torch.from_numpy(normalize(patches.fundus)).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(normalize(patches.vessel * np.uint8(255)))[:, None]
    return x, y
