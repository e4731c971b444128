"""Synthetic corpora, subject-level splits, balanced sampling, dataset I/O.

Two generators mirror the causal structure of the experiments:

* the ambiguous set draws every scene from one distribution (a large
  diffuse blob plus a small bright blob on its rim) and lets the class
  decide which structure is the ground truth, so pixels alone cannot
  determine the mask;
* the multi-shape set draws a disk, a square and a triangle into every
  scene and annotates only the shape named by the sample's class (the
  missing-label regime).

A subject is one 2-d image. Splits are keyed by subject id and stratified
per class.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AMBIGUOUS_CLASSES = ("diffuse", "composite", "focal")
MULTIORGAN_CLASSES = ("disk", "square", "triangle")

_TENSOR_MAGIC = b"FSTN"


@dataclass
class Sample:
    subject_id: str
    image: np.ndarray  # [C,H,W], values in [0,1]
    mask: np.ndarray   # [1,H,W], values in {0,1}
    class_id: int


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[str, ...]
    valid: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def subjects(self) -> set[str]:
        return set(self.train) | set(self.valid) | set(self.test)


def _check_size(size) -> tuple[int, int]:
    h, w = int(size[0]), int(size[1])
    if h < 16 or w < 16:
        raise ValueError(f"image size {(h, w)} too small, need at least 16x16")
    return h, w


def _ellipse_mask(h, w, cy, cx, ry, rx) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    return ((yy - cy) ** 2 / ry ** 2 + (xx - cx) ** 2 / rx ** 2) <= 1.0


def _background(rng, h, w) -> np.ndarray:
    return 0.1 + rng.normal(0.0, 0.05, size=(h, w))


# ---------------------------------------------------------------------------
# Ambiguous dataset (class picks the target structure)


def ambiguous_scene(scene_seed, size=(32, 32)):
    """One scene plus the three candidate masks keyed by class.

    The scene holds a large diffuse blob and a small bright nodule sitting
    just off its rim. Class 0 targets the blob, class 2 the nodule, and
    class 1 the spanning region that covers both structures and the gap
    between them. Identical scene seeds give identical images no matter
    which class a caller annotates afterwards.
    """
    h, w = _check_size(size)
    rng = np.random.default_rng(scene_seed)
    scale = min(h, w) / 32.0
    for _ in range(100):
        ry, rx = rng.uniform(4.2, 5.2, size=2) * scale
        cy = rng.uniform(ry + 1, h - ry - 2)
        cx = rng.uniform(rx + 1, w - rx - 2)
        large = _ellipse_mask(h, w, cy, cx, ry, rx)

        # target masses kept within ~3x of each other: with the batch-joint
        # dice loss, classes whose mask mass is marginal can collapse to
        # empty predictions early and never recover
        r_small = rng.uniform(3.4, 4.0) * scale
        gap = rng.uniform(2.0, 4.0) * scale
        theta = rng.uniform(0.0, 2.0 * np.pi)
        # nodule center sits gap + r_small beyond the blob rim, radially
        by, bx = cy + ry * np.sin(theta), cx + rx * np.cos(theta)
        norm = np.hypot(by - cy, bx - cx)
        uy, ux = (by - cy) / norm, (bx - cx) / norm
        sy, sx = by + (gap + r_small) * uy, bx + (gap + r_small) * ux
        if not (r_small + 1 <= sy <= h - r_small - 2 and r_small + 1 <= sx <= w - r_small - 2):
            continue
        small = _ellipse_mask(h, w, sy, sx, r_small, r_small)
        if large.sum() < 4 or small.sum() < 4 or (large & small).any():
            continue
        if small.sum() >= 0.8 * large.sum():
            continue

        # class-1 target: swept interpolation between the two ellipses,
        # a connected region spanning blob, gap and nodule
        span = np.zeros((h, w), dtype=bool)
        for t in np.linspace(0.0, 1.0, 33):
            span |= _ellipse_mask(
                h, w,
                (1 - t) * cy + t * sy,
                (1 - t) * cx + t * sx,
                (1 - t) * ry + t * r_small,
                (1 - t) * rx + t * r_small,
            )

        diffuse_val = rng.uniform(0.3, 0.5)
        bright_val = rng.uniform(0.8, 1.0)
        image = _background(rng, h, w)
        image[large] = diffuse_val + rng.normal(0.0, 0.05, size=int(large.sum()))
        image[small] = bright_val + rng.normal(0.0, 0.05, size=int(small.sum()))
        image = np.clip(image, 0.0, 1.0)
        masks = {0: large, 1: span, 2: small}
        return image, masks
    raise RuntimeError(f"could not draw a valid ambiguous scene for seed {scene_seed}")


def ambiguous_sample(scene_seed, class_id: int, size=(32, 32), subject_id: str | None = None) -> Sample:
    if not 0 <= class_id < len(AMBIGUOUS_CLASSES):
        raise ValueError(f"class_id {class_id} outside [0, {len(AMBIGUOUS_CLASSES)})")
    image, masks = ambiguous_scene(scene_seed, size)
    sid = subject_id if subject_id is not None else f"amb{class_id}x"
    return Sample(sid, image[None].astype(np.float64), masks[class_id][None].astype(np.float64), class_id)


def gen_ambiguous_dataset(n_subjects_per_class: int, size=(32, 32), seed: int = 0) -> list[Sample]:
    if n_subjects_per_class < 1:
        raise ValueError("need at least one subject per class")
    _check_size(size)
    root = np.random.SeedSequence(seed)
    samples = []
    for class_id in range(len(AMBIGUOUS_CLASSES)):
        for j, child in enumerate(root.spawn(n_subjects_per_class)):
            sid = f"{AMBIGUOUS_CLASSES[class_id]}-{j:04d}"
            samples.append(ambiguous_sample(child, class_id, size, subject_id=sid))
    return samples


# ---------------------------------------------------------------------------
# Multi-shape dataset (one annotated shape per sample)


def _disk(h, w, rng, scale):
    r = rng.uniform(3.0, 5.0) * scale
    cy = rng.uniform(r + 1, h - r - 2)
    cx = rng.uniform(r + 1, w - r - 2)
    return _ellipse_mask(h, w, cy, cx, r, r)


def _square(h, w, rng, scale):
    half = rng.uniform(2.5, 4.5) * scale
    cy = rng.uniform(half + 1, h - half - 2)
    cx = rng.uniform(half + 1, w - half - 2)
    yy, xx = np.ogrid[:h, :w]
    return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)


def _triangle(h, w, rng, scale):
    half = rng.uniform(3.0, 5.0) * scale
    height = 1.7 * half
    cy = rng.uniform(height / 2 + 1, h - height / 2 - 2)
    cx = rng.uniform(half + 1, w - half - 2)
    yy, xx = np.ogrid[:h, :w]
    t = (yy - (cy - height / 2)) / height  # 0 at apex, 1 at base
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= half * t)


_SHAPE_DRAWERS = (_disk, _square, _triangle)


def multiorgan_scene(scene_seed, size=(32, 32)):
    """One scene with all three shapes drawn disjointly over noise.

    Returns (image[H,W], {class_id: mask[H,W]}); raises after 100 rejected
    placements.
    """
    h, w = _check_size(size)
    rng = np.random.default_rng(scene_seed)
    scale = min(h, w) / 32.0
    for _ in range(100):
        masks = [drawer(h, w, rng, scale) for drawer in _SHAPE_DRAWERS]
        if any(m.sum() < 4 for m in masks):
            continue
        if (masks[0] & masks[1]).any() or (masks[0] & masks[2]).any() or (masks[1] & masks[2]).any():
            continue
        image = _background(rng, h, w)
        for m in masks:
            level = rng.uniform(0.35, 0.95)
            image[m] = level + rng.normal(0.0, 0.05, size=int(m.sum()))
        image = np.clip(image, 0.0, 1.0)
        return image, {i: m for i, m in enumerate(masks)}
    raise RuntimeError(f"could not place disjoint shapes within 100 attempts for seed {scene_seed}")


def multiorgan_sample(scene_seed, class_id: int, size=(32, 32), subject_id: str | None = None) -> Sample:
    if not 0 <= class_id < len(MULTIORGAN_CLASSES):
        raise ValueError(f"class_id {class_id} outside [0, {len(MULTIORGAN_CLASSES)})")
    image, masks = multiorgan_scene(scene_seed, size)
    sid = subject_id if subject_id is not None else f"org{class_id}x"
    return Sample(sid, image[None].astype(np.float64), masks[class_id][None].astype(np.float64), class_id)


def gen_multiorgan_dataset(n_per_class: dict[int, int], size=(32, 32), seed: int = 0) -> list[Sample]:
    if not n_per_class:
        raise ValueError("n_per_class must name at least one class")
    for cid, count in n_per_class.items():
        if not 0 <= int(cid) < len(MULTIORGAN_CLASSES):
            raise ValueError(f"unknown class id {cid}")
        if count < 1:
            raise ValueError(f"count for class {cid} must be >= 1, got {count}")
    _check_size(size)
    root = np.random.SeedSequence(seed)
    samples = []
    for class_id in sorted(n_per_class):
        for j, child in enumerate(root.spawn(n_per_class[class_id])):
            sid = f"{MULTIORGAN_CLASSES[class_id]}-{j:04d}"
            samples.append(multiorgan_sample(child, class_id, size, subject_id=sid))
    return samples


# ---------------------------------------------------------------------------
# Splitting and sampling


def split_per_subject(samples: list[Sample], fractions=(0.6, 0.2, 0.2), seed: int = 0) -> SplitSpec:
    """Deterministic per-class-stratified subject split (no slice leakage)."""
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    by_class: dict[int, list[str]] = {}
    for s in samples:
        by_class.setdefault(s.class_id, []).append(s.subject_id)
    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    for cid in sorted(by_class):
        ids = sorted(by_class[cid])
        n = len(ids)
        if n < 3:
            raise ValueError(f"class {cid} has {n} subjects, need at least 3 to fill all splits")
        order = rng.permutation(n)
        n_tr = int(np.floor(fractions[0] * n + 0.5))
        n_va = int(np.floor(fractions[1] * n + 0.5))
        n_tr, n_va = max(n_tr, 1), max(n_va, 1)
        while n - n_tr - n_va < 1:
            n_tr -= 1
        shuffled = [ids[i] for i in order]
        train += shuffled[:n_tr]
        valid += shuffled[n_tr:n_tr + n_va]
        test += shuffled[n_tr + n_va:]
    return SplitSpec(tuple(train), tuple(valid), tuple(test), seed)


def balanced_batches(samples: list[Sample], batch_size: int = 8, seed=0) -> list[list[Sample]]:
    """One epoch of batches with every class drawn equally often.

    Majority classes appear exactly once each; smaller classes are resampled
    with replacement up to the majority count. With equal class counts this
    reduces to a plain shuffle.
    """
    if not samples:
        raise ValueError("balanced_batches: dataset is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.class_id, []).append(i)
    for cid, idx in by_class.items():
        if not idx:
            raise ValueError(f"class {cid} has no samples")
    rng = np.random.default_rng(seed)
    m = max(len(v) for v in by_class.values())
    drawn: list[int] = []
    for cid in sorted(by_class):
        idx = np.asarray(by_class[cid])
        if len(idx) == m:
            drawn += list(idx[rng.permutation(m)])
        else:
            drawn += list(idx[rng.integers(0, len(idx), size=m)])
    order = rng.permutation(len(drawn))
    shuffled = [samples[drawn[i]] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


# ---------------------------------------------------------------------------
# On-disk container


def _write_tensor(path: Path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_TENSOR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor(path: Path) -> np.ndarray:
    if not path.exists():
        raise ValueError(f"missing tensor file {path}")
    raw = path.read_bytes()
    if raw[:4] != _TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack("<I", raw[4:8])
    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}I", raw[8:header_end])
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != header_end + 8 * count:
        raise ValueError(f"{path}: truncated data, expected {count} float64 values")
    return np.frombuffer(raw[header_end:], dtype="<f8").reshape(shape).copy()


_MANIFEST_COLUMNS = ["subject_id", "class_id", "image_file", "mask_file", "height", "width", "channels"]


def write_dataset(samples: list[Sample], directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        c, h, w = s.image.shape
        img_file = f"{s.subject_id}_img.fstn"
        msk_file = f"{s.subject_id}_msk.fstn"
        _write_tensor(directory / img_file, s.image[0] if c == 1 else s.image)
        _write_tensor(directory / msk_file, s.mask[0])
        rows.append([s.subject_id, s.class_id, img_file, msk_file, h, w, c])
    with open(directory / "manifest.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_MANIFEST_COLUMNS)
        writer.writerows(rows)


def read_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise ValueError(f"missing manifest {manifest}")
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in _MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{manifest}: missing columns {missing}")
        samples = []
        for row in reader:
            h, w, c = int(row["height"]), int(row["width"]), int(row["channels"])
            img = _read_tensor(directory / row["image_file"])
            msk = _read_tensor(directory / row["mask_file"])
            if img.ndim == 2:
                img = img[None]
            if img.shape != (c, h, w):
                raise ValueError(
                    f"{row['image_file']}: shape {img.shape} does not match manifest "
                    f"entry ({c}, {h}, {w}) for subject {row['subject_id']}"
                )
            if msk.ndim == 2:
                msk = msk[None]
            if msk.shape != (1, h, w):
                raise ValueError(
                    f"{row['mask_file']}: shape {msk.shape} does not match manifest "
                    f"entry (1, {h}, {w}) for subject {row['subject_id']}"
                )
            samples.append(Sample(row["subject_id"], img, msk, int(row["class_id"])))
    return samples
