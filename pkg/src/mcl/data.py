"""Slide preprocessing, patient bags and paired sampling.

Pipeline per slide: Otsu tissue segmentation on the saturation channel of a
downsampled copy, a non-overlapping tile grid filtered by tissue coverage, and
a connected-component (blob) check per tile. Kept tiles are written to a patch
store and cut into corner-aligned crops when bags are loaded.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import ConfigurationError, InvalidInputError, InvalidParameterError
from .io import dumps, atomic_write_bytes, atomic_write_text, stable_hash

log = logging.getLogger(__name__)

GRADES = ("II", "III", "IV")
MODALITIES = ("ffpe", "frozen")
MANIFEST_COLUMNS = ("patient_id", "modality", "grade", "image_path")
PATCH_MANIFEST = "patch_manifest.json"


def parse_grade(value) -> int:
    """Grade label (``II``/``III``/``IV``, ``2``-``4`` or class index ``0``-``2``) to class index."""
    s = str(value).strip().upper()
    if s in GRADES:
        return GRADES.index(s)
    if s.startswith("G") and s[1:] in GRADES:
        return GRADES.index(s[1:])
    raise InvalidInputError(f"unknown grade {value!r}; expected one of {GRADES}")


def parse_modality(value) -> str:
    s = str(value).strip().lower()
    if s not in MODALITIES:
        raise InvalidInputError(f"unknown modality {value!r}; expected FFPE or FROZEN")
    return s


@dataclass(frozen=True)
class SlideRecord:
    patient_id: str
    modality: str
    grade: int
    image_path: str
    magnification_tag: str = "20x"


def read_manifest(path) -> list[SlideRecord]:
    """Read the slide CSV and check that every patient has exactly one slide per modality."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigurationError(f"{path}: missing columns {missing}")
        records = []
        for row in reader:
            image = Path(row["image_path"])
            if not image.is_absolute():
                image = path.parent / image
            records.append(
                SlideRecord(
                    patient_id=row["patient_id"].strip(),
                    modality=parse_modality(row["modality"]),
                    grade=parse_grade(row["grade"]),
                    image_path=str(image),
                    magnification_tag=(row.get("magnification_tag") or "20x").strip(),
                )
            )
    check_records(records)
    return records


def check_records(records: Sequence[SlideRecord]) -> None:
    problems = []
    seen = Counter((r.patient_id, r.modality) for r in records)
    problems += [f"duplicate slide for patient {p} modality {m}" for (p, m), n in sorted(seen.items()) if n > 1]
    by_patient = defaultdict(set)
    grades = defaultdict(set)
    for r in records:
        by_patient[r.patient_id].add(r.modality)
        grades[r.patient_id].add(r.grade)
    for pid in sorted(by_patient):
        lacking = sorted(set(MODALITIES) - by_patient[pid])
        if lacking:
            problems.append(f"patient {pid} has no {'/'.join(lacking)} slide")
        if len(grades[pid]) > 1:
            problems.append(f"patient {pid} has conflicting grades")
    if problems:
        raise ConfigurationError("invalid slide manifest:\n  " + "\n  ".join(problems), problems)


def write_manifest(path, records: Sequence[SlideRecord]) -> None:
    rows = ["patient_id,modality,grade,image_path,magnification_tag"]
    for r in records:
        rows.append(f"{r.patient_id},{r.modality.upper()},{GRADES[r.grade]},{r.image_path},{r.magnification_tag}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_png(path, rgb: np.ndarray) -> None:
    import io

    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# --- tissue segmentation and tiling -----------------------------------------


def saturation(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation in [0, 1] (``(max - min) / max``, zero for black)."""
    rgb = rgb.astype(np.float64)
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(mx > 0, (mx - mn) / mx, 0.0)
    return s


@dataclass
class TissueMask:
    """Binary tissue mask at ``1/downsample`` of slide resolution."""

    mask: np.ndarray
    downsample: int
    threshold: float

    def full_resolution(self, shape) -> np.ndarray:
        f = self.downsample
        up = np.repeat(np.repeat(self.mask, f, axis=0), f, axis=1)
        out = np.zeros(shape[:2], dtype=bool)
        h, w = min(shape[0], up.shape[0]), min(shape[1], up.shape[1])
        out[:h, :w] = up[:h, :w]
        return out

    def coverage(self, top: int, left: int, size: int) -> float:
        f = self.downsample
        region = self.mask[top // f : -(-(top + size) // f), left // f : -(-(left + size) // f)]
        return float(region.mean()) if region.size else 0.0


def _check_rgb(rgb) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise InvalidInputError(f"expected an 8-bit RGB image, got {rgb.dtype} array of shape {rgb.shape}")
    return rgb


def segment_tissue(rgb, downsample: int = 4) -> TissueMask:
    """Otsu threshold on the saturation channel of a downsampled copy.

    A slide with constant saturation has no usable threshold and yields an
    empty mask (with a warning).
    """
    rgb = _check_rgb(rgb)
    if downsample < 1:
        raise InvalidParameterError("downsample must be >= 1")
    small = rgb[::downsample, ::downsample]
    sat = saturation(small)
    if np.ptp(sat) == 0:
        warnings.warn("constant saturation: no tissue contrast, returning empty mask", RuntimeWarning, stacklevel=2)
        return TissueMask(np.zeros(sat.shape, dtype=bool), downsample, float("inf"))
    thr = float(threshold_otsu(sat))
    return TissueMask(sat > thr, downsample, thr)


@dataclass
class Patch:
    pixels: np.ndarray
    origin: tuple[int, int]  # (x, y) of the top-left corner in slide pixels
    parent: SlideRecord | None = None


def tile_slide(slide, mask, tile_size: int = 500, min_tissue_fraction: float = 0.5, parent=None) -> list[Patch]:
    """Non-overlapping ``tile_size`` grid from the top-left corner; partial margins are dropped.

    ``mask`` is a :class:`TissueMask` or a full-resolution boolean array.
    """
    slide = np.asarray(slide)
    if isinstance(mask, np.ndarray):
        mask = TissueMask(mask.astype(bool), 1, float("nan"))
    rows, cols = slide.shape[0] // tile_size, slide.shape[1] // tile_size
    if rows == 0 or cols == 0:
        warnings.warn(f"slide {slide.shape[:2]} is smaller than one {tile_size}px tile", RuntimeWarning, stacklevel=2)
        return []
    patches = []
    for r in range(rows):
        for c in range(cols):
            y, x = r * tile_size, c * tile_size
            if mask.coverage(y, x, tile_size) >= min_tissue_fraction:
                patches.append(Patch(slide[y : y + tile_size, x : x + tile_size], (x, y), parent))
    return patches


def blob_filter(patch, threshold: float, min_blob_count: int = 1, min_blob_area: float | None = None) -> bool:
    """Keep a tile when enough sufficiently large saturated components are present.

    ``threshold`` is the slide-level Otsu saturation threshold; the default
    ``min_blob_area`` is 1% of the tile area.
    """
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch)
    if min_blob_area is None:
        min_blob_area = 0.01 * pixels.shape[0] * pixels.shape[1]
    if not np.isfinite(threshold):
        return False
    labels, n = ndimage.label(saturation(pixels) > threshold)
    if n == 0:
        return min_blob_count <= 0
    areas = np.bincount(labels.ravel())[1:]
    return int(np.sum(areas >= min_blob_area)) >= min_blob_count


def crop_subregions(patch, crop: int = 224) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Corner-aligned non-overlapping crops in row-major order as ``((top, left), pixels)``."""
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch)
    h, w = pixels.shape[:2]
    if crop > h or crop > w:
        raise InvalidParameterError(f"crop {crop} exceeds tile size {pixels.shape[:2]}")
    return [
        ((top, left), pixels[top : top + crop, left : left + crop])
        for top in range(0, h - crop + 1, crop)
        for left in range(0, w - crop + 1, crop)
    ]


# --- augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    """Training-time augmentation; every range is symmetric around the identity."""

    rotations: tuple = (0, 90, 180, 270)
    flip_horizontal: bool = True
    flip_vertical: bool = True
    hue_shift: float = 0.02
    saturation_shift: float = 0.05
    value_shift: float = 0.05
    brightness: float = 0.05
    contrast: float = 0.05
    enabled: bool = True

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(rotations=(0,), flip_horizontal=False, flip_vertical=False, hue_shift=0.0,
                   saturation_shift=0.0, value_shift=0.0, brightness=0.0, contrast=0.0)


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotation, flips, HSV shift, then brightness/contrast, in that order."""
    if not config.enabled:
        return image
    out = image
    angle = config.rotations[rng.integers(len(config.rotations))] if len(config.rotations) > 1 else config.rotations[0]
    if angle % 360:
        out = np.rot90(out, k=(angle // 90) % 4)
    if config.flip_horizontal and rng.random() < 0.5:
        out = out[:, ::-1]
    if config.flip_vertical and rng.random() < 0.5:
        out = out[::-1]
    if config.hue_shift or config.saturation_shift or config.value_shift:
        dh, ds, dv = (rng.uniform(-r, r) if r else 0.0 for r in (config.hue_shift, config.saturation_shift, config.value_shift))
        hsv = cv2.cvtColor(np.ascontiguousarray(out), cv2.COLOR_RGB2HSV).astype(np.int16)
        hsv[..., 0] = (hsv[..., 0] + int(round(dh * 180))) % 180
        hsv[..., 1] = np.clip(hsv[..., 1] + int(round(ds * 255)), 0, 255)
        hsv[..., 2] = np.clip(hsv[..., 2] + int(round(dv * 255)), 0, 255)
        out = cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)
    if config.brightness or config.contrast:
        b = rng.uniform(-config.brightness, config.brightness) if config.brightness else 0.0
        c = rng.uniform(1 - config.contrast, 1 + config.contrast) if config.contrast else 1.0
        f = (out.astype(np.float32) - 127.5) * c + 127.5 + 255 * b
        out = np.clip(np.rint(f), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(im, config, rng) for im in images])


# --- bags and sampling -----------------------------------------------------------


@dataclass
class PatientBag:
    patient_id: str
    modality: str
    grade: int
    crops: np.ndarray  # (n, h, w, 3) uint8
    origins: list = field(default_factory=list)  # (x, y) slide coordinates per crop
    reads: int = 0

    def __post_init__(self):
        if len(self.crops) == 0:
            raise InvalidInputError(f"empty bag for patient {self.patient_id} ({self.modality})")

    def __len__(self):
        return len(self.crops)

    def crop(self, i: int) -> np.ndarray:
        self.reads += 1
        return self.crops[i]


@dataclass
class PairedBatch:
    ffpe_images: np.ndarray
    frozen_images: np.ndarray
    labels: np.ndarray
    patient_ids: list

    def __len__(self):
        return len(self.labels)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    patient_ids: list
    modalities: list


class PairedDataset:
    """FFPE and frozen bags of the same patients, keyed and ordered by patient id."""

    def __init__(self, ffpe_bags: Sequence[PatientBag], frozen_bags: Sequence[PatientBag]):
        self.ffpe = {b.patient_id: b for b in ffpe_bags}
        self.frozen = {b.patient_id: b for b in frozen_bags}
        problems = [f"patient {p} lacks a frozen bag" for p in sorted(set(self.ffpe) - set(self.frozen))]
        problems += [f"patient {p} lacks an FFPE bag" for p in sorted(set(self.frozen) - set(self.ffpe))]
        problems += [
            f"patient {p} has different grades across modalities"
            for p in sorted(set(self.ffpe) & set(self.frozen))
            if self.ffpe[p].grade != self.frozen[p].grade
        ]
        if problems:
            raise ConfigurationError("inconsistent paired dataset:\n  " + "\n  ".join(problems), problems)
        self.patients = sorted(self.ffpe)

    def bags(self, modality: str) -> list[PatientBag]:
        table = self.ffpe if modality == "ffpe" else self.frozen
        return [table[p] for p in self.patients]

    def subset(self, patient_ids) -> "PairedDataset":
        keep = set(patient_ids)
        return PairedDataset([b for p, b in self.ffpe.items() if p in keep], [b for p, b in self.frozen.items() if p in keep])

    def num_crops(self, modality: str) -> int:
        return sum(len(b) for b in self.bags(modality))

    def __len__(self):
        return len(self.patients)


def sample_paired_batch(dataset: PairedDataset, batch_size: int, rng: np.random.Generator) -> PairedBatch:
    """Patients uniformly with replacement, then one crop per modality uniformly from that patient's bags."""
    patients = dataset.patients
    if not patients:
        raise InvalidInputError("cannot sample from an empty dataset")
    chosen = rng.integers(len(patients), size=batch_size)
    ffpe, frozen, labels, ids = [], [], [], []
    for i in chosen:
        pid = patients[i]
        a, b = dataset.ffpe[pid], dataset.frozen[pid]
        ffpe.append(a.crop(rng.integers(len(a))))
        frozen.append(b.crop(rng.integers(len(b))))
        labels.append(a.grade)
        ids.append(pid)
    return PairedBatch(np.stack(ffpe), np.stack(frozen), np.asarray(labels, dtype=np.int64), ids)


def sample_batch(bags: Sequence[PatientBag], batch_size: int, rng: np.random.Generator) -> Batch:
    """Crops uniformly with replacement from the pooled crops of ``bags`` (modality-blind)."""
    sizes = np.array([len(b) for b in bags])
    if sizes.sum() == 0:
        raise InvalidInputError("cannot sample from an empty dataset")
    offsets = np.cumsum(sizes)
    flat = rng.integers(offsets[-1], size=batch_size)
    bag_idx = np.searchsorted(offsets, flat, side="right")
    images, labels, ids, mods = [], [], [], []
    for j, bi in zip(flat, bag_idx):
        bag = bags[bi]
        images.append(bag.crop(j - (offsets[bi] - sizes[bi])))
        labels.append(bag.grade)
        ids.append(bag.patient_id)
        mods.append(bag.modality)
    return Batch(np.stack(images), np.asarray(labels, dtype=np.int64), ids, mods)


# --- splitting ---------------------------------------------------------------------


class DatasetSplit(NamedTuple):
    train: list
    val: list
    test: list


def _apportion(total: int, fractions) -> np.ndarray:
    """Largest-remainder rounding of ``total * fractions`` (ties to the earlier part)."""
    raw = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(raw).astype(int)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts


def split_dataset(records, fractions=(0.64, 0.16, 0.20), seed: int = 0) -> DatasetSplit:
    """Patient-level split, stratified by grade, with partition sizes fixed by overall rounding.

    ``records`` is a sequence of :class:`SlideRecord` or a ``{patient_id: grade}``
    mapping. Falls back to an unstratified split (with a warning) when some grade
    has fewer patients than there are partitions.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise InvalidParameterError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    grades = dict(records) if isinstance(records, dict) else {r.patient_id: r.grade for r in records}
    patients = sorted(grades)
    rng = np.random.default_rng(seed)
    targets = _apportion(len(patients), fractions)
    by_grade = defaultdict(list)
    for p in patients:
        by_grade[grades[p]].append(p)
    stratified = all(len(v) >= len(fractions) for v in by_grade.values())
    if not stratified:
        warnings.warn("a grade has fewer patients than partitions; using an unstratified split", RuntimeWarning, stacklevel=2)
        by_grade = {0: patients}
    groups = sorted(by_grade)
    alloc = np.zeros((len(groups), 3), dtype=int)
    remainders = []
    for gi, g in enumerate(groups):
        raw = np.asarray(fractions) * len(by_grade[g])
        alloc[gi] = np.floor(raw)
        remainders += [(-(raw[p] - alloc[gi, p]), gi, p) for p in range(3)]
    row_left = np.array([len(by_grade[g]) for g in groups]) - alloc.sum(axis=1)
    col_left = targets - alloc.sum(axis=0)
    for _, gi, p in sorted(remainders):
        if row_left[gi] > 0 and col_left[p] > 0:
            alloc[gi, p] += 1
            row_left[gi] -= 1
            col_left[p] -= 1
    for gi in range(len(groups)):
        for p in range(3):
            take = min(row_left[gi], col_left[p])
            alloc[gi, p] += take
            row_left[gi] -= take
            col_left[p] -= take
    parts = ([], [], [])
    for gi, g in enumerate(groups):
        members = list(by_grade[g])
        rng.shuffle(members)
        start = 0
        for p in range(3):
            parts[p].extend(members[start : start + alloc[gi, p]])
            start += alloc[gi, p]
    split = DatasetSplit(*(sorted(p) for p in parts))
    check_no_leakage(split)
    return split


def check_no_leakage(split: DatasetSplit) -> None:
    seen = {}
    for name, part in zip(split._fields, split):
        for p in part:
            if p in seen:
                raise ConfigurationError(f"patient {p} appears in both {seen[p]} and {name}")
            seen[p] = name


# --- patch store -------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessParams:
    tile_size: int = 500
    downsample: int = 4
    min_tissue_fraction: float = 0.5
    min_blob_count: int = 1
    min_blob_area_fraction: float = 0.01

    @classmethod
    def from_pipeline(cls, pipeline) -> "PreprocessParams":
        return cls(pipeline.tile_size, pipeline.downsample, pipeline.min_tissue_fraction,
                   pipeline.min_blob_count, pipeline.min_blob_area_fraction)


def preprocess_slide(record: SlideRecord, params: PreprocessParams, out_root=None) -> dict:
    """Segment, tile and blob-filter one slide; write kept tiles when ``out_root`` is given."""
    import hashlib

    rgb = load_image(record.image_path)
    mask = segment_tissue(rgb, params.downsample)
    tiles = tile_slide(rgb, mask, params.tile_size, params.min_tissue_fraction, parent=record)
    min_area = params.min_blob_area_fraction * params.tile_size**2
    kept = [t for t in tiles if blob_filter(t, mask.threshold, params.min_blob_count, min_area)]
    entries = []
    for t in kept:
        name = f"{t.origin[0]}_{t.origin[1]}.png"
        if out_root is not None:
            save_png(Path(out_root) / record.patient_id / record.modality / name, np.ascontiguousarray(t.pixels))
        entries.append({"file": name, "sha256": hashlib.sha256(np.ascontiguousarray(t.pixels).tobytes()).hexdigest()})
    return {
        "patient_id": record.patient_id,
        "modality": record.modality,
        "grade": GRADES[record.grade],
        "magnification_tag": record.magnification_tag,
        "image": Path(record.image_path).name,
        "otsu_threshold": mask.threshold if np.isfinite(mask.threshold) else None,
        "tiles_total": (rgb.shape[0] // params.tile_size) * (rgb.shape[1] // params.tile_size),
        "tiles_tissue": len(tiles),
        "tiles_kept": len(kept),
        "patches": entries,
    }


def _preprocess_job(args):
    return preprocess_slide(*args)


def preprocess(records: Sequence[SlideRecord], out_root, params: PreprocessParams = PreprocessParams(),
               seed: int = 0, workers: int = 1) -> dict:
    """Run the three-step preprocessing over all slides and write the patch store.

    Slides are processed independently; output order follows the sorted records
    so the manifest does not depend on ``workers``.
    """
    out_root = Path(out_root)
    records = sorted(records, key=lambda r: (r.patient_id, r.modality))
    jobs = [(r, params, out_root) for r in records]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            slides = list(pool.map(_preprocess_job, jobs))
    else:
        slides = [_preprocess_job(j) for j in jobs]
    for s in slides:
        if s["tiles_kept"] == 0:
            log.warning("slide %s/%s kept no patches", s["patient_id"], s["modality"])
    manifest = {
        "format": "mcl-patches-v1",
        "seed": seed,
        "params": asdict(params),
        "params_hash": stable_hash(asdict(params)),
        "counts": {m: sum(s["tiles_kept"] for s in slides if s["modality"] == m) for m in MODALITIES},
        "slides": slides,
    }
    atomic_write_text(out_root / PATCH_MANIFEST, dumps(manifest))
    return manifest


def load_patch_store(root, patient_ids=None, crop_size: int = 224, max_crops_per_bag: int = 0) -> PairedDataset:
    """Read the patch store into crop bags. Patients whose bags end up empty are skipped with a warning."""
    import json

    root = Path(root)
    manifest = json.loads((root / PATCH_MANIFEST).read_text())
    wanted = None if patient_ids is None else set(patient_ids)
    bags = {m: [] for m in MODALITIES}
    empty = set()
    for s in manifest["slides"]:
        pid = s["patient_id"]
        if wanted is not None and pid not in wanted:
            continue
        crops, origins = [], []
        for entry in sorted(s["patches"], key=lambda e: tuple(int(v) for v in e["file"][:-4].split("_"))[::-1]):
            x, y = (int(v) for v in entry["file"][:-4].split("_"))
            pixels = load_image(root / pid / s["modality"] / entry["file"])
            for (top, left), c in crop_subregions(pixels, crop_size):
                crops.append(c)
                origins.append((x + left, y + top))
        if max_crops_per_bag:
            crops, origins = crops[:max_crops_per_bag], origins[:max_crops_per_bag]
        if not crops:
            empty.add(pid)
            continue
        bags[s["modality"]].append(PatientBag(pid, s["modality"], parse_grade(s["grade"]), np.stack(crops), origins))
    if empty:
        warnings.warn(f"patients without patches skipped: {sorted(empty)}", RuntimeWarning, stacklevel=2)
    return PairedDataset(*(
        [b for b in bags[m] if b.patient_id not in empty] for m in MODALITIES
    ))


def records_by_patient(records: Sequence[SlideRecord]) -> dict:
    return {r.patient_id: r.grade for r in records}


def epoch_batches(num_crops: int, batch_size: int) -> int:
    return max(1, math.ceil(num_crops / batch_size))
