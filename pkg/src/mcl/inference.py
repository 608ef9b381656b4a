"""Patient-level inference by majority vote, metrics, CAM heatmaps and latent export."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import GRADES, PairedDataset, PatientBag
from .errors import InvalidInputError, InvalidParameterError, UnsupportedBackboneError
from .io import atomic_write_text

METRICS_FORMAT = "mcl-metrics-v1"
LATENT_LAYERS = ("h", "z_nmc", "z_lr")


@dataclass
class GradePrediction:
    patient_id: str
    modality: str
    patch_probs: np.ndarray
    patch_votes: np.ndarray
    final_grade: int
    tie_broken: bool

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "modality": self.modality,
            "votes": self.patch_votes.tolist(),
            "predicted": GRADES[self.final_grade] if self.final_grade < len(GRADES) else self.final_grade,
            "tie_broken": self.tie_broken,
        }


def _branch_for(models, modality):
    if hasattr(models, "branch"):
        return models.branch(modality)
    if isinstance(models, dict):
        return models[modality]
    return models


@torch.no_grad()
def predict_probs(branch, crops, chunk: int = 64) -> np.ndarray:
    out = [branch(crops[i : i + chunk]).probs.double().numpy() for i in range(0, len(crops), chunk)]
    return np.concatenate(out)


def vote(probs: np.ndarray, soft: bool = False) -> tuple[int, np.ndarray, bool]:
    """Majority vote over per-crop argmax predictions.

    Ties between grades with the same vote count go to the grade with the larger
    summed probability, then to the higher grade index. Sums use ``math.fsum``
    so the outcome does not depend on crop order. With ``soft=True`` the grade
    with the largest summed probability wins outright.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise InvalidInputError("cannot vote on an empty bag")
    c = probs.shape[1]
    votes = np.bincount(probs.argmax(axis=1), minlength=c)
    mass = np.array([math.fsum(probs[:, j]) for j in range(c)])
    if soft:
        top = np.flatnonzero(mass == mass.max())
        return int(top.max()), votes, len(top) > 1
    top = np.flatnonzero(votes == votes.max())
    if len(top) == 1:
        return int(top[0]), votes, False
    best = top[mass[top] == mass[top].max()]
    return int(best.max()), votes, True


def predict_patient(branch, bag: PatientBag, soft_vote: bool = False) -> GradePrediction:
    if len(bag.crops) == 0:
        raise InvalidInputError(f"empty bag for patient {bag.patient_id}")
    probs = predict_probs(branch, bag.crops)
    final, votes, tie = vote(probs, soft_vote)
    return GradePrediction(bag.patient_id, bag.modality, probs, votes, final, tie)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Accuracy plus weighted and macro precision/recall; undefined ratios count as 0.

    Macro averages run over all classes, including those absent from the data.
    """
    cm = np.asarray(cm, dtype=np.int64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    total = int(cm.sum())
    tp = np.diag(cm).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    weights = support / total if total else np.zeros_like(tp)
    return {
        "accuracy": float(tp.sum() / total) if total else 0.0,
        "precision_weighted": float(np.dot(weights, precision)),
        "recall_weighted": float(np.dot(weights, recall)),
        "precision_macro": float(precision.mean()),
        "recall_macro": float(recall.mean()),
        "confusion": cm.tolist(),
        "support": support.tolist(),
        "num_patients": total,
    }


def metrics_from_predictions(y_true, y_pred, num_classes: int = 3) -> dict:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))


def evaluate(models, dataset: PairedDataset, modalities=("ffpe", "frozen"), soft_vote: bool = False) -> dict:
    """Patient-level metrics per modality; each modality uses its own branch."""
    report = {"format": METRICS_FORMAT, "modalities": {}}
    for m in modalities:
        branch = _branch_for(models, m)
        preds = [predict_patient(branch, bag, soft_vote) for bag in dataset.bags(m)]
        truth = [bag.grade for bag in dataset.bags(m)]
        num_classes = branch.num_classes
        entry = metrics_from_predictions(truth, [p.final_grade for p in preds], num_classes)
        entry["predictions"] = [dict(p.to_dict(), grade=GRADES[g]) for p, g in zip(preds, truth)]
        entry["ties_broken"] = sum(p.tie_broken for p in preds)
        report["modalities"][m] = entry
    return report


@torch.no_grad()
def compute_cam(branch, crop, target_grade: int, normalize: bool = True) -> np.ndarray:
    """Class activation map: classifier weights of ``target_grade`` applied to the last feature maps.

    The map is rectified, bilinearly upsampled to the crop size and min-max
    scaled to ``[0, 1]``. A spatially constant map scales to all zeros.
    """
    crop = np.asarray(crop)
    batch = crop[None] if crop.ndim == 3 else crop
    out = branch(batch)
    maps = out.feature_maps
    if maps is None or maps.ndim != 4:
        raise UnsupportedBackboneError("backbone does not expose spatial feature maps")
    if not 0 <= target_grade < branch.num_classes:
        raise InvalidParameterError(f"target grade {target_grade} out of range")
    w = branch.classifier.weight[target_grade]
    cam = torch.relu(torch.einsum("c,nchw->nhw", w, maps))
    cam = F.interpolate(cam[:, None], size=batch.shape[1:3], mode="bilinear", align_corners=False)[:, 0]
    cam = cam.double().numpy()
    if normalize:
        lo = cam.min(axis=(1, 2), keepdims=True)
        span = cam.max(axis=(1, 2), keepdims=True) - lo
        cam = np.divide(cam - lo, span, out=np.zeros_like(cam), where=span > 0)
    return cam[0] if crop.ndim == 3 else cam


def save_heatmap(path, cam: np.ndarray, crop: np.ndarray | None = None, alpha: float = 0.45) -> None:
    """Colour-map ``cam`` (values in [0, 1]) and optionally blend it over the crop, as PNG."""
    import io

    from matplotlib import colormaps
    from PIL import Image

    from .io import atomic_write_bytes

    rgb = (colormaps["jet"](np.clip(cam, 0, 1))[..., :3] * 255).astype(np.float64)
    if crop is not None:
        rgb = (1 - alpha) * np.asarray(crop, dtype=np.float64) + alpha * rgb
    buf = io.BytesIO()
    Image.fromarray(np.clip(np.rint(rgb), 0, 255).astype(np.uint8)).save(buf, format="PNG")
    atomic_write_bytes(Path(path), buf.getvalue())


@torch.no_grad()
def latent_rows(branch, bag: PatientBag, layer: str, chunk: int = 64) -> np.ndarray:
    if layer not in LATENT_LAYERS:
        raise InvalidParameterError(f"unknown latent layer {layer!r}; expected one of {LATENT_LAYERS}")
    parts = [getattr(branch(bag.crops[i : i + chunk]), layer).numpy() for i in range(0, len(bag), chunk)]
    return np.concatenate(parts)


def export_latents(models, dataset: PairedDataset, layer: str, path, modalities=("ffpe", "frozen")) -> int:
    """Write one CSV row per crop: patient_id, modality, grade, origin (``x_y``), then the features.

    Returns the number of rows written.
    """
    if layer not in LATENT_LAYERS:
        raise InvalidParameterError(f"unknown latent layer {layer!r}; expected one of {LATENT_LAYERS}")
    lines, dim = [], None
    for m in modalities:
        branch = _branch_for(models, m)
        for bag in dataset.bags(m):
            feats = latent_rows(branch, bag, layer)
            dim = feats.shape[1]
            for (x, y), row in zip(bag.origins, feats):
                values = ",".join(f"{v:.9g}" for v in row.tolist())
                lines.append(f"{bag.patient_id},{m},{GRADES[bag.grade]},{x}_{y},{values}")
    header = "patient_id,modality,grade,origin," + ",".join(f"f{i}" for i in range(dim or 0))
    atomic_write_text(path, "\n".join([header] + lines) + "\n")
    return len(lines)
