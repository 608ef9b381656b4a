"""Synthetic paired-modality slides and the desk-scale experiment harness.

Each patient gets a latent tissue texture drawn from its class (stroma colour,
nuclear density and size). Both of the patient's slides are rendered from that
latent texture, then pass through a modality-specific degradation: FFPE slides
get a colour cast and processing tears, frozen slides get blur, noise and
washed-out colour. The class signal is therefore present in both modalities,
which makes the grading task learnable by construction.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import losses
from .config import GlobalConfig, build_config
from .data import (
    GRADES,
    PairedDataset,
    PreprocessParams,
    SlideRecord,
    load_patch_store,
    preprocess,
    save_png,
    write_manifest,
)
from .errors import ConfigurationError
from .inference import LATENT_LAYERS, evaluate, latent_rows
from .io import atomic_write_text, dumps, stable_hash
from .model import derive_seed
from .trainer import fit

log = logging.getLogger(__name__)

EXPERIMENT_FORMAT = "mcl-experiment-v1"


_TRAINING_FIELDS = ("epochs", "lr_max")


@dataclass
class SyntheticSpec:
    num_classes: int = 3
    train_per_class: int = 20
    val_per_class: int = 5
    test_per_class: int = 10
    crops_per_bag: int = 8
    image_size: int = 112
    tile_size: int = 250
    stroma_colors: tuple = ((236, 158, 188), (222, 140, 200), (206, 122, 212))
    nucleus_colors: tuple = ((124, 70, 146), (104, 52, 146), (84, 36, 146))
    nuclear_density: tuple = (0.002, 0.0035, 0.005)  # nuclei per pixel
    nuclear_radius: tuple = (2.5, 3.0, 3.5)
    patient_jitter: float = 0.08
    ffpe_color_shift: tuple = (8, -4, -6)
    ffpe_noise: float = 4.0
    ffpe_tears: int = 3
    frozen_color_shift: tuple = (-10, -4, 10)
    frozen_blur: float = 1.0
    frozen_noise: float = 10.0
    frozen_washout: float = 0.15
    epochs: int = 31
    lr_max: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        n = self.num_classes
        per_class = (self.stroma_colors, self.nucleus_colors, self.nuclear_density, self.nuclear_radius)
        if any(len(p) < n for p in per_class):
            raise ConfigurationError(f"need texture parameters for {n} classes")
        signatures = {(tuple(self.stroma_colors[c]), self.nuclear_density[c]) for c in range(n)}
        if len(signatures) != n:
            raise ConfigurationError("classes must have distinct texture parameters")
        if n > len(GRADES):
            raise ConfigurationError(f"at most {len(GRADES)} classes are supported")

    @property
    def tiles_per_slide(self) -> int:
        per_tile = (self.tile_size // self.image_size) ** 2
        return math.ceil(self.crops_per_bag / per_tile)

    def hash(self) -> str:
        return stable_hash(asdict(self))

    def data_hash(self) -> str:
        """Hash of the fields that shape the images; the training budget is left out."""
        return stable_hash({k: v for k, v in asdict(self).items() if k not in _TRAINING_FIELDS})

    def config_values(self) -> dict:
        """Flat config keys implied by the synthetic spec: crop geometry, training budget and seed."""
        return {"tile_size": self.tile_size, "crop_size": self.image_size, "image_size": self.image_size,
                "epochs": self.epochs, "lr_max": self.lr_max, "seed": self.seed}

    def base_config(self, **overrides) -> GlobalConfig:
        return build_config(dict(self.config_values(), **overrides))


def _tuplify(value):
    return tuple(_tuplify(v) for v in value) if isinstance(value, list) else value


def load_spec(path=None, **overrides) -> SyntheticSpec:
    """Read a flat TOML spec file; unknown keys are rejected. Missing keys keep their defaults."""
    from .config import read_config_file

    values = read_config_file(path) if path else {}
    values.update(overrides)
    known = {f.name for f in fields(SyntheticSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown synthetic spec keys {unknown}", [f"unknown key {k!r}" for k in unknown])
    return SyntheticSpec(**{k: _tuplify(v) for k, v in values.items()})


def _patients(spec: SyntheticSpec):
    """(patient_id, class, split) in a fixed order."""
    out = []
    for split, count in (("train", spec.train_per_class), ("val", spec.val_per_class), ("test", spec.test_per_class)):
        for c in range(spec.num_classes):
            for i in range(count):
                out.append((f"{split[:2]}{c}{i:03d}", c, split))
    return out


def _tissue_mask(rng, h, w, tissue_h, tissue_w):
    yy, xx = np.mgrid[:h, :w]
    mask = (yy < tissue_h) & (xx < tissue_w)
    for _ in range(4):
        cy, cx = rng.uniform(0.2, 1.0) * tissue_h, rng.uniform(0.1, 1.0) * tissue_w
        ry, rx = rng.uniform(0.2, 0.4) * tissue_h, rng.uniform(0.1, 0.25) * tissue_w
        mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    return mask


def render_slide(spec: SyntheticSpec, cls: int, latent: dict, modality: str, rng: np.random.Generator,
                 with_mask: bool = False):
    """One slide image (uint8 RGB) for a patient with the given latent texture.

    With ``with_mask`` the analytic tissue mask (tears removed) is returned too.
    """
    ts = spec.tile_size
    tissue_h, tissue_w = ts, ts * spec.tiles_per_slide
    h, w = tissue_h + ts // 2, tissue_w + ts // 4
    tissue = _tissue_mask(rng, h, w, tissue_h, tissue_w)

    low = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), 6) * 20
    stroma = np.asarray(latent["stroma"], float)[None, None, :] + low[..., None] * np.array([0.3, 0.5, 0.3])
    centers = rng.random((h, w)) < latent["density"]
    dist = ndimage.distance_transform_edt(~centers)
    radius = latent["radius"] * np.exp(ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), 3) * 0.6)
    nuclei = dist <= radius
    img = np.where(nuclei[..., None], np.asarray(latent["nucleus"], float), stroma)
    img = np.where(tissue[..., None], img, 244.0)

    if modality == "ffpe":
        img = img + np.asarray(spec.ffpe_color_shift, float) * tissue[..., None]
        for _ in range(spec.ffpe_tears):
            y0 = rng.integers(0, tissue_h)
            thick = rng.integers(1, 4)
            img[y0 : y0 + thick, : tissue_w] = 240.0
            tissue[y0 : y0 + thick, : tissue_w] = False
        img = img + rng.normal(0, spec.ffpe_noise, img.shape)
    else:
        img = img + np.asarray(spec.frozen_color_shift, float) * tissue[..., None]
        gray = img.mean(axis=-1, keepdims=True)
        img = (1 - spec.frozen_washout) * img + spec.frozen_washout * gray
        img = ndimage.gaussian_filter(img, (spec.frozen_blur, spec.frozen_blur, 0))
        img = img + rng.normal(0, spec.frozen_noise, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return (img, tissue) if with_mask else img


def _latent(spec: SyntheticSpec, cls: int, rng: np.random.Generator) -> dict:
    """Per-patient texture; jitter is clipped at two standard deviations so classes never overlap."""
    j = spec.patient_jitter

    def noise(size=None):
        return np.clip(rng.normal(0, 1, size), -2, 2) * j

    return {
        "stroma": np.asarray(spec.stroma_colors[cls], float) + 40 * noise(3),
        "nucleus": np.asarray(spec.nucleus_colors[cls], float) + 40 * noise(3),
        "density": spec.nuclear_density[cls] * math.exp(noise()),
        "radius": spec.nuclear_radius[cls] * math.exp(noise()),
    }


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> list[SlideRecord]:
    """Write one slide per patient and modality, ``slides.csv`` and ``splits.json``.

    Image paths in the manifest are relative to ``out_dir``. Deterministic in ``spec.seed``.
    """
    out_dir = Path(out_dir)
    records = []
    splits = {"train": [], "val": [], "test": []}
    for index, (pid, cls, split) in enumerate(_patients(spec)):
        latent = _latent(spec, cls, np.random.default_rng(derive_seed(spec.seed, index)))
        splits[split].append(pid)
        for mi, modality in enumerate(("ffpe", "frozen")):
            rng = np.random.default_rng(derive_seed(spec.seed, index, mi + 1))
            name = f"slides/{pid}_{modality}.png"
            save_png(out_dir / name, render_slide(spec, cls, latent, modality, rng))
            records.append(SlideRecord(pid, modality, cls, name))
    write_manifest(out_dir / "slides.csv", records)
    atomic_write_text(out_dir / "splits.json", dumps({"spec": asdict(spec), "data_hash": spec.data_hash(), **splits}))
    return [SlideRecord(r.patient_id, r.modality, r.grade, str(out_dir / r.image_path)) for r in records]


@dataclass
class PreparedData:
    train: PairedDataset
    val: PairedDataset
    test: PairedDataset
    root: Path


def prepare(spec: SyntheticSpec, root, pipeline=None) -> PreparedData:
    """Generate (or reuse) the dataset under ``root``, preprocess it and load the three partitions."""
    root = Path(root)
    pipeline = pipeline or spec.base_config().pipeline
    params = PreprocessParams.from_pipeline(pipeline)
    marker = root / "splits.json"
    fresh = not marker.exists() or json.loads(marker.read_text()).get("data_hash") != spec.data_hash()
    if fresh:
        records = generate_synthetic_dataset(spec, root)
    else:
        from .data import read_manifest

        records = read_manifest(root / "slides.csv")
    patches = root / "patches"
    store = patches / "patch_manifest.json"
    if fresh or not store.exists() or json.loads(store.read_text())["params_hash"] != stable_hash(asdict(params)):
        preprocess(records, patches, params, seed=spec.seed)
    splits = json.loads(marker.read_text())
    everything = load_patch_store(patches, crop_size=pipeline.crop_size, max_crops_per_bag=pipeline.max_crops_per_bag)
    parts = [everything.subset(splits[k]) for k in ("train", "val", "test")]
    if any(len(p) == 0 for p in parts):
        raise ConfigurationError(f"synthetic partitions came out empty {[len(p) for p in parts]}; "
                                 "check tile/crop sizes against the synthetic spec geometry")
    return PreparedData(*parts, root)


# --- latent diagnostics -------------------------------------------------------------------


def _latents(models, dataset: PairedDataset, layer: str, modality: str):
    branch = models.branch(modality)
    feats, pids, labels = [], [], []
    for bag in dataset.bags(modality):
        f = latent_rows(branch, bag, layer)
        feats.append(f)
        pids += [bag.patient_id] * len(f)
        labels += [bag.grade] * len(f)
    return np.concatenate(feats).astype(np.float64), np.asarray(pids), np.asarray(labels)


def rank_ratio(features: np.ndarray, labels: np.ndarray, num_classes: int, center: bool = False) -> float:
    """Mean over classes of (sum of the top C-1 singular values) / nuclear norm of the class matrix.

    With ``center=True`` each class matrix has its mean row removed first.
    """
    k = max(1, num_classes - 1)
    ratios = []
    for c in range(num_classes):
        block = features[labels == c]
        if len(block) == 0:
            continue
        if center:
            block = block - block.mean(axis=0)
        s = np.linalg.svd(block, compute_uv=False)
        if s.sum() > 0:
            ratios.append(s[:k].sum() / s.sum())
    return float(np.mean(ratios)) if ratios else float("nan")


def cross_modal_stats(models, dataset: PairedDataset, config) -> dict:
    """Retrieval accuracy and positive/negative cosine margin on layer-normalized contrastive latents."""
    fa, pa, _ = _latents(models, dataset, "z_nmc", "ffpe")
    fb, pb, _ = _latents(models, dataset, "z_nmc", "frozen")
    ga = losses.layer_normalize(torch.as_tensor(fa), config.eps, config.norm_mode)
    gb = losses.layer_normalize(torch.as_tensor(fb), config.eps, config.norm_mode)
    sim = losses.cosine_similarity_matrix(ga, gb).numpy()
    same = pa[:, None] == pb[None, :]
    nearest = pb[sim.argmax(axis=1)]
    pos, neg = float(sim[same].mean()), float(sim[~same].mean())
    return {
        "retrieval_accuracy": float(np.mean(nearest == pa)),
        "positive_similarity": pos,
        "negative_similarity": neg,
        "margin": pos - neg,
    }


def latent_rank_ratios(models, dataset: PairedDataset, num_classes: int, center: bool = False) -> dict:
    """Per-layer rank ratio averaged over the run's modalities."""
    out = {}
    for layer in LATENT_LAYERS:
        vals = []
        for m in models.modalities:
            f, _, y = _latents(models, dataset, layer, m)
            vals.append(rank_ratio(f, y, num_classes, center))
        out[layer] = float(np.mean(vals))
    return out


# --- experiments ---------------------------------------------------------------------------

MODE_RUNS = {"single": ("single-ffpe", "single-frozen"), "mixed": ("mixed",), "mutual": ("mutual",)}
LOSS_SETTINGS = {
    "ce": {"loss_weights": (1.0, 0.0, 0.0)},
    "nmc": {"loss_weights": (1.0, 1.0, 0.0), "contrastive": "nmc"},
    "lr": {"loss_weights": (1.0, 0.0, 1.0)},
    "nmc+lr": {"loss_weights": (1.0, 1.0, 1.0), "contrastive": "nmc"},
    "kl": {"loss_weights": (1.0, 1.0, 0.0), "contrastive": "kl"},
    "nt-xent": {"loss_weights": (1.0, 1.0, 0.0), "contrastive": "nt-xent"},
}


@dataclass
class Experiment:
    """A named row: one or more training runs whose test metrics are merged per modality."""

    name: str
    runs: list = field(default_factory=list)  # list of flat override dicts


def mode_experiments(modes=("single", "mixed", "mutual"), loss: str = "nmc+lr") -> list[Experiment]:
    out = []
    for mode in modes:
        if mode not in MODE_RUNS:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {sorted(MODE_RUNS)}")
        extra = LOSS_SETTINGS[loss] if mode == "mutual" else {}
        out.append(Experiment(mode, [dict(extra, mode=m) for m in MODE_RUNS[mode]]))
    return out


def loss_experiments(names=("ce", "nmc", "lr", "nmc+lr")) -> list[Experiment]:
    out = []
    for name in names:
        if name not in LOSS_SETTINGS:
            raise ConfigurationError(f"unknown loss setting {name!r}; expected one of {sorted(LOSS_SETTINGS)}")
        out.append(Experiment(f"mutual[{name}]", [dict(LOSS_SETTINGS[name], mode="mutual")]))
    return out


def _run_config(base: GlobalConfig, overrides: dict) -> GlobalConfig:
    values = base.to_flat()
    values.update(overrides)
    return build_config(values)


_METRIC_KEYS = ("accuracy", "precision_weighted", "recall_weighted", "precision_macro", "recall_macro",
                "confusion", "support")


def _train_and_test(cfg: GlobalConfig, prepared: PreparedData, run_dir) -> tuple[dict, dict]:
    started = time.perf_counter()
    result = fit(cfg, prepared.train, prepared.val, run_dir)
    log.info("%s run finished in %.1fs", cfg.train.mode, time.perf_counter() - started)
    models = result.models
    test = evaluate(models, prepared.test, models.modalities, soft_vote=cfg.train.soft_vote)
    run = {
        "mode": cfg.train.mode,
        "config_hash": cfg.hash(),
        "status": result.report["status"],
        "collapse": result.report["collapse"],
        "best_epoch": result.report["best_epoch"],
        "final_epoch_loss": result.report["epochs"][-1]["loss"] if result.report["epochs"] else {},
    }
    if not result.collapsed:
        run["rank_ratio"] = latent_rank_ratios(models, prepared.test, cfg.train.num_classes)
        run["rank_ratio_centered"] = latent_rank_ratios(models, prepared.test, cfg.train.num_classes, center=True)
        if cfg.train.mode == "mutual":
            run["cross_modal"] = cross_modal_stats(models, prepared.test, cfg.train)
    metrics = {m: {k: rep[k] for k in _METRIC_KEYS} for m, rep in test["modalities"].items()}
    return run, metrics


def run_experiment(exp: Experiment, base: GlobalConfig, prepared: PreparedData, out_dir=None,
                   cache: dict | None = None) -> dict:
    """Train, test and summarise every run of ``exp``.

    ``cache`` maps config hashes to finished runs so identical configurations
    shared between experiments are trained once.
    """
    row = {"name": exp.name, "runs": [], "metrics": {}, "status": "ok"}
    for overrides in exp.runs:
        cfg = _run_config(base, overrides)
        key = cfg.hash()
        if cache is not None and key in cache:
            run, metrics = cache[key]
        else:
            run_dir = Path(out_dir) / key if out_dir else None
            run, metrics = _train_and_test(cfg, prepared, run_dir)
            if cache is not None:
                cache[key] = (run, metrics)
        row["runs"].append(run)
        row["metrics"].update(metrics)
        if run["status"] == "collapsed":
            row["status"] = "collapsed"
    return row


def run_comparison(spec: SyntheticSpec, experiments: list[Experiment], root, base: GlobalConfig | None = None,
                   out=None, prepared: PreparedData | None = None, cache: dict | None = None) -> dict:
    """Train and test every experiment on the same synthetic cohort; collapses are recorded, not raised."""
    base = base or spec.base_config()
    prepared = prepared or prepare(spec, root, base.pipeline)
    rows = [run_experiment(exp, base, prepared, Path(root) / "runs", cache) for exp in experiments]
    report = {
        "format": EXPERIMENT_FORMAT,
        "spec": asdict(spec),
        "spec_hash": spec.hash(),
        "base_config_hash": base.hash(),
        "seed": base.train.seed,
        "rows": rows,
    }
    if out is not None:
        atomic_write_text(out, dumps(report))
    return report


def temperature_sweep(spec: SyntheticSpec, taus, root, base: GlobalConfig | None = None, out=None,
                      prepared: PreparedData | None = None, cache: dict | None = None) -> dict:
    """Mutual NMC+LR training per temperature; writes a Temperature/FFPE/Frozen CSV when ``out`` is given."""
    base = base or spec.base_config()
    configs = [_run_config(base, dict(LOSS_SETTINGS["nmc+lr"], mode="mutual", tau=float(t))) for t in taus]
    prepared = prepared or prepare(spec, root, base.pipeline)
    rows = []
    for tau, cfg in zip(taus, configs):
        row = run_experiment(Experiment(f"tau={tau}", [cfg.to_flat()]), base, prepared, Path(root) / "runs", cache)
        run = row["runs"][0]
        rows.append({
            "tau": float(tau),
            "ffpe": row["metrics"]["ffpe"]["accuracy"],
            "frozen": row["metrics"]["frozen"]["accuracy"],
            "collapsed": run["status"] == "collapsed",
            "collapse_step": run["collapse"]["step"] if run["collapse"] else None,
            "config_hash": run["config_hash"],
        })
    if out is not None:
        lines = ["temperature,ffpe_accuracy,frozen_accuracy,collapsed,collapse_step"]
        lines += [f"{r['tau']!r},{r['ffpe']!r},{r['frozen']!r},{str(r['collapsed']).lower()},"
                  f"{'' if r['collapse_step'] is None else r['collapse_step']}" for r in rows]
        atomic_write_text(out, "\n".join(lines) + "\n")
    return {"format": "mcl-tau-sweep-v1", "spec_hash": spec.hash(), "rows": rows}
