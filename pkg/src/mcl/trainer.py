"""Training loops: mutual (paired), single-modality and mixed-modality.

In mutual mode each branch has its own Adam optimizer and is updated with the
gradient of its own total loss; the contrastive and low-rank terms are shared,
so gradients flow into both branches from them.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .config import GlobalConfig, TrainConfig
from .data import AugmentationConfig, PairedBatch, PairedDataset, augment_batch, epoch_batches, sample_batch, sample_paired_batch
from .errors import ConfigurationError, InvalidInputError
from .io import atomic_write_text, dumps
from .model import BranchNetwork, DualBranch, build_branch, derive_seed, forward_pair, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

REPORT_FORMAT = "mcl-train-report-v1"


def lr_schedule(step: int, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Cosine annealing with warm restarts, evaluated per optimization step.

    The first window lasts ``restart_period_epochs`` epochs and each following
    window is ``restart_mult`` times longer. The rate is ``lr_max`` at the start
    of every window.
    """
    if step < 0:
        raise InvalidInputError("step must be >= 0")
    period = config.restart_period_epochs * steps_per_epoch
    t = float(step)
    if config.restart_mult == 1:
        t = math.fmod(t, period)
    else:
        while t >= period:
            t -= period
            period *= config.restart_mult
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1 + math.cos(math.pi * t / period))


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    lr: float = 0.0
    low_var_steps: int = 0
    empty_class_batches: int = 0
    collapse: dict | None = None
    history: list = field(default_factory=list)

    @property
    def collapsed(self) -> bool:
        return self.collapse is not None


def _finite(x) -> bool:
    return bool(torch.isfinite(torch.as_tensor(x)).all())


def _json_float(v: float):
    v = float(v)
    return v if math.isfinite(v) else repr(v)


def _make_optimizer(params, config: TrainConfig):
    return torch.optim.Adam(params, lr=config.lr_max, betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)


def _set_lr(optimizers, lr: float) -> None:
    for opt in optimizers:
        for group in opt.param_groups:
            group["lr"] = lr


def _apply(params, grads, optimizer) -> None:
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def _flag_collapse(state: TrainState, reason: str, breakdowns=()) -> None:
    state.collapse = {
        "step": state.step,
        "epoch": state.epoch,
        "reason": reason,
        "losses": [{k: _json_float(v) for k, v in b.as_floats().to_dict().items()} for b in breakdowns],
    }
    log.error("training collapsed at step %d: %s", state.step, reason)


def _shared_terms(out_a, out_b, labels, config: TrainConfig, state: TrainState):
    _, w_nmc, w_lr = config.loss_weights
    contrast = 0.0
    if w_nmc and config.contrastive == "nmc":
        contrast = losses.nmc_loss(out_a.z_nmc, out_b.z_nmc, config.tau, config.eps, config.norm_mode)
    elif w_nmc and config.contrastive == "nt-xent":
        contrast = losses.nt_xent(out_a.z_nmc, out_b.z_nmc, config.tau)
    elif w_nmc and config.contrastive == "kl":
        contrast = losses.kl_mutual(out_a.probs, out_b.probs)
    low_rank = 0.0
    if w_lr:
        state.empty_class_batches += losses.count_empty_classes(labels, config.num_classes) > 0
        low_rank = losses.lowrank_loss(
            out_a.z_lr, out_b.z_lr, labels, config.delta, config.num_classes, config.sv_threshold, config.stacking
        )
    return contrast, low_rank


def _latent_variance(out_a, out_b, config: TrainConfig) -> float:
    with torch.no_grad():
        v = [losses.layer_normalize(o.z_nmc, config.eps, config.norm_mode).var(dim=0, unbiased=False).mean() for o in (out_a, out_b)]
    return float(min(v))


def _mutual_losses(model, batch, config, state):
    out_a, out_b = forward_pair(model, batch.ffpe_images, batch.frozen_images)
    cls_a = losses.taylor_ce(out_a.probs, batch.labels, config.taylor_t)
    cls_b = losses.taylor_ce(out_b.probs, batch.labels, config.taylor_t)
    contrast, low_rank = _shared_terms(out_a, out_b, batch.labels, config, state)
    la, lb = losses.total_loss(cls_a, cls_b, contrast, low_rank, config.loss_weights)
    return out_a, out_b, la, lb


def train_step(model: DualBranch, optimizers, batch: PairedBatch, config: TrainConfig, state: TrainState,
               steps_per_epoch: int = 1):
    """One joint update of both branches on a paired batch.

    Returns the float loss breakdowns ``(ffpe, frozen)``. A non-finite loss or
    parameter, or a collapsed latent space, sets ``state.collapse`` and leaves
    the parameters untouched (for non-finite losses).
    """
    opt_a, opt_b = optimizers
    state.lr = lr_schedule(state.step, config, steps_per_epoch)
    _set_lr(optimizers, state.lr)
    params_a, params_b = list(model.ffpe.parameters()), list(model.frozen.parameters())
    try:
        out_a, out_b, la, lb = _mutual_losses(model, batch, config, state)
    except InvalidInputError as exc:
        _flag_collapse(state, f"invalid latent batch: {exc}")
        return None
    if not (_finite(la.total) and _finite(lb.total)):
        _flag_collapse(state, "non-finite loss", (la, lb))
        return la.as_floats(), lb.as_floats()
    if config.alternating_updates:
        _apply(params_a, torch.autograd.grad(la.total, params_a, allow_unused=True), opt_a)
        out_a, out_b, _, lb = _mutual_losses(model, batch, config, state)
        _apply(params_b, torch.autograd.grad(lb.total, params_b, allow_unused=True), opt_b)
    else:
        grads_a = torch.autograd.grad(la.total, params_a, retain_graph=True, allow_unused=True)
        grads_b = torch.autograd.grad(lb.total, params_b, allow_unused=True)
        _apply(params_a, grads_a, opt_a)
        _apply(params_b, grads_b, opt_b)
    result = la.as_floats(), lb.as_floats()
    _after_update(state, config, list(model.parameters()), result, _latent_variance(out_a, out_b, config))
    return result


def single_step(branch: BranchNetwork, optimizer, images, labels, config: TrainConfig, state: TrainState,
                steps_per_epoch: int = 1) -> losses.LossBreakdown | None:
    """Classification-only update of one branch (single and mixed training)."""
    state.lr = lr_schedule(state.step, config, steps_per_epoch)
    _set_lr([optimizer], state.lr)
    out = branch(images)
    w_cls = config.loss_weights[0]
    br = losses.LossBreakdown.from_terms(w_cls * losses.taylor_ce(out.probs, labels, config.taylor_t), 0.0, 0.0)
    if not _finite(br.total):
        _flag_collapse(state, "non-finite loss", (br,))
        return br.as_floats()
    params = list(branch.parameters())
    _apply(params, torch.autograd.grad(br.total, params, allow_unused=True), optimizer)
    result = br.as_floats()
    _after_update(state, config, params, (result,), None)
    return result


def _after_update(state, config, params, breakdowns, latent_var) -> None:
    state.history.append({"step": state.step, "lr": state.lr, "losses": [b.to_dict() for b in breakdowns]})
    state.step += 1
    if not all(_finite(p.detach()) for p in params):
        _flag_collapse(state, "non-finite parameter", breakdowns)
        return
    if latent_var is not None:
        state.low_var_steps = state.low_var_steps + 1 if latent_var < config.collapse_var_threshold else 0
        if state.low_var_steps >= config.collapse_patience:
            _flag_collapse(state, f"latent variance below {config.collapse_var_threshold} for {state.low_var_steps} steps", breakdowns)


# --- model containers -------------------------------------------------------------


class TrainedModels:
    """The networks of one run, addressed by modality.

    Mutual runs hold two branches, single runs one, and mixed runs one network
    serving both modalities.
    """

    def __init__(self, mode: str, config: TrainConfig, branches: dict):
        self.mode = mode
        self.config = config
        self.branches = branches  # storage key -> BranchNetwork

    @classmethod
    def build(cls, config: TrainConfig) -> "TrainedModels":
        kwargs = dict(num_classes=config.num_classes, backbone=config.backbone,
                      channels=config.backbone_channels, shared_head=config.shared_head)
        keys = {"mutual": ("ffpe", "frozen"), "single-ffpe": ("ffpe",), "single-frozen": ("frozen",), "mixed": ("shared",)}[config.mode]
        seed_index = {"ffpe": 0, "frozen": 1, "shared": 0}
        return cls(config.mode, config, {k: build_branch(derive_seed(config.seed, seed_index[k]), **kwargs) for k in keys})

    @property
    def modalities(self) -> tuple:
        if "shared" in self.branches:
            return ("ffpe", "frozen")
        return tuple(k for k in ("ffpe", "frozen") if k in self.branches)

    def branch(self, modality: str) -> BranchNetwork:
        if "shared" in self.branches:
            return self.branches["shared"]
        try:
            return self.branches[modality]
        except KeyError:
            raise ConfigurationError(f"a {self.mode} model has no {modality} branch") from None

    def dual(self) -> DualBranch:
        return DualBranch(self.branches["ffpe"], self.branches["frozen"])

    def state_dicts(self) -> dict:
        return {k: copy.deepcopy(b.state_dict()) for k, b in self.branches.items()}

    def load_state_dicts(self, sds: dict) -> None:
        for k, sd in sds.items():
            self.branches[k].load_state_dict(sd)

    def eval(self):
        for b in self.branches.values():
            b.eval()
        return self


def load_models(path) -> TrainedModels:
    """Rebuild the best networks stored in a checkpoint."""
    from .config import build_config

    ckpt = load_checkpoint(path)
    config = build_config(json.loads(ckpt["config"])).train
    models = TrainedModels.build(config)
    models.load_state_dicts(ckpt["best"]["branches"] if ckpt.get("best") else ckpt["branches"])
    return models.eval()


# --- fit ---------------------------------------------------------------------------------


@dataclass
class FitResult:
    models: TrainedModels
    report: dict
    state: TrainState

    @property
    def collapsed(self) -> bool:
        return self.state.collapsed


class _Runner:
    def __init__(self, cfg: GlobalConfig, train_ds: PairedDataset, augmentation: AugmentationConfig):
        self.cfg = cfg
        self.config = cfg.train
        self.train_ds = train_ds
        self.augmentation = augmentation if self.config.augment else AugmentationConfig(enabled=False)
        self.models = TrainedModels.build(self.config)
        self.optimizers = {k: _make_optimizer(b.parameters(), self.config) for k, b in self.models.branches.items()}
        self.rng = np.random.default_rng(derive_seed(self.config.seed, 7))
        self.state = TrainState(lr=self.config.lr_max)
        mode = self.config.mode
        if mode == "mutual":
            pool = train_ds.num_crops("ffpe")
            self.bags = None
        else:
            mods = ("ffpe", "frozen") if mode == "mixed" else (mode.split("-")[1],)
            self.bags = [b for m in mods for b in train_ds.bags(m)]
            pool = sum(len(b) for b in self.bags)
        self.steps_per_epoch = epoch_batches(pool, self.config.batch_size)

    def step(self):
        c = self.config
        if c.mode == "mutual":
            batch = sample_paired_batch(self.train_ds, c.batch_size, self.rng)
            batch.ffpe_images = augment_batch(batch.ffpe_images, self.augmentation, self.rng)
            batch.frozen_images = augment_batch(batch.frozen_images, self.augmentation, self.rng)
            opts = (self.optimizers["ffpe"], self.optimizers["frozen"])
            return train_step(self.models.dual(), opts, batch, c, self.state, self.steps_per_epoch)
        batch = sample_batch(self.bags, c.batch_size, self.rng)
        images = augment_batch(batch.images, self.augmentation, self.rng)
        key = next(iter(self.models.branches))
        return single_step(self.models.branches[key], self.optimizers[key], images, batch.labels, c, self.state,
                           self.steps_per_epoch)

    def checkpoint_payload(self, report, best) -> dict:
        return {
            "mode": self.config.mode,
            "config": json.dumps(self.cfg.to_flat(), sort_keys=True),
            "config_hash": self.cfg.hash(),
            "epoch": self.state.epoch,
            "step": self.state.step,
            "branches": self.models.state_dicts(),
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "rng": json.dumps(self.rng.bit_generator.state),
            "state": json.dumps(asdict(self.state)),
            "report": json.dumps(report),
            "best": best,
        }

    def restore(self, ckpt: dict):
        self.models.load_state_dicts(ckpt["branches"])
        for k, o in self.optimizers.items():
            o.load_state_dict(ckpt["optimizers"][k])
        self.rng.bit_generator.state = json.loads(ckpt["rng"])
        self.state = TrainState(**json.loads(ckpt["state"]))
        return json.loads(ckpt["report"]), ckpt["best"]


def _mean_breakdowns(records) -> dict:
    if not records:
        return {}
    out = {}
    names = ("ffpe", "frozen") if len(records[0]["losses"]) == 2 else ("train",)
    for i, name in enumerate(names):
        terms = {k: float(np.mean([r["losses"][i][k] for r in records])) for k in ("cls", "nmc", "lr")}
        out[name] = losses.LossBreakdown.from_terms(terms["cls"], terms["nmc"], terms["lr"]).to_dict()
    return out


def _selection_score(metrics: dict) -> float:
    return float(np.mean([m["accuracy"] for m in metrics.values()])) if metrics else 0.0


def fit(cfg: GlobalConfig, train_ds: PairedDataset, val_ds: PairedDataset | None = None, out_dir=None,
        resume=None, augmentation: AugmentationConfig = AugmentationConfig()) -> FitResult:
    """Epoch loop with per-epoch validation and best-checkpoint selection.

    Writes ``best.ckpt``, ``last.ckpt``, ``train_report.json`` and
    ``lr_curve.csv`` to ``out_dir`` when given. The best epoch maximises the
    mean patient-level validation accuracy over the run's modalities; ties go
    to the earliest epoch. A collapse stops training and is recorded in the
    report (``status == "collapsed"``).
    """
    from .inference import evaluate

    runner = _Runner(cfg, train_ds, augmentation)
    config = cfg.train
    out_dir = Path(out_dir) if out_dir is not None else None

    def validate():
        if val_ds is None or len(val_ds) == 0:
            return {}
        rep = evaluate(runner.models, val_ds, runner.models.modalities, soft_vote=config.soft_vote)
        return {m: {"accuracy": r["accuracy"], "precision_weighted": r["precision_weighted"],
                    "recall_weighted": r["recall_weighted"]} for m, r in rep["modalities"].items()}

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt["config_hash"] != cfg.hash():
            log.warning("resuming with a different configuration than the checkpoint was written with")
        report, best = runner.restore(ckpt)
        report["config"], report["config_hash"] = cfg.to_flat(), cfg.hash()
    else:
        initial = validate()
        report = {
            "format": REPORT_FORMAT,
            "config": cfg.to_flat(),
            "config_hash": cfg.hash(),
            "mode": config.mode,
            "steps_per_epoch": runner.steps_per_epoch,
            "initial_validation": initial,
            "epochs": [],
        }
        best = {"epoch": 0, "score": _selection_score(initial), "branches": runner.models.state_dicts()} if config.epochs == 0 else None

    while runner.state.epoch < config.epochs and not runner.state.collapsed:
        start = len(runner.state.history)
        for _ in range(runner.steps_per_epoch):
            runner.step()
            if runner.state.collapsed:
                break
        runner.state.epoch += 1
        records = runner.state.history[start:]
        entry = {"epoch": runner.state.epoch, "steps": len(records), "loss": _mean_breakdowns(records)}
        if not runner.state.collapsed:
            entry["validation"] = validate()
            score = _selection_score(entry["validation"])
            if best is None or score > best["score"]:
                best = {"epoch": runner.state.epoch, "score": score, "branches": runner.models.state_dicts()}
            log.info("epoch %d/%d loss=%s val=%.4f", runner.state.epoch, config.epochs, entry["loss"], score)
        report["epochs"].append(entry)
        if out_dir is not None and not runner.state.collapsed:
            save_checkpoint(out_dir / "last.ckpt", runner.checkpoint_payload(report, best))

    report["status"] = "collapsed" if runner.state.collapsed else "ok"
    report["collapse"] = runner.state.collapse
    report["best_epoch"] = best["epoch"] if best else None
    report["best_validation_score"] = best["score"] if best else None
    report["empty_class_batches"] = runner.state.empty_class_batches
    report["total_steps"] = runner.state.step
    report["step_losses"] = [
        {"step": r["step"], "lr": r["lr"], "losses": [{k: _json_float(v) for k, v in b.items()} for b in r["losses"]]}
        for r in runner.state.history
    ]
    if best is not None:
        runner.models.load_state_dicts(best["branches"])
    if out_dir is not None:
        if best is not None:
            save_checkpoint(out_dir / "best.ckpt", runner.checkpoint_payload(report, best))
        atomic_write_text(out_dir / "train_report.json", dumps(report))
        lines = ["step,lr"] + [f"{r['step']},{r['lr']!r}" for r in runner.state.history]
        atomic_write_text(out_dir / "lr_curve.csv", "\n".join(lines) + "\n")
    runner.models.eval()
    return FitResult(runner.models, report, runner.state)
