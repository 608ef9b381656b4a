import json
import math

import numpy as np
import pytest
import torch

from mcl import trainer
from mcl.data import sample_batch, sample_paired_batch
from mcl.model import build_branch, build_dual, derive_seed

from .factories import dataset, tiny_config


class TestSchedule:
    def test_default_start_and_midpoint(self):
        cfg = tiny_config(lr_max=1.6e-4).train
        assert trainer.lr_schedule(0, cfg, 100) == 1.6e-4
        assert trainer.lr_schedule(50, cfg, 100) == pytest.approx(0.8e-4, abs=1e-15)

    def test_restart_returns_to_max(self):
        cfg = tiny_config(lr_max=1.6e-4).train
        # windows of 10, 20, 40 steps
        for boundary in (10, 30, 70):
            assert trainer.lr_schedule(boundary, cfg, 10) == 1.6e-4
            assert trainer.lr_schedule(boundary - 1, cfg, 10) < 1e-5

    def test_matches_torch_scheduler(self):
        cfg = tiny_config(lr_max=1.6e-4, lr_min=1e-6, restart_mult=2).train
        opt = torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=cfg.lr_max)
        sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=7, T_mult=2, eta_min=cfg.lr_min)
        for step in range(200):
            assert trainer.lr_schedule(step, cfg, 7) == pytest.approx(opt.param_groups[0]["lr"], rel=1e-12, abs=1e-18)
            opt.step()
            sched.step()

    def test_bounds(self):
        cfg = tiny_config(lr_max=1e-3, lr_min=1e-5).train
        lrs = [trainer.lr_schedule(s, cfg, 3) for s in range(300)]
        assert max(lrs) <= 1e-3 and min(lrs) >= 1e-5

    def test_negative_step(self):
        with pytest.raises(Exception):
            trainer.lr_schedule(-1, tiny_config().train)


def run_mutual(cfg, ds, steps, seed=0, frozen_override=None):
    dual = build_dual(cfg.seed, channels=cfg.backbone_channels)
    opts = (trainer._make_optimizer(dual.ffpe.parameters(), cfg), trainer._make_optimizer(dual.frozen.parameters(), cfg))
    state = trainer.TrainState()
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(steps):
        batch = sample_paired_batch(ds, cfg.batch_size, rng)
        if frozen_override is not None:
            batch.frozen_images = frozen_override(batch.frozen_images)
        history.append(trainer.train_step(dual, opts, batch, cfg, state, 5))
    return dual, state, history


class TestMutualStep:
    def test_ce_only_equals_two_single_runs(self):
        cfg = tiny_config(loss_weights=(1, 0, 0)).train
        ds = dataset()
        dual, _, _ = run_mutual(cfg, ds, 20)

        single = {m: build_branch(derive_seed(cfg.seed, i), channels=cfg.backbone_channels) for i, m in enumerate(("ffpe", "frozen"))}
        opts = {m: trainer._make_optimizer(b.parameters(), cfg) for m, b in single.items()}
        states = {m: trainer.TrainState() for m in single}
        rng = np.random.default_rng(0)
        for _ in range(20):
            batch = sample_paired_batch(ds, cfg.batch_size, rng)
            for m, images in (("ffpe", batch.ffpe_images), ("frozen", batch.frozen_images)):
                trainer.single_step(single[m], opts[m], images, batch.labels, cfg, states[m], 5)
        for m in ("ffpe", "frozen"):
            for p, q in zip(dual.branch(m).parameters(), single[m].parameters()):
                assert torch.max(torch.abs(p - q)).item() <= 1e-6

    def test_frozen_pixels_do_not_reach_ffpe_without_coupling(self):
        ds = dataset()
        noise = lambda x: np.random.default_rng(9).integers(0, 256, x.shape, dtype=np.uint8)  # noqa: E731
        cfg = tiny_config(loss_weights=(1, 0, 0)).train
        a, _, _ = run_mutual(cfg, ds, 5)
        b, _, _ = run_mutual(cfg, ds, 5, frozen_override=noise)
        assert all(torch.equal(p, q) for p, q in zip(a.ffpe.parameters(), b.ffpe.parameters()))
        coupled = tiny_config(loss_weights=(1, 1, 0)).train
        a, _, _ = run_mutual(coupled, ds, 5)
        b, _, _ = run_mutual(coupled, ds, 5, frozen_override=noise)
        assert not all(torch.equal(p, q) for p, q in zip(a.ffpe.parameters(), b.ffpe.parameters()))

    def test_zero_lr_leaves_parameters(self):
        cfg = tiny_config(lr_max=0.0).train
        before = build_dual(cfg.seed, channels=cfg.backbone_channels).state_dict()
        dual, _, hist = run_mutual(cfg, dataset(), 3)
        assert all(torch.equal(before[k], v) for k, v in dual.state_dict().items())
        assert all(math.isfinite(h[0].total) for h in hist)

    def test_deterministic(self):
        cfg = tiny_config().train
        _, _, h1 = run_mutual(cfg, dataset(), 5)
        _, _, h2 = run_mutual(cfg, dataset(), 5)
        assert h1 == h2

    def test_breakdown_additive(self):
        _, state, hist = run_mutual(tiny_config().train, dataset(), 3)
        for la, lb in hist:
            for b in (la, lb):
                assert b.total == pytest.approx(b.cls + b.nmc + b.lr, abs=1e-12)
            assert la.nmc == lb.nmc and la.lr == lb.lr

    def test_alternating_updates_run(self):
        _, state, hist = run_mutual(tiny_config(alternating_updates=True).train, dataset(), 3)
        assert state.step == 3 and not state.collapsed

    @pytest.mark.parametrize("contrastive", ["nt-xent", "kl"])
    def test_baseline_losses(self, contrastive):
        _, state, hist = run_mutual(tiny_config(contrastive=contrastive).train, dataset(), 3)
        assert not state.collapsed and hist[-1][0].nmc > 0

    def test_overflow_temperature_collapses(self):
        cfg = tiny_config(tau=0.001).train
        dual, state, hist = run_mutual(cfg, dataset(), 2)
        assert state.collapsed and state.collapse["step"] == 0
        assert state.collapse["reason"] == "non-finite loss"


class TestSingle:
    def test_never_reads_other_modality(self):
        ds = dataset()
        result = trainer.fit(tiny_config(mode="single-ffpe", epochs=2), ds, ds)
        assert sum(b.reads for b in ds.bags("frozen")) == 0
        assert sum(b.reads for b in ds.bags("ffpe")) > 0
        assert result.models.modalities == ("ffpe",)

    def test_zero_lr(self):
        cfg = tiny_config(mode="single-ffpe", lr_max=0.0).train
        net = build_branch(0, channels=cfg.backbone_channels)
        before = {k: v.clone() for k, v in net.state_dict().items()}
        bags = dataset(modalities=("ffpe",))
        batch = sample_batch(bags, 4, np.random.default_rng(0))
        trainer.single_step(net, trainer._make_optimizer(net.parameters(), cfg), batch.images, batch.labels, cfg, trainer.TrainState())
        assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())

    def test_loss_decreases_on_separable_data(self):
        cfg = tiny_config(mode="single-ffpe", lr_max=5e-3, restart_period_epochs=100).train
        net = build_branch(0, channels=cfg.backbone_channels)
        opt = trainer._make_optimizer(net.parameters(), cfg)
        bags = dataset(modalities=("ffpe",))
        rng, state = np.random.default_rng(0), trainer.TrainState()
        losses = []
        for _ in range(50):
            batch = sample_batch(bags, 8, rng)
            losses.append(trainer.single_step(net, opt, batch.images, batch.labels, cfg, state, 1).cls)
        assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])

    def test_mixed_with_one_modality_is_single(self):
        ds = dataset()
        single_bags = ds.bags("ffpe")
        cfg_single = tiny_config(mode="single-ffpe").train
        cfg_mixed = tiny_config(mode="mixed").train
        results = []
        for cfg in (cfg_single, cfg_mixed):
            net = build_branch(derive_seed(cfg.seed, 0), channels=cfg.backbone_channels)
            opt = trainer._make_optimizer(net.parameters(), cfg)
            rng, state = np.random.default_rng(3), trainer.TrainState()
            for _ in range(5):
                batch = sample_batch(single_bags, 4, rng)
                trainer.single_step(net, opt, batch.images, batch.labels, cfg, state, 5)
            results.append(net.state_dict())
        assert all(torch.equal(results[0][k], results[1][k]) for k in results[0])

    def test_mixed_shares_one_network(self):
        ds = dataset()
        result = trainer.fit(tiny_config(mode="mixed"), ds, ds)
        assert result.models.branch("ffpe") is result.models.branch("frozen")
        assert sum(b.reads for b in ds.bags("frozen")) > 0


class TestFit:
    def test_zero_epochs(self, tmp_path):
        result = trainer.fit(tiny_config(epochs=0), dataset(), dataset(seed=1), tmp_path)
        report = json.loads((tmp_path / "train_report.json").read_text())
        assert report["epochs"] == [] and report["initial_validation"]["ffpe"]["accuracy"] >= 0
        assert report["status"] == "ok" and report["best_epoch"] == 0 and result.state.step == 0

    def test_outputs_and_report(self, tmp_path):
        cfg = tiny_config(epochs=2)
        trainer.fit(cfg, dataset(), dataset(seed=1), tmp_path)
        report = json.loads((tmp_path / "train_report.json").read_text())
        assert report["config_hash"] == cfg.hash() and report["format"] == "mcl-train-report-v1"
        assert len(report["epochs"]) == 2 and report["total_steps"] == 2 * report["steps_per_epoch"]
        lines = (tmp_path / "lr_curve.csv").read_text().splitlines()
        assert lines[0] == "step,lr" and len(lines) == 1 + report["total_steps"]
        models = trainer.load_models(tmp_path / "best.ckpt")
        assert models.mode == "mutual" and models.modalities == ("ffpe", "frozen")

    def test_same_seed_same_report_bytes(self, tmp_path):
        for d in ("a", "b"):
            trainer.fit(tiny_config(epochs=2), dataset(), dataset(seed=1), tmp_path / d)
        assert (tmp_path / "a" / "train_report.json").read_bytes() == (tmp_path / "b" / "train_report.json").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        train, val = dataset(), dataset(seed=1)
        full = trainer.fit(tiny_config(epochs=3, augment=True), train, val, tmp_path / "full")
        trainer.fit(tiny_config(epochs=2, augment=True), train, val, tmp_path / "part")
        resumed = trainer.fit(tiny_config(epochs=3, augment=True), train, val, tmp_path / "resumed",
                              resume=tmp_path / "part" / "last.ckpt")
        a, b = full.report["step_losses"], resumed.report["step_losses"]
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            for la, lb in zip(ra["losses"], rb["losses"]):
                for k in la:
                    assert abs(la[k] - lb[k]) <= 1e-6
        for p, q in zip(full.models.branch("ffpe").parameters(), resumed.models.branch("ffpe").parameters()):
            assert torch.max(torch.abs(p - q)).item() <= 1e-6

    def test_best_epoch_ties_go_earliest(self, tmp_path):
        # well-separated colours: validation saturates early and stays there
        result = trainer.fit(tiny_config(epochs=4, loss_weights=(1, 0, 0)), dataset(), dataset(seed=1), tmp_path)
        scores = [trainer._selection_score(e["validation"]) for e in result.report["epochs"]]
        assert result.report["best_epoch"] == 1 + scores.index(max(scores))

    def test_collapse_recorded(self, tmp_path):
        result = trainer.fit(tiny_config(tau=0.001, epochs=2), dataset(), dataset(seed=1), tmp_path)
        report = json.loads((tmp_path / "train_report.json").read_text())
        assert result.collapsed and report["status"] == "collapsed"
        assert report["collapse"]["step"] == 0 and report["collapse"]["reason"] == "non-finite loss"
