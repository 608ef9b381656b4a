"""
Mutual training, evaluation and saliency on a small cohort
==========================================================

Two branches, one per tissue preparation, trained together on a few synthetic
patients, using the default 31-epoch schedule. About a minute on one CPU core.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from mcl import inference, synthetic, trainer

work = Path(tempfile.mkdtemp(prefix="mcl-demo-"))
spec = synthetic.SyntheticSpec(train_per_class=10, val_per_class=3, test_per_class=4)
prepared = synthetic.prepare(spec, work)
print("patients per split:", [len(ds.patients) for ds in (prepared.train, prepared.val, prepared.test)])

cfg = spec.base_config()
print("warm-restart lr at steps 0, 4, 8:", [trainer.lr_schedule(s, cfg.train, 8) for s in (0, 4, 8)])

result = trainer.fit(cfg, prepared.train, prepared.val, work / "run")
report = result.report
print("status:", report["status"], "best epoch:", report["best_epoch"])
for epoch in report["epochs"][::5]:
    print(epoch["epoch"], {m: round(v["total"], 3) for m, v in epoch["loss"].items()})

# %%
# Patient-level test metrics
# --------------------------
# Each patient's grade is the majority vote over its crops.
metrics = inference.evaluate(result.models, prepared.test)
for modality, entry in metrics["modalities"].items():
    print(modality, "accuracy", entry["accuracy"], "confusion", entry["confusion"])

# %%
# Class activation map and latent export
# --------------------------------------
bag = prepared.test.ffpe[prepared.test.patients[-1]]
cam = inference.compute_cam(result.models.branch("ffpe"), bag.crops[0], bag.grade)
inference.save_heatmap(work / "cam.png", cam, bag.crops[0])
print("cam peak at", np.unravel_index(cam.argmax(), cam.shape), "->", work / "cam.png")

rows = inference.export_latents(result.models, prepared.test, "z_nmc", work / "z_nmc.csv")
print(rows, "latent rows written")
print("cross-modal retrieval:", json.dumps(synthetic.cross_modal_stats(result.models, prepared.test, cfg.train)))
