"""
From a slide image to training crops
====================================

Segment tissue, cut it into fixed tiles, drop tiles without enough stained
blobs, then split each survivor into non-overlapping crops. The slide comes from
the synthetic generator, so its true tissue mask is known.
"""

import numpy as np

from mcl import data, synthetic

spec = synthetic.SyntheticSpec()
rng = np.random.default_rng(0)
latent = synthetic._latent(spec, 2, rng)
slide, truth = synthetic.render_slide(spec, 2, latent, "frozen", rng, with_mask=True)
print("slide", slide.shape)

mask = data.segment_tissue(slide)
full = mask.full_resolution(slide.shape)
print(f"Otsu threshold on saturation: {mask.threshold:.3f}")
print(f"IoU against the analytic mask: {(full & truth).sum() / (full | truth).sum():.3f}")

# %%
# Tiles, blob filter, crops
# -------------------------
tiles = data.tile_slide(slide, mask, spec.tile_size)
kept = [t for t in tiles if data.blob_filter(t, mask.threshold, min_blob_area=0.01 * spec.tile_size**2)]
print(f"{len(tiles)} tiles of {spec.tile_size}px, {len(kept)} kept")
crops = [c for t in kept for _, c in data.crop_subregions(t.pixels, spec.image_size)]
print(f"{len(crops)} crops of {spec.image_size}px")

# A blank tile never passes the filter.
print("blank tile kept?", data.blob_filter(np.full((250, 250, 3), 245, np.uint8), threshold=mask.threshold))

# At the default geometry a 1000x1000 slide of tissue gives 4 tiles and 16 crops.
square = data.tile_slide(np.zeros((1000, 1000, 3), np.uint8), np.ones((1000, 1000), bool), 500)
print(len(square), "tiles,", sum(len(data.crop_subregions(t.pixels, 224)) for t in square), "crops")

# %%
# Patient-level split
# -------------------
# Grades are stratified and no patient crosses partitions.
cohort = {f"P{i:03d}": g for i, g in enumerate([0] * 27 + [1] * 25 + [2] * 48)}
split = data.split_dataset(cohort, seed=0)
data.check_no_leakage(split)
print("train/val/test sizes:", [len(p) for p in split])
