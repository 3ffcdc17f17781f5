"""
Preprocessing and texture features on a synthetic hand image
=============================================================

Split an image into a smooth base and a detail layer, then describe the
detail layer with a uniform LBP histogram.
"""

import numpy as np

from handbio.dataset import synth_dataset
from handbio.features import lbp_histogram
from handbio.imgproc import GuidedFilterParams, detail_luma, preprocess, rgb_to_luma, select_frames, ssim

ds = synth_dataset(n_subjects=2, images_per_subject=2, seed=0)
rec = ds.records[0]
img = ds.images[rec.image_path]
print(rec.subject_id, rec.gender, rec.side, img.shape)

# edge-preserving smoothing; the detail layer is what division by it leaves
gf = GuidedFilterParams(radius=4, regularization=0.01)
smooth, high = detail_luma(img, gf)
print("smooth range", smooth.min().round(3), smooth.max().round(3))
print("detail luma range", high.min(), high.max())

# the two network inputs at a small size
low, high_in = preprocess(img, gf, size=32)
print("network inputs", low.shape, high_in.shape)

# 59-bin uniform LBP histogram of the detail layer
h = lbp_histogram(high)
print("LBP bins", len(h), "sum", round(float(h.values.sum()), 6))
print("top bins", np.argsort(h.values)[::-1][:5])

# frame selection: a near-duplicate frame is dropped, a new pose is kept
other = ds.images[ds.records[2].image_path]
frames = [img, np.clip(img + 0.002, 0, 1), other, other]
print("SSIM to near-duplicate", round(ssim(rgb_to_luma(img), rgb_to_luma(frames[1])), 4))
print("kept frames", select_frames(frames, threshold=0.9))
