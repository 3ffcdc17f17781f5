"""
Gender recognition with the two-stream network
==============================================

Train the small preset on a synthetic corpus and compare the network's own
softmax with a linear SVM on its fused features.
"""

from handbio.dataset import synth_dataset
from handbio.experiments import PipelineConfig, run_gender_experiment

# 20 subjects with 20 dorsal images each; gender drives a visible cue
ds = synth_dataset(n_subjects=20, images_per_subject=20, gender_signal=0.8, seed=0)
cfg = PipelineConfig.desk()

log = []
res = run_gender_experiment(ds, "dorsal", seeds=[0], config=cfg, n_train=120, n_test=80,
                            log=log)
for seed, method, acc in res.rows:
    print(f"seed {seed} {method:16s} accuracy {acc:.3f}")

# the last row of each stage is an eval-mode pass over the training images
for row in log:
    if row[2] == "eval":
        print("end of stage", row)
