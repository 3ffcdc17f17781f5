"""
Subject identification with an SVM ensemble
===========================================

Each of four feature views gets a one-vs-all bank of calibrated SVMs.  The
sum of their log-posteriors picks the subject, and the same fused scores feed
a FAR/FRR sweep.
"""

import numpy as np

from handbio.dataset import synth_dataset
from handbio.experiments import PipelineConfig, run_id_experiment

ds = synth_dataset(n_subjects=20, images_per_subject=20, subject_signal=0.8, seed=0)
cfg = PipelineConfig.desk()

# force=True: 20 subjects is below the usual 80/100/120 choices
res = run_id_experiment(ds, 20, "dorsal", "ensemble", seeds=[0], config=cfg, force=True)
print(res.header, "top-1", round(res.mean, 3))

rep = res.report
for t, far, frr in zip(rep.thresholds, rep.far, rep.frr):
    print(f"t={t:+.4f}  FAR={far:.3f}  FRR={frr:.3f}")
print("EER on the fixed grid", rep.eer, "(extrapolated)" if rep.eer_extrapolated else "")

full = res.report_full
print(f"EER over all scores {full.eer:.4f}, AUC {full.auc:.4f}")

# per-view accuracy shows what each bank adds
ids, classes, views = res.scores[0]
subject = {r.image_path: r.subject_id for r in ds.records}
truth = np.array([subject[p] for p in ids])
for view, S in views.items():
    acc = np.mean(np.asarray(classes)[S.argmax(axis=1)] == truth)
    print(f"{view:8s} top-1 {acc:.3f}")
