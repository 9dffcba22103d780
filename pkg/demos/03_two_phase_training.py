"""
Two-phase training on a phantom corpus.

Phase 1 trains on class-balanced patches. The network then sees tumor far
more often than it occurs, and it over-segments. Phase 2 freezes all hidden
layers and retrains only the output layer on naturally distributed patches,
which pulls the class priors back. Takes about three minutes on one core.

    python demos/03_two_phase_training.py
"""

import time

import numpy as np

from tumorseg import architectures as arch
from tumorseg import datapipe as dp
from tumorseg import evalmetrics as em
from tumorseg import inference as inf
from tumorseg import trainer as tr

vols = [dp.preprocess(dp.make_phantom(seed)) for seed in range(10)]
train, val, held_out = vols[:7], vols[7:8], vols[8:]


def describe(model, stage):
    pred_tumor = true_tumor = 0
    reports = []
    for vol in held_out:
        labels = inf.predict_volume(model, vol.data)
        brain = vol.brain_mask
        pred_tumor += np.count_nonzero(labels[brain])
        true_tumor += np.count_nonzero(vol.labels[brain])
        reports.append(em.score_labels(labels, vol.labels, vol.patient_id))
    dice = em.aggregate(reports)["regions"]["complete"]["dice"]["mean"]
    print(f"{stage}: predicted/true tumor voxels {pred_tumor / true_tumor:.2f}, "
          f"complete-region Dice {dice:.3f}")


t0 = time.perf_counter()
model, results = tr.train_model("TwoPathCNN", train, val, tr.DESK_PHASE1, arch.DESK_ARCH,
                                tr.DESK_PHASE2, phases="1")
for entry in results["phase1"].history:
    print(f"  phase 1 epoch {entry['epoch']}: alpha {entry['alpha']:.4f}, mu {entry['mu']:.2f}, "
          f"val NLL {entry['val_nll']:.3f}")
describe(model, "after phase 1")

model, results = tr.train_model("TwoPathCNN", train, val, tr.DESK_PHASE1, arch.DESK_ARCH,
                                tr.DESK_PHASE2, phases="2", init=model)
describe(model, "after phase 2")
print(f"total {time.perf_counter() - t0:.0f} s")
arch.save_segmenter(model, "two_path.gseg", arch.DESK_ARCH)
print("saved two_path.gseg")
