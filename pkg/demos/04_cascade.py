"""
Cascading a trained two-pathway network.

The first network's per-pixel class probabilities become extra feature maps
of a second network, here joined right before the output layer. The first
network stays frozen while the second one trains. Run demo 03 first, or the
script trains a quick first network itself.

    python demos/04_cascade.py
"""

from pathlib import Path

from tumorseg import architectures as arch
from tumorseg import datapipe as dp
from tumorseg import evalmetrics as em
from tumorseg import inference as inf
from tumorseg import trainer as tr

vols = [dp.preprocess(dp.make_phantom(seed)) for seed in range(10)]
train, val, held_out = vols[:7], vols[7:8], vols[8:]

if Path("two_path.gseg").exists():
    first = arch.load_segmenter("two_path.gseg")
else:
    quick = tr.with_options(tr.DESK_PHASE1, max_epochs=2)
    first, _ = tr.train_model("TwoPathCNN", train, val, quick, arch.DESK_ARCH, tr.DESK_PHASE2)

digest = first.store.digest()
quick = tr.with_options(tr.DESK_PHASE1, max_epochs=2, epoch_patches=2000)
cascade, _ = tr.train_cascade("MFCascadeCNN", first, train, val, quick, arch.DESK_ARCH,
                              tr.with_options(tr.DESK_PHASE2, max_epochs=2))
print("first network unchanged by cascade training:", first.store.digest() == digest)
print(f"cascade receptive field {cascade.receptive_field}")

for name, model in (("TwoPathCNN", first), ("MFCascadeCNN", cascade)):
    reports = [em.score_labels(inf.remove_flat_blobs(inf.predict_volume(model, v.data)), v.labels)
               for v in held_out]
    summary = em.aggregate(reports)["regions"]
    print(f"{name:13s} Dice complete {summary['complete']['dice']['mean']:.3f}, "
          f"core {summary['core']['dice']['mean']:.3f}, "
          f"enhancing {summary['enhancing']['dice']['mean']:.3f}")
