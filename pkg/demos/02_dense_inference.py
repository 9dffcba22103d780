"""
Whole-slice prediction in one forward pass.

Every layer is a convolution, so running the network on a padded slice
produces the label distribution of every pixel at once. The patch-by-patch
reference below recomputes each receptive field separately; both agree to
the last bit while the dense route is two orders of magnitude faster.

    python demos/02_dense_inference.py [architecture]
"""

import sys

from tumorseg import architectures as arch
from tumorseg import inference as inf

name = sys.argv[1] if len(sys.argv) > 1 else "TwoPathCNN"
model = arch.make_model(name, arch.DESK_ARCH, seed=0)
print(f"{model.name}: receptive field {model.receptive_field}, predicted pixel at offset {model.center}")

report = inf.bench_inference(model, (64, 64), repetitions=1)
print(f"64x64 slice, 1 thread: dense {report['dense_seconds']:.2f} s, "
      f"patch-by-patch {report['patchwise_seconds']:.2f} s, ratio {report['ratio']:.0f}x")
print("predictions identical:", report["equivalence_passed"],
      f"(max probability difference {report['max_probability_difference']:.1e})")
