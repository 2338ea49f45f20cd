"""Camera+radar panoptic perception for small waterway scenes.

The package is deliberately self-contained: a numpy-backed reverse-mode
autodiff core, a deterministic synthetic scene generator, a dual-branch
point-clustering backbone with cross-modal fusion, detection/segmentation
heads, and a CLI for the whole synth -> train -> eval loop.
"""

import os

# Pin BLAS/OpenMP pools to one thread before numpy ever loads: tiny desk-scale
# matrices gain nothing from threading and bitwise run-to-run reproducibility
# requires a fixed reduction order.
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, "1")
del os, _var

__version__ = "0.1.0"
