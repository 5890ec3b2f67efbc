"""Parameter-efficient fine-tuning with stage-wise semantic prompt matching.

A frozen backbone is partitioned into stages; small trainable prompt-matcher
modules inserted between stages recurrently refine an interim semantic map
and use it to rewrite the feature handed to the next frozen stage. Everything
runs on a self-contained float64 tensor core with tape-based reverse-mode
differentiation, sized for CPU desk-scale experiments on synthetic
segmentation tasks.
"""

import os

# Kernel-level parallelism is capped before numpy loads its BLAS so that
# single-run results stay bitwise deterministic (PMSS_THREADS defaults to 1).
_threads = os.environ.get("PMSS_THREADS", "1")
try:
    _nthreads = max(1, int(_threads))
except ValueError:
    _nthreads = 1
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, str(_nthreads))

from . import tensor  # noqa: E402  (imports numpy; must come after the env setup)

try:
    import threadpoolctl

    # Keep a reference so the limit is not undone by garbage collection.
    _limiter = threadpoolctl.threadpool_limits(limits=_nthreads)
except Exception:  # pragma: no cover - threadpoolctl is a hard dep, but stay usable
    _limiter = None

from .tensor import Tensor, backward, no_grad  # noqa: E402

__all__ = ["Tensor", "backward", "no_grad", "tensor"]
__version__ = "0.1.0"
