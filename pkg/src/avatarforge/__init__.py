"""avatarforge: bake 3D-engine-ready head avatars from calibrated captures.

Pipeline stages (see the cli module): fit a blendshape head to a scanned
mesh, track per-frame expression/pose, bake a de-lit static UV texture from
multiple views, and train a compact dynamic-texture decoder that corrects the
eye/mouth regions. A synthetic ground-truth harness verifies every stage.
"""

__version__ = "0.1.0"

# BLAS worker threads busy-spin after each call and starve the numba kernels
# that alternate with the GEMMs throughout this package (4-6x slowdowns on
# small machines). The GEMMs here are small enough that one BLAS thread is
# never the bottleneck; numba keeps its own thread pool for the kernels.
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - fallback when threadpoolctl is absent
    pass

from .errors import (  # noqa: F401
    AvatarForgeError,
    CropFailureError,
    EmptyCorrespondenceError,
    InvalidInputError,
    InvalidStateError,
    NonConvergenceError,
    TrainingDivergedError,
)
