"""Hand-image gender recognition and biometric identification toolkit."""
import os as _os

# HANDBIO_THREADS caps BLAS/OpenMP worker threads; it must be set before numpy loads
if _os.environ.get("HANDBIO_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["HANDBIO_THREADS"])

from . import container, dataset, experiments, features, imgproc, metrics, nn, splits, svm  # noqa: E402

__version__ = "0.1.0"
