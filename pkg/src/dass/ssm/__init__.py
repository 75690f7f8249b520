"""State-space kernels: numpy references and the batched torch scan."""
from .kernels import (
    DiscreteSsm,
    InvalidParameterError,
    ScanElement,
    ShapeError,
    SsmParams,
    associative_scan,
    conv_apply,
    conv_kernel,
    lti_backward,
    lti_scan,
    parallel_scan,
    recurrent_scan,
    scan_backward,
    selective_scan,
    sequential_fold,
    zoh_discretize,
    zoh_discretize_scalar,
)

__all__ = [
    "DiscreteSsm",
    "InvalidParameterError",
    "ScanElement",
    "ShapeError",
    "SsmParams",
    "associative_scan",
    "conv_apply",
    "conv_kernel",
    "lti_backward",
    "lti_scan",
    "parallel_scan",
    "recurrent_scan",
    "scan_backward",
    "selective_scan",
    "sequential_fold",
    "zoh_discretize",
    "zoh_discretize_scalar",
]
