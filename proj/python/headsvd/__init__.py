"""Weight-space interpretation and editing of vision-transformer attention heads."""

from ._core import (
    JudgeError,
    NumericalError,
    ValidationError,
    decompose,
    head_svd,
    inspect,
    model_id,
    nnls,
    read_tensor_file,
    run_cli,
    spectral_similarity,
    write_tensor_file,
)

__all__ = [
    "JudgeError",
    "NumericalError",
    "ValidationError",
    "decompose",
    "head_svd",
    "inspect",
    "model_id",
    "nnls",
    "read_tensor_file",
    "run_cli",
    "spectral_similarity",
    "write_tensor_file",
]
