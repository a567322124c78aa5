"""swamem: sliding-window attention fused with a test-time-trained memory.

Pure-numpy reference implementation with a minimal reverse-mode tape,
linear-memory baselines, an analytic cost model, and a toy distillation
harness. Everything is float64 and deterministic given a seed.
"""

from . import errors
from .tensor import Tape, Tensor, constant, count_macs

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "constant", "count_macs", "errors", "__version__"]
