"""Joint text+speech translation toolkit at toy scale.

Residual-VQ codec, seeded toy transformers, consecutive text-then-codec beam
search, layer beam search for the non-autoregressive acoustic model,
isochrony features and metrics, and multi-task example construction.
"""

from .errors import DecodeTimeout, InvalidArgument
from .numerics import SeededRng

__all__ = ["DecodeTimeout", "InvalidArgument", "SeededRng"]
__version__ = "0.1.0"
