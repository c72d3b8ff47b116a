"""Balanced low-bitwidth quantization toolkit."""

from .balanced import (EqualizerSpec, balanced_quantize, equalize_backward, equalize_exact,
                       percentile_thresholds, recursive_equalize, verify_balance_bound)
from .bitops import BitPlaneMatrix, dot_1bit, dot_multibit, gemm_multibit, pack, unpack
from .fixed import ThresholdTable, eval_layer_fixed, precompute_thresholds
from .metrics import effective_bitwidth, layer_mean_effective_bitwidth
from .quant import QuantizedTensor, q_k, quant_k, round_to_zero
from .tensor import Tensor, backward

__version__ = "0.1.0"
