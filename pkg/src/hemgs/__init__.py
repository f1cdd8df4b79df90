"""Learned conditional entropy coding for anchor-based Gaussian splatting scenes."""

from .codec import StorageReport, compress, compress_with_trace, decompress, inspect
from .context import coding_order, context_stats, select_context, select_contexts
from .entropy import GaussianParams, quantize, rate_bits, symbol_pmf
from .errors import (BitstreamFormatError, CausalityError, ChecksumError, DecodeError,
                     DigestMismatchError, DivergenceError, DuplicateVoxelError,
                     EscapeOverflowError, HemgsError, SceneFormatError, SymbolRangeError,
                     TruncatedStreamError)
from .model import HemgsModel
from .rangecoder import DiscretizedCdf, build_cdf, decode_symbols, encode_symbols
from .scene import Anchor, AnchorScene, SynthSpec, load_scene, save_scene, synth_scene
from .trainer import LossBreakdown, TrainConfig, eval_rd, train

__version__ = "0.1.0"

__all__ = [
    "Anchor", "AnchorScene", "BitstreamFormatError", "CausalityError", "ChecksumError",
    "DecodeError", "DigestMismatchError", "DiscretizedCdf", "DivergenceError",
    "DuplicateVoxelError", "EscapeOverflowError", "GaussianParams", "HemgsError", "HemgsModel",
    "LossBreakdown", "SceneFormatError", "StorageReport", "SymbolRangeError", "SynthSpec",
    "TrainConfig", "TruncatedStreamError", "build_cdf", "coding_order", "compress",
    "compress_with_trace", "context_stats", "decode_symbols", "decompress", "encode_symbols",
    "eval_rd", "inspect", "load_scene", "quantize", "rate_bits", "save_scene", "select_context",
    "select_contexts", "symbol_pmf", "synth_scene", "train",
]
