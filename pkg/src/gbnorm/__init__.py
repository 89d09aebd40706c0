"""Generalized batch normalization with risk-theoretic deviation measures."""
from .deviation import PRESETS, DeviationSpec, DevEval, evaluate, parse_spec
from .gbn import GbnState, bpoe_equivalence_check, gbn_backward, gbn_forward, sparsity_fraction
from .risk import bpoe, bpoe_tail_form, quantile, superquantile, superquantile_tail_weights
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "DeviationSpec",
    "DevEval",
    "evaluate",
    "parse_spec",
    "GbnState",
    "bpoe_equivalence_check",
    "gbn_backward",
    "gbn_forward",
    "sparsity_fraction",
    "bpoe",
    "bpoe_tail_form",
    "quantile",
    "superquantile",
    "superquantile_tail_weights",
    "Tape",
    "Tensor",
    "backward",
]
