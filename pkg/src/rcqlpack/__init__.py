"""Strip packing: environment, classical baselines, GA/SA and the RCQL policy.

Torch-dependent modules (``model``, ``trainer``, ``rollout``, ``checkpoint``)
are imported on demand.
"""
from rcqlpack.env import PackAction, check_invariants, gap_ratio, replay, reset, step
from rcqlpack.geometry import BinSpec, BoxDims, Placement

__version__ = "0.1.0"

__all__ = ["BinSpec", "BoxDims", "PackAction", "Placement", "check_invariants", "gap_ratio", "replay", "reset",
           "step", "__version__"]
