"""MixNN: decentralized per-layer training over an onion-routed cascade."""

__version__ = "0.1.0"

from .crypto import Address, KeyPair, KeyRecord, gen_keypair, seal, open_sealed
from .designer import (CrashDetected, Designer, ProvisionPlan, RunMetrics,
                       TrainingConfig)
from .directory import Directory, DirectoryConflict
from .onion import CascadeEntry, CascadeSpec, OpCode

__all__ = [
    "Address", "KeyPair", "KeyRecord", "gen_keypair", "seal", "open_sealed",
    "CrashDetected", "Designer", "ProvisionPlan", "RunMetrics", "TrainingConfig",
    "Directory", "DirectoryConflict",
    "CascadeEntry", "CascadeSpec", "OpCode",
    "__version__",
]
