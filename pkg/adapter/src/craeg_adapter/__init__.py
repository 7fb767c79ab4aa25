"""Host-side bridge for crowding-aware reweighting.

Exports token-embedding tables from model checkpoints into the shared
binary format and applies per-step reweighting through the `craeg serve`
line protocol, so any decoding loop can hook in without linking against
the engine.
"""

from .bridge import BridgeProtocolError, ReweightBridge
from .config import AdapterConfig
from .embedfile import write_embedding_file
from .export import UntiedCheckpointError, export_embeddings

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "BridgeProtocolError",
    "ReweightBridge",
    "UntiedCheckpointError",
    "export_embeddings",
    "write_embedding_file",
]
