"""Partitioned oblivious RAM with pluggable server backends."""

from .blockstore import (FileBlockStore, Geometry, LevelRef, LevelUpload,
                         MemoryBlockStore, ProtocolError, TransferStats)
from .client import OramClient, READ, WRITE
from .config import OramConfig, load_config
from .crypto import IntegrityViolation
from .oram import Oram
from .recursion import RecursiveOram
from .remote import RemoteBlockStore, TransportError, serve, start_server
from .types import Block, DUMMY_ID, Position

__version__ = "0.1.0"

__all__ = [
    "Block", "DUMMY_ID", "FileBlockStore", "Geometry", "IntegrityViolation",
    "LevelRef", "LevelUpload", "MemoryBlockStore", "Oram", "OramClient",
    "OramConfig", "Position", "ProtocolError", "READ", "RecursiveOram",
    "RemoteBlockStore", "TransferStats", "TransportError", "WRITE",
    "load_config", "serve", "start_server", "__version__",
]
