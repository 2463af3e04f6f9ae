"""Cycle-driven simulator of a mesh-NoC accelerator uncore.

Deterministic models of a 2D-mesh coherent interconnect (four credit-based
virtual channels, dimension-order routing, snoop multicast), a distributed
inclusive L2 with per-slice home-node directories, a CRC-protected
retransmitting chip-to-chip link with a DRAM endpoint, and transaction-level
traffic models of three heterogeneous compute tiles — verified against a
sequential memory oracle.
"""

from .config import ConfigError, SimConfig, load_config, parse_config
from .kernel import Simulator
from .system import System

__all__ = ["ConfigError", "SimConfig", "Simulator", "System",
           "load_config", "parse_config"]
__version__ = "0.1.0"
