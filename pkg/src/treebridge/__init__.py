"""Tree-bridging MCMC over site-indexed genealogies with recombination."""

from .bridge import Block, Segment, select_segments
from .chain import (
    ChainConfig,
    ChainResult,
    ChainState,
    initial_chain_state,
    log_posterior,
    run_chain,
    write_samples,
    write_trace,
)
from .errors import (
    ConfigError,
    ConsistencyError,
    DataFormatError,
    TreeBridgeError,
)
from .model import ModelParams, simulate_smc
from .trees import SprOp, Tree, apply_spr, parse_newick, serialize_newick

__version__ = "0.1.0"

__all__ = [
    "Block",
    "ChainConfig",
    "ChainResult",
    "ChainState",
    "ConfigError",
    "ConsistencyError",
    "DataFormatError",
    "ModelParams",
    "Segment",
    "SprOp",
    "Tree",
    "TreeBridgeError",
    "apply_spr",
    "initial_chain_state",
    "log_posterior",
    "parse_newick",
    "run_chain",
    "select_segments",
    "serialize_newick",
    "simulate_smc",
    "write_samples",
    "write_trace",
    "__version__",
]
