"""Entity-linked liquidity analysis for token transfer data.

The pipeline identifies groups of blockchain addresses likely controlled by
one entity (funding patterns, collection patterns, behavioral similarity,
trading anomalies), refines them with clustering and outlier removal, and
recomputes liquidity risk indicators with entities collapsed to single
holders.
"""

from .model import (
    AddressLabel,
    EntityGroup,
    Evidence,
    GroupSet,
    IndicatorReport,
    LiquiditySnapshot,
    MarketSnapshot,
    TransactionGraph,
    Transfer,
    build_graph,
)

__version__ = "0.1.0"

__all__ = [
    "AddressLabel",
    "EntityGroup",
    "Evidence",
    "GroupSet",
    "IndicatorReport",
    "LiquiditySnapshot",
    "MarketSnapshot",
    "TransactionGraph",
    "Transfer",
    "build_graph",
    "__version__",
]
