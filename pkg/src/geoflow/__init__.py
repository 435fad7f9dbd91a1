"""geoflow: calibrated synthetic zone-flow panels, local regression, forest
and graph learners, hybrid ensembling, explainability, and spatial
diagnostics, with a configuration-driven pipeline CLI."""

__version__ = "0.1.0"

from .core import (
    ATTRIBUTE_NAMES,
    MODES,
    RngSeed,
    SpatialWeights,
    SplitSpec,
    Zone,
    ZonePanel,
    build_knn_weights,
    split_panel,
)

__all__ = [
    "ATTRIBUTE_NAMES",
    "MODES",
    "RngSeed",
    "SpatialWeights",
    "SplitSpec",
    "Zone",
    "ZonePanel",
    "build_knn_weights",
    "split_panel",
    "__version__",
]
