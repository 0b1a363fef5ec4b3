"""pelletflow: a continuous dataflow engine with elastic core allocation."""

__version__ = "0.1.0"

from .graph import (  # noqa: E402
    DataflowGraph, EdgeSpec, PelletSpec, PortSpec, SplitSpec, ValidationReport, WindowSpec,
    load_graph, parse_graph, serialize_graph, validate_graph, wiring_order,
)
from .message import Message, control, data, landmark  # noqa: E402
from .engine import Dataflow, FlakeMetrics, default_alpha, deploy  # noqa: E402
from .behaviors import PelletBehavior, PelletInterrupted, builtin_registry  # noqa: E402

__all__ = [
    "__version__", "DataflowGraph", "EdgeSpec", "PelletSpec", "PortSpec", "SplitSpec",
    "ValidationReport", "WindowSpec", "load_graph", "parse_graph", "serialize_graph",
    "validate_graph", "wiring_order", "Message", "control", "data", "landmark", "Dataflow",
    "FlakeMetrics", "default_alpha", "deploy", "PelletBehavior", "PelletInterrupted",
    "builtin_registry",
]
