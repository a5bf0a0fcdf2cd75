"""Training-free open-vocabulary segmentation inference on exported tensors:
orthogonal key-to-query alignment inside the last attention block, cosine
patch-text scoring, and text-aware Laplacian refinement solved by conjugate
gradients. Tensors travel in the bit-exact PRL1 container format."""

from .config import PipelineConfig, load_config
from .container import (
    TensorContainer,
    TensorEntry,
    container_from_arrays,
    load_container,
    read_container,
    save_container,
    write_container,
)
from .errors import (
    DimensionError,
    FormatError,
    PearlError,
    PlanningError,
    SerializationError,
    SolverError,
    ValidationError,
)
from .pipeline import RunResult, WindowPlan, fuse, plan_windows, run
from .types import HeadTensors, LabelMap, LogitGrid, PrototypeMatrix

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "load_config",
    "TensorContainer",
    "TensorEntry",
    "container_from_arrays",
    "load_container",
    "read_container",
    "save_container",
    "write_container",
    "PearlError",
    "FormatError",
    "SerializationError",
    "ValidationError",
    "DimensionError",
    "PlanningError",
    "SolverError",
    "RunResult",
    "WindowPlan",
    "fuse",
    "plan_windows",
    "run",
    "HeadTensors",
    "LabelMap",
    "LogitGrid",
    "PrototypeMatrix",
    "__version__",
]
