"""Task-adaptive compression of a frozen teacher classifier into a small
convolutional network via differentiable architecture search."""

from .engine import (SearchConfig, SearchRunReport, enumerate_and_rank,
                     evaluate, search, train_child)
from .errors import (AdanasError, ConfigError, DataError, ShapeError,
                     TrainingError, ValidationError)
from .losses import (CostTable, LossConfig, attentive_kd_loss, build_cost_table,
                     efficiency_loss, kd_instance_loss, layer_map, total_loss)
from .ops import ALL_OPERATIONS, CellTopology, ChildGraph, OperationKind
from .space import ArchParams, ChildNet, SuperNet, derive_child
from .teacher import (ProbeSet, TeacherView, load_teacher, save_teacher,
                      synthetic_teacher, teacher_probe_probs, train_probes)

__version__ = "0.1.0"

__all__ = [
    "ALL_OPERATIONS", "AdanasError", "ArchParams", "CellTopology", "ChildGraph",
    "ChildNet", "ConfigError", "CostTable", "DataError", "LossConfig",
    "OperationKind", "ProbeSet", "SearchConfig", "SearchRunReport", "ShapeError",
    "SuperNet", "TeacherView", "TrainingError", "ValidationError",
    "attentive_kd_loss", "build_cost_table", "derive_child", "efficiency_loss",
    "enumerate_and_rank", "evaluate", "kd_instance_loss", "layer_map",
    "load_teacher", "save_teacher", "search", "synthetic_teacher",
    "teacher_probe_probs", "total_loss", "train_child", "train_probes",
]
