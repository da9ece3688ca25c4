"""Post-training mixed-precision quantization: simulation, sensitivity
analysis, BOPs-budgeted greedy search and AdaRound."""

__version__ = "0.1.0"

from .graph import Dataset, Graph, load_dataset, load_model, logits  # noqa: E402
from .quant import (  # noqa: E402
    Candidate,
    QuantizerSpec,
    calibrate,
    derive_quantizer_groups,
    quantized_forward,
)
from .search import BudgetSpec, pareto_curve, phase2, relative_bops  # noqa: E402
from .sensitivity import build_sensitivity_list, kendall_tau  # noqa: E402

__all__ = [
    "BudgetSpec", "Candidate", "Dataset", "Graph", "QuantizerSpec", "build_sensitivity_list",
    "calibrate", "derive_quantizer_groups", "kendall_tau", "load_dataset", "load_model", "logits",
    "pareto_curve", "phase2", "quantized_forward", "relative_bops",
]
