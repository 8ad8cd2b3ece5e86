"""Low-rank plus sparse estimation, testing and detection of spatial
interference in gridded treatment panels."""

from .detection import (AteEstimate, DetectionResult, birs_detect, jaccard, mean_field_ate,
                        post_detection_ate, stepdown_detect)
from .estimation import FitConfig, FitResult, estimate_noise_levels, fit_profiling, select_lambda_cv
from .estimator import SpatialInterferenceModel
from .exceptions import InvalidInput, NonConvergence, NumericalFailure
from .inference import (BootstrapEnsemble, GlobalTestResult, bootstrap_null_ensemble, critical_value,
                        global_test, load_ensemble, save_ensemble)
from .panel import (CoefficientSet, GridShape, NeighborOrder, PanelData, flat_index, neighbor_order,
                    read_panel_csv, unflatten_index, write_panel_csv)
from .simulation import GroundTruth, SimConfig, run_monte_carlo

__version__ = "0.1.0"

__all__ = [
    "AteEstimate", "BootstrapEnsemble", "CoefficientSet", "DetectionResult", "FitConfig", "FitResult",
    "GlobalTestResult", "GridShape", "GroundTruth", "InvalidInput", "NeighborOrder", "NonConvergence",
    "NumericalFailure", "PanelData", "SimConfig", "SpatialInterferenceModel", "birs_detect", "bootstrap_null_ensemble",
    "critical_value", "estimate_noise_levels", "fit_profiling", "flat_index", "global_test", "jaccard",
    "load_ensemble", "mean_field_ate", "neighbor_order", "post_detection_ate", "read_panel_csv",
    "run_monte_carlo", "save_ensemble", "select_lambda_cv", "stepdown_detect", "unflatten_index",
    "write_panel_csv",
]
