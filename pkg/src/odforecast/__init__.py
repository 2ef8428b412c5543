"""Origin-destination demand forecasting on sparse urban grids.

The pipeline: coarsen the cell grid into super-cells by flow-aware label
propagation, embed coarse OD slices permutation-invariantly, run an
attention encoder over super-cells and a masked cross-attention decoder back
to cells, and read out zero-inflated negative binomial parameters per OD
pair. Classical baselines and sparsity-aware metrics live in `evaluation`.
"""

from .data import (Assignment, CellGrid, DataError, NumericalError, ODTensor,
                   POIMatrix, aggregate_poi, coarsen_tensor, load_assignment_csv,
                   load_grid_csv, load_od_csv, load_poi_csv, mode_product,
                   save_assignment_csv, save_grid_csv, save_od_csv, save_poi_csv,
                   sparsity_rate)
from .synth import SynthConfig, build_hex_grid, generate_synthetic
from .coarsening import (CoarseningParams, CoarsenResult, FlowStats,
                         adjusted_rand_index, assign, build_geo_transition,
                         build_sem_transition, coarsen, compute_flow_stats,
                         downsample_low_spatial, downsample_mean_pool,
                         low_spatial_assignment, propagate, select_dense)
from .zinb import ZINBParams
from .model import ForecastModel, ModelConfig, count_params, init_params
from .training import (TrainConfig, TrainResult, WindowDataset, lr_at,
                       make_windows, train)
from .evaluation import (HistoricalAverage, MetricReport, PerFlowLinear,
                         compare, evaluate_baseline, evaluate_model,
                         fit_linear, metrics)

__version__ = "0.1.0"

__all__ = [
    "Assignment", "CellGrid", "DataError", "NumericalError", "ODTensor",
    "POIMatrix", "aggregate_poi", "coarsen_tensor", "load_assignment_csv",
    "load_grid_csv", "load_od_csv", "load_poi_csv", "mode_product",
    "save_assignment_csv", "save_grid_csv", "save_od_csv", "save_poi_csv",
    "sparsity_rate",
    "SynthConfig", "build_hex_grid", "generate_synthetic",
    "CoarseningParams", "CoarsenResult", "FlowStats", "adjusted_rand_index",
    "assign", "build_geo_transition", "build_sem_transition", "coarsen",
    "compute_flow_stats", "downsample_low_spatial", "downsample_mean_pool",
    "low_spatial_assignment", "propagate", "select_dense",
    "ZINBParams",
    "ForecastModel", "ModelConfig", "count_params", "init_params",
    "TrainConfig", "TrainResult", "WindowDataset", "lr_at",
    "make_windows", "train",
    "HistoricalAverage", "MetricReport", "PerFlowLinear", "compare",
    "evaluate_baseline", "evaluate_model", "fit_linear", "metrics",
    "__version__",
]
