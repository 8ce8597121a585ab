"""Split-federated prompt tuning at desk scale: a deterministic protocol
simulator with exact byte accounting, plus the matching analytic cost model."""

from .config import ExperimentConfig, ValidationError, load_config
from .costmodel import CostParams, CostTriple, cost_sweep, crossover_model_size, fl_costs, sfl_costs, sfprompt_costs
from .data import Dataset, PartitionPlan, el2n_scores, gen_synthetic, partition_dirichlet, partition_iid, prune
from .model import ModelConfig, ModelPartition, ParamSet, PromptParams, SplitSpec, build_model, split_model
from .server import RoundReport, SimulationResult, aggregate, evaluate, run_training, select_clients
from .simnet import LinkConfig, SimClock, TrafficLedger
from .tensor import Tape, finite_diff_grad, sgd_step, softmax_cross_entropy

__version__ = "0.1.0"

__all__ = [
    "CostParams", "CostTriple", "Dataset", "ExperimentConfig", "LinkConfig",
    "ModelConfig", "ModelPartition", "ParamSet", "PartitionPlan", "PromptParams",
    "RoundReport", "SimClock", "SimulationResult", "SplitSpec", "Tape",
    "TrafficLedger", "ValidationError", "aggregate", "build_model", "cost_sweep",
    "crossover_model_size", "el2n_scores", "evaluate", "finite_diff_grad",
    "fl_costs", "gen_synthetic", "load_config", "partition_dirichlet",
    "partition_iid", "prune", "run_training", "select_clients", "sfl_costs",
    "sfprompt_costs", "sgd_step", "softmax_cross_entropy", "split_model",
]
