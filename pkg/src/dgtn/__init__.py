"""Graph/transformer co-learning with bidirectional diffusion for ddG prediction."""

from . import autodiff, diffusion, fusion, gnn, numerics, protein_io, transformer
from . import model, train, verify
from .diffusion import DiffusionConfig
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .protein_io import (
    MutationRecord,
    Structure,
    StructureGraph,
    SyntheticSpec,
    build_contact_graph,
    load_mutation_dataset,
    parse_structure,
    synthesize_dataset,
)
from .train import Metrics, TrainConfig, ablation_experiment, evaluate, train as fit

__all__ = [
    "autodiff",
    "diffusion",
    "fusion",
    "gnn",
    "model",
    "numerics",
    "protein_io",
    "train",
    "transformer",
    "verify",
    "DiffusionConfig",
    "ModelConfig",
    "ModelParams",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "MutationRecord",
    "Structure",
    "StructureGraph",
    "SyntheticSpec",
    "build_contact_graph",
    "load_mutation_dataset",
    "parse_structure",
    "synthesize_dataset",
    "Metrics",
    "TrainConfig",
    "ablation_experiment",
    "evaluate",
    "fit",
]

__version__ = "0.1.0"
