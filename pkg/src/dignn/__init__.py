"""Implicit graph neural diffusion with learnable Laplacian geometry."""

from .data import Dataset, load_dataset, save_dataset, split, synth_sbm
from .equilibrium import (
    ConstraintSet,
    EquilibriumResult,
    build_constrained_system,
    build_markov,
    solve_constrained,
    solve_constrained_direct,
    solve_direct,
    solve_implicit_layer,
    stationary_distribution,
)
from .errors import DignnError
from .graph import Graph, build_graph, read_edge_list, write_edge_list
from .laplacian import (
    GeometryParams,
    Kind,
    LaplacianOperator,
    build_canonical,
    build_parameterized,
    dirichlet_energy,
    dirichlet_energy_gradient,
    graph_divergence,
    graph_gradient,
)
from .model import DIGNNModel, backward, forward, grad_check, load_checkpoint, save_checkpoint
from .oversmoothing import check_osi, check_ost, smoothing_trajectory
from .spectral import certify, lambda_max, spectral_bound
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
