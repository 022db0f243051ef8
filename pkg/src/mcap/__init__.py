"""Model-based clustering of high-dimensional data through adaptive linear projections."""

from .dataset import DataMatrix, MeanShiftSpec, Partition
from .evaluation import adjusted_rand_index, auprc_edges, rand_index, topk_edge_hits
from .gmm import EmConfig, EmResult, MixtureParams, em_fit
from .pipeline import MCAPResult, fit_mcap
from .projection import PcaBasis, ProjectionMatrix, ProjectionSpec, fit_pca_gram, project
from .stability import StabilityConfig, StabilityResult, build_grid, select_q

__version__ = "0.1.0"
