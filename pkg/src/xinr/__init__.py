"""Ensemble surrogate engine.

A hybrid feature-grid neural field maps (spatial coordinate, simulation
parameters) to a scalar value; probabilistic affine forms answer region
queries (mean/variance/covariance/correlation) without sampling, and
gradient descent on a distribution divergence runs inverse parameter
search.
"""

from .model import (ArchConfig, DomainSpec, ExplorableModel, FeatureStore,
                    MLPDecoder, DomainError, forward, fuse_params, fuse_spatial,
                    interpolate)
from .checkpoint import load_checkpoint, save_checkpoint
from .region import QueryRegion, RegionError, POINT, RANGE
from .paf import (GaussianSummary, NoiseSymbolRegistry, PAF, PafError,
                  paf_activation, paf_covariance, paf_from_range, paf_hadamard,
                  paf_linear, paf_pearson, propagate, propagate_points)
from .range_stats import (PiecewiseLinear, extract_piecewise, range_mean,
                          range_param_cov, range_variance)
from .data import (AnalyticFamily, EnsembleManifest, VolumeGrid,
                   default_desk_family, generate, load_volume, oracle_stats,
                   save_volume)
from .training import EnsembleDataset, TrainConfig, train
from .explore import (compare_up_spl, correlation_field, pick_reference,
                      predict_points, predict_volume, spl_field, up_field)
from .search import SearchOptions, TargetDistribution
from . import search                     # submodule; run via search.search(...)
from .metrics import max_difference, psnr

__version__ = "0.1.0"
