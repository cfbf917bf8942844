"""Channel-gain map estimation toolkit.

Synthesizes measurement datasets over randomized tomographic environments,
trains the cross-environment transformer estimator (CRETE), and benchmarks it
against nearest-neighbor and regularized tomographic-inversion baselines.
"""

__version__ = "0.1.0"

from .environment import (  # noqa: F401
    Building,
    Environment,
    GridSpec,
    LinkParams,
    LossField,
    PathLossParams,
    Region,
    capacity_from_gain,
    channel_gain,
    sample_environment,
    segment_voxel_lengths,
)
from .dataset import (  # noqa: F401
    Episode,
    Measurement,
    MeasurementSet,
    build_all_pairs,
    place_terminals,
    split_episode,
)
from .invariance import QueryInput, canonicalize  # noqa: F401
from .model import ModelConfig, ModelParams, episode_loss, estimate, predict_prefixes  # noqa: F401
from .trainer import TrainConfig, train, validate  # noqa: F401
from .baselines import RegularizerSpec, knn_estimate, pair_distance, tomographic_fit, tomographic_predict  # noqa: F401
from .evaluation import capacity_matrix_nmae, cluster_head_quality, mae, run_experiment  # noqa: F401
