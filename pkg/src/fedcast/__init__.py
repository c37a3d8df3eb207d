"""Desk-scale simulator of federated prompt tuning for spatial-temporal
weather forecasting: a frozen transformer foundation model on every client,
trainable adaptive prompts, a multi-term local loss, and a server that
fuses geographic and learned graphs into personalized prompt aggregation.
"""

from .data import (
    DataError,
    NormStats,
    SplitSpec,
    StationSeries,
    impute,
    load_manifest,
    normalize,
    synth_generate,
    write_dataset,
)
from .federation import (
    FederationConfig,
    MetricsReport,
    RoundLog,
    add_dp_noise,
    evaluate,
    mae_rmse,
    run,
    sample_clients,
)
from .geo import EARTH_RADIUS_KM, GeoEncoding, haversine_km
from .graphs import (
    AdjacencySet,
    DGMParams,
    ServerConfig,
    aggregate_global,
    cosine_adjacency,
    dynamic_adjacency,
    fuse,
    geo_adjacency,
    reconstruct_prompts,
    train_dgm,
)
from .local import ClientState, LocalLossConfig, forecast, local_loss, local_update, \
    neighbor_select
from .optim import AdamW, PlainSGD
from .pretrain import MaskSpec, federated_pretrain, generate_mask, pretrain_loss
from .prompts import (
    AdaptivePromptSet,
    apply_spatial,
    combine,
    forward_with_prompts,
    iterate_temporal,
    iterate_variable,
)
from .tensor import Tensor, backward, no_grad
from .transformer import FMConfig, TransformerFM

__version__ = "0.1.0"
