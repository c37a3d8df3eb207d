"""Server-side graph machinery: static similarity graphs, the geographic
graph, a trained dynamic adjacency, attention fusion, and the mixing rules
that turn graphs into personalized parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geo import GeoEncoding, geo_distance_matrix
from .optim import PlainSGD
from .tensor import (
    NonFiniteError,
    ShapeMismatchError,
    Tensor,
    add,
    backward,
    broadcast_to,
    matmul,
    mul,
    no_grad,
    sigmoid,
    softmax,
    sq_l2,
    sqrt,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "AdjacencySet",
    "DGMParams",
    "ServerConfig",
    "GraphTrainingError",
    "geo_adjacency",
    "geo_similarity",
    "cosine_adjacency",
    "edge_scores",
    "dynamic_adjacency",
    "fuse",
    "reconstruct_prompts",
    "mix_fm_layers",
    "train_dgm",
    "aggregate_global",
]


class GraphTrainingError(RuntimeError):
    pass


@dataclass
class AdjacencySet:
    """The five matrices driving one aggregation round (all N x N)."""

    geo: np.ndarray            # pairwise distances, km, zero diagonal
    spatial: np.ndarray        # cosine graph over spatial prompts
    temporal_variable: np.ndarray  # cosine graph over temporal+inter-variable prompts
    dynamic: np.ndarray        # trained dynamic graph, rows softmax-normalized
    fused: np.ndarray          # attention-fused graph
    fuse_softmax: np.ndarray   # row-stochastic factor inside the fusion

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "geo": self.geo,
            "spatial": self.spatial,
            "temporal_variable": self.temporal_variable,
            "dynamic": self.dynamic,
            "fused": self.fused,
            "fuse_softmax": self.fuse_softmax,
        }


@dataclass
class DGMParams:
    """Learnable pieces of the dynamic graph: two embedding transforms and
    a difference-scoring vector."""

    source_transform: Tensor   # (D, d)
    target_transform: Tensor   # (D, d)
    difference_weights: Tensor  # (d, 1)

    @classmethod
    def initialize(cls, vector_dim: int, embed_dim: int,
                   rng: np.random.Generator) -> "DGMParams":
        scale = 1.0 / np.sqrt(vector_dim)
        return cls(
            source_transform=Tensor(rng.normal(0.0, scale, size=(vector_dim, embed_dim)),
                                    requires_grad=True),
            target_transform=Tensor(rng.normal(0.0, scale, size=(vector_dim, embed_dim)),
                                    requires_grad=True),
            difference_weights=Tensor(rng.normal(0.0, 1.0, size=(embed_dim, 1)),
                                      requires_grad=True),
        )

    @classmethod
    def initialize_calibrated(cls, vectors: np.ndarray, embed_dim: int,
                              rng: np.random.Generator) -> "DGMParams":
        """Warm start near the structure-matching optimum: both transforms
        share one random projection scaled so that the raw self-scores start
        at ~1 (cosine scale), and the difference vector starts at zero (the
        sigmoid gate opens at exactly 1/2). The short gradient-descent
        schedule then refines instead of bootstrapping from noise."""
        vectors = np.asarray(vectors, dtype=np.float64)
        d_in = vectors.shape[1]
        w0 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, embed_dim))
        z = vectors @ w0
        base_diag = float(np.mean(np.sum(z * z, axis=1))) / np.sqrt(embed_dim)
        gain = np.sqrt(np.sqrt(2.0 / max(base_diag, 1e-12)))
        w0 = w0 * gain
        return cls(
            source_transform=Tensor(w0, requires_grad=True),
            target_transform=Tensor(np.array(w0), requires_grad=True),
            difference_weights=Tensor(np.zeros((embed_dim, 1)), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.source_transform, self.target_transform, self.difference_weights]


@dataclass
class ServerConfig:
    """Knobs of the server aggregation step."""

    mixing_alpha: float = 0.99
    mixing_iterations: int = 1
    graph_epochs: int = 40
    graph_lr: float = 0.001
    sparsity_weight: float = 0.3
    graph_embed_dim: int = 16
    mixed_layers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.mixing_alpha <= 1.0:
            raise ValueError(f"server: mixing alpha {self.mixing_alpha} outside [0, 1]")
        if self.mixing_iterations < 1:
            raise ValueError("server: mixing iterations must be >= 1")
        if self.graph_epochs < 1:
            raise ValueError("server: graph epochs must be >= 1")


# ---------------------------------------------------------------------------
# static graphs


def geo_adjacency(stations: list[GeoEncoding], radius: float | None = None) -> np.ndarray:
    """Pairwise great-circle distances; symmetric, nonnegative, zero diagonal."""
    if radius is None:
        return geo_distance_matrix(stations)
    return geo_distance_matrix(stations, radius)


def geo_similarity(distances: np.ndarray) -> np.ndarray:
    """Map a distance matrix into [0, 1] via exp(-d / sigma), sigma being the
    median off-diagonal distance, so it is commensurate with cosine graphs."""
    n = distances.shape[0]
    if n < 2:
        return np.ones_like(distances)
    off = distances[~np.eye(n, dtype=bool)]
    sigma = float(np.median(off))
    if sigma <= 0.0:
        return np.ones_like(distances)
    return np.exp(-distances / sigma)


def cosine_adjacency(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of row vectors; zero rows pair at 0, the
    diagonal is pinned to 1 (self-similarity)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = vectors / safe[:, None]
    out = unit @ unit.T
    zero = norms == 0.0
    out[zero, :] = 0.0
    out[:, zero] = 0.0
    np.clip(out, -1.0, 1.0, out=out)
    np.fill_diagonal(out, 1.0)
    return out


# ---------------------------------------------------------------------------
# dynamic graph


def _edge_score_graph(vectors: Tensor, params: DGMParams) -> Tensor:
    """Raw edge weights: scaled dot-product scores gated by a sigmoid of the
    weighted embedding difference (gradient-tracked)."""
    n = vectors.shape[0]
    z_src = matmul(vectors, params.source_transform)     # (N, d)
    z_tgt = matmul(vectors, params.target_transform)     # (N, d)
    d = z_src.shape[1]
    scores = mul(matmul(z_src, transpose(z_tgt, (1, 0))), 1.0 / np.sqrt(d))
    a = matmul(z_src, params.difference_weights)          # (N, 1)
    b = matmul(z_tgt, params.difference_weights)          # (N, 1)
    diff = sub(broadcast_to(a, (n, n)),
               broadcast_to(transpose(b, (1, 0)), (n, n)))
    return mul(scores, sigmoid(diff))


def edge_scores(vectors: np.ndarray, params: DGMParams) -> np.ndarray:
    """Raw (pre-normalization) dynamic edge weights."""
    with no_grad():
        return _edge_score_graph(Tensor(vectors), params).data


def dynamic_adjacency(vectors: np.ndarray, params: DGMParams) -> np.ndarray:
    """Dynamic graph with rows softmax-normalized so downstream mixing is a
    convex combination."""
    with no_grad():
        raw = _edge_score_graph(Tensor(vectors), params)
        return softmax(raw, axis=-1).data


# ---------------------------------------------------------------------------
# fusion and mixing


def fuse(geo: np.ndarray, spatial: np.ndarray, temporal_variable: np.ndarray,
         dynamic: np.ndarray, d_k: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Attention fusion of the graph set.

    softmax(((sim_geo - spatial) @ temporal_variable^T) / sqrt(d_k)) @ dynamic,
    with the geographic graph first mapped onto similarity scale so the
    difference against the cosine graph is meaningful. Returns the fused
    graph and the row-stochastic softmax factor."""
    n = geo.shape[0]
    if n == 0:
        raise ShapeMismatchError("graphs: cannot fuse an empty adjacency set")
    if d_k is None:
        d_k = float(n)
    sim_geo = geo_similarity(geo)
    logits = (sim_geo - spatial) @ temporal_variable.T / np.sqrt(d_k)
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ dynamic, weights


def reconstruct_prompts(prompt_matrix: np.ndarray, dynamic: np.ndarray,
                        fused: np.ndarray, alpha: float,
                        iterations: int = 1) -> np.ndarray:
    """Personalized parameters: P <- alpha * A @ P + (1 - alpha) * A' @ P,
    repeated for the configured number of mixing iterations."""
    p = np.asarray(prompt_matrix, dtype=np.float64)
    if dynamic.shape != (p.shape[0], p.shape[0]) or fused.shape != dynamic.shape:
        raise ShapeMismatchError(
            f"graphs: mixing shapes {dynamic.shape}/{fused.shape} do not fit "
            f"{p.shape[0]} stacked clients"
        )
    for _ in range(iterations):
        p = alpha * (dynamic @ p) + (1.0 - alpha) * (fused @ p)
    return p


def mix_fm_layers(layer_arrays: list[dict[str, np.ndarray]], dynamic: np.ndarray,
                  fused: np.ndarray, alpha: float,
                  iterations: int = 1) -> list[dict[str, np.ndarray]]:
    """Apply the prompt mixing rule to each designated model layer."""
    if not layer_arrays or not layer_arrays[0]:
        return [dict(d) for d in layer_arrays]
    names = list(layer_arrays[0].keys())
    for d in layer_arrays[1:]:
        if list(d.keys()) != names:
            raise ShapeMismatchError("graphs: clients disagree on mixed layer names")
    mixed: list[dict[str, np.ndarray]] = [dict() for _ in layer_arrays]
    for name in names:
        stack = np.stack([d[name].ravel() for d in layer_arrays])
        out = reconstruct_prompts(stack, dynamic, fused, alpha, iterations)
        shape = layer_arrays[0][name].shape
        for i in range(len(layer_arrays)):
            mixed[i][name] = out[i].reshape(shape)
    return mixed


# ---------------------------------------------------------------------------
# dynamic-graph training


def train_dgm(vectors: np.ndarray, target_cosine: np.ndarray, cfg: ServerConfig,
              rng: np.random.Generator) -> tuple[DGMParams, list[float]]:
    """Fit the dynamic graph by plain gradient descent.

    The objective matches the raw edge scores against the full-prompt
    cosine graph (proximity preservation) plus an L1 penalty on their
    off-diagonal mass (sparsity); the softmax row normalization is applied
    later, at aggregation time. A non-finite loss aborts the round."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if n < 2:
        raise GraphTrainingError("graphs: dynamic graph needs at least 2 participants")
    params = DGMParams.initialize_calibrated(vectors, cfg.graph_embed_dim, rng)
    target = Tensor(np.asarray(target_cosine, dtype=np.float64))
    vec_t = Tensor(vectors)
    opt = PlainSGD(params.parameters(), lr=cfg.graph_lr)
    offdiag = Tensor(1.0 - np.eye(n))
    history: list[float] = []
    try:
        for _ in range(cfg.graph_epochs):
            opt.zero_grad()
            raw = _edge_score_graph(vec_t, params)
            loss = sq_l2(raw, target)
            if cfg.sparsity_weight:
                l1 = sum_all(mul(_smooth_abs(raw), offdiag))
                loss = loss + mul(l1, cfg.sparsity_weight)
            backward(loss)
            history.append(loss.item())
            opt.step()
    except NonFiniteError as err:
        raise GraphTrainingError(f"graphs: dynamic graph training diverged: {err}") from err
    return params, history


def _smooth_abs(t: Tensor, eps: float = 1e-12) -> Tensor:
    return sqrt(add(mul(t, t), eps))


# ---------------------------------------------------------------------------
# plain federated aggregation


def aggregate_global(uploads: list[dict[str, np.ndarray]],
                     sample_counts: list[int]) -> dict[str, np.ndarray]:
    """Sample-count-weighted mean of named parameter arrays."""
    if not uploads:
        raise ValueError("graphs: nothing to aggregate")
    if len(uploads) != len(sample_counts):
        raise ValueError("graphs: uploads and sample counts disagree")
    total = float(sum(sample_counts))
    if total <= 0.0:
        raise ValueError("graphs: total sample count is zero")
    names = list(uploads[0].keys())
    out: dict[str, np.ndarray] = {}
    for name in names:
        acc = np.zeros_like(np.asarray(uploads[0][name], dtype=np.float64))
        for upload, count in zip(uploads, sample_counts):
            acc += (count / total) * np.asarray(upload[name], dtype=np.float64)
        out[name] = acc
    return out
