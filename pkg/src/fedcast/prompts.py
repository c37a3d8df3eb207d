"""Adaptive prompts: the trainable client-side state steering the frozen
foundation model.

A prompt set carries a temporal prompt and an inter-variable prompt (each
m x n), a spatial prompt row (1 x n), and two blending matrices. The
temporal/inter-variable prompts enter the model through an iterative
procedure that widens the model input block by block; the blended result,
conditioned on the station coordinates, is added to the input window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geo import GeoEncoding
from .tensor import (
    ShapeMismatchError,
    Tensor,
    add,
    broadcast_to,
    concat,
    getitem,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    row_normalize,
)

__all__ = [
    "AdaptivePromptSet",
    "PROMPT_FIELDS",
    "NOISED_PROMPT_FIELDS",
    "iterate_temporal",
    "iterate_variable",
    "combine",
    "apply_spatial",
    "forward_with_prompts",
    "LinearForecastHead",
    "DenseForecastHead",
]

# Upload payload order; flattening and reconstruction rely on it.
PROMPT_FIELDS = ("temporal", "inter_variable", "spatial", "temporal_blend",
                 "variable_blend")
# Fields that receive privacy noise before upload.
NOISED_PROMPT_FIELDS = ("temporal", "inter_variable", "spatial")

SPATIAL_NORM_EPS = 1e-5


@dataclass
class AdaptivePromptSet:
    """Trainable prompts plus their block-growth step sizes."""

    temporal: Tensor
    inter_variable: Tensor
    spatial: Tensor
    temporal_blend: Tensor
    variable_blend: Tensor
    temporal_step: int
    variable_step: int

    def __post_init__(self):
        rows, cols = self.temporal.shape
        for name in ("inter_variable", "temporal_blend", "variable_blend"):
            if getattr(self, name).shape != (rows, cols):
                raise ShapeMismatchError(
                    f"prompts: {name} shape {getattr(self, name).shape} "
                    f"!= temporal prompt shape {(rows, cols)}"
                )
        if self.spatial.shape != (1, cols):
            raise ShapeMismatchError(
                f"prompts: spatial prompt must be (1, {cols}), got {self.spatial.shape}"
            )
        if rows % self.temporal_step:
            raise ShapeMismatchError(
                f"prompts: {rows} rows not divisible by temporal step {self.temporal_step}"
            )
        if cols % self.variable_step:
            raise ShapeMismatchError(
                f"prompts: {cols} columns not divisible by variable step {self.variable_step}"
            )

    @classmethod
    def initialize(cls, horizon: int, n_features: int, temporal_step: int = 1,
                   variable_step: int = 1, rng: np.random.Generator | None = None,
                   init_std: float = 0.02) -> "AdaptivePromptSet":
        """Gaussian prompts (std 0.02); blending matrices start at 0.5 each
        so the initial combination is the plain average of both prompts."""
        rng = rng or np.random.default_rng(0)
        shape = (horizon, n_features)
        return cls(
            temporal=Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True),
            inter_variable=Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True),
            spatial=Tensor(rng.normal(0.0, init_std, size=(1, n_features)), requires_grad=True),
            temporal_blend=Tensor(np.full(shape, 0.5), requires_grad=True),
            variable_blend=Tensor(np.full(shape, 0.5), requires_grad=True),
            temporal_step=temporal_step,
            variable_step=variable_step,
        )

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [getattr(self, f) for f in PROMPT_FIELDS]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f: np.array(getattr(self, f).data) for f in PROMPT_FIELDS}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for f in PROMPT_FIELDS:
            tensor = getattr(self, f)
            arr = np.asarray(arrays[f], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ShapeMismatchError(
                    f"prompts: cannot load {f} of shape {arr.shape} into {tensor.shape}"
                )
            tensor.data = np.array(arr)

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).data.ravel() for f in PROMPT_FIELDS])

    def load_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for f in PROMPT_FIELDS:
            tensor = getattr(self, f)
            n = tensor.size
            tensor.data = np.array(vec[offset:offset + n]).reshape(tensor.shape)
            offset += n
        if offset != vec.size:
            raise ShapeMismatchError(
                f"prompts: flat vector length {vec.size} != expected {offset}"
            )


def flatten_payload(arrays: dict[str, np.ndarray]) -> np.ndarray:
    """Flatten an upload payload in the canonical field order."""
    return np.concatenate([np.asarray(arrays[f]).ravel() for f in PROMPT_FIELDS])


def iterate_temporal(x_ipt, prompts: AdaptivePromptSet, fm) -> Tensor:
    """Block-growth pass along time: at step q the first q*step rows of the
    temporal prompt are appended below the input window and pushed through
    the frozen model. Runs exactly rows/step passes; returns the last output."""
    x = x_ipt if isinstance(x_ipt, Tensor) else Tensor(x_ipt)
    rows = prompts.temporal.shape[0]
    step = prompts.temporal_step
    out = None
    for q in range(1, rows // step + 1):
        active = getitem(prompts.temporal, slice(0, q * step))
        out = fm.forward(concat([x, active], axis=0))
    return out


def iterate_variable(x_ipt, prompts: AdaptivePromptSet, fm) -> Tensor:
    """Mirror of the temporal pass along the variable axis: step p appends
    the first p*step columns of the inter-variable prompt."""
    x = x_ipt if isinstance(x_ipt, Tensor) else Tensor(x_ipt)
    cols = prompts.inter_variable.shape[1]
    step = prompts.variable_step
    if x.shape[0] != prompts.inter_variable.shape[0]:
        raise ShapeMismatchError(
            f"prompts: window has {x.shape[0]} rows but the inter-variable "
            f"prompt has {prompts.inter_variable.shape[0]}"
        )
    out = None
    for p in range(1, cols // step + 1):
        active = getitem(prompts.inter_variable, (slice(None), slice(0, p * step)))
        out = fm.forward(concat([x, active], axis=1))
    return out


def combine(prompts: AdaptivePromptSet) -> Tensor:
    """Blend the two grown prompts with their weighting matrices."""
    return add(mul(prompts.temporal, prompts.temporal_blend),
               mul(prompts.inter_variable, prompts.variable_blend))


def apply_spatial(combined: Tensor, spatial: Tensor, geo: GeoEncoding,
                  eps: float = SPATIAL_NORM_EPS) -> tuple[Tensor, Tensor]:
    """Condition the combined prompt on the station location.

    The spatial prompt row is refreshed by normalizing the trainable base
    row plus the scaled coordinates spread over the columns with fixed
    sin/cos patterns (a uniform shift would vanish under normalization);
    the refreshed row is broadcast over time, added, and each row is
    re-normalized to zero mean / unit variance with a variance floor."""
    n = spatial.shape[-1]
    cols = np.arange(1, n + 1) * np.pi / (n + 1)
    lat_pattern = np.sin(cols).reshape(1, n)
    lon_pattern = np.cos(cols).reshape(1, n)
    geo_row = (geo.latitude / 90.0) * lat_pattern + (geo.longitude / 180.0) * lon_pattern
    refreshed = row_normalize(add(spatial, Tensor(geo_row)), eps)
    conditioned = row_normalize(
        add(combined, broadcast_to(refreshed, combined.shape)), eps
    )
    return refreshed, conditioned


def forward_with_prompts(x_ipt, prompts: AdaptivePromptSet, fm, head,
                         geo: GeoEncoding, train: bool = False,
                         rng: np.random.Generator | None = None,
                         fm_overrides: dict | None = None) -> Tensor:
    """Full prompted prediction: head(FM(window + conditioned prompt)).

    Accepts one (P, n) window or a (B, P, n) batch; the conditioned prompt
    is shared across the batch (it is client state, not sample state)."""
    x = x_ipt if isinstance(x_ipt, Tensor) else Tensor(x_ipt)
    combined = combine(prompts)
    _, conditioned = apply_spatial(combined, prompts.spatial, geo)
    if x.ndim == 3:
        target = x.shape
        conditioned = broadcast_to(reshape(conditioned, (1,) + conditioned.shape), target)
    if x.shape[-2:] != conditioned.shape[-2:]:
        raise ShapeMismatchError(
            f"prompts: window shape {x.shape} incompatible with prompt "
            f"shape {conditioned.shape}"
        )
    out = fm.forward(add(x, conditioned), train=train, rng=rng, overrides=fm_overrides)
    return head(out)


class LinearForecastHead:
    """Single linear map from the flattened model output to the forecast."""

    def __init__(self, history_len: int, n_features: int, horizon: int,
                 n_outputs: int, rng: np.random.Generator):
        self.history_len = history_len
        self.n_features = n_features
        self.horizon = horizon
        self.n_outputs = n_outputs
        in_dim = history_len * n_features
        out_dim = horizon * n_outputs
        self.w = Tensor(rng.normal(0.0, 0.02, size=(in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, fm_out: Tensor) -> Tensor:
        batched = fm_out.ndim == 3
        lead = fm_out.shape[0] if batched else 1
        flat = reshape(fm_out, (lead, self.history_len * self.n_features))
        pred = linear(flat, self.w, self.b)
        if batched:
            return reshape(pred, (lead, self.horizon, self.n_outputs))
        return reshape(pred, (self.horizon, self.n_outputs))

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def param_count(self) -> int:
        return self.w.size + self.b.size

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"w": np.array(self.w.data), "b": np.array(self.b.data)}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.w.data = np.array(arrays["w"], dtype=np.float64)
        self.b.data = np.array(arrays["b"], dtype=np.float64)


class DenseForecastHead:
    """Two fully-connected layers; the conventional fine-tuning baseline."""

    def __init__(self, history_len: int, n_features: int, horizon: int,
                 n_outputs: int, hidden: int, rng: np.random.Generator):
        self.history_len = history_len
        self.n_features = n_features
        self.horizon = horizon
        self.n_outputs = n_outputs
        in_dim = history_len * n_features
        out_dim = horizon * n_outputs
        self.w1 = Tensor(rng.normal(0.0, 0.02, size=(in_dim, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, 0.02, size=(hidden, out_dim)), requires_grad=True)
        self.b2 = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, fm_out: Tensor) -> Tensor:
        batched = fm_out.ndim == 3
        lead = fm_out.shape[0] if batched else 1
        flat = reshape(fm_out, (lead, self.history_len * self.n_features))
        pred = linear(relu(linear(flat, self.w1, self.b1)), self.w2, self.b2)
        if batched:
            return reshape(pred, (lead, self.horizon, self.n_outputs))
        return reshape(pred, (self.horizon, self.n_outputs))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"w1": np.array(self.w1.data), "b1": np.array(self.b1.data),
                "w2": np.array(self.w2.data), "b2": np.array(self.b2.data)}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in ("w1", "b1", "w2", "b2"):
            getattr(self, name).data = np.array(arrays[name], dtype=np.float64)


def make_head(kind: str, history_len: int, n_features: int, horizon: int,
              n_outputs: int, hidden: int, rng: np.random.Generator):
    if kind == "linear":
        return LinearForecastHead(history_len, n_features, horizon, n_outputs, rng)
    if kind == "dense":
        return DenseForecastHead(history_len, n_features, horizon, n_outputs, hidden, rng)
    raise ValueError(f"prompts: unknown head kind {kind!r}")
