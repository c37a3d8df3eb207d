"""Client-side optimization: forecasting objectives and the prompt-wise
local loss with global, personalized, and neighbor regularizers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import NormStats
from .geo import GeoEncoding, haversine_km
from .optim import AdamW, PlainSGD
from .prompts import AdaptivePromptSet, forward_with_prompts, iterate_temporal, \
    iterate_variable
from .tensor import (
    Tensor,
    add,
    backward,
    div,
    flatten_tensors,
    maximum_scalar,
    mse,
    mul,
    no_grad,
    sq_l2,
    sqrt,
    sub,
    sum_all,
)

__all__ = ["LocalLossConfig", "ClientState", "regularized_loss", "local_loss",
           "neighbor_select", "local_update", "forecast"]

log = logging.getLogger(__name__)


@dataclass
class LocalLossConfig:
    """Weights and scope of the multi-term local loss."""

    proximity_coeff: float = 0.7      # divides the global/personalized pulls
    neighbor_coeff: float = 0.3      # divides the neighbor pull
    subgraph_step: int = 1
    local_epochs: int = 25
    batch_size: int = 256
    use_regularizers: bool = True
    # Prompt-space distance for the pulls. The bounded cosine form is the
    # default: summed squared-Euclidean pulls over the whole flattened
    # prompt vector overpower the desk-scale prediction loss at the default
    # coefficients and erase the benefit of prompt adaptation.
    distance: str = "one_minus_cosine"   # or "sq_euclidean"

    def __post_init__(self):
        if not 0.0 < self.proximity_coeff < 1.0:
            raise ValueError(
                f"local: proximity coefficient {self.proximity_coeff} outside (0, 1)"
            )
        if not 0.0 < self.neighbor_coeff < 1.0:
            raise ValueError(
                f"local: neighbor coefficient {self.neighbor_coeff} outside (0, 1)"
            )
        if self.subgraph_step < 1:
            raise ValueError("local: subgraph step must be >= 1")
        if self.distance not in ("sq_euclidean", "one_minus_cosine"):
            raise ValueError(f"local: unknown distance {self.distance!r}")


@dataclass
class ClientState:
    """Everything one client owns plus the references it received."""

    client_id: int
    geo: GeoEncoding
    prompts: AdaptivePromptSet | None
    head: object
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    norm_stats: NormStats
    target_index: int
    global_ref: np.ndarray | None = None
    personal_ref: np.ndarray | None = None
    neighbor_refs: list[np.ndarray] = field(default_factory=list)
    fm_overrides: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.train_x.shape[0] == 0:
            raise ValueError(f"local: client {self.client_id} has an empty training split")

    @property
    def n_samples(self) -> int:
        return self.train_x.shape[0]


def _distance(flat: Tensor, ref: np.ndarray, kind: str) -> Tensor:
    ref_t = Tensor(np.asarray(ref, dtype=np.float64))
    if kind == "sq_euclidean":
        return sq_l2(flat, ref_t)
    # 1 - cosine; zero-norm operands guarded by a tiny floor
    num = sum_all(mul(flat, ref_t))
    fn = sqrt(maximum_scalar(sum_all(mul(flat, flat)), 1e-24))
    rn = sqrt(maximum_scalar(sum_all(mul(ref_t, ref_t)), 1e-24))
    return sub(1.0, div(num, mul(fn, rn)))


def regularized_loss(pred: Tensor, truth, flat_prompts: Tensor,
                     global_ref: np.ndarray | None,
                     personal_ref: np.ndarray | None,
                     neighbor_refs: list[np.ndarray],
                     proximity_coeff: float, neighbor_coeff: float,
                     distance: str = "sq_euclidean",
                     client_id: int | None = None) -> Tensor:
    """Prediction error plus the prompt-space pulls.

    mse + (1/p^2) d(P, global) + (1/p^2) d(P, personalized)
        + (1/t^2) * (1/(K-1)) * sum_j d(P, neighbor_j)
        + 4 (log2 p + log2 t)

    The final term is a constant in the parameters: it shifts the reported
    value but produces no gradient. With fewer than two neighbors the
    neighbor pull is skipped (its normalizer would divide by zero)."""
    loss = mse(pred, truth if isinstance(truth, Tensor) else Tensor(truth))
    inv_p2 = 1.0 / (proximity_coeff * proximity_coeff)
    inv_t2 = 1.0 / (neighbor_coeff * neighbor_coeff)
    if global_ref is not None:
        loss = add(loss, mul(_distance(flat_prompts, global_ref, distance), inv_p2))
    if personal_ref is not None:
        loss = add(loss, mul(_distance(flat_prompts, personal_ref, distance), inv_p2))
    k = len(neighbor_refs)
    if k >= 2:
        acc = _distance(flat_prompts, neighbor_refs[0], distance)
        for ref in neighbor_refs[1:]:
            acc = add(acc, _distance(flat_prompts, ref, distance))
        loss = add(loss, mul(acc, inv_t2 / (k - 1)))
    elif k == 1:
        log.warning(
            "local: client %s has a single neighbor; neighbor term skipped "
            "(normalizer would be zero)", client_id,
        )
    constant = 4.0 * (math.log2(proximity_coeff) + math.log2(neighbor_coeff))
    return add(loss, constant)


def local_loss(pred: Tensor, truth, state: ClientState, cfg: LocalLossConfig) -> Tensor:
    """State-based wrapper of :func:`regularized_loss`. With regularizers
    disabled it is the plain prediction error."""
    if not cfg.use_regularizers or state.prompts is None:
        return mse(pred, truth if isinstance(truth, Tensor) else Tensor(truth))
    flat = flatten_tensors(state.prompts.parameters())
    return regularized_loss(pred, truth, flat, state.global_ref, state.personal_ref,
                            state.neighbor_refs, cfg.proximity_coeff,
                            cfg.neighbor_coeff, cfg.distance, state.client_id)


def neighbor_select(participants: list[tuple[int, GeoEncoding]], self_id: int,
                    subgraph_step: int) -> list[int]:
    """Every ``subgraph_step``-th round participant, ordered by great-circle
    distance to the caller (ascending, ties broken by id), self excluded."""
    if not participants:
        raise ValueError("local: empty participant list")
    me = dict(participants).get(self_id)
    if me is None:
        raise ValueError(f"local: client {self_id} is not among the participants")
    others = [(haversine_km(me, geo), cid) for cid, geo in participants if cid != self_id]
    others.sort()
    ordered = [cid for _, cid in others]
    return ordered[::subgraph_step]


def _epoch_batches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for lo in range(0, count, batch_size):
        yield order[lo:lo + batch_size]


def local_update(state: ClientState, fm, cfg: LocalLossConfig,
                 rng: np.random.Generator, lr: float = 0.01,
                 weight_decay: float = 1e-4,
                 optimizer: str = "adamw") -> tuple[dict[str, np.ndarray], dict]:
    """One round of client training.

    Each epoch runs the prompt block-growth passes (protocol forwards whose
    outputs never reach the loss, so they are taken without gradient
    recording) and then one optimizer sweep over shuffled mini-batches of
    the regularized loss. Returns the upload payload (prompts only; heads
    never leave the client) and per-epoch loss statistics."""
    prompts = state.prompts
    if prompts is None:
        raise ValueError("local: prompted update requires a prompt set")
    params = prompts.parameters() + list(state.head.parameters())
    opt = (AdamW(params, lr=lr, weight_decay=weight_decay) if optimizer == "adamw"
           else PlainSGD(params, lr=lr, weight_decay=weight_decay))
    overrides = {k: Tensor(v) for k, v in state.fm_overrides.items()} or None
    epoch_losses: list[float] = []
    count = state.train_x.shape[0]
    for _ in range(cfg.local_epochs):
        # Prompt growth passes on one sampled window.
        probe = state.train_x[rng.integers(count)]
        with no_grad():
            iterate_temporal(probe, prompts, fm)
            iterate_variable(probe, prompts, fm)
        total, batches = 0.0, 0
        for idx in _epoch_batches(count, cfg.batch_size, rng):
            opt.zero_grad()
            pred = forward_with_prompts(state.train_x[idx], prompts, fm, state.head,
                                        state.geo, train=True, rng=rng,
                                        fm_overrides=overrides)
            loss = local_loss(pred, state.train_y[idx], state, cfg)
            backward(loss)
            opt.step()
            total += loss.item()
            batches += 1
        epoch_losses.append(total / max(batches, 1))
    payload = prompts.named_arrays()
    stats = {"epoch_losses": epoch_losses,
             "final_loss": epoch_losses[-1] if epoch_losses else None}
    return payload, stats


def head_only_update(state: ClientState, fm, cfg: LocalLossConfig,
                     rng: np.random.Generator, lr: float = 0.01,
                     weight_decay: float = 1e-4,
                     optimizer: str = "adamw") -> tuple[dict[str, np.ndarray], dict]:
    """Conventional fine-tuning baseline: train only the head on the frozen
    model's features; upload the head."""
    params = list(state.head.parameters())
    opt = (AdamW(params, lr=lr, weight_decay=weight_decay) if optimizer == "adamw"
           else PlainSGD(params, lr=lr, weight_decay=weight_decay))
    epoch_losses: list[float] = []
    count = state.train_x.shape[0]
    for _ in range(cfg.local_epochs):
        total, batches = 0.0, 0
        for idx in _epoch_batches(count, cfg.batch_size, rng):
            opt.zero_grad()
            features = fm.forward(Tensor(state.train_x[idx]), train=True, rng=rng)
            loss = mse(state.head(features), Tensor(state.train_y[idx]))
            backward(loss)
            opt.step()
            total += loss.item()
            batches += 1
        epoch_losses.append(total / max(batches, 1))
    payload = state.head.named_arrays()
    stats = {"epoch_losses": epoch_losses,
             "final_loss": epoch_losses[-1] if epoch_losses else None}
    return payload, stats


def forecast(state: ClientState, fm, window: np.ndarray,
             use_prompts: bool = True) -> np.ndarray:
    """Deterministic (eval-mode) prediction for one history window or a
    batch of windows."""
    window = np.asarray(window, dtype=np.float64)
    with no_grad():
        if use_prompts and state.prompts is not None:
            overrides = {k: Tensor(v) for k, v in state.fm_overrides.items()} or None
            pred = forward_with_prompts(window, state.prompts, fm, state.head,
                                        state.geo, train=False,
                                        fm_overrides=overrides)
        else:
            pred = state.head(fm.forward(Tensor(window)))
    return pred.data
