"""Masked federated pre-training of the foundation model.

Each variable of a training window is masked by alternating geometric
segments; the model reconstructs the original series and the loss counts
only the masked cells. Training is FedAvg over the stations' pre-training
splits; the resulting snapshot is frozen for everything downstream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import SplitSpec, StationSeries, make_windows, normalize
from .graphs import aggregate_global
from .optim import AdamW
from .tensor import Tensor, backward, div, mul, sub, sum_all
from .transformer import FMConfig, TransformerFM

__all__ = ["MaskSpec", "generate_mask", "pretrain_loss", "federated_pretrain",
           "masked_train"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskSpec:
    """Alternating-segment mask statistics: overall masked fraction
    ``mask_rate`` with geometric masked segments of mean ``mean_masked_len``."""

    mask_rate: float = 0.15
    mean_masked_len: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError(f"pretrain: mask rate {self.mask_rate} outside (0, 1)")
        if self.mean_masked_len < 1.0:
            raise ValueError("pretrain: mean masked length must be >= 1")

    @property
    def mean_unmasked_len(self) -> float:
        r = self.mask_rate
        return (1.0 - r) / r * self.mean_masked_len


def generate_mask(length: int, n_vars: int, spec: MaskSpec,
                  rng: np.random.Generator) -> np.ndarray:
    """Binary mask (0 = masked) with independent per-variable segment runs.

    Masked runs are geometric with mean ``mean_masked_len`` (support >= 1).
    Unmasked runs are geometric with mean ``mean_unmasked_len``; when that
    mean drops below 1 (extreme mask rates) the support includes 0 so the
    masked fraction still approaches the configured rate."""
    if length < 1 or n_vars < 1:
        raise ValueError("pretrain: mask dimensions must be positive")
    l_m = spec.mean_masked_len
    l_u = spec.mean_unmasked_len
    p_m = 1.0 / l_m
    mask = np.ones((length, n_vars), dtype=np.int8)
    for j in range(n_vars):
        pos = 0
        masked = rng.random() < spec.mask_rate  # stationary start state
        while pos < length:
            if masked:
                run = rng.geometric(p_m)
                mask[pos:pos + run, j] = 0
            else:
                if l_u >= 1.0:
                    run = rng.geometric(1.0 / l_u)
                else:
                    # support {0, 1, ...} with mean l_u
                    run = rng.geometric(1.0 / (1.0 + l_u)) - 1
            pos += run
            masked = not masked
    return mask


def pretrain_loss(truth, prediction, mask) -> Tensor:
    """Mean squared error over the masked cells only."""
    mask = np.asarray(mask)
    weights = (mask == 0).astype(np.float64)
    count = weights.sum()
    if count == 0:
        raise ValueError("pretrain: mask has no masked positions")
    diff = sub(prediction, truth if isinstance(truth, Tensor) else Tensor(truth))
    return div(sum_all(mul(mul(diff, diff), Tensor(weights))), count)


def _pretrain_windows(station: StationSeries, split: SplitSpec, window: int,
                      portion: str) -> np.ndarray:
    lo, hi = split.boundaries(station.n_hours)[portion]
    xs, _ = make_windows(station.values, lo, hi, window, 0, None)
    return xs


def masked_train(fm: TransformerFM, windows: np.ndarray, spec: MaskSpec,
                 epochs: int, batch_size: int, lr: float, weight_decay: float,
                 rng: np.random.Generator) -> None:
    """Reconstruction training on one client's windows (in place).

    A fresh mask is drawn per sample per epoch; masked cells are zeroed on
    the way in and are the only cells scored on the way out."""
    if windows.shape[0] == 0:
        raise ValueError("pretrain: no training windows")
    opt = AdamW(fm.parameters(), lr=lr, weight_decay=weight_decay)
    count, length, n_vars = windows.shape
    for _ in range(epochs):
        order = rng.permutation(count)
        for lo in range(0, count, batch_size):
            batch = windows[order[lo:lo + batch_size]]
            masks = np.stack([
                generate_mask(length, n_vars, spec, rng) for _ in range(batch.shape[0])
            ])
            if (masks == 0).sum() == 0:
                continue
            masked_input = batch * masks
            opt.zero_grad()
            pred = fm.forward(Tensor(masked_input), train=True, rng=rng)
            loss = pretrain_loss(batch, pred, masks)
            backward(loss)
            opt.step()


def _validation_mse(fm: TransformerFM, val_sets: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Masked reconstruction error on fixed validation windows/masks."""
    total = 0.0
    cells = 0
    for windows, masks in val_sets:
        if windows.shape[0] == 0:
            continue
        pred = fm.forward(Tensor(windows * masks)).data
        sel = masks == 0
        total += ((pred - windows)[sel] ** 2).sum()
        cells += int(sel.sum())
    return total / cells if cells else float("nan")


def federated_pretrain(stations: list[StationSeries], config: FMConfig,
                       rounds: int = 20, local_epochs: int = 20,
                       participation: float = 0.5, window: int = 12,
                       batch_size: int = 256, lr: float = 0.01,
                       weight_decay: float = 1e-4, spec: MaskSpec | None = None,
                       split: SplitSpec | None = None,
                       seed: int = 0) -> tuple[TransformerFM, list[float]]:
    """FedAvg masked pre-training over the stations' pre-training splits.

    Returns the aggregated model plus the per-round validation curve
    (masked MSE on fixed validation masks)."""
    if not stations:
        raise ValueError("pretrain: empty client set")
    spec = spec or MaskSpec()
    split = split or SplitSpec()

    normalized = [normalize(st, split, portion="pretrain_train")[0] for st in stations]
    train_windows = [
        _pretrain_windows(st, split, window, "pretrain_train") for st in normalized
    ]
    counts = [w.shape[0] for w in train_windows]
    if min(counts) == 0:
        raise ValueError("pretrain: a station has no pre-training windows")

    fm = TransformerFM(config, np.random.default_rng(np.random.SeedSequence([seed, 91])))

    # Fixed validation windows and masks so the curve is comparable across
    # rounds.
    val_rng = np.random.default_rng(np.random.SeedSequence([seed, 92]))
    val_sets = []
    for st in normalized:
        vw = _pretrain_windows(st, split, window, "pretrain_val")
        vm = (np.stack([generate_mask(window, st.n_variables, spec, val_rng)
                        for _ in range(vw.shape[0])])
              if vw.shape[0] else np.empty((0, window, st.n_variables), dtype=np.int8))
        val_sets.append((vw, vm))

    n_clients = len(stations)
    take = max(1, int(np.ceil(participation * n_clients)))
    history: list[float] = []
    for rnd in range(1, rounds + 1):
        srng = np.random.default_rng(np.random.SeedSequence([seed, 93, rnd]))
        chosen = sorted(srng.choice(n_clients, size=take, replace=False).tolist())
        uploads = []
        upload_counts = []
        snapshot = fm.named_arrays()
        for cid in chosen:
            fm.load_arrays(snapshot)
            crng = np.random.default_rng(np.random.SeedSequence([seed, 94, rnd, cid]))
            masked_train(fm, train_windows[cid], spec, local_epochs, batch_size,
                         lr, weight_decay, crng)
            uploads.append(fm.named_arrays())
            upload_counts.append(counts[cid])
        fm.load_arrays(aggregate_global(uploads, upload_counts))
        history.append(_validation_mse(fm, val_sets))
        log.info("pretrain round %d/%d: validation masked MSE %.6f",
                 rnd, rounds, history[-1])
    return fm, history
