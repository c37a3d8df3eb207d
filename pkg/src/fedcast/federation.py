"""Round orchestration: client sampling, prompt exchange, graph-guided
aggregation, privacy noise, evaluation, and run artifacts.

Three modes share one loop:
  fedavg-head     frozen model + trainable dense head, head FedAvg'd
  fedavg-prompts  prompts trained on plain MSE, prompts FedAvg'd
  fedwing         prompts trained on the regularized loss, graph-guided
                  personalization on top of the FedAvg global prompts

All randomness is derived from (seed, phase, round, client), so results do
not depend on client execution order or the worker count.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import NormStats, SplitSpec, StationSeries, denormalize, make_windows, \
    normalize
from .geo import GeoEncoding
from .graphs import (
    ServerConfig,
    aggregate_global,
    cosine_adjacency,
    dynamic_adjacency,
    fuse,
    geo_adjacency,
    mix_fm_layers,
    reconstruct_prompts,
    train_dgm,
)
from .local import ClientState, LocalLossConfig, forecast, head_only_update, \
    local_update, neighbor_select
from .prompts import NOISED_PROMPT_FIELDS, PROMPT_FIELDS, AdaptivePromptSet, \
    flatten_payload, make_head
from .transformer import TransformerFM

__all__ = ["FederationConfig", "RoundLog", "MetricsReport", "sample_clients",
           "add_dp_noise", "evaluate", "run", "mae_rmse"]

MODES = ("fedavg-head", "fedavg-prompts", "fedwing")

# Phase tags for seed derivation.
_PHASE_INIT = 1
_PHASE_SAMPLE = 2
_PHASE_LOCAL = 3
_PHASE_DP = 4
_PHASE_GRAPH = 5


def _rng(*scope: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(scope)))


@dataclass
class FederationConfig:
    """Global run parameters (defaults follow the main experimental regime)."""

    mode: str = "fedwing"
    rounds: int = 50
    local_epochs: int = 25
    participation: float = 0.3
    proximity_coeff: float = 0.7
    neighbor_coeff: float = 0.3
    subgraph_step: int = 1
    temporal_step: int = 1
    variable_step: int = 1
    mixing_alpha: float = 0.99
    mixing_iterations: int = 1
    graph_enabled: bool = True
    use_regularizers: bool = True
    dp_enabled: bool = False
    dp_factor: float = 0.01
    seed: int = 0
    task: str = "task1"
    history_len: int = 12
    horizon: int = 12
    batch_size: int = 256
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    optimizer: str = "adamw"
    distance: str = "one_minus_cosine"
    graph_epochs: int = 40
    graph_lr: float = 0.001
    sparsity_weight: float = 0.3
    graph_embed_dim: int = 16
    head_hidden: int = 64
    record_graphs: bool = True
    record_uploads: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"federation: unknown mode {self.mode!r}")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(
                f"federation: participation {self.participation} outside (0, 1]"
            )
        if self.rounds < 1:
            raise ValueError("federation: rounds must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("federation: local epochs must be >= 0")
        if self.task not in ("task1", "task2"):
            raise ValueError(f"federation: unknown task {self.task!r}")
        if self.dp_factor < 0.0:
            raise ValueError("federation: dp factor must be >= 0")
        if self.mode != "fedavg-head" and self.history_len != self.horizon:
            raise ValueError(
                "federation: prompt modes need history_len == horizon "
                "(the conditioned prompt is added to the input window)"
            )

    @classmethod
    def preset_main(cls, **kw) -> "FederationConfig":
        base = dict(rounds=50, local_epochs=25)
        base.update(kw)
        return cls(**base)

    @classmethod
    def preset_table1(cls, **kw) -> "FederationConfig":
        base = dict(rounds=30, local_epochs=5)
        base.update(kw)
        return cls(**base)

    def local_cfg(self) -> LocalLossConfig:
        return LocalLossConfig(
            proximity_coeff=self.proximity_coeff,
            neighbor_coeff=self.neighbor_coeff,
            subgraph_step=self.subgraph_step,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            use_regularizers=self.use_regularizers and self.mode == "fedwing",
            distance=self.distance,
        )

    def server_cfg(self, mixed_layers: list[str]) -> ServerConfig:
        return ServerConfig(
            mixing_alpha=self.mixing_alpha,
            mixing_iterations=self.mixing_iterations,
            graph_epochs=self.graph_epochs,
            graph_lr=self.graph_lr,
            sparsity_weight=self.sparsity_weight,
            graph_embed_dim=self.graph_embed_dim,
            mixed_layers=mixed_layers,
        )


@dataclass
class RoundLog:
    round_index: int
    participants: list[int]
    train_loss: dict[int, float]
    payload_up: dict[int, int]
    payload_down: dict[int, int]
    wall_time: float
    graphs: dict[str, list] | None = None
    uploads: dict[int, dict[str, np.ndarray]] | None = None

    def to_json_dict(self) -> dict:
        out = {
            "round_index": self.round_index,
            "participants": self.participants,
            "train_loss": {str(k): v for k, v in self.train_loss.items()},
            "payload_up": {str(k): v for k, v in self.payload_up.items()},
            "payload_down": {str(k): v for k, v in self.payload_down.items()},
            "wall_time": self.wall_time,
        }
        if self.graphs is not None:
            out["graphs"] = self.graphs
        return out


@dataclass
class MetricsReport:
    """Per-client and pooled forecast errors, normalized and physical."""

    mode: str
    task: str
    seed: int
    per_client: dict[int, dict[str, float]]
    aggregate: dict[str, float]
    global_model: dict[str, float]
    trainable_params: int
    uploaded_params_per_client: int

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "task": self.task,
            "seed": self.seed,
            "per_client": {str(k): v for k, v in sorted(self.per_client.items())},
            "aggregate": self.aggregate,
            "global_model": self.global_model,
            "trainable_params": self.trainable_params,
            "uploaded_params_per_client": self.uploaded_params_per_client,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def sample_clients(n_clients: int, participation: float,
                   rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of ceil(participation * N) ids."""
    if n_clients < 1:
        raise ValueError("federation: need at least one client")
    take = int(np.ceil(participation * n_clients))
    take = min(max(take, 1), n_clients)
    return sorted(int(i) for i in rng.choice(n_clients, size=take, replace=False))


def add_dp_noise(payload: dict[str, np.ndarray], factor: float,
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Privacy noise on the shared prompt payload: standard-normal noise
    scaled by ``factor`` on the three prompts; blending matrices and
    anything else ride along untouched. Factor 0 is the identity."""
    if factor < 0.0:
        raise ValueError("federation: dp factor must be >= 0")
    if factor == 0.0:
        return {k: np.array(v) for k, v in payload.items()}
    out = {}
    for k, v in payload.items():
        if k in NOISED_PROMPT_FIELDS:
            out[k] = v + factor * rng.standard_normal(v.shape)
        else:
            out[k] = np.array(v)
    return out


def mae_rmse(truth: np.ndarray, pred: np.ndarray) -> tuple[float, float]:
    """Mean absolute error and root mean squared error over all cells."""
    err = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    return mae, rmse


# ---------------------------------------------------------------------------
# client construction


def build_clients(stations: list[StationSeries], fm: TransformerFM,
                  config: FederationConfig,
                  split: SplitSpec | None = None) -> list[ClientState]:
    """Normalize, window, and initialize per-client state.

    The server initializes every client from one shared draw (prompts and
    head), so round-zero distances between clients are zero and the
    regularizers act purely on training-induced drift."""
    if not stations:
        raise ValueError("federation: empty station list")
    n_vars = stations[0].n_variables
    for st in stations:
        if st.n_variables != n_vars:
            raise ValueError("federation: stations disagree on variable count")
    if fm.config.n_features != n_vars:
        raise ValueError(
            f"federation: model expects {fm.config.n_features} variables, "
            f"dataset has {n_vars}"
        )
    split = split or SplitSpec()
    init_rng = _rng(config.seed, _PHASE_INIT)
    n_outputs = 1 if config.task == "task1" else n_vars
    head_kind = "dense" if config.mode == "fedavg-head" else "linear"
    template_prompts = (None if config.mode == "fedavg-head" else
                        AdaptivePromptSet.initialize(
                            config.horizon, n_vars, config.temporal_step,
                            config.variable_step, init_rng))
    template_head = make_head(head_kind, config.history_len, n_vars, config.horizon,
                              n_outputs, config.head_hidden, init_rng)
    mixed_names = fm.default_mixed_layers()
    fm_arrays = fm.named_arrays()

    clients: list[ClientState] = []
    for cid, st in enumerate(stations):
        normed, stats = normalize(st, split, portion="finetune_train")
        bounds = normed.values
        ranges = split.boundaries(st.n_hours)
        target = st.target_index if config.task == "task1" else None
        tr_x, tr_y = make_windows(bounds, *ranges["finetune_train"],
                                  config.history_len, config.horizon, target)
        va_x, va_y = make_windows(bounds, *ranges["finetune_val"],
                                  config.history_len, config.horizon, target)
        te_x, te_y = make_windows(bounds, *ranges["finetune_test"],
                                  config.history_len, config.horizon, target)
        prompts = None
        if template_prompts is not None:
            prompts = AdaptivePromptSet.initialize(
                config.horizon, n_vars, config.temporal_step, config.variable_step,
                np.random.default_rng(0))
            prompts.load_arrays(template_prompts.named_arrays())
        head = make_head(head_kind, config.history_len, n_vars, config.horizon,
                         n_outputs, config.head_hidden, np.random.default_rng(0))
        head.load_arrays(template_head.named_arrays())
        clients.append(ClientState(
            client_id=cid,
            geo=st.geo,
            prompts=prompts,
            head=head,
            train_x=tr_x, train_y=tr_y,
            val_x=va_x, val_y=va_y,
            test_x=te_x, test_y=te_y,
            norm_stats=stats,
            target_index=st.target_index,
            fm_overrides={k: np.array(fm_arrays[k]) for k in mixed_names},
        ))
    return clients


# ---------------------------------------------------------------------------
# evaluation


def _predict_batched(state: ClientState, fm: TransformerFM, xs: np.ndarray,
                     use_prompts: bool, chunk: int = 256) -> np.ndarray:
    preds = []
    for lo in range(0, xs.shape[0], chunk):
        preds.append(forecast(state, fm, xs[lo:lo + chunk], use_prompts=use_prompts))
    return np.concatenate(preds, axis=0)


def evaluate(clients: list[ClientState], fm: TransformerFM, task: str,
             use_prompts: bool = True,
             split_name: str = "test") -> tuple[dict[int, dict[str, float]], dict[str, float]]:
    """Eval-mode errors on each client's chosen split plus the pooled
    (sample-weighted) aggregate, in normalized and physical units."""
    per_client: dict[int, dict[str, float]] = {}
    abs_sum = sq_sum = 0.0
    abs_sum_p = sq_sum_p = 0.0
    cells = 0
    for state in clients:
        xs = getattr(state, f"{split_name}_x")
        ys = getattr(state, f"{split_name}_y")
        if xs.shape[0] == 0:
            raise ValueError(
                f"federation: client {state.client_id} has an empty {split_name} split"
            )
        pred = _predict_batched(state, fm, xs, use_prompts)
        mae, rmse = mae_rmse(ys, pred)
        variables = [state.target_index] if task == "task1" else None
        pred_phys = denormalize(pred, state.norm_stats, variables)
        truth_phys = denormalize(ys, state.norm_stats, variables)
        mae_p, rmse_p = mae_rmse(truth_phys, pred_phys)
        if rmse < mae:
            raise AssertionError(
                f"federation: metric invariant violated for client {state.client_id}"
            )
        n = int(np.prod(ys.shape))
        per_client[state.client_id] = {
            "mae": mae, "rmse": rmse,
            "mae_physical": mae_p, "rmse_physical": rmse_p,
            "n_windows": int(xs.shape[0]),
        }
        err = pred - ys
        abs_sum += float(np.abs(err).sum())
        sq_sum += float((err * err).sum())
        errp = pred_phys - truth_phys
        abs_sum_p += float(np.abs(errp).sum())
        sq_sum_p += float((errp * errp).sum())
        cells += n
    aggregate = {
        "mae": abs_sum / cells,
        "rmse": float(np.sqrt(sq_sum / cells)),
        "mae_physical": abs_sum_p / cells,
        "rmse_physical": float(np.sqrt(sq_sum_p / cells)),
        "n_clients": len(clients),
    }
    return per_client, aggregate


# ---------------------------------------------------------------------------
# the round loop


def _upload_size(payload: dict[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in payload.values()))


def _client_round(state: ClientState, fm: TransformerFM, config: FederationConfig,
                  round_index: int) -> tuple[int, dict[str, np.ndarray], dict]:
    rng = _rng(config.seed, _PHASE_LOCAL, round_index, state.client_id)
    cfg = config.local_cfg()
    if config.mode == "fedavg-head":
        payload, stats = head_only_update(
            state, fm, cfg, rng, lr=config.learning_rate,
            weight_decay=config.weight_decay, optimizer=config.optimizer)
    else:
        payload, stats = local_update(
            state, fm, cfg, rng, lr=config.learning_rate,
            weight_decay=config.weight_decay, optimizer=config.optimizer)
    return state.client_id, payload, stats


def run(config: FederationConfig, stations: list[StationSeries],
        fm: TransformerFM, outdir=None,
        split: SplitSpec | None = None) -> tuple[MetricsReport, list[RoundLog]]:
    """Execute the full protocol and (optionally) write run artifacts."""
    fm.freeze()
    clients = build_clients(stations, fm, config, split)
    n_clients = len(clients)
    mixed_names = fm.default_mixed_layers()
    server_cfg = config.server_cfg(mixed_names)
    prompt_mode = config.mode != "fedavg-head"

    # Server-side reference state.
    if prompt_mode:
        personal = {c.client_id: c.prompts.flatten() for c in clients}
        global_flat = np.mean([personal[c.client_id] for c in clients], axis=0)
        global_head = None
    else:
        personal = {}
        global_flat = None
        global_head = clients[0].head.named_arrays()

    uploaded_per_client = (
        sum(np.prod(s) for s in _prompt_shapes(clients)) if prompt_mode
        else _upload_size(global_head)
    )

    logs: list[RoundLog] = []
    for rnd in range(1, config.rounds + 1):
        t0 = time.monotonic()
        participants = sample_clients(n_clients, config.participation,
                                      _rng(config.seed, _PHASE_SAMPLE, rnd))
        part_geos = [(cid, clients[cid].geo) for cid in participants]
        personal_snapshot = {cid: np.array(v) for cid, v in personal.items()}

        down_counts: dict[int, int] = {}
        for cid in participants:
            state = clients[cid]
            down = 0
            if prompt_mode:
                if config.mode == "fedwing":
                    state.prompts.load_flat(personal_snapshot[cid])
                    state.global_ref = np.array(global_flat)
                    state.personal_ref = np.array(personal_snapshot[cid])
                    neighbors = neighbor_select(part_geos, cid, config.subgraph_step)
                    state.neighbor_refs = [personal_snapshot[j] for j in neighbors]
                    down += global_flat.size + state.personal_ref.size
                    down += sum(r.size for r in state.neighbor_refs)
                    down += sum(v.size for v in state.fm_overrides.values())
                else:
                    state.prompts.load_flat(global_flat)
                    state.global_ref = None
                    state.personal_ref = None
                    state.neighbor_refs = []
                    down += global_flat.size
            else:
                state.head.load_arrays(global_head)
                down += _upload_size(global_head)
            down_counts[cid] = down

        # Local updates: independent client work, safe to thread.
        results: dict[int, tuple[dict[str, np.ndarray], dict]] = {}
        if config.workers > 1 and len(participants) > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                futures = [pool.submit(_client_round, clients[cid], fm, config, rnd)
                           for cid in participants]
                for fut in futures:
                    cid, payload, stats = fut.result()
                    results[cid] = (payload, stats)
        else:
            for cid in participants:
                _, payload, stats = _client_round(clients[cid], fm, config, rnd)
                results[cid] = (payload, stats)

        uploads: dict[int, dict[str, np.ndarray]] = {}
        for cid in participants:
            payload, _ = results[cid]
            if config.dp_enabled and prompt_mode:
                payload = add_dp_noise(payload, config.dp_factor,
                                       _rng(config.seed, _PHASE_DP, rnd, cid))
            uploads[cid] = payload

        counts = [clients[cid].n_samples for cid in participants]
        graph_snapshot = None
        if prompt_mode:
            global_payload = aggregate_global([uploads[cid] for cid in participants],
                                              counts)
            global_flat = flatten_payload(global_payload)
            if config.mode == "fedwing" and config.graph_enabled and len(participants) >= 2:
                graph_snapshot = _graph_step(config, server_cfg, clients, participants,
                                             uploads, personal, rnd)
            elif config.mode == "fedwing":
                for cid in participants:
                    personal[cid] = np.array(global_flat)
            else:  # fedavg-prompts: everyone follows the global prompts
                for cid in personal:
                    personal[cid] = np.array(global_flat)
        else:
            global_head = aggregate_global([uploads[cid] for cid in participants],
                                           counts)
            for c in clients:
                c.head.load_arrays(global_head)

        logs.append(RoundLog(
            round_index=rnd,
            participants=participants,
            train_loss={cid: results[cid][1]["final_loss"] for cid in participants},
            payload_up={cid: _upload_size(uploads[cid]) for cid in participants},
            payload_down=down_counts,
            wall_time=time.monotonic() - t0,
            graphs=graph_snapshot if config.record_graphs else None,
            uploads=uploads if config.record_uploads else None,
        ))

    # Final models: personalized prompts are the deliverable; the global
    # model is evaluated separately.
    if prompt_mode:
        for c in clients:
            c.prompts.load_flat(personal[c.client_id])
        per_client, aggregate = evaluate(clients, fm, config.task, use_prompts=True)
        for c in clients:
            c.prompts.load_flat(global_flat)
        _, global_agg = evaluate(clients, fm, config.task, use_prompts=True)
        for c in clients:
            c.prompts.load_flat(personal[c.client_id])
        trainable = clients[0].prompts.param_count() + clients[0].head.param_count()
    else:
        per_client, aggregate = evaluate(clients, fm, config.task, use_prompts=False)
        global_agg = dict(aggregate)
        trainable = clients[0].head.param_count()

    report = MetricsReport(
        mode=config.mode,
        task=config.task,
        seed=config.seed,
        per_client=per_client,
        aggregate=aggregate,
        global_model=global_agg,
        trainable_params=int(trainable),
        uploaded_params_per_client=int(uploaded_per_client),
    )
    if outdir is not None:
        write_run_artifacts(Path(outdir), config, report, logs, clients,
                            global_flat if prompt_mode else None,
                            global_head if not prompt_mode else None, fm)
    return report, logs


def _prompt_shapes(clients: list[ClientState]) -> list[tuple[int, ...]]:
    p = clients[0].prompts
    return [getattr(p, f).shape for f in PROMPT_FIELDS]


def _graph_step(config: FederationConfig, server_cfg: ServerConfig,
                clients: list[ClientState], participants: list[int],
                uploads: dict[int, dict[str, np.ndarray]],
                personal: dict[int, np.ndarray], rnd: int) -> dict[str, list]:
    """Dynamic graph modelling over this round's uploads; updates the
    personalized prompt references and the clients' mixed model layers."""
    vec_full = np.stack([flatten_payload(uploads[cid]) for cid in participants])
    vec_tv = np.stack([
        np.concatenate([uploads[cid]["temporal"].ravel(),
                        uploads[cid]["inter_variable"].ravel()])
        for cid in participants
    ])
    vec_s = np.stack([uploads[cid]["spatial"].ravel() for cid in participants])

    a_geo = geo_adjacency([clients[cid].geo for cid in participants])
    a_spatial = cosine_adjacency(vec_s)
    a_tv = cosine_adjacency(vec_tv)
    a_cos_full = cosine_adjacency(vec_full)
    params, loss_curve = train_dgm(vec_full, a_cos_full, server_cfg,
                                   _rng(config.seed, _PHASE_GRAPH, rnd))
    a_dyn = dynamic_adjacency(vec_full, params)
    a_fused, factor = fuse(a_geo, a_spatial, a_tv, a_dyn)

    mixed_flats = reconstruct_prompts(vec_full, a_dyn, a_fused,
                                      config.mixing_alpha, config.mixing_iterations)
    for row, cid in enumerate(participants):
        personal[cid] = mixed_flats[row]

    layer_arrays = [clients[cid].fm_overrides for cid in participants]
    mixed_layers = mix_fm_layers(layer_arrays, a_dyn, a_fused,
                                 config.mixing_alpha, config.mixing_iterations)
    for cid, arrays in zip(participants, mixed_layers):
        clients[cid].fm_overrides = arrays

    return {
        "participants": list(participants),
        "geo": a_geo.tolist(),
        "spatial": a_spatial.tolist(),
        "temporal_variable": a_tv.tolist(),
        "dynamic": a_dyn.tolist(),
        "fused": a_fused.tolist(),
        "fuse_softmax": factor.tolist(),
        "dgm_loss_first": loss_curve[0],
        "dgm_loss_last": loss_curve[-1],
    }


# ---------------------------------------------------------------------------
# artifacts


def write_run_artifacts(outdir: Path, config: FederationConfig,
                        report: MetricsReport, logs: list[RoundLog],
                        clients: list[ClientState],
                        global_flat: np.ndarray | None,
                        global_head: dict[str, np.ndarray] | None,
                        fm: TransformerFM) -> None:
    """Run directory: resolved config, metrics (byte-deterministic), round
    logs, graph snapshots, and a self-contained checkpoint."""
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(
        json.dumps(asdict(config), sort_keys=True, indent=2) + "\n")
    (outdir / "metrics.json").write_text(report.to_json())
    with open(outdir / "rounds.jsonl", "w") as fh:
        for lg in logs:
            entry = lg.to_json_dict()
            entry.pop("graphs", None)
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if config.record_graphs:
        with open(outdir / "graphs.jsonl", "w") as fh:
            for lg in logs:
                if lg.graphs is None:
                    continue
                fh.write(json.dumps({"round_index": lg.round_index, **lg.graphs},
                                    sort_keys=True) + "\n")

    payload: dict[str, np.ndarray] = {}
    for c in clients:
        cid = c.client_id
        if c.prompts is not None:
            for fname, arr in c.prompts.named_arrays().items():
                payload[f"client{cid}:prompt:{fname}"] = arr
        for hname, arr in c.head.named_arrays().items():
            payload[f"client{cid}:head:{hname}"] = arr
        for oname, arr in c.fm_overrides.items():
            payload[f"client{cid}:override:{oname}"] = arr
        payload[f"client{cid}:norm_mean"] = c.norm_stats.mean
        payload[f"client{cid}:norm_std"] = c.norm_stats.std
    if global_flat is not None:
        payload["global:prompts_flat"] = global_flat
    if global_head is not None:
        for hname, arr in global_head.items():
            payload[f"global:head:{hname}"] = arr
    for pname, arr in fm.named_arrays().items():
        payload[f"fm:{pname}"] = arr
    payload["fm:config_json"] = np.array(json.dumps(asdict(fm.config), sort_keys=True))
    with open(outdir / "checkpoint.npz", "wb") as fh:
        np.savez(fh, **payload)
