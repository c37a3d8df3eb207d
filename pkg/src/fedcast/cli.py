"""Command-line driver.

Subcommands:
  synth          write a synthetic station dataset + manifest
  pretrain       masked federated pre-training -> model snapshot
  federate       run a federation mode end to end -> metrics + logs
  evaluate       recompute metrics from a run checkpoint
  inspect-graph  dump per-round adjacency matrices as text

Precedence for run parameters: defaults < preset < config file < flags.
Every command honors --seed; identical invocations are bit-reproducible.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data import DataError, SplitSpec, load_manifest, synth_generate, write_dataset
from .federation import MODES, FederationConfig, evaluate, run
from .graphs import GraphTrainingError
from .optim import MissingGradientError
from .pretrain import MaskSpec, federated_pretrain
from .tensor import TensorError
from .transformer import FMConfig, SnapshotError, TransformerFM

_GUARD_ERRORS = (DataError, TensorError, SnapshotError, GraphTrainingError,
                 MissingGradientError, ValueError, AssertionError, OSError)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    if args.stations < 1 or args.hours < 1 or args.variables < 1:
        raise DataError("cli: --stations/--hours/--variables must be positive")
    stations = synth_generate(stations=args.stations, hours=args.hours,
                              variables=args.variables, seed=args.seed)
    manifest = write_dataset(stations, args.out)
    print(manifest)
    return 0


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(args) -> int:
    stations = load_manifest(args.manifest)
    n_vars = stations[0].n_variables
    if args.fm_scale == "desk":
        config = FMConfig.desk(n_features=n_vars)
    else:
        config = FMConfig.full_scale(n_features=n_vars)
    fm, curve = federated_pretrain(
        stations, config,
        rounds=args.rounds, local_epochs=args.epochs,
        participation=args.participation, window=args.window,
        batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay,
        spec=MaskSpec(mask_rate=args.mask_rate, mean_masked_len=args.mask_mean_len),
        seed=args.seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fm.save(out)
    curve_path = out.with_suffix(".curve.json")
    curve_path.write_text(json.dumps(
        {"validation_masked_mse": curve}, sort_keys=True, indent=2) + "\n")
    print(out)
    return 0


# ---------------------------------------------------------------------------
# federate


_PRESETS = {
    "main": dict(rounds=50, local_epochs=25),
    "table1": dict(rounds=30, local_epochs=5),
}

# federate options that map straight onto FederationConfig fields
_CONFIG_FLAGS = [
    "mode", "rounds", "local_epochs", "participation", "proximity_coeff",
    "neighbor_coeff", "subgraph_step", "temporal_step", "variable_step",
    "mixing_alpha", "mixing_iterations", "dp_factor", "seed", "task",
    "history_len", "horizon", "batch_size", "learning_rate", "weight_decay",
    "optimizer", "distance", "graph_epochs", "graph_lr", "sparsity_weight",
    "graph_embed_dim", "head_hidden", "workers",
]


def _resolve_federation_config(args) -> tuple[FederationConfig, Path, Path]:
    fields = {f.name for f in dataclasses.fields(FederationConfig)}
    values: dict = {}
    manifest = args.manifest
    snapshot = args.snapshot

    if args.preset is not None:
        values.update(_PRESETS[args.preset])
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise DataError(f"cli: config file {args.config} must hold an object")
        for key, val in raw.items():
            if key == "manifest":
                manifest = manifest or val
            elif key == "snapshot":
                snapshot = snapshot or val
            elif key == "preset":
                if val not in _PRESETS:
                    raise DataError(f"cli: unknown preset {val!r} in config file")
                for k, v in _PRESETS[val].items():
                    values.setdefault(k, v)
            elif key in fields:
                values[key] = val
            else:
                raise DataError(f"cli: unknown config key {key!r}")
    for name in _CONFIG_FLAGS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if args.dp:
        values["dp_enabled"] = True
    if args.no_graph:
        values["graph_enabled"] = False
    if args.record_uploads:
        values["record_uploads"] = True
    if manifest is None:
        raise DataError("cli: federate needs --manifest (or a config file entry)")
    if snapshot is None:
        raise DataError("cli: federate needs --snapshot (or a config file entry)")
    return FederationConfig(**values), Path(manifest), Path(snapshot)


def cmd_federate(args) -> int:
    config, manifest, snapshot = _resolve_federation_config(args)
    stations = load_manifest(manifest)
    fm = TransformerFM.load(snapshot)
    outdir = Path(args.out)
    t0 = time.monotonic()
    report, _ = run(config, stations, fm, outdir=outdir)
    elapsed = time.monotonic() - t0
    print(f"mode={config.mode} task={config.task} seed={config.seed} "
          f"rounds={config.rounds} wall={elapsed:.1f}s")
    agg = report.aggregate
    print(f"test MAE {agg['mae']:.6f} RMSE {agg['rmse']:.6f} "
          f"(physical {agg['mae_physical']:.6f}/{agg['rmse_physical']:.6f})")
    print(outdir / "metrics.json")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _load_checkpoint_into_clients(run_dir: Path, clients, fm) -> None:
    with np.load(run_dir / "checkpoint.npz", allow_pickle=False) as z:
        files = set(z.files)
        for c in clients:
            cid = c.client_id
            if c.prompts is not None:
                c.prompts.load_arrays({
                    f: z[f"client{cid}:prompt:{f}"]
                    for f in c.prompts.named_arrays()
                })
            c.head.load_arrays({
                name: z[f"client{cid}:head:{name}"]
                for name in c.head.named_arrays()
            })
            c.fm_overrides = {
                key[len(f"client{cid}:override:"):]: z[key]
                for key in files if key.startswith(f"client{cid}:override:")
            }
        fm.load_arrays({key[len("fm:"):]: z[key] for key in files
                        if key.startswith("fm:") and key != "fm:config_json"})


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    config = FederationConfig(**json.loads((run_dir / "config.json").read_text()))
    manifest = Path(args.manifest) if args.manifest else None
    if manifest is None:
        raise DataError("cli: evaluate needs --manifest (the dataset of the run)")
    stations = load_manifest(manifest)

    from .federation import build_clients

    snapshot = args.snapshot
    if snapshot:
        fm = TransformerFM.load(snapshot)
    else:
        with np.load(run_dir / "checkpoint.npz", allow_pickle=False) as z:
            fm_config = FMConfig(**json.loads(str(z["fm:config_json"])))
        fm = TransformerFM(fm_config, np.random.default_rng(0))
    fm.freeze()
    clients = build_clients(stations, fm, config)
    _load_checkpoint_into_clients(run_dir, clients, fm)
    per_client, aggregate = evaluate(clients, fm, config.task,
                                     use_prompts=config.mode != "fedavg-head")

    stored = json.loads((run_dir / "metrics.json").read_text())
    drift = max(
        abs(aggregate[k] - stored["aggregate"][k])
        for k in ("mae", "rmse", "mae_physical", "rmse_physical")
    )
    print(f"normalized: MAE {aggregate['mae']:.6f} RMSE {aggregate['rmse']:.6f}")
    print(f"physical:   MAE {aggregate['mae_physical']:.6f} "
          f"RMSE {aggregate['rmse_physical']:.6f}")
    print(f"max drift vs stored metrics: {drift:.3e}")
    if drift > 1e-9:
        raise AssertionError("cli: checkpoint evaluation drifted from the stored metrics")
    return 0


# ---------------------------------------------------------------------------
# inspect-graph


def cmd_inspect_graph(args) -> int:
    run_dir = Path(args.run)
    src = run_dir / "graphs.jsonl"
    if not src.exists():
        raise DataError(f"cli: {src} not found (was the run recorded with graphs?)")
    outdir = Path(args.out) if args.out else run_dir / "graphs"
    outdir.mkdir(parents=True, exist_ok=True)
    count = 0
    matrices = ("geo", "spatial", "temporal_variable", "dynamic", "fused")
    with open(src) as fh:
        for line in fh:
            entry = json.loads(line)
            rnd = entry["round_index"]
            lines = [f"round {rnd}", f"participants {entry['participants']}"]
            for name in matrices + ("fuse_softmax",):
                lines.append(name)
                for row in entry[name]:
                    lines.append(" ".join(repr(float(x)) for x in row))
            (outdir / f"round_{rnd:04d}.txt").write_text("\n".join(lines) + "\n")
            count += 1
    print(f"{outdir} ({count} rounds)")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcast",
        description="Desk-scale federated prompt-tuning forecast simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--stations", type=int, default=12)
    p.add_argument("--hours", type=int, default=2000)
    p.add_argument("--variables", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="masked federated pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--participation", type=float, default=0.5)
    p.add_argument("--window", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--mask-mean-len", type=float, default=3.0)
    p.add_argument("--fm-scale", choices=("desk", "paper-scale"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("federate", help="run one federation experiment")
    p.add_argument("--manifest")
    p.add_argument("--snapshot")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file (unknown keys rejected)")
    p.add_argument("--preset", choices=sorted(_PRESETS))
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", dest="local_epochs", type=int)
    p.add_argument("--participation", type=float)
    p.add_argument("--proximity-coeff", dest="proximity_coeff", type=float)
    p.add_argument("--neighbor-coeff", dest="neighbor_coeff", type=float)
    p.add_argument("--subgraph-step", dest="subgraph_step", type=int)
    p.add_argument("--temporal-step", dest="temporal_step", type=int)
    p.add_argument("--variable-step", dest="variable_step", type=int)
    p.add_argument("--mixing-alpha", dest="mixing_alpha", type=float)
    p.add_argument("--mixing-iterations", dest="mixing_iterations", type=int)
    p.add_argument("--dp", action="store_true")
    p.add_argument("--dp-factor", dest="dp_factor", type=float)
    p.add_argument("--no-graph", action="store_true")
    p.add_argument("--record-uploads", action="store_true")
    p.add_argument("--task", choices=("task1", "task2"))
    p.add_argument("--history-len", dest="history_len", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--optimizer", choices=("adamw", "sgd"))
    p.add_argument("--distance", choices=("one_minus_cosine", "sq_euclidean"))
    p.add_argument("--graph-epochs", dest="graph_epochs", type=int)
    p.add_argument("--graph-lr", dest="graph_lr", type=float)
    p.add_argument("--sparsity-weight", dest="sparsity_weight", type=float)
    p.add_argument("--graph-embed-dim", dest="graph_embed_dim", type=int)
    p.add_argument("--head-hidden", dest="head_hidden", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_federate)

    p = sub.add_parser("evaluate", help="recompute metrics from a run checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--snapshot")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("inspect-graph", help="dump per-round adjacency matrices")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_inspect_graph)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _GUARD_ERRORS as err:
        return _fail(str(err))


if __name__ == "__main__":
    sys.exit(main())
