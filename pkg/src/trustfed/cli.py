"""Command-line experiment harness.

Subcommands: keygen, sweep, scenario, bench, gen-corpus, train-detector,
verify-ledger. Outputs are CSV/text artifacts; every command exits nonzero on
integrity or configuration errors and removes partial outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .errors import (
    CapacityError,
    ConfigurationError,
    ConsistencyError,
    DegenerateInputError,
    EncodingError,
    FormatError,
    IntegrityError,
    RangeError,
    ShapeError,
)
from .gnn import (
    DetectorHyper,
    TrainedDetector,
    detector_from_text,
    detector_to_text,
    identity_standardizer,
    init_gnn_blocks,
    load_corpus,
    save_corpus,
    train_detector,
    train_mlp_baseline,
)
from .ledger import DdseStore, Ledger
from .model import load_idx
from .orchestrator import (
    SimConfig,
    TIMING_PHASES,
    config_from_text,
    gen_detector_corpus,
    run_simulation,
)
from .paillier import keygen, keypair_to_text
from .util import derive_seed, fmt_float

USER_ERRORS = (
    CapacityError,
    ConfigurationError,
    ConsistencyError,
    DegenerateInputError,
    EncodingError,
    FormatError,
    IntegrityError,
    RangeError,
    ShapeError,
    OSError,
)

SWEEP_VARIABLES: dict[str, tuple[str, list, type]] = {
    "perturbation-ratio": ("perturbation_ratio", [0.2, 0.35, 0.5, 0.65, 0.8], float),
    "perturbation-steps": ("perturbation_steps", [1, 3, 5, 10], int),
    "selected-clients": ("selected_per_epoch", [10, 20, 30, 40], int),
    "connections-per-node": ("connections_per_node", [3, 4, 5, 6], int),
}

SCENARIOS: dict[str, dict] = {
    "basic": {},
    "ratio-0.8": {"perturbation_ratio": 0.8},
    "steps-10": {"perturbation_steps": 10},
    "connections-6": {"connections_per_node": 6},
}


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    group = parser.add_argument_group("config overrides (mirror SimConfig fields)")
    for f in fields(SimConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(getattr(SimConfig(), f.name), bool):
            group.add_argument(flag, default=None, choices=["true", "false"])
        else:
            group.add_argument(flag, default=None)


def _resolve_config(args: argparse.Namespace) -> SimConfig:
    if getattr(args, "config", None):
        base = config_from_text(Path(args.config).read_text(encoding="utf-8"))
    else:
        base = SimConfig()
    overrides = {}
    for f in fields(SimConfig):
        raw = getattr(args, f.name, None)
        if raw is None:
            continue
        current = getattr(base, f.name)
        if isinstance(current, bool):
            overrides[f.name] = raw == "true"
        elif isinstance(current, int):
            overrides[f.name] = int(raw)
        elif isinstance(current, float):
            overrides[f.name] = float(raw)
        else:
            overrides[f.name] = raw
    return replace(base, **overrides) if overrides else base


def _write_atomic(path: str, text: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, target)


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return fmt_float(value)
    return str(value)


def _csv_text(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(_csv_cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def _load_datasets(args: argparse.Namespace, config: SimConfig):
    """Optional IDX escape hatch: partition a real image set across clients."""
    if not getattr(args, "idx_images", None):
        return None, config
    full = load_idx(args.idx_images, args.idx_labels)
    per = config.samples_per_client
    usable = full.features.shape[0] - config.test_samples
    client_count = min(config.client_count, max(usable // per, 1))
    from .model import Dataset

    shards = [
        Dataset(
            full.features[i * per : (i + 1) * per],
            full.labels[i * per : (i + 1) * per],
            full.class_count,
        )
        for i in range(client_count)
    ]
    test = Dataset(
        full.features[usable : usable + config.test_samples],
        full.labels[usable : usable + config.test_samples],
        full.class_count,
    )
    config = replace(
        config,
        client_count=client_count,
        feature_dim=full.features.shape[1],
        class_count=full.class_count,
        hidden_dim=64,
    )
    return (shards, test), config


def cmd_keygen(args: argparse.Namespace) -> int:
    kp = keygen(args.bits, args.seed)
    _write_atomic(args.out, keypair_to_text(kp))
    print(f"wrote {args.bits}-bit key to {args.out}")
    return 0


def _sweep_point(
    config: SimConfig,
    variable: str,
    value,
    seed: int,
    corpus_runs: int,
    corpus_epochs: int,
    detector_epochs: int,
) -> tuple[float, float, float | None, float]:
    """Corpus generation plus GNN/MLP training for one sweep cell."""
    field_name = SWEEP_VARIABLES[variable][0]
    cfg = replace(
        config,
        **{field_name: value},
        encrypted=False,
        detection_enabled=False,
        global_epochs=corpus_epochs,
    )
    graphs = []
    abnormal: list[float] = []
    finals: list[float] = []
    for run_idx in range(corpus_runs):
        run_cfg = replace(cfg, seed=derive_seed("sweep-run", variable, str(value), seed, run_idx))
        sim = run_simulation(run_cfg, collect_graphs=True)
        graphs.extend(sim.graphs)
        abnormal.extend(
            m.abnormal_model_mean_accuracy
            for m in sim.metrics
            if m.abnormal_model_mean_accuracy is not None
        )
        finals.append(sim.metrics[-1].global_accuracy)
    hyper = DetectorHyper(
        seed=derive_seed("sweep-detector", variable, str(value), seed),
        epochs=detector_epochs,
    )
    gnn = train_detector(graphs, hyper)
    mlp = train_mlp_baseline(graphs, hyper, projection_dim=config.projection_dim)
    abnormal_mean = float(np.mean(abnormal)) if abnormal else None
    return (
        float(gnn.report["val_f1"]),
        float(mlp.report["val_f1"]),
        abnormal_mean,
        float(np.mean(finals)),
    )


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    if args.variable not in SWEEP_VARIABLES and args.variable != "all":
        raise ConfigurationError(f"unknown sweep variable {args.variable!r}")
    variables = list(SWEEP_VARIABLES) if args.variable == "all" else [args.variable]
    rows = []
    for variable in variables:
        _, defaults, cast = SWEEP_VARIABLES[variable]
        values = [cast(v) for v in args.values.split(",")] if args.values else defaults
        for value in values:
            for seed in range(args.seeds):
                gnn_f1, mlp_f1, abnormal, final = _sweep_point(
                    config,
                    variable,
                    value,
                    seed,
                    args.corpus_runs,
                    args.corpus_epochs,
                    args.detector_epochs,
                )
                rows.append([variable, value, seed, gnn_f1, mlp_f1, abnormal, final])
                print(
                    f"sweep {variable}={value} seed={seed}: "
                    f"gnn_f1={gnn_f1:.3f} mlp_f1={mlp_f1:.3f}"
                )
    header = [
        "variable",
        "value",
        "seed",
        "gnn_f1",
        "mlp_f1",
        "abnormal_model_accuracy",
        "global_accuracy_final",
    ]
    _write_atomic(args.out, _csv_text(header, rows))
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def train_scenario_detector(
    config: SimConfig,
    corpus_runs: int = 2,
    corpus_epochs: int = 10,
    detector_epochs: int = 200,
    ratios: tuple[float, ...] = (0.2, 0.5, 0.8),
) -> TrainedDetector:
    """Detector for defense-on runs: a ratio-grid corpus at the run config."""
    corpus_cfg = replace(
        config,
        encrypted=False,
        detection_enabled=False,
        global_epochs=corpus_epochs,
    )
    graphs = gen_detector_corpus(
        corpus_cfg,
        runs=corpus_runs,
        seeds=derive_seed("scenario-corpus", config.seed),
        ratios=list(ratios),
    )
    hyper = DetectorHyper(seed=derive_seed("scenario-detector", config.seed), epochs=detector_epochs)
    return train_detector(graphs, hyper)


def cmd_scenario(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    if args.name not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {args.name!r}")
    config = replace(config, **SCENARIOS[args.name])
    datasets, config = _load_datasets(args, config)

    if args.detector:
        detector = detector_from_text(Path(args.detector).read_text(encoding="utf-8"))
    else:
        print("training scenario detector ...")
        detector = train_scenario_detector(
            config,
            corpus_runs=args.corpus_runs,
            corpus_epochs=args.corpus_epochs,
            detector_epochs=args.detector_epochs,
        )

    conditions = {
        "non-perturbed": replace(config, perturbation_ratio=0.0, detection_enabled=False),
        "perturbed": replace(config, detection_enabled=False),
        "novel": replace(config, detection_enabled=True),
    }
    rows = []
    for name, cfg in conditions.items():
        sim = run_simulation(cfg, detector=detector if cfg.detection_enabled else None, datasets=datasets)
        for m in sim.metrics:
            rows.append([m.epoch, name, m.global_accuracy])
        print(f"scenario {args.name} {name}: final accuracy {sim.metrics[-1].global_accuracy:.3f}")
    _write_atomic(args.out, _csv_text(["epoch", "condition", "accuracy"], rows))
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    counts = [int(v) for v in args.clients.split(",")]
    rows = []
    for count in counts:
        cfg = replace(config, selected_per_epoch=count, global_epochs=1)
        blocks = init_gnn_blocks(
            cfg.projection_dim + cfg.history_window, 2, 3, 128, seed=cfg.seed
        )
        probe = TrainedDetector(
            kind="gnn",
            blocks=blocks,
            standardizer=identity_standardizer(cfg.projection_dim + cfg.history_window, 2),
            hyper=DetectorHyper(),
        )
        sim = run_simulation(cfg, detector=probe)
        record = sim.timings[0]
        row: list = [count]
        for phase in TIMING_PHASES:
            row.append(record.summed[phase])
            row.append(record.critical[phase])
        rows.append(row)
        print(
            f"bench clients={count}: total={record.total_summed:.2f}s "
            f"critical={record.total_critical:.2f}s"
        )
    header = ["clients"]
    for phase in TIMING_PHASES:
        header.extend([f"{phase}_sum", f"{phase}_max"])
    _write_atomic(args.out, _csv_text(header, rows))
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    ratios = [float(v) for v in args.ratios.split(",")] if args.ratios else None
    steps = [int(v) for v in args.steps.split(",")] if args.steps else None
    cfg = replace(
        config,
        encrypted=False,
        detection_enabled=False,
        global_epochs=args.corpus_epochs,
    )
    graphs = gen_detector_corpus(cfg, runs=args.corpus_runs, seeds=cfg.seed, ratios=ratios, steps=steps)
    save_corpus(graphs, args.out)
    print(f"wrote {len(graphs)} graphs to {args.out}")
    return 0


def cmd_train_detector(args: argparse.Namespace) -> int:
    graphs = load_corpus(args.corpus)
    hyper = DetectorHyper(seed=args.seed, epochs=args.detector_epochs)
    if args.kind == "gnn":
        detector = train_detector(graphs, hyper)
    else:
        detector = train_mlp_baseline(graphs, hyper)
    _write_atomic(args.out, detector_to_text(detector))
    report_lines = [f"{k} {v}" for k, v in sorted(detector.report.items())]
    report_text = "\n".join(report_lines) + "\n"
    if args.report:
        _write_atomic(args.report, report_text)
    print(report_text, end="")
    print(f"wrote {args.kind} detector to {args.out}")
    return 0


def cmd_verify_ledger(args: argparse.Namespace) -> int:
    store = DdseStore.load_dir(args.store) if args.store else None
    ledger = Ledger.load_file(args.ledger, store=store)
    bad = ledger.verify_chain()
    if bad is not None:
        print(f"chain invalid at block {bad}")
        return 1
    if store is not None:
        corrupt = store.verify_all()
        if corrupt:
            print(f"corrupt blobs: {' '.join(k[:12] for k in corrupt)}")
            return 1
        for block in ledger.blocks:
            for tx in block.transactions:
                for key in tx.blob_keys:
                    store.get_blob(key)
    print(f"ledger ok ({len(ledger.blocks)} blocks)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trustfed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate and store a Paillier keypair")
    p.add_argument("--bits", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("sweep", help="detection F1 sweeps (GNN vs MLP baseline)")
    p.add_argument("--variable", default="all", help="|".join(SWEEP_VARIABLES) + "|all")
    p.add_argument("--values", default=None, help="comma-separated override values")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--corpus-runs", type=int, default=4)
    p.add_argument("--corpus-epochs", type=int, default=10)
    p.add_argument("--detector-epochs", type=int, default=200)
    p.add_argument("--out", required=True)
    _add_config_arguments(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("scenario", help="global-model accuracy under three conditions")
    p.add_argument("--name", required=True, choices=sorted(SCENARIOS))
    p.add_argument("--out", required=True)
    p.add_argument("--detector", default=None, help="reuse a trained detector file")
    p.add_argument("--corpus-runs", type=int, default=2)
    p.add_argument("--corpus-epochs", type=int, default=10)
    p.add_argument("--detector-epochs", type=int, default=200)
    p.add_argument("--idx-images", default=None)
    p.add_argument("--idx-labels", default=None)
    _add_config_arguments(p)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("bench", help="per-phase timing for one epoch per client count")
    p.add_argument("--clients", default="10,20,30,40")
    p.add_argument("--out", required=True)
    _add_config_arguments(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-corpus", help="write a labeled detector-training corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus-runs", type=int, default=4)
    p.add_argument("--corpus-epochs", type=int, default=10)
    p.add_argument("--ratios", default=None)
    p.add_argument("--steps", default=None)
    _add_config_arguments(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-detector", help="train from a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--kind", default="gnn", choices=["gnn", "mlp"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--detector-epochs", type=int, default=200)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("verify-ledger", help="verify chain hashes and blob integrity")
    p.add_argument("--ledger", required=True)
    p.add_argument("--store", default=None)
    p.set_defaults(func=cmd_verify_ledger)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
