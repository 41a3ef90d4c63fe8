"""Single-process epoch state machine wiring clients, pre-processing nodes,
the ledger layer and the elected aggregator.

One epoch: selected clients train and encrypt (malicious ones additionally
poison their model); nodes project and semi-aggregate; blobs and graph edges
land in the DDSE store with ledger transactions; a contract elects the
aggregator, whose access-checked fetch, decryption, detection and aggregation
produce the next global model; the outcome is uploaded and the next epoch's
clients are notified. Every exchange leaves a transaction.

Runs are fully deterministic in (config, seed). The ``encrypted`` switch
trades the Paillier path for a numerically equivalent plaintext fast path
(used for detector-corpus sweeps); blob and ledger layouts are identical.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import aggregator as agg
from .errors import ConfigurationError, FormatError, IntegrityError
from .gnn import BipartiteGraph, TrainedDetector, detect, f1_score
from .ledger import (
    Action,
    AggregatorPolicy,
    DdseStore,
    Ledger,
    Role,
    Transaction,
    TxType,
    check_access,
    choose_aggregator,
    default_access_rules,
)
from .model import (
    Dataset,
    ModelParams,
    TrainConfig,
    evaluate,
    gen_synthetic,
    init_model,
    local_train,
    model_from_text,
    model_to_text,
    param_count,
    perturb,
)
from .paillier import FixedPointCodec, keygen
from .preproc import (
    EncryptedModel,
    EncryptedVector,
    NodeAssignment,
    assign_clients,
    encrypt_model,
    encrypted_from_text,
    encrypted_to_text,
    make_projection_matrix,
    project_encrypted,
    semi_aggregate,
)
from .util import derive_seed, fmt_float

TIMING_PHASES = ("train", "encrypt", "project", "semi_aggregate", "decrypt", "analyze")


@dataclass
class SimConfig:
    client_count: int = 100
    samples_per_client: int = 600
    selected_per_epoch: int = 20
    local_epochs: int = 10
    preproc_nodes: int = 10
    connections_per_node: int = 5
    perturbation_ratio: float = 0.5
    perturbation_steps: int = 3
    projection_dim: int = 32
    key_bits: int = 128
    global_epochs: int = 20
    seed: int = 0
    aggregator_policy: str = "round-robin"
    detector_params_path: str = ""
    class_count: int = 10
    feature_dim: int = 64
    hidden_dim: int = 32
    learning_rate: float = 0.05
    batch_size: int = 64
    history_window: int = 8
    scale_bits: int = 16
    encrypted: bool = True
    detection_enabled: bool = True
    detection_threshold: float = 0.5
    aggregator_candidates: int = 3
    test_samples: int = 1000
    noise_scale: float = 2.0

    def __post_init__(self) -> None:
        if self.selected_per_epoch > self.client_count:
            raise ConfigurationError("selected-per-epoch exceeds client-count")
        if not 0.0 <= self.perturbation_ratio <= 1.0:
            raise ConfigurationError("perturbation-ratio must lie in [0, 1]")
        if self.connections_per_node > self.selected_per_epoch:
            raise ConfigurationError("connections-per-node exceeds selected clients")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(self.feature_dim, self.hidden_dim), (self.hidden_dim, self.class_count)]


@dataclass
class EpochMetrics:
    epoch: int
    global_accuracy: float
    detection_f1: float | None
    baseline_f1: float | None
    abnormal_model_mean_accuracy: float | None
    flagged_count: int
    selected_clients: list[str]


@dataclass
class TimingRecord:
    """Per-phase wall-clock seconds: summed over units and critical-path
    (max over units that would run in parallel)."""

    summed: dict[str, float] = field(default_factory=dict)
    critical: dict[str, float] = field(default_factory=dict)

    @property
    def total_summed(self) -> float:
        return sum(self.summed.values())

    @property
    def total_critical(self) -> float:
        return sum(self.critical.values())


class _PhaseTimer:
    def __init__(self) -> None:
        self.units: dict[str, list[float]] = {p: [] for p in TIMING_PHASES}

    def add(self, phase: str, seconds: float) -> None:
        self.units[phase].append(seconds)

    def record(self) -> TimingRecord:
        summed = {p: float(sum(v)) for p, v in self.units.items()}
        critical = {p: float(max(v)) if v else 0.0 for p, v in self.units.items()}
        return TimingRecord(summed=summed, critical=critical)


def _plain_blob(label: str, owner: str, values: np.ndarray) -> bytes:
    lines = [f"plain {label}", f"owner {owner}", f"count {values.size}"]
    lines.extend(fmt_float(v) for v in values.tolist())
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_plain_blob(blob: bytes) -> tuple[str, str, np.ndarray]:
    lines = blob.decode("utf-8").splitlines()
    if not lines or not lines[0].startswith("plain "):
        raise FormatError("not a plain vector blob")
    label = lines[0].split(" ", 1)[1]
    owner = lines[1].split(" ", 1)[1]
    count = int(lines[2].split(" ", 1)[1])
    values = np.array([float(v) for v in lines[3 : 3 + count]])
    return label, owner, values


def _edges_blob(assignment: NodeAssignment) -> bytes:
    lines = [f"epoch {assignment.epoch}"]
    lines.extend(f"{n} {c}" for n, c in assignment.edges)
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_edges_blob(blob: bytes) -> NodeAssignment:
    lines = blob.decode("utf-8").splitlines()
    epoch = int(lines[0].split(" ", 1)[1])
    edges = [tuple(line.split(" ")) for line in lines[1:] if line]
    return NodeAssignment(edges=[(n, c) for n, c in edges], epoch=epoch)


def _id_list_blob(label: str, ids: list[str]) -> bytes:
    return (f"{label} " + " ".join(ids) + "\n").encode("utf-8")


def _parse_id_list_blob(blob: bytes) -> list[str]:
    parts = blob.decode("utf-8").split()
    return parts[1:]


def _accs_blob(accuracies: dict[str, float]) -> bytes:
    lines = [f"{n} {fmt_float(a)}" for n, a in sorted(accuracies.items())]
    return ("\n".join(lines) + "\n").encode("utf-8")


def projection_owners(assignment: NodeAssignment, node_ids: list[str]) -> dict[str, list[str]]:
    """Which node computes (and uploads) each client's projection: the first
    node in id order whose edge list contains the client."""
    owners: dict[str, list[str]] = {n: [] for n in node_ids}
    seen: set[str] = set()
    for node in node_ids:
        for client in assignment.clients_of(node):
            if client not in seen:
                seen.add(client)
                owners[node].append(client)
    return owners


class Simulation:
    """Deterministic single-process run of the trusted architecture."""

    def __init__(
        self,
        config: SimConfig,
        detector: TrainedDetector | None = None,
        baseline: TrainedDetector | None = None,
        datasets: tuple[list[Dataset], Dataset] | None = None,
        collect_graphs: bool = False,
    ) -> None:
        if config.detection_enabled and detector is None:
            raise ConfigurationError(
                "detection is enabled but no detector was provided; "
                "disable detection for corpus-generation runs"
            )
        self.config = config
        self.detector = detector
        self.baseline = baseline
        self.collect_graphs = collect_graphs

        if datasets is None:
            self.shards, self.test_set = gen_synthetic(
                config.class_count,
                config.feature_dim,
                config.samples_per_client,
                config.client_count,
                config.seed,
                test_samples=config.test_samples,
                noise_scale=config.noise_scale,
            )
        else:
            self.shards, self.test_set = datasets

        self.client_ids = [f"client-{i:03d}" for i in range(config.client_count)]
        self.node_ids = [f"node-{i:02d}" for i in range(config.preproc_nodes)]
        self.candidates = [f"agg-{i}" for i in range(config.aggregator_candidates)]
        self.shard_of = dict(zip(self.client_ids, self.shards))

        self.keypair = keygen(config.key_bits, derive_seed("sim-key", config.seed))
        self.codec = FixedPointCodec(n=self.keypair.n, scale_bits=config.scale_bits)
        self.matrix = make_projection_matrix(
            config.projection_dim,
            param_count(config.layer_shapes),
            config.seed,
            self.codec,
        )
        self.global_model = init_model(config.layer_shapes, derive_seed("global-model", config.seed))
        self.store = DdseStore()
        self.ledger = Ledger(store=self.store)
        self.rules = default_access_rules()

        rng = random.Random(derive_seed("selection-0", config.seed))
        self.selected = sorted(rng.sample(self.client_ids, config.selected_per_epoch))
        malicious_count = round(config.perturbation_ratio * config.selected_per_epoch)
        self.malicious = set(
            random.Random(derive_seed("malicious", config.seed)).sample(
                self.selected, malicious_count
            )
        )
        self.history: list[set[str]] = []
        self.epoch = 0
        self.metrics: list[EpochMetrics] = []
        self.timings: list[TimingRecord] = []
        self.graphs: list[BipartiteGraph] = []

    # ------------------------------------------------------------------ #

    def _train_and_encrypt(
        self, timer: _PhaseTimer
    ) -> tuple[dict[str, ModelParams], dict[str, EncryptedModel]]:
        cfg = self.config
        local_models: dict[str, ModelParams] = {}
        encrypted: dict[str, EncryptedModel] = {}
        for client in self.selected:
            train_cfg = TrainConfig(
                learning_rate=cfg.learning_rate,
                batch_size=cfg.batch_size,
                local_epochs=cfg.local_epochs,
                seed=derive_seed("local-train", cfg.seed, self.epoch, client),
            )
            start = time.perf_counter()
            model = local_train(self.global_model, self.shard_of[client], train_cfg)
            if client in self.malicious:
                model = perturb(model, self.shard_of[client], cfg.perturbation_steps, train_cfg)
            timer.add("train", time.perf_counter() - start)
            local_models[client] = model
            if cfg.encrypted:
                start = time.perf_counter()
                enc_rng = random.Random(derive_seed("encrypt", cfg.seed, self.epoch, client))
                encrypted[client] = encrypt_model(
                    self.keypair.public, model, self.codec, enc_rng, owner_client_id=client
                )
                timer.add("encrypt", time.perf_counter() - start)
        return local_models, encrypted

    def _preprocess(
        self,
        assignment: NodeAssignment,
        local_models: dict[str, ModelParams],
        encrypted: dict[str, EncryptedModel],
        timer: _PhaseTimer,
    ) -> tuple[dict, dict, dict[str, float], dict[str, int]]:
        """Alg. 1 per node; projections are computed once per client by the
        node that first holds it."""
        cfg = self.config
        owners = projection_owners(assignment, self.node_ids)
        projections: dict[str, object] = {}
        semi: dict[str, object] = {}
        weight_sums: dict[str, float] = {}
        client_counts: dict[str, int] = {}
        for node in self.node_ids:
            clients = assignment.clients_of(node)
            client_counts[node] = len(set(clients))
            start = time.perf_counter()
            for client in owners[node]:
                if cfg.encrypted:
                    projections[client] = project_encrypted(
                        self.keypair.public, encrypted[client], self.matrix, self.codec
                    )
                else:
                    projections[client] = self.matrix.entries @ local_models[client].weights
            timer.add("project", time.perf_counter() - start)
            start = time.perf_counter()
            weights = [1.0] * len(clients)
            if cfg.encrypted:
                semi[node] = semi_aggregate(
                    self.keypair.public,
                    [encrypted[c] for c in clients],
                    weights,
                    self.codec,
                )
            else:
                total = np.zeros_like(local_models[clients[0]].weights)
                for c, w in zip(clients, weights):
                    total += w * local_models[c].weights
                semi[node] = total
            timer.add("semi_aggregate", time.perf_counter() - start)
            weight_sums[node] = float(sum(weights))
        return projections, semi, weight_sums, client_counts

    def _upload_preprocessed(
        self,
        assignment: NodeAssignment,
        projections: dict,
        semi: dict,
    ) -> tuple[dict[str, str], dict[str, str], str]:
        cfg = self.config
        owners = projection_owners(assignment, self.node_ids)
        proj_keys: dict[str, str] = {}
        semi_keys: dict[str, str] = {}
        txs: list[Transaction] = []
        for node in self.node_ids:
            if cfg.encrypted:
                semi_blob = encrypted_to_text(
                    semi[node].ciphertexts, semi[node].scale, owner=node
                ).encode("utf-8")
            else:
                semi_blob = _plain_blob("semi-sum", node, semi[node])
            semi_keys[node] = self.store.put_blob(semi_blob)
            keys = [semi_keys[node]]
            for client in owners[node]:
                if cfg.encrypted:
                    blob = encrypted_to_text(
                        projections[client].ciphertexts,
                        projections[client].scale,
                        owner=client,
                    ).encode("utf-8")
                else:
                    blob = _plain_blob("projection", client, projections[client])
                proj_keys[client] = self.store.put_blob(blob)
                keys.append(proj_keys[client])
            txs.append(
                Transaction(TxType.UPLOAD_PREPROCESSED, self.epoch, node, keys)
            )
        edges_key = self.store.put_blob(_edges_blob(assignment))
        txs.append(
            Transaction(TxType.UPLOAD_PREPROCESSED, self.epoch, "preproc-layer", [edges_key])
        )
        self.ledger.append_block(txs)
        return proj_keys, semi_keys, edges_key

    def _fetch_preprocessed(
        self,
        proj_keys: dict[str, str],
        semi_keys: dict[str, str],
        edges_key: str,
        aggregator_id: str,
    ) -> agg.EpochAggregationInput:
        all_keys = [edges_key] + [semi_keys[n] for n in sorted(semi_keys)] + [
            proj_keys[c] for c in sorted(proj_keys)
        ]
        allowed = check_access(
            self.rules, aggregator_id, Role.SELECTED_AGGREGATOR, Action.READ_PREPROCESSED
        )
        self.ledger.log_read_decision(self.epoch, aggregator_id, all_keys, allowed)
        if not allowed:
            raise IntegrityError("elected aggregator was denied read access")
        return self._load_inputs(proj_keys, semi_keys, edges_key)

    def _load_inputs(
        self,
        proj_keys: dict[str, str],
        semi_keys: dict[str, str],
        edges_key: str,
    ) -> agg.EpochAggregationInput:
        assignment = _parse_edges_blob(self.store.get_blob(edges_key))
        weight_sums = {}
        client_counts = {}
        for node in self.node_ids:
            clients = assignment.clients_of(node)
            weight_sums[node] = float(len(clients))
            client_counts[node] = len(set(clients))

        if self.config.encrypted:
            enc_proj = {}
            for client, key in proj_keys.items():
                cts, scale, _ = encrypted_from_text(self.store.get_blob(key).decode("utf-8"))
                enc_proj[client] = EncryptedVector(ciphertexts=cts, scale=scale)
            enc_semi = {}
            for node, key in semi_keys.items():
                cts, scale, owner = encrypted_from_text(
                    self.store.get_blob(key).decode("utf-8")
                )
                enc_semi[node] = EncryptedModel(ciphertexts=cts, scale=scale, owner_client_id=owner)
            return agg.EpochAggregationInput(
                assignment=assignment,
                history=list(self.history),
                test_set=self.test_set,
                weight_sums=weight_sums,
                client_counts=client_counts,
                encrypted_projections=enc_proj,
                encrypted_semi_aggregates=enc_semi,
            )
        plain_proj = {}
        for client, key in proj_keys.items():
            _, _, values = _parse_plain_blob(self.store.get_blob(key))
            plain_proj[client] = values
        plain_semi = {}
        for node, key in semi_keys.items():
            _, _, values = _parse_plain_blob(self.store.get_blob(key))
            plain_semi[node] = values
        return agg.EpochAggregationInput(
            assignment=assignment,
            history=list(self.history),
            test_set=self.test_set,
            weight_sums=weight_sums,
            client_counts=client_counts,
            plain_projections=plain_proj,
            plain_semi_sums=plain_semi,
        )

    def _data_processing(
        self, inputs: agg.EpochAggregationInput, timer: _PhaseTimer
    ) -> tuple[agg.EpochAggregationOutput, BipartiteGraph]:
        cfg = self.config
        start = time.perf_counter()
        if inputs.encrypted_semi_aggregates is not None:
            node_models = agg.decrypt_semi_aggregates(
                self.keypair,
                inputs.encrypted_semi_aggregates,
                inputs.weight_sums,
                self.codec,
                cfg.layer_shapes,
                inputs.client_counts,
            )
            projections = agg.decrypt_projections(
                self.keypair, inputs.encrypted_projections or {}, self.codec
            )
        else:
            node_models = {
                node: ModelParams(total / inputs.weight_sums[node], list(cfg.layer_shapes))
                for node, total in sorted(inputs.plain_semi_sums.items())
            }
            projections = dict(sorted(inputs.plain_projections.items()))
        timer.add("decrypt", time.perf_counter() - start)

        start = time.perf_counter()
        from .gnn import build_graph, select_clients

        accuracies = agg.evaluate_nodes(node_models, inputs.test_set)
        graph = build_graph(
            projections,
            inputs.history,
            accuracies,
            inputs.assignment,
            history_window=cfg.history_window,
        )
        if self.detector is not None and cfg.detection_enabled:
            result = detect(self.detector, graph, cfg.detection_threshold)
            flagged, probabilities = result.flagged, result.probabilities
            next_clients = select_clients(
                probabilities, self.client_ids, cfg.selected_per_epoch
            )
        else:
            flagged, probabilities = set(), {}
            next_clients = list(self.selected)
        global_model = agg.global_aggregate(
            node_models, flagged, accuracies, inputs.assignment
        )
        timer.add("analyze", time.perf_counter() - start)

        output = agg.EpochAggregationOutput(
            flagged=flagged,
            next_clients=next_clients,
            node_accuracies=accuracies,
            global_model=global_model,
            probabilities=probabilities,
            projections=projections,
        )
        return output, graph

    def run_epoch(self) -> tuple[EpochMetrics, TimingRecord]:
        cfg = self.config
        timer = _PhaseTimer()
        epoch = self.epoch

        # Steps 1-2: local training, encryption, upload to assigned nodes.
        local_models, encrypted = self._train_and_encrypt(timer)
        assignment = assign_clients(
            self.selected, self.node_ids, cfg.connections_per_node, cfg.seed, epoch=epoch
        )
        # Step 3: per-node pre-processing.
        projections, semi, weight_sums, client_counts = self._preprocess(
            assignment, local_models, encrypted, timer
        )
        # Step 4: blobs plus transactions.
        proj_keys, semi_keys, edges_key = self._upload_preprocessed(
            assignment, projections, semi
        )
        # Step 5: aggregator election contract.
        aggregator_id = choose_aggregator(
            self.candidates,
            epoch,
            AggregatorPolicy(cfg.aggregator_policy),
            prev_block_hash=self.ledger.tip_hash,
            seed=cfg.seed,
        )
        self.ledger.append_block(
            [Transaction(TxType.AGGREGATOR_SELECTED, epoch, aggregator_id, [])]
        )
        # Step 6: access-checked fetch.
        inputs = self._fetch_preprocessed(proj_keys, semi_keys, edges_key, aggregator_id)
        # Step 7: data processing (Alg. 2).
        output, graph = self._data_processing(inputs, timer)
        # Step 8: outputs uploaded.
        global_blob = model_to_text(output.global_model).encode("utf-8")
        global_key = self.store.put_blob(global_blob)
        accs_key = self.store.put_blob(_accs_blob(output.node_accuracies))
        flags_key = self.store.put_blob(_id_list_blob("flagged", sorted(output.flagged)))
        next_key = self.store.put_blob(_id_list_blob("selected", output.next_clients))
        self.ledger.append_block(
            [
                Transaction(
                    TxType.UPLOAD_GLOBAL,
                    epoch,
                    aggregator_id,
                    [global_key, accs_key, flags_key, next_key],
                )
            ]
        )
        # Steps 9-10: notification and download of the new global model.
        self.ledger.append_block(
            [
                Transaction(
                    TxType.CLIENT_NOTIFY, epoch, "preproc-layer", [global_key, next_key]
                )
            ]
        )
        new_global = model_from_text(self.store.get_blob(global_key).decode("utf-8"))

        # Simulator-side bookkeeping and metrics (omniscient view).
        truth = self.malicious & set(self.selected)
        detection_f1 = None
        baseline_f1 = None
        if self.detector is not None and cfg.detection_enabled:
            detection_f1 = f1_score(output.flagged, truth, set(self.selected))
            if self.baseline is not None:
                base_result = detect(self.baseline, graph, cfg.detection_threshold)
                baseline_f1 = f1_score(base_result.flagged, truth, set(self.selected))
        abnormal = None
        if truth:
            abnormal = float(
                np.mean([evaluate(local_models[c], self.test_set) for c in sorted(truth)])
            )
        metrics = EpochMetrics(
            epoch=epoch,
            global_accuracy=evaluate(new_global, self.test_set),
            detection_f1=detection_f1,
            baseline_f1=baseline_f1,
            abnormal_model_mean_accuracy=abnormal,
            flagged_count=len(output.flagged),
            selected_clients=list(self.selected),
        )
        if self.collect_graphs:
            labeled = replace(
                graph,
                labels=np.array(
                    [1.0 if c in self.malicious else 0.0 for c in graph.client_ids]
                ),
            )
            self.graphs.append(labeled)

        self.history.append(set(self.selected))
        self.selected = sorted(output.next_clients)
        self.global_model = new_global
        self.epoch += 1
        self.metrics.append(metrics)
        record = timer.record()
        self.timings.append(record)
        return metrics, record

    def run(self, epochs: int | None = None) -> list[EpochMetrics]:
        for _ in range(self.config.global_epochs if epochs is None else epochs):
            self.run_epoch()
        return self.metrics


def run_simulation(
    config: SimConfig,
    detector: TrainedDetector | None = None,
    baseline: TrainedDetector | None = None,
    datasets: tuple[list[Dataset], Dataset] | None = None,
    collect_graphs: bool = False,
) -> Simulation:
    """Run ``config.global_epochs`` epochs and return the finished simulation."""
    sim = Simulation(
        config,
        detector=detector,
        baseline=baseline,
        datasets=datasets,
        collect_graphs=collect_graphs,
    )
    sim.run()
    return sim


def gen_detector_corpus(
    config: SimConfig,
    runs: int,
    seeds: int | list[int],
    ratios: list[float] | None = None,
    steps: list[int] | None = None,
) -> list[BipartiteGraph]:
    """Labeled graphs from detection-disabled runs, optionally over a
    ratio/steps grid. Selection stays fixed per run so each graph carries
    round(ratio * selected) malicious clients."""
    if runs < 1:
        raise ConfigurationError("corpus generation needs runs >= 1")
    ratio_values = ratios if ratios is not None else [config.perturbation_ratio]
    step_values = steps if steps is not None else [config.perturbation_steps]
    graphs: list[BipartiteGraph] = []
    for ratio in ratio_values:
        for step in step_values:
            for run_idx in range(runs):
                if isinstance(seeds, list):
                    base = seeds[run_idx % len(seeds)]
                else:
                    base = seeds
                run_seed = derive_seed("corpus-run", base, ratio, step, run_idx)
                cfg = replace(
                    config,
                    perturbation_ratio=ratio,
                    perturbation_steps=step,
                    seed=run_seed,
                    detection_enabled=False,
                )
                sim = run_simulation(cfg, collect_graphs=True)
                graphs.extend(sim.graphs)
    return graphs


def replay_epoch(
    ledger: Ledger,
    store: DdseStore,
    epoch: int,
    config: SimConfig,
    detector: TrainedDetector | None = None,
) -> bytes:
    """Recompute epoch's global-model blob purely from ledger + store.

    Returns the serialized bytes, which must equal the blob referenced by the
    epoch's UploadGlobal transaction for an untampered run.
    """
    upload_block = None
    history_keys: dict[int, str] = {}
    for block in ledger.blocks:
        for tx in block.transactions:
            if tx.tx_type is TxType.UPLOAD_PREPROCESSED and tx.epoch == epoch:
                upload_block = block
            if tx.tx_type is TxType.CLIENT_NOTIFY and tx.epoch < epoch:
                history_keys[tx.epoch] = tx.blob_keys[1]
    if upload_block is None:
        raise IntegrityError(f"no pre-processed upload recorded for epoch {epoch}")

    sim = Simulation(
        replace(config, detection_enabled=detector is not None, global_epochs=0),
        detector=detector,
    )
    sim.store = store
    initial_selected = list(sim.selected)  # C_0 from the config seed
    edges_key = ""
    proj_keys: dict[str, str] = {}
    semi_keys: dict[str, str] = {}
    for tx in upload_block.transactions:
        if tx.actor_id == "preproc-layer":
            edges_key = tx.blob_keys[0]
            continue
        for i, key in enumerate(tx.blob_keys):
            blob = store.get_blob(key)
            if config.encrypted:
                _, _, owner = encrypted_from_text(blob.decode("utf-8"))
            else:
                _, owner, _ = _parse_plain_blob(blob)
            if i == 0:
                semi_keys[owner] = key
            else:
                proj_keys[owner] = key
    if not edges_key:
        raise IntegrityError("epoch upload lacks the assignment edges blob")

    # Selection history: C_0 comes from the config; later epochs from the
    # notify records (epoch p's notification carries the epoch-p+1 selection).
    history: list[set[str]] = []
    for past in range(epoch):
        if past == 0:
            history.append(set(initial_selected))
        elif (past - 1) in history_keys:
            history.append(
                set(_parse_id_list_blob(store.get_blob(history_keys[past - 1])))
            )
    sim.history = history
    sim.epoch = epoch
    assignment = _parse_edges_blob(store.get_blob(edges_key))
    sim.selected = sorted({c for _, c in assignment.edges})

    inputs = sim._load_inputs(proj_keys, semi_keys, edges_key)
    return model_to_text(sim._data_processing(inputs, _PhaseTimer())[0].global_model).encode(
        "utf-8"
    )


def config_to_text(config: SimConfig) -> str:
    lines = []
    for f in fields(SimConfig):
        lines.append(f"{f.name}={getattr(config, f.name)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> SimConfig:
    kwargs: dict[str, object] = {}
    types = {f.name: f.type for f in fields(SimConfig)}
    defaults = SimConfig()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, _, value = line.partition("=")
        name = name.strip()
        value = value.strip()
        if name not in types:
            raise FormatError(f"unknown config field {name!r}")
        current = getattr(defaults, name)
        if isinstance(current, bool):
            kwargs[name] = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            kwargs[name] = int(value)
        elif isinstance(current, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return SimConfig(**kwargs)
