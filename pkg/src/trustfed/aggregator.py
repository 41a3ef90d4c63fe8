"""Elected-aggregator data processing: decryption, node evaluation,
anomaly filtering and global model formation.

The aggregator only ever sees 32-dimensional projection vectors and per-node
semi-aggregates; no individual client model reaches this module unless a node
aggregates a single client, which is reported with a warning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, RangeError
from .gnn import TrainedDetector, build_graph, detect, select_clients
from .model import Dataset, ModelParams, evaluate
from .paillier import FixedPointCodec, PaillierCiphertext, PaillierKeyPair, decrypt, signed_magnitude
from .preproc import EncryptedModel, EncryptedVector, NodeAssignment


@dataclass
class EpochAggregationInput:
    """Everything the elected aggregator fetches for one epoch.

    Either the encrypted fields or the plain fields are populated, depending
    on whether the run exercises the cryptographic path or the numerically
    equivalent plaintext fast path.
    """

    assignment: NodeAssignment
    history: list[set[str]]
    test_set: Dataset
    weight_sums: dict[str, float]
    client_counts: dict[str, int]
    encrypted_projections: dict[str, EncryptedVector] | None = None
    encrypted_semi_aggregates: dict[str, EncryptedModel] | None = None
    plain_projections: dict[str, np.ndarray] | None = None
    plain_semi_sums: dict[str, np.ndarray] | None = None


@dataclass
class EpochAggregationOutput:
    flagged: set[str]
    next_clients: list[str]
    node_accuracies: dict[str, float]
    global_model: ModelParams
    probabilities: dict[str, float] = field(default_factory=dict)
    projections: dict[str, np.ndarray] = field(default_factory=dict)


def _decrypt_checked(kp: PaillierKeyPair, ct: PaillierCiphertext) -> int:
    """Decrypt and reject plaintexts outside the ciphertext's tracked range,
    which catches decryption under a mismatched key."""
    m = decrypt(kp, ct)
    if ct.mag_bound is not None and signed_magnitude(m, kp.n) > ct.mag_bound:
        raise RangeError(
            "decrypted value exceeds the tracked plaintext bound; wrong key?"
        )
    return m


def decrypt_projections(
    kp: PaillierKeyPair,
    vectors: dict[str, EncryptedVector],
    codec: FixedPointCodec,
) -> dict[str, np.ndarray]:
    """Per-client plaintext projection vectors."""
    out: dict[str, np.ndarray] = {}
    for client, vec in sorted(vectors.items()):
        values = [
            codec.decode(_decrypt_checked(kp, ct), vec.scale) for ct in vec.ciphertexts
        ]
        out[client] = np.array(values)
    return out


def decrypt_semi_aggregates(
    kp: PaillierKeyPair,
    aggregates: dict[str, EncryptedModel],
    weight_sums: dict[str, float],
    codec: FixedPointCodec,
    layer_shapes: list[tuple[int, int]],
    client_counts: dict[str, int] | None = None,
) -> dict[str, ModelParams]:
    """Decrypt each node's weighted sum and finish FedAvg by dividing."""
    out: dict[str, ModelParams] = {}
    for node, em in sorted(aggregates.items()):
        total = weight_sums[node]
        if total <= 0:
            raise ConfigurationError(f"node {node} has non-positive weight sum")
        if client_counts is not None and client_counts.get(node, 0) == 1:
            warnings.warn(
                f"node {node} aggregates a single client; its plaintext model "
                "is exposed to the aggregator",
                RuntimeWarning,
                stacklevel=2,
            )
        weights = np.array(
            [codec.decode(_decrypt_checked(kp, ct), em.scale) for ct in em.ciphertexts]
        )
        out[node] = ModelParams(weights / total, list(layer_shapes))
    return out


def evaluate_nodes(
    node_models: dict[str, ModelParams], test_set: Dataset
) -> dict[str, float]:
    return {node: evaluate(m, test_set) for node, m in sorted(node_models.items())}


def global_aggregate(
    node_models: dict[str, ModelParams],
    flagged: set[str],
    node_accuracies: dict[str, float],
    assignment: NodeAssignment,
) -> ModelParams:
    """Average the nodes whose clients are all unflagged, weighted by client
    count; if every node is tainted, keep the top half by accuracy."""
    if not node_models:
        raise ConfigurationError("global aggregation needs at least one node model")
    node_clients = {n: set(assignment.clients_of(n)) for n in node_models}
    include = [n for n in sorted(node_models) if not (node_clients[n] & flagged)]
    if not include:
        keep = math.ceil(len(node_models) / 2)
        ranked = sorted(node_models, key=lambda n: (-node_accuracies[n], n))
        include = sorted(ranked[:keep])
    counts = np.array([float(len(node_clients[n])) for n in include])
    weights = counts / counts.sum()
    shapes = node_models[include[0]].layer_shapes
    acc = np.zeros_like(node_models[include[0]].weights)
    for w, node in zip(weights, include):
        acc += w * node_models[node].weights
    return ModelParams(acc, list(shapes))


def run_data_processing(
    inputs: EpochAggregationInput,
    layer_shapes: list[tuple[int, int]],
    kp: PaillierKeyPair | None = None,
    codec: FixedPointCodec | None = None,
    detector: TrainedDetector | None = None,
    threshold: float = 0.5,
    pool: list[str] | None = None,
    select_count: int | None = None,
    current_clients: list[str] | None = None,
    history_window: int = 8,
) -> EpochAggregationOutput:
    """The full per-epoch processing pass.

    With no detector (corpus-generation mode) nothing is flagged and the
    client selection carries over unchanged.
    """
    if inputs.encrypted_semi_aggregates is not None:
        assert kp is not None and codec is not None
        node_models = decrypt_semi_aggregates(
            kp,
            inputs.encrypted_semi_aggregates,
            inputs.weight_sums,
            codec,
            layer_shapes,
            inputs.client_counts,
        )
        projections = decrypt_projections(kp, inputs.encrypted_projections or {}, codec)
    else:
        assert inputs.plain_semi_sums is not None and inputs.plain_projections is not None
        node_models = {
            node: ModelParams(total / inputs.weight_sums[node], list(layer_shapes))
            for node, total in sorted(inputs.plain_semi_sums.items())
        }
        projections = dict(sorted(inputs.plain_projections.items()))

    accuracies = evaluate_nodes(node_models, inputs.test_set)
    graph = build_graph(
        projections,
        inputs.history,
        accuracies,
        inputs.assignment,
        history_window=history_window,
    )
    if detector is not None:
        result = detect(detector, graph, threshold)
        flagged, probabilities = result.flagged, result.probabilities
        assert pool is not None and select_count is not None
        next_clients = select_clients(probabilities, pool, select_count)
    else:
        flagged, probabilities = set(), {}
        next_clients = sorted(current_clients or [])

    global_model = global_aggregate(node_models, flagged, accuracies, inputs.assignment)
    return EpochAggregationOutput(
        flagged=flagged,
        next_clients=next_clients,
        node_accuracies=accuracies,
        global_model=global_model,
        probabilities=probabilities,
        projections=projections,
    )
