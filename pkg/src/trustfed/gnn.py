"""Bipartite message-passing detector for anomalous local models.

Clients and pre-processing nodes form the two sides of the graph. Client
features are the decrypted model projection plus a participation bitmap over
recent epochs; node features are the semi-aggregated model's test accuracy
and a normalized degree. Message passing uses mean aggregation with separate
weights per direction, a ReLU between layers, inverted dropout while
training, and a two-layer head producing one malicious-probability per
client. Forward and backward passes are hand-written on numpy; the optimizer
is Adam.

Aggregation is accumulated in edge-list order (``np.add.at``), so relabeling
clients permutes the outputs bitwise-exactly.

An MLP baseline with the same capacity trains on the projection alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ConsistencyError, FormatError, ShapeError
from .preproc import NodeAssignment
from .util import derive_seed, fmt_float

DEFAULT_HISTORY_WINDOW = 8


@dataclass
class BipartiteGraph:
    """One epoch's detection input; labels are known only in simulation."""

    client_ids: list[str]
    node_ids: list[str]
    client_features: np.ndarray  # (C, 32 + history window)
    node_features: np.ndarray  # (N, 2)
    edges: list[tuple[int, int]]  # (node index, client index), order preserved
    labels: np.ndarray | None = None  # (C,) 1 = malicious


def build_graph(
    projections: dict[str, np.ndarray],
    history: list[set[str]],
    node_accuracies: dict[str, float],
    assignment: NodeAssignment,
    history_window: int = DEFAULT_HISTORY_WINDOW,
    labels: dict[str, int] | None = None,
) -> BipartiteGraph:
    """Assemble raw (unstandardized) features from one epoch's artifacts.

    ``history`` holds past epochs' selected-client sets, oldest first; the
    bitmap's slot i marks membership i+1 epochs ago.
    """
    client_ids = sorted(projections)
    node_ids = sorted(node_accuracies)
    client_pos = {c: i for i, c in enumerate(client_ids)}
    node_pos = {n: i for i, n in enumerate(node_ids)}

    edges: list[tuple[int, int]] = []
    for node, client in assignment.edges:
        if client not in client_pos:
            raise ConsistencyError(f"edge references client {client} with no projection")
        if node not in node_pos:
            raise ConsistencyError(f"edge references node {node} with no accuracy")
        edges.append((node_pos[node], client_pos[client]))

    proj_dim = len(next(iter(projections.values()))) if projections else 0
    client_feats = np.zeros((len(client_ids), proj_dim + history_window))
    for c, idx in client_pos.items():
        client_feats[idx, :proj_dim] = projections[c]
        for back in range(1, history_window + 1):
            if back <= len(history) and c in history[-back]:
                client_feats[idx, proj_dim + back - 1] = 1.0

    degree = np.zeros(len(node_ids))
    seen: set[tuple[int, int]] = set()
    for n_idx, c_idx in edges:
        if (n_idx, c_idx) not in seen:
            seen.add((n_idx, c_idx))
            degree[n_idx] += 1
    node_feats = np.zeros((len(node_ids), 2))
    for n, idx in node_pos.items():
        node_feats[idx, 0] = node_accuracies[n]
        node_feats[idx, 1] = degree[idx] / max(len(client_ids), 1)

    label_arr = None
    if labels is not None:
        label_arr = np.array([float(labels[c]) for c in client_ids])
    return BipartiteGraph(client_ids, node_ids, client_feats, node_feats, edges, label_arr)


@dataclass
class FeatureStandardizer:
    client_mean: np.ndarray
    client_std: np.ndarray
    node_mean: np.ndarray
    node_std: np.ndarray

    def apply(self, graph: BipartiteGraph) -> BipartiteGraph:
        return replace(
            graph,
            client_features=(graph.client_features - self.client_mean) / self.client_std,
            node_features=(graph.node_features - self.node_mean) / self.node_std,
        )


def fit_standardizer(graphs: list[BipartiteGraph]) -> FeatureStandardizer:
    client = np.vstack([g.client_features for g in graphs])
    node = np.vstack([g.node_features for g in graphs])
    return FeatureStandardizer(
        client_mean=client.mean(axis=0),
        client_std=np.maximum(client.std(axis=0), 1e-8),
        node_mean=node.mean(axis=0),
        node_std=np.maximum(node.std(axis=0), 1e-8),
    )


def identity_standardizer(client_dim: int, node_dim: int) -> FeatureStandardizer:
    return FeatureStandardizer(
        client_mean=np.zeros(client_dim),
        client_std=np.ones(client_dim),
        node_mean=np.zeros(node_dim),
        node_std=np.ones(node_dim),
    )


@dataclass
class DetectorHyper:
    layers: int = 3
    hidden: int = 128
    dropout: float = 0.5
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64  # client samples per step; graphs are grouped whole
    epochs: int = 200
    val_fraction: float = 0.2
    threshold: float = 0.5
    seed: int = 0


Blocks = dict[str, np.ndarray]


def _xavier(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (d_in + d_out)), size=(d_in, d_out))


_MESSAGE_INIT_SCALE = 0.25  # damped so early training is self-feature driven


def init_gnn_blocks(
    client_dim: int, node_dim: int, layers: int, hidden: int, seed: int
) -> Blocks:
    rng = np.random.default_rng(derive_seed("gnn-init", seed))
    blocks: Blocks = {}
    in_c, in_n = client_dim, node_dim
    for layer in range(1, layers + 1):
        blocks[f"l{layer}_w_self_client"] = _xavier(rng, in_c, hidden)
        blocks[f"l{layer}_w_from_node"] = _xavier(rng, in_n, hidden) * _MESSAGE_INIT_SCALE
        blocks[f"l{layer}_b_client"] = np.zeros(hidden)
        blocks[f"l{layer}_w_self_node"] = _xavier(rng, in_n, hidden)
        blocks[f"l{layer}_w_from_client"] = _xavier(rng, in_c, hidden) * _MESSAGE_INIT_SCALE
        blocks[f"l{layer}_b_node"] = np.zeros(hidden)
        in_c = in_n = hidden
    blocks["head_w1"] = _xavier(rng, hidden, hidden)
    blocks["head_b1"] = np.zeros(hidden)
    blocks["head_w2"] = _xavier(rng, hidden, 1)
    blocks["head_b2"] = np.zeros(1)
    return blocks


def init_mlp_blocks(input_dim: int, layers: int, hidden: int, seed: int) -> Blocks:
    """Plain stack of ``layers`` weight layers (ReLU between, last emits the
    logit), matching the detector's capacity without its message passing."""
    rng = np.random.default_rng(derive_seed("mlp-init", seed))
    blocks: Blocks = {}
    d_in = input_dim
    for layer in range(1, layers + 1):
        d_out = 1 if layer == layers else hidden
        blocks[f"l{layer}_w"] = _xavier(rng, d_in, d_out)
        blocks[f"l{layer}_b"] = np.zeros(d_out)
        d_in = d_out
    return blocks


def _layer_count(blocks: Blocks) -> int:
    return max(
        int(name[1 : name.index("_")]) for name in blocks if name.startswith("l")
    )


@dataclass
class _BatchedGraph:
    """Disjoint union of graphs: one stacked feature matrix per side, edge
    index arrays with offsets applied (per-graph edge order preserved)."""

    client_features: np.ndarray
    node_features: np.ndarray
    n_idx: np.ndarray
    c_idx: np.ndarray
    labels: np.ndarray | None
    client_counts: list[int]

    @property
    def client_total(self) -> int:
        return self.client_features.shape[0]

    @property
    def node_total(self) -> int:
        return self.node_features.shape[0]


def _batch_graphs(graphs: list[BipartiteGraph]) -> _BatchedGraph:
    n_idx: list[int] = []
    c_idx: list[int] = []
    c_off = n_off = 0
    labels: list[np.ndarray] = []
    for g in graphs:
        for n, c in g.edges:
            n_idx.append(n + n_off)
            c_idx.append(c + c_off)
        c_off += len(g.client_ids)
        n_off += len(g.node_ids)
        if g.labels is not None:
            labels.append(g.labels)
    return _BatchedGraph(
        client_features=np.vstack([g.client_features for g in graphs]),
        node_features=(
            np.vstack([g.node_features for g in graphs])
            if any(len(g.node_ids) for g in graphs)
            else np.zeros((0, graphs[0].node_features.shape[1]))
        ),
        n_idx=np.array(n_idx, dtype=np.int64),
        c_idx=np.array(c_idx, dtype=np.int64),
        labels=np.concatenate(labels) if len(labels) == len(graphs) else None,
        client_counts=[len(g.client_ids) for g in graphs],
    )


def _scatter_mean(
    source: np.ndarray, src_idx: np.ndarray, dst_idx: np.ndarray, dst_count: int
) -> tuple[np.ndarray, np.ndarray]:
    """Mean of source rows over edges, accumulated in edge order."""
    out = np.zeros((dst_count, source.shape[1]))
    deg = np.zeros(dst_count)
    if len(src_idx):
        np.add.at(out, dst_idx, source[src_idx])
        np.add.at(deg, dst_idx, 1.0)
    alive = deg > 0
    out[alive] /= deg[alive, None]
    return out, deg


def _scatter_mean_backward(
    d_out: np.ndarray,
    src_idx: np.ndarray,
    dst_idx: np.ndarray,
    deg: np.ndarray,
    src_count: int,
) -> np.ndarray:
    d_src = np.zeros((src_count, d_out.shape[1]))
    if len(src_idx):
        np.add.at(d_src, src_idx, d_out[dst_idx] / deg[dst_idx, None])
    return d_src


def _dropout_mask(
    rng: np.random.Generator | None, shape: tuple[int, ...], rate: float
) -> np.ndarray | None:
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _gnn_forward_cache(
    blocks: Blocks,
    graph: _BatchedGraph,
    dropout_rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
) -> tuple[np.ndarray, dict]:
    layers = _layer_count(blocks)
    if graph.client_features.shape[1] != blocks["l1_w_self_client"].shape[0]:
        raise ShapeError(
            f"client feature width {graph.client_features.shape[1]} does not match "
            f"parameters ({blocks['l1_w_self_client'].shape[0]})"
        )
    if graph.node_features.shape[1] != blocks["l1_w_self_node"].shape[0]:
        raise ShapeError("node feature width does not match parameters")
    n_idx, c_idx = graph.n_idx, graph.c_idx
    h_c, h_n = graph.client_features, graph.node_features
    cache: dict = {"layers": [], "n_idx": n_idx, "c_idx": c_idx}
    for layer in range(1, layers + 1):
        msg_c, deg_c = _scatter_mean(h_n, n_idx, c_idx, graph.client_total)
        msg_n, deg_n = _scatter_mean(h_c, c_idx, n_idx, graph.node_total)
        z_c = (
            h_c @ blocks[f"l{layer}_w_self_client"]
            + msg_c @ blocks[f"l{layer}_w_from_node"]
            + blocks[f"l{layer}_b_client"]
        )
        z_n = (
            h_n @ blocks[f"l{layer}_w_self_node"]
            + msg_n @ blocks[f"l{layer}_w_from_client"]
            + blocks[f"l{layer}_b_node"]
        )
        a_c, a_n = np.maximum(z_c, 0.0), np.maximum(z_n, 0.0)
        mask_c = _dropout_mask(dropout_rng, a_c.shape, dropout_rate)
        mask_n = _dropout_mask(dropout_rng, a_n.shape, dropout_rate)
        out_c = a_c * mask_c if mask_c is not None else a_c
        out_n = a_n * mask_n if mask_n is not None else a_n
        cache["layers"].append(
            {
                "h_c": h_c,
                "h_n": h_n,
                "msg_c": msg_c,
                "msg_n": msg_n,
                "deg_c": deg_c,
                "deg_n": deg_n,
                "z_c": z_c,
                "z_n": z_n,
                "mask_c": mask_c,
                "mask_n": mask_n,
            }
        )
        h_c, h_n = out_c, out_n
    z1 = h_c @ blocks["head_w1"] + blocks["head_b1"]
    a1 = np.maximum(z1, 0.0)
    mask_head = _dropout_mask(dropout_rng, a1.shape, dropout_rate)
    a1d = a1 * mask_head if mask_head is not None else a1
    logits = (a1d @ blocks["head_w2"] + blocks["head_b2"]).ravel()
    cache.update({"h_c_final": h_c, "z1": z1, "a1d": a1d, "mask_head": mask_head, "logits": logits})
    probs = 1.0 / (1.0 + np.exp(-logits))
    return probs, cache


def gnn_forward(
    blocks: Blocks,
    graph: BipartiteGraph,
    dropout_rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
) -> np.ndarray:
    """Per-client malicious probabilities; pass an rng to enable dropout."""
    probs, _ = _gnn_forward_cache(blocks, _batch_graphs([graph]), dropout_rng, dropout_rate)
    return probs


def _gnn_backward(
    blocks: Blocks, graph: _BatchedGraph, cache: dict, d_logits: np.ndarray
) -> Blocks:
    grads: Blocks = {}
    n_idx, c_idx = cache["n_idx"], cache["c_idx"]
    d_logits = d_logits[:, None]
    grads["head_w2"] = cache["a1d"].T @ d_logits
    grads["head_b2"] = d_logits.sum(axis=0)
    d_a1 = d_logits @ blocks["head_w2"].T
    if cache["mask_head"] is not None:
        d_a1 = d_a1 * cache["mask_head"]
    d_z1 = d_a1 * (cache["z1"] > 0.0)
    grads["head_w1"] = cache["h_c_final"].T @ d_z1
    grads["head_b1"] = d_z1.sum(axis=0)
    d_h_c = d_z1 @ blocks["head_w1"].T
    d_h_n = np.zeros((graph.node_total, blocks["head_w1"].shape[0]))

    for layer in range(_layer_count(blocks), 0, -1):
        ctx = cache["layers"][layer - 1]
        if ctx["mask_c"] is not None:
            d_h_c = d_h_c * ctx["mask_c"]
        if ctx["mask_n"] is not None:
            d_h_n = d_h_n * ctx["mask_n"]
        d_z_c = d_h_c * (ctx["z_c"] > 0.0)
        d_z_n = d_h_n * (ctx["z_n"] > 0.0)
        grads[f"l{layer}_w_self_client"] = ctx["h_c"].T @ d_z_c
        grads[f"l{layer}_w_from_node"] = ctx["msg_c"].T @ d_z_c
        grads[f"l{layer}_b_client"] = d_z_c.sum(axis=0)
        grads[f"l{layer}_w_self_node"] = ctx["h_n"].T @ d_z_n
        grads[f"l{layer}_w_from_client"] = ctx["msg_n"].T @ d_z_n
        grads[f"l{layer}_b_node"] = d_z_n.sum(axis=0)
        d_msg_c = d_z_c @ blocks[f"l{layer}_w_from_node"].T
        d_msg_n = d_z_n @ blocks[f"l{layer}_w_from_client"].T
        d_h_c = d_z_c @ blocks[f"l{layer}_w_self_client"].T + _scatter_mean_backward(
            d_msg_n, c_idx, n_idx, ctx["deg_n"], graph.client_total
        )
        d_h_n = d_z_n @ blocks[f"l{layer}_w_self_node"].T + _scatter_mean_backward(
            d_msg_c, n_idx, c_idx, ctx["deg_c"], graph.node_total
        )
    return grads


def _bce_terms(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed stable binary cross-entropy and d(loss)/d(logit) per element."""
    loss = float(
        np.sum(np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits))))
    )
    probs = 1.0 / (1.0 + np.exp(-logits))
    return loss, probs - labels


def gnn_loss_and_grads(
    blocks: Blocks,
    graphs: list[BipartiteGraph],
    dropout_rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
) -> tuple[float, Blocks]:
    """Mean BCE over every client node in the batch, plus parameter gradients.

    The batch runs as one disjoint-union graph; per-graph aggregation results
    are unchanged because components never mix."""
    batched = _batch_graphs(graphs)
    assert batched.labels is not None
    _, cache = _gnn_forward_cache(blocks, batched, dropout_rng, dropout_rate)
    loss, d_logits = _bce_terms(cache["logits"], batched.labels)
    grads = _gnn_backward(blocks, batched, cache, d_logits / batched.client_total)
    return loss / batched.client_total, grads


def mlp_forward(
    blocks: Blocks,
    inputs: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
) -> np.ndarray:
    probs, _ = _mlp_forward_cache(blocks, inputs, dropout_rng, dropout_rate)
    return probs


def _mlp_forward_cache(
    blocks: Blocks,
    inputs: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
) -> tuple[np.ndarray, dict]:
    if inputs.shape[1] != blocks["l1_w"].shape[0]:
        raise ShapeError(
            f"input width {inputs.shape[1]} does not match parameters "
            f"({blocks['l1_w'].shape[0]})"
        )
    layers = _layer_count(blocks)
    h = inputs
    cache: dict = {"layers": []}
    for layer in range(1, layers + 1):
        z = h @ blocks[f"l{layer}_w"] + blocks[f"l{layer}_b"]
        if layer == layers:
            cache["layers"].append({"h": h, "z": z, "mask": None})
            h = z
            break
        a = np.maximum(z, 0.0)
        mask = _dropout_mask(dropout_rng, a.shape, dropout_rate)
        cache["layers"].append({"h": h, "z": z, "mask": mask})
        h = a * mask if mask is not None else a
    logits = h.ravel()
    cache["logits"] = logits
    return 1.0 / (1.0 + np.exp(-logits)), cache


def mlp_loss_and_grads(
    blocks: Blocks,
    inputs: np.ndarray,
    labels: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
) -> tuple[float, Blocks]:
    _, cache = _mlp_forward_cache(blocks, inputs, dropout_rng, dropout_rate)
    count = inputs.shape[0]
    loss, d_logits = _bce_terms(cache["logits"], labels)
    grads: Blocks = {}
    layers = _layer_count(blocks)
    d_h = (d_logits / count)[:, None]
    for layer in range(layers, 0, -1):
        ctx = cache["layers"][layer - 1]
        if layer == layers:
            d_z = d_h
        else:
            if ctx["mask"] is not None:
                d_h = d_h * ctx["mask"]
            d_z = d_h * (ctx["z"] > 0.0)
        grads[f"l{layer}_w"] = ctx["h"].T @ d_z
        grads[f"l{layer}_b"] = d_z.sum(axis=0)
        d_h = d_z @ blocks[f"l{layer}_w"].T
    return loss / count, grads


@dataclass
class AdamState:
    first: Blocks
    second: Blocks
    step: int = 0


def adam_init(blocks: Blocks) -> AdamState:
    return AdamState(
        first={k: np.zeros_like(v) for k, v in blocks.items()},
        second={k: np.zeros_like(v) for k, v in blocks.items()},
    )


def adam_step(blocks: Blocks, grads: Blocks, state: AdamState, hyper: DetectorHyper) -> None:
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    correct1 = 1.0 - b1 ** state.step
    correct2 = 1.0 - b2 ** state.step
    for name in sorted(blocks):
        g = grads[name]
        state.first[name] = b1 * state.first[name] + (1.0 - b1) * g
        state.second[name] = b2 * state.second[name] + (1.0 - b2) * g * g
        m_hat = state.first[name] / correct1
        v_hat = state.second[name] / correct2
        blocks[name] -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.eps)


@dataclass
class DetectionResult:
    probabilities: dict[str, float]
    flagged: set[str]
    threshold: float


@dataclass
class TrainedDetector:
    """Learned parameters plus the feature statistics they were trained with."""

    kind: str  # "gnn" or "mlp"
    blocks: Blocks
    standardizer: FeatureStandardizer
    hyper: DetectorHyper
    report: dict = field(default_factory=dict)


def _detector_probs(detector: TrainedDetector, graph: BipartiteGraph) -> np.ndarray:
    std = detector.standardizer.apply(graph)
    if detector.kind == "gnn":
        return gnn_forward(detector.blocks, std)
    proj_dim = detector.blocks["l1_w"].shape[0]
    return mlp_forward(detector.blocks, std.client_features[:, :proj_dim])


def _batched_eval(blocks: Blocks, kind: str, batched: _BatchedGraph) -> tuple[np.ndarray, np.ndarray]:
    """Dropout-free probabilities and logits for a batched graph."""
    if kind == "gnn":
        probs, cache = _gnn_forward_cache(blocks, batched)
    else:
        proj_dim = blocks["l1_w"].shape[0]
        probs, cache = _mlp_forward_cache(blocks, batched.client_features[:, :proj_dim])
    return probs, cache["logits"]


def _micro_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp == fp == fn == 0:
        return 1.0
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def detect(
    detector: TrainedDetector, graph: BipartiteGraph, threshold: float = 0.5
) -> DetectionResult:
    """Dropout-free inference; flagged = {client : p >= threshold}."""
    probs = _detector_probs(detector, graph)
    prob_map = {c: float(p) for c, p in zip(graph.client_ids, probs)}
    flagged = {c for c, p in prob_map.items() if p >= threshold}
    return DetectionResult(probabilities=prob_map, flagged=flagged, threshold=threshold)


def _graph_f1(detector: TrainedDetector, graphs: list[BipartiteGraph], threshold: float) -> float:
    """Micro-averaged F1 over all client nodes of the given graphs."""
    batched = _batch_graphs([detector.standardizer.apply(g) for g in graphs])
    assert batched.labels is not None
    probs, _ = _batched_eval(detector.blocks, detector.kind, batched)
    return _micro_f1(probs >= threshold, batched.labels > 0.5)


def _client_batches(
    graphs: list[BipartiteGraph], order: np.ndarray, batch_size: int
) -> list[list[int]]:
    """Group whole graphs until each batch holds >= batch_size client samples
    (mirrors row batching for the baseline, which sees one row per client)."""
    batches: list[list[int]] = []
    current: list[int] = []
    count = 0
    for idx in order:
        current.append(int(idx))
        count += len(graphs[int(idx)].client_ids)
        if count >= batch_size:
            batches.append(current)
            current, count = [], 0
    if current:
        batches.append(current)
    return batches


def _split_corpus(
    corpus: list[BipartiteGraph], val_fraction: float, seed: int
) -> tuple[list[BipartiteGraph], list[BipartiteGraph]]:
    order = list(np.random.default_rng(derive_seed("corpus-split", seed)).permutation(len(corpus)))
    val_count = int(round(val_fraction * len(corpus)))
    val_count = min(max(val_count, 0), len(corpus) - 1)
    val_idx = set(order[:val_count])
    train = [corpus[i] for i in range(len(corpus)) if i not in val_idx]
    val = [corpus[i] for i in sorted(val_idx)]
    return train, val


def _train(
    kind: str,
    corpus: list[BipartiteGraph],
    hyper: DetectorHyper,
    projection_dim: int | None = None,
) -> TrainedDetector:
    if not corpus:
        raise ConfigurationError("detector training needs a non-empty corpus")
    if any(g.labels is None for g in corpus):
        raise ConfigurationError("every corpus graph must carry labels")
    train_graphs, val_graphs = _split_corpus(corpus, hyper.val_fraction, hyper.seed)
    standardizer = fit_standardizer(train_graphs)
    train_std = [standardizer.apply(g) for g in train_graphs]
    val_std = [standardizer.apply(g) for g in val_graphs]

    client_dim = corpus[0].client_features.shape[1]
    node_dim = corpus[0].node_features.shape[1]
    if kind == "gnn":
        blocks = init_gnn_blocks(client_dim, node_dim, hyper.layers, hyper.hidden, hyper.seed)
    else:
        assert projection_dim is not None
        blocks = init_mlp_blocks(projection_dim, hyper.layers, hyper.hidden, hyper.seed)

    state = adam_init(blocks)
    shuffle_rng = np.random.default_rng(derive_seed("batch-order", hyper.seed))
    dropout_rng = (
        np.random.default_rng(derive_seed("dropout", hyper.seed)) if hyper.dropout > 0 else None
    )
    best: tuple[float, float] | None = None
    best_blocks = {k: v.copy() for k, v in blocks.items()}
    gauge = _batch_graphs(val_std if val_std else train_std)

    for _ in range(hyper.epochs):
        order = shuffle_rng.permutation(len(train_std))
        for batch_idx in _client_batches(train_std, order, hyper.batch_size):
            batch = [train_std[i] for i in batch_idx]
            if kind == "gnn":
                _, grads = gnn_loss_and_grads(blocks, batch, dropout_rng, hyper.dropout)
            else:
                inputs = np.vstack([g.client_features[:, :projection_dim] for g in batch])
                labels = np.concatenate([g.labels for g in batch])
                _, grads = mlp_loss_and_grads(blocks, inputs, labels, dropout_rng, hyper.dropout)
            adam_step(blocks, grads, state, hyper)
        probs, logits = _batched_eval(blocks, kind, gauge)
        f1 = _micro_f1(probs >= hyper.threshold, gauge.labels > 0.5)
        loss, _ = _bce_terms(logits, gauge.labels)
        score = (f1, -loss / gauge.client_total)
        if best is None or score > best:
            best = score
            best_blocks = {k: v.copy() for k, v in blocks.items()}

    detector = TrainedDetector(
        kind=kind,
        blocks=best_blocks,
        standardizer=standardizer,
        hyper=hyper,
        report={
            "val_f1": best[0] if best else 0.0,
            "val_loss": -best[1] if best else math.inf,
            "train_graphs": len(train_graphs),
            "val_graphs": len(val_graphs),
        },
    )
    return detector


def train_detector(corpus: list[BipartiteGraph], hyper: DetectorHyper) -> TrainedDetector:
    """Train the message-passing detector; returns best-validation parameters."""
    return _train("gnn", corpus, hyper)


def train_mlp_baseline(
    corpus: list[BipartiteGraph], hyper: DetectorHyper, projection_dim: int = 32
) -> TrainedDetector:
    """Same trainer and capacity, but inputs are the projections alone."""
    return _train("mlp", corpus, hyper, projection_dim=projection_dim)


def mlp_baseline(
    projections: np.ndarray, labels: np.ndarray, hyper: DetectorHyper
) -> tuple[TrainedDetector, np.ndarray]:
    """Train the baseline on bare projection rows; also returns its
    probabilities for every input row."""
    dim = projections.shape[1]
    graph = BipartiteGraph(
        client_ids=[f"row-{i}" for i in range(projections.shape[0])],
        node_ids=[],
        client_features=projections,
        node_features=np.zeros((0, 2)),
        edges=[],
        labels=labels.astype(np.float64),
    )
    detector = _train("mlp", [graph], hyper, projection_dim=dim)
    probs = _detector_probs(detector, graph)
    return detector, probs


def select_clients(
    probabilities: dict[str, float],
    pool: list[str],
    k: int,
    rng=None,
) -> list[str]:
    """Pick the k pool clients with the lowest malicious probability.

    Unseen clients count as 0.5; ties break on client id. Deterministic, so
    the rng argument is accepted for interface stability but unused.
    """
    del rng
    if k > len(pool):
        raise ConfigurationError(f"cannot select {k} clients from a pool of {len(pool)}")
    ranked = sorted(pool, key=lambda c: (probabilities.get(c, 0.5), c))
    return sorted(ranked[:k])


def f1_score(predicted: set[str], truth: set[str], universe: set[str]) -> float:
    """F1 on the malicious class; 1.0 for a perfect (possibly empty) match."""
    if not predicted <= universe or not truth <= universe:
        raise ConfigurationError("predicted and truth sets must lie in the universe")
    if predicted == truth:
        return 1.0
    tp = len(predicted & truth)
    precision = tp / len(predicted) if predicted else 0.0
    recall = tp / len(truth) if truth else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def blocks_to_vector(blocks: Blocks) -> np.ndarray:
    return np.concatenate([blocks[name].ravel() for name in sorted(blocks)])


def vector_to_blocks(vector: np.ndarray, template: Blocks) -> Blocks:
    out: Blocks = {}
    offset = 0
    for name in sorted(template):
        size = template[name].size
        out[name] = vector[offset : offset + size].reshape(template[name].shape).copy()
        offset += size
    return out


def detector_to_text(detector: TrainedDetector) -> str:
    """Flat vector of all parameters plus a manifest of block/stat shapes."""
    lines = [f"kind {detector.kind}", f"threshold {fmt_float(detector.hyper.threshold)}"]
    for name in sorted(detector.blocks):
        shape = "x".join(str(d) for d in detector.blocks[name].shape)
        lines.append(f"block {name} {shape}")
    stats = {
        "client_mean": detector.standardizer.client_mean,
        "client_std": detector.standardizer.client_std,
        "node_mean": detector.standardizer.node_mean,
        "node_std": detector.standardizer.node_std,
    }
    for name, arr in stats.items():
        lines.append(f"stat {name} {arr.size}")
    lines.append("values")
    for name in sorted(detector.blocks):
        lines.extend(fmt_float(v) for v in detector.blocks[name].ravel().tolist())
    for name, arr in stats.items():
        lines.extend(fmt_float(v) for v in arr.tolist())
    return "\n".join(lines) + "\n"


def detector_from_text(text: str) -> TrainedDetector:
    lines = text.splitlines()
    kind = ""
    threshold = 0.5
    manifest: list[tuple[str, str, tuple[int, ...]]] = []
    value_start = None
    for i, line in enumerate(lines):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "kind":
            kind = parts[1]
        elif parts[0] == "threshold":
            threshold = float(parts[1])
        elif parts[0] == "block":
            manifest.append(("block", parts[1], tuple(int(d) for d in parts[2].split("x"))))
        elif parts[0] == "stat":
            manifest.append(("stat", parts[1], (int(parts[2]),)))
        elif parts[0] == "values":
            value_start = i + 1
            break
        else:
            raise FormatError(f"unknown detector record {parts[0]!r}")
    if value_start is None or kind not in ("gnn", "mlp"):
        raise FormatError("detector file missing manifest or values")
    values = np.array([float(x) for x in lines[value_start:] if x])
    blocks: Blocks = {}
    stats: dict[str, np.ndarray] = {}
    offset = 0
    for record, name, shape in manifest:
        size = int(np.prod(shape))
        chunk = values[offset : offset + size]
        if chunk.size != size:
            raise FormatError("detector file value count does not match manifest")
        offset += size
        if record == "block":
            blocks[name] = chunk.reshape(shape).copy()
        else:
            stats[name] = chunk.copy()
    standardizer = FeatureStandardizer(
        client_mean=stats["client_mean"],
        client_std=stats["client_std"],
        node_mean=stats["node_mean"],
        node_std=stats["node_std"],
    )
    hyper = DetectorHyper(threshold=threshold)
    return TrainedDetector(kind=kind, blocks=blocks, standardizer=standardizer, hyper=hyper)


def save_corpus(graphs: list[BipartiteGraph], directory) -> None:
    """Write one flat text record per graph into a corpus directory."""
    from pathlib import Path

    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    for i, graph in enumerate(graphs):
        lines = [
            "clients " + " ".join(graph.client_ids),
            "nodes " + " ".join(graph.node_ids),
        ]
        if graph.labels is not None:
            lines.append("labels " + " ".join(str(int(v)) for v in graph.labels))
        lines.append("client-features")
        for row in graph.client_features.tolist():
            lines.append(",".join(fmt_float(v) for v in row))
        lines.append("node-features")
        for row in graph.node_features.tolist():
            lines.append(",".join(fmt_float(v) for v in row))
        lines.append("edges")
        for n_idx, c_idx in graph.edges:
            lines.append(f"{n_idx} {c_idx}")
        (path / f"graph-{i:05d}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(directory) -> list[BipartiteGraph]:
    from pathlib import Path

    graphs = []
    for file in sorted(Path(directory).glob("graph-*.txt")):
        lines = file.read_text(encoding="utf-8").splitlines()
        if len(lines) < 2 or not lines[0].startswith("clients"):
            raise FormatError(f"{file.name}: malformed corpus record")
        client_ids = lines[0].split()[1:]
        node_ids = lines[1].split()[1:]
        cursor = 2
        labels = None
        if cursor < len(lines) and lines[cursor].startswith("labels"):
            labels = np.array([float(v) for v in lines[cursor].split()[1:]])
            cursor += 1
        if lines[cursor] != "client-features":
            raise FormatError(f"{file.name}: expected client-features section")
        cursor += 1
        client_rows = []
        for _ in client_ids:
            client_rows.append([float(v) for v in lines[cursor].split(",")])
            cursor += 1
        if lines[cursor] != "node-features":
            raise FormatError(f"{file.name}: expected node-features section")
        cursor += 1
        node_rows = []
        for _ in node_ids:
            node_rows.append([float(v) for v in lines[cursor].split(",")])
            cursor += 1
        if lines[cursor] != "edges":
            raise FormatError(f"{file.name}: expected edges section")
        cursor += 1
        edges = []
        for line in lines[cursor:]:
            if line:
                n_idx, c_idx = line.split()
                edges.append((int(n_idx), int(c_idx)))
        graphs.append(
            BipartiteGraph(
                client_ids=client_ids,
                node_ids=node_ids,
                client_features=np.array(client_rows),
                node_features=np.array(node_rows) if node_rows else np.zeros((0, 2)),
                edges=edges,
                labels=labels,
            )
        )
    if not graphs:
        raise FormatError(f"no graph records found in {directory}")
    return graphs
