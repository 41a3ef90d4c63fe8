"""Local model representation, datasets, training and abnormal-model generation.

The classifier is a dense ReLU network over a flat parameter vector with
hand-derived gradients (softmax cross-entropy loss, plain mini-batch SGD).
Poisoned local models are produced by continuing training on a label-flipped
copy of the client shard.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, FormatError, ShapeError
from .util import derive_seed, fmt_float

LayerShapes = list[tuple[int, int]]


@dataclass
class ModelParams:
    """Flat parameter vector plus the (in, out) shape of every dense layer."""

    weights: np.ndarray
    layer_shapes: LayerShapes

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), list(self.layer_shapes))


@dataclass
class Dataset:
    features: np.ndarray  # (samples, dim) float64
    labels: np.ndarray  # (samples,) int64 class indices
    class_count: int


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 64
    local_epochs: int = 10
    seed: int = 0


def param_count(shapes: LayerShapes) -> int:
    return sum(d_in * d_out + d_out for d_in, d_out in shapes)


def _check_shapes(shapes: LayerShapes) -> None:
    if not shapes:
        raise ShapeError("layer shapes must be non-empty")
    for (_, out_prev), (in_next, _) in zip(shapes, shapes[1:]):
        if out_prev != in_next:
            raise ShapeError(f"layer chain broken: {out_prev} -> {in_next}")


def init_model(layer_shapes: LayerShapes, seed: int) -> ModelParams:
    """Weights ~ N(0, 1/in_dim) per layer, biases zero; deterministic per seed."""
    _check_shapes(layer_shapes)
    rng = np.random.default_rng(derive_seed("init-model", seed))
    chunks = []
    for d_in, d_out in layer_shapes:
        w = rng.normal(0.0, 1.0, size=d_in * d_out) / np.sqrt(d_in)
        chunks.append(w)
        chunks.append(np.zeros(d_out))
    return ModelParams(np.concatenate(chunks), list(layer_shapes))


def unpack_layers(model: ModelParams) -> list[tuple[np.ndarray, np.ndarray]]:
    """View the flat vector as [(W, b), ...] without copying."""
    layers = []
    offset = 0
    for d_in, d_out in model.layer_shapes:
        w = model.weights[offset : offset + d_in * d_out].reshape(d_in, d_out)
        offset += d_in * d_out
        b = model.weights[offset : offset + d_out]
        offset += d_out
        layers.append((w, b))
    if offset != model.weights.size:
        raise ShapeError(
            f"weight count {model.weights.size} does not match shapes "
            f"(expected {offset})"
        )
    return layers


def forward_logits(model: ModelParams, features: np.ndarray) -> np.ndarray:
    layers = unpack_layers(model)
    h = features
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return h


def loss_and_grad(
    model: ModelParams, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient as a flat vector."""
    layers = unpack_layers(model)
    batch = features.shape[0]
    acts = [features]
    pre = []
    h = features
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    idx = np.arange(batch)
    loss = float(-np.mean(shifted[idx, labels] - np.log(exp.sum(axis=1))))

    grads: list[np.ndarray] = []
    delta = probs
    delta[idx, labels] -= 1.0
    delta /= batch
    for i in reversed(range(len(layers))):
        w, _ = layers[i]
        grads.append(delta.sum(axis=0))  # bias
        grads.append((acts[i].T @ delta).ravel())  # weights
        if i > 0:
            delta = (delta @ w.T) * (pre[i - 1] > 0.0)
    flat = np.concatenate(list(reversed(grads)))
    return loss, flat


def _check_data(model: ModelParams, data: Dataset) -> None:
    d_in = model.layer_shapes[0][0]
    d_out = model.layer_shapes[-1][1]
    if data.features.shape[1] != d_in:
        raise ShapeError(f"feature dim {data.features.shape[1]} != input dim {d_in}")
    if data.class_count != d_out:
        raise ShapeError(f"class count {data.class_count} != output dim {d_out}")


def local_train(model: ModelParams, shard: Dataset, cfg: TrainConfig) -> ModelParams:
    """Mini-batch SGD; the input model is left untouched."""
    _check_data(model, shard)
    out = model.copy()
    rng = np.random.default_rng(derive_seed("local-train", cfg.seed))
    count = shard.features.shape[0]
    for _ in range(cfg.local_epochs):
        order = rng.permutation(count)
        for start in range(0, count, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            _, grad = loss_and_grad(out, shard.features[batch], shard.labels[batch])
            out.weights -= cfg.learning_rate * grad
    return out


def evaluate(model: ModelParams, test: Dataset) -> float:
    """Fraction of argmax-correct predictions."""
    if test.features.shape[0] == 0:
        raise DegenerateInputError("cannot evaluate on an empty dataset")
    _check_data(model, test)
    preds = np.argmax(forward_logits(model, test.features), axis=1)
    return float(np.mean(preds == test.labels))


POISON_STEP_SCALE = 5.0  # attacker's step size relative to the benign rate


def perturb(
    model: ModelParams,
    shard: Dataset,
    steps: int,
    cfg: TrainConfig,
    step_scale: float = POISON_STEP_SCALE,
) -> ModelParams:
    """Poison a local model: ``steps`` extra mini-batch iterations with labels
    shifted +1 mod C. The attacker takes larger gradient steps than honest
    training so that few iterations already degrade the model noticeably."""
    if steps < 0:
        raise ShapeError("perturbation steps must be >= 0")
    out = model.copy()
    if steps == 0:
        return out
    _check_data(model, shard)
    flipped_labels = (shard.labels + 1) % shard.class_count
    rng = np.random.default_rng(derive_seed("perturb", cfg.seed))
    count = shard.features.shape[0]
    order = rng.permutation(count)
    cursor = 0
    for _ in range(steps):
        if cursor + cfg.batch_size > count:
            order = rng.permutation(count)
            cursor = 0
        batch = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        _, grad = loss_and_grad(out, shard.features[batch], flipped_labels[batch])
        out.weights -= step_scale * cfg.learning_rate * grad
    return out


def gen_synthetic(
    class_count: int,
    dim: int,
    samples_per_client: int,
    client_count: int,
    seed: int,
    test_samples: int = 1000,
    noise_scale: float = 2.0,
) -> tuple[list[Dataset], Dataset]:
    """Gaussian class clusters with fixed per-class means, split into IID shards.

    Every shard draws a near-uniform class mix (balanced counts, remainder
    placed at random) so small shards stay representative.
    """
    if min(class_count, dim, samples_per_client, client_count) < 1:
        raise DegenerateInputError("all synthetic dataset counts must be >= 1")
    means = np.random.default_rng(derive_seed("synthetic-means", seed)).normal(
        0.0, 1.0, size=(class_count, dim)
    )

    def _make(n: int, rng: np.random.Generator) -> Dataset:
        base = n // class_count
        counts = np.full(class_count, base)
        extra = rng.choice(class_count, size=n - base * class_count, replace=False)
        counts[extra] += 1
        labels = np.repeat(np.arange(class_count), counts)
        rng.shuffle(labels)
        features = means[labels] + rng.normal(0.0, noise_scale, size=(n, dim))
        return Dataset(features, labels.astype(np.int64), class_count)

    shards = [
        _make(samples_per_client, np.random.default_rng(derive_seed("shard", seed, c)))
        for c in range(client_count)
    ]
    test = _make(test_samples, np.random.default_rng(derive_seed("test-set", seed)))
    return shards, test


_IDX_IMAGE_MAGIC = 2051
_IDX_LABEL_MAGIC = 2049


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load big-endian IDX image/label files; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError(f"{images_path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != _IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad magic {magic}, expected {_IDX_IMAGE_MAGIC}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if pixels.size != count * rows * cols:
        raise FormatError(f"{images_path}: pixel payload does not match header counts")

    with open(labels_path, "rb") as fh:
        raw_labels = fh.read()
    if len(raw_labels) < 8:
        raise FormatError(f"{labels_path}: truncated IDX header")
    magic_l, count_l = struct.unpack(">ii", raw_labels[:8])
    if magic_l != _IDX_LABEL_MAGIC:
        raise FormatError(f"{labels_path}: bad magic {magic_l}, expected {_IDX_LABEL_MAGIC}")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8)
    if labels.size != count_l:
        raise FormatError(f"{labels_path}: label payload does not match header count")
    if count != count_l:
        raise FormatError(f"image count {count} != label count {count_l}")

    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels64 = labels.astype(np.int64)
    class_count = int(labels64.max()) + 1 if count else 0
    return Dataset(features, labels64, class_count)


def model_to_text(model: ModelParams) -> str:
    """Deterministic text serialization (shape header + one float per line)."""
    header = "shapes " + ";".join(f"{i},{o}" for i, o in model.layer_shapes)
    lines = [header]
    lines.extend(fmt_float(w) for w in model.weights.tolist())
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> ModelParams:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("shapes "):
        raise FormatError("model record missing shapes header")
    shapes = []
    for part in lines[0][len("shapes ") :].split(";"):
        d_in, d_out = part.split(",")
        shapes.append((int(d_in), int(d_out)))
    weights = np.array([float(x) for x in lines[1:] if x], dtype=np.float64)
    if weights.size != param_count(shapes):
        raise FormatError("model record weight count does not match shapes")
    return ModelParams(weights, shapes)
