"""Client-side encryption and the per-node encrypted pre-processing stage.

Nodes in this layer hold only the public key: they project each encrypted
local model to a low-dimensional vector and combine the models of their
connected clients into an encrypted weighted sum (semi-aggregation). The
division by the weight total is left to whoever holds the private key.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, EncodingError, FormatError, ShapeError
from .model import ModelParams
from .paillier import (
    FixedPointCodec,
    PaillierCiphertext,
    PaillierPublicKey,
    encrypt,
    hom_add,
    hom_scalar_mul,
)
from .util import derive_seed

DEFAULT_PROJECTION_DIM = 32


@dataclass
class EncryptedModel:
    """Element-wise encryption of a flat parameter vector."""

    ciphertexts: list[PaillierCiphertext]
    scale: int
    owner_client_id: str = ""


@dataclass
class EncryptedVector:
    """Encrypted projection output (fixed low dimension)."""

    ciphertexts: list[PaillierCiphertext]
    scale: int


@dataclass
class ProjectionMatrix:
    """Shared random projection with pre-encoded fixed-point entries."""

    entries: np.ndarray  # (d_out, d_in) float64
    encoded: list[list[int]]
    seed: int

    @property
    def d_out(self) -> int:
        return self.entries.shape[0]

    @property
    def d_in(self) -> int:
        return self.entries.shape[1]


def make_projection_matrix(
    d_out: int, d_in: int, seed: int, codec: FixedPointCodec
) -> ProjectionMatrix:
    """Gaussian entries with variance 1/d_out, regenerated exactly from the seed."""
    rng = np.random.default_rng(derive_seed("projection-matrix", seed))
    entries = rng.normal(0.0, 1.0 / np.sqrt(d_out), size=(d_out, d_in))
    encoded = [[codec.encode(v) for v in row] for row in entries.tolist()]
    return ProjectionMatrix(entries=entries, encoded=encoded, seed=seed)


@dataclass
class NodeAssignment:
    """Bipartite epoch wiring between pre-processing nodes and clients."""

    edges: list[tuple[str, str]] = field(default_factory=list)  # (node_id, client_id)
    epoch: int = 0

    def clients_of(self, node_id: str) -> list[str]:
        return [c for n, c in self.edges if n == node_id]

    def nodes_of(self, client_id: str) -> list[str]:
        return [n for n, c in self.edges if c == client_id]


def assign_clients(
    selected_clients: list[str],
    node_ids: list[str],
    connections_per_node: int,
    seed: int,
    epoch: int = 0,
) -> NodeAssignment:
    """Each node samples its clients without replacement; stragglers are then
    attached to the least-loaded nodes so every selected client is covered."""
    pool = sorted(selected_clients)
    if connections_per_node > len(pool):
        raise ConfigurationError(
            f"connections-per-node {connections_per_node} exceeds "
            f"{len(pool)} selected clients"
        )
    rng = random.Random(derive_seed("assign-clients", seed, epoch))
    edges: list[tuple[str, str]] = []
    load = {n: 0 for n in node_ids}
    covered: set[str] = set()
    for node in node_ids:
        for client in rng.sample(pool, connections_per_node):
            edges.append((node, client))
            covered.add(client)
            load[node] += 1
    for client in sorted(set(pool) - covered):
        node = min(node_ids, key=lambda n: (load[n], node_ids.index(n)))
        edges.append((node, client))
        load[node] += 1
    return NodeAssignment(edges=edges, epoch=epoch)


def encrypt_model(
    pk: PaillierPublicKey,
    model: ModelParams,
    codec: FixedPointCodec,
    rng: random.Random,
    owner_client_id: str = "",
) -> EncryptedModel:
    """Element-wise encode-then-encrypt of the parameter vector."""
    cts = [
        encrypt(pk, codec.encode(w), rng, track_bound=True)
        for w in model.weights.tolist()
    ]
    return EncryptedModel(
        ciphertexts=cts, scale=codec.scale_bits, owner_client_id=owner_client_id
    )


def project_encrypted(
    pk: PaillierPublicKey,
    em: EncryptedModel,
    matrix: ProjectionMatrix,
    codec: FixedPointCodec,
) -> EncryptedVector:
    """Encrypted matrix-vector product; output scale doubles (entry * weight)."""
    if matrix.d_in != len(em.ciphertexts):
        raise ShapeError(
            f"projection expects dimension {matrix.d_in}, model has {len(em.ciphertexts)}"
        )
    rows: list[PaillierCiphertext] = []
    for encoded_row in matrix.encoded:
        acc: PaillierCiphertext | None = None
        for ct, k in zip(em.ciphertexts, encoded_row):
            term = hom_scalar_mul(pk, ct, k, k_scale=codec.scale_bits)
            acc = term if acc is None else hom_add(pk, acc, term)
        assert acc is not None
        rows.append(acc)
    return EncryptedVector(ciphertexts=rows, scale=em.scale + codec.scale_bits)


def semi_aggregate(
    pk: PaillierPublicKey,
    ems: list[EncryptedModel],
    weights: list[float],
    codec: FixedPointCodec,
) -> EncryptedModel:
    """Encrypted weighted sum of models; divide by sum(weights) after decryption."""
    if not ems:
        raise DegenerateInputError("semi-aggregation needs at least one model")
    if len(weights) != len(ems):
        raise ConfigurationError("one weight per model required")
    if any(w <= 0 for w in weights):
        raise ConfigurationError("aggregation weights must be positive")
    length = len(ems[0].ciphertexts)
    scale = ems[0].scale
    for em in ems:
        if len(em.ciphertexts) != length:
            raise ShapeError("all models must have equal length")
        if em.scale != scale:
            raise EncodingError("all models must share one scale")
    encoded_weights = [codec.encode(w) for w in weights]
    out: list[PaillierCiphertext] = []
    for j in range(length):
        acc: PaillierCiphertext | None = None
        for em, k in zip(ems, encoded_weights):
            term = hom_scalar_mul(pk, em.ciphertexts[j], k, k_scale=codec.scale_bits)
            acc = term if acc is None else hom_add(pk, acc, term)
        assert acc is not None
        out.append(acc)
    return EncryptedModel(ciphertexts=out, scale=scale + codec.scale_bits)


def encrypted_to_text(cts: list[PaillierCiphertext], scale: int, owner: str = "") -> str:
    """Blob format: header (owner, scale, shared magnitude bound, length
    prefix) followed by one decimal ciphertext value per line."""
    bound = 0
    for ct in cts:
        if ct.mag_bound is not None:
            bound = max(bound, ct.mag_bound)
    lines = [f"owner {owner}", f"scale {scale}", f"bound {bound}", f"count {len(cts)}"]
    lines.extend(str(ct.value) for ct in cts)
    return "\n".join(lines) + "\n"


def encrypted_from_text(text: str) -> tuple[list[PaillierCiphertext], int, str]:
    lines = text.splitlines()
    try:
        owner = lines[0].split(" ", 1)[1] if " " in lines[0] else ""
        scale = int(lines[1].split()[1])
        bound = int(lines[2].split()[1])
        count = int(lines[3].split()[1])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed encrypted blob header: {exc}") from exc
    values = [ln for ln in lines[4:] if ln]
    if len(values) != count:
        raise FormatError(f"encrypted blob lists {len(values)} values, header says {count}")
    mag = bound if bound > 0 else None
    cts = [PaillierCiphertext(value=int(v), scale=scale, mag_bound=mag) for v in values]
    return cts, scale, owner
