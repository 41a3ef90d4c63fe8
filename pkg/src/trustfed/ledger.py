"""Append-only hash-chained ledger, content-addressed blob store, and the
built-in policy functions (access control, aggregator election).

Only pointers (blob hashes) go on the chain; payloads live in the DDSE store
keyed by their SHA-256. Timestamps are a monotone logical counter so runs
stay reproducible.
"""

from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError, FormatError, IntegrityError
from .util import derive_seed

GENESIS_PREV_HASH = "0" * 64


class TxType(enum.Enum):
    UPLOAD_PREPROCESSED = "UploadPreprocessed"
    AGGREGATOR_SELECTED = "AggregatorSelected"
    UPLOAD_GLOBAL = "UploadGlobal"
    DOWNLOAD_GRANT = "DownloadGrant"
    CLIENT_NOTIFY = "ClientNotify"


@dataclass
class Transaction:
    tx_type: TxType
    epoch: int
    actor_id: str
    blob_keys: list[str] = field(default_factory=list)
    timestamp: int = -1  # assigned by the ledger at append time


@dataclass
class Block:
    index: int
    prev_hash: str
    transactions: list[Transaction]
    block_hash: str


def _enc(text: str) -> bytes:
    raw = text.encode("utf-8")
    return len(raw).to_bytes(4, "big") + raw


def canonical_tx_bytes(tx: Transaction) -> bytes:
    parts = [
        _enc(tx.tx_type.value),
        _enc(str(tx.epoch)),
        _enc(tx.actor_id),
        _enc(str(len(tx.blob_keys))),
    ]
    parts.extend(_enc(k) for k in tx.blob_keys)
    parts.append(_enc(str(tx.timestamp)))
    return b"".join(parts)


def compute_block_hash(index: int, prev_hash: str, transactions: list[Transaction]) -> str:
    hasher = hashlib.sha256()
    hasher.update(_enc(str(index)))
    hasher.update(_enc(prev_hash))
    for tx in transactions:
        hasher.update(canonical_tx_bytes(tx))
    return hasher.hexdigest()


class DdseStore:
    """Content-addressed blob store: key = SHA-256(blob) hex."""

    def __init__(self) -> None:
        self._blobs: dict[str, bytes] = {}

    def put_blob(self, blob: bytes) -> str:
        key = hashlib.sha256(blob).hexdigest()
        self._blobs[key] = blob
        return key

    def get_blob(self, key: str) -> bytes:
        if key not in self._blobs:
            raise IntegrityError(f"blob {key[:12]}... not present in store")
        blob = self._blobs[key]
        if hashlib.sha256(blob).hexdigest() != key:
            raise IntegrityError(f"blob {key[:12]}... does not match its key hash")
        return blob

    def has_blob(self, key: str) -> bool:
        return key in self._blobs

    def keys(self) -> list[str]:
        return sorted(self._blobs)

    def verify_all(self) -> list[str]:
        """Keys whose stored bytes no longer hash to the key."""
        return [
            k
            for k, b in sorted(self._blobs.items())
            if hashlib.sha256(b).hexdigest() != k
        ]

    def save_dir(self, path: str | Path) -> None:
        directory = Path(path)
        directory.mkdir(parents=True, exist_ok=True)
        for key, blob in sorted(self._blobs.items()):
            (directory / key).write_bytes(blob)

    @classmethod
    def load_dir(cls, path: str | Path) -> "DdseStore":
        store = cls()
        for entry in sorted(Path(path).iterdir()):
            if entry.is_file():
                store._blobs[entry.name] = entry.read_bytes()
        return store


class Ledger:
    """Hash-chained blocks over a single logical writer."""

    def __init__(self, store: DdseStore | None = None) -> None:
        self.blocks: list[Block] = []
        self.store = store
        self._next_timestamp = 0

    @property
    def tip_hash(self) -> str:
        return self.blocks[-1].block_hash if self.blocks else GENESIS_PREV_HASH

    def append_block(self, transactions: list[Transaction]) -> Block:
        if not transactions:
            raise ConfigurationError("a block needs at least one transaction")
        if self.store is not None:
            for tx in transactions:
                for key in tx.blob_keys:
                    if not self.store.has_blob(key):
                        raise IntegrityError(
                            f"transaction references unknown blob {key[:12]}..."
                        )
        for tx in transactions:
            tx.timestamp = self._next_timestamp
            self._next_timestamp += 1
        index = len(self.blocks)
        prev_hash = self.tip_hash
        block = Block(
            index=index,
            prev_hash=prev_hash,
            transactions=transactions,
            block_hash=compute_block_hash(index, prev_hash, transactions),
        )
        self.blocks.append(block)
        return block

    def verify_chain(self) -> int | None:
        """None when intact, else the index of the first invalid block."""
        prev = GENESIS_PREV_HASH
        for i, block in enumerate(self.blocks):
            if (
                block.index != i
                or block.prev_hash != prev
                or compute_block_hash(i, block.prev_hash, block.transactions)
                != block.block_hash
            ):
                return i
            prev = block.block_hash
        return None

    def log_read_decision(
        self, epoch: int, actor_id: str, blob_keys: list[str], allowed: bool
    ) -> Block:
        """Record a gated read; denials carry no keys."""
        tx = Transaction(
            tx_type=TxType.DOWNLOAD_GRANT,
            epoch=epoch,
            actor_id=actor_id,
            blob_keys=list(blob_keys) if allowed else [],
        )
        return self.append_block([tx])

    def to_text(self) -> str:
        lines = []
        for block in self.blocks:
            lines.append(
                f"block {block.index} {block.prev_hash} {block.block_hash}"
            )
            for tx in block.transactions:
                keys = ",".join(tx.blob_keys) if tx.blob_keys else "-"
                lines.append(
                    f"tx {tx.tx_type.value} {tx.epoch} {tx.timestamp} {tx.actor_id} {keys}"
                )
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str, store: DdseStore | None = None) -> "Ledger":
        ledger = cls(store=store)
        current: Block | None = None
        max_ts = -1
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(" ")
            if parts[0] == "block":
                if len(parts) != 4:
                    raise FormatError(f"line {lineno}: malformed block record")
                current = Block(
                    index=int(parts[1]),
                    prev_hash=parts[2],
                    transactions=[],
                    block_hash=parts[3],
                )
                ledger.blocks.append(current)
            elif parts[0] == "tx":
                if current is None or len(parts) != 6:
                    raise FormatError(f"line {lineno}: malformed transaction record")
                keys = [] if parts[5] == "-" else parts[5].split(",")
                tx = Transaction(
                    tx_type=TxType(parts[1]),
                    epoch=int(parts[2]),
                    actor_id=parts[4],
                    blob_keys=keys,
                    timestamp=int(parts[3]),
                )
                max_ts = max(max_ts, tx.timestamp)
                current.transactions.append(tx)
            else:
                raise FormatError(f"line {lineno}: unknown record {parts[0]!r}")
        ledger._next_timestamp = max_ts + 1
        return ledger

    def save_file(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load_file(cls, path: str | Path, store: DdseStore | None = None) -> "Ledger":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), store=store)


class Role(enum.Enum):
    CLIENT = "client"
    PREPROC_NODE = "preproc-node"
    AGGREGATOR_CANDIDATE = "aggregator-candidate"
    SELECTED_AGGREGATOR = "selected-aggregator"


class Action(enum.Enum):
    READ_PREPROCESSED = "read:preprocessed"
    READ_GLOBAL = "read:global"
    READ_CLIENT_MODEL = "read:client-model"
    WRITE_PREPROCESSED = "write:preprocessed"
    WRITE_GLOBAL = "write:global"
    NOTIFY_CLIENTS = "notify:clients"


@dataclass(frozen=True)
class AccessRule:
    role: Role
    allowed_actions: frozenset[Action]


def default_access_rules() -> list[AccessRule]:
    return [
        AccessRule(Role.CLIENT, frozenset({Action.READ_GLOBAL})),
        AccessRule(
            Role.PREPROC_NODE,
            frozenset(
                {Action.WRITE_PREPROCESSED, Action.READ_GLOBAL, Action.NOTIFY_CLIENTS}
            ),
        ),
        AccessRule(Role.AGGREGATOR_CANDIDATE, frozenset()),
        AccessRule(
            Role.SELECTED_AGGREGATOR,
            frozenset({Action.READ_PREPROCESSED, Action.WRITE_GLOBAL}),
        ),
    ]


def check_access(
    rules: list[AccessRule], actor_id: str, role: Role, action: Action
) -> bool:
    """Deny unless an explicit rule for the role permits the action."""
    del actor_id  # identity is logged by the caller; policy is role-based
    for rule in rules:
        if rule.role == role and action in rule.allowed_actions:
            return True
    return False


class AggregatorPolicy(enum.Enum):
    ROUND_ROBIN = "round-robin"
    SEEDED_RANDOM = "seeded-random"
    PREV_HASH = "prev-hash"


def choose_aggregator(
    candidates: list[str],
    epoch: int,
    policy: AggregatorPolicy,
    prev_block_hash: str = GENESIS_PREV_HASH,
    seed: int = 0,
) -> str:
    """Contract picking this epoch's aggregator from the ordered candidates."""
    if not candidates:
        raise ConfigurationError("aggregator candidate list is empty")
    if policy is AggregatorPolicy.ROUND_ROBIN:
        idx = epoch % len(candidates)
    elif policy is AggregatorPolicy.PREV_HASH:
        idx = int(prev_block_hash, 16) % len(candidates)
    elif policy is AggregatorPolicy.SEEDED_RANDOM:
        idx = random.Random(derive_seed("aggregator-election", seed, epoch)).randrange(
            len(candidates)
        )
    else:  # pragma: no cover
        raise ConfigurationError(f"unknown policy {policy}")
    return candidates[idx]
