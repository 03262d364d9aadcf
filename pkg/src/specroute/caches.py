"""Commit-log KV caches and snapshot/restore semantics for decoder state.

The KV cache here is not attention state: it is an append-only log of the
block payloads each model has committed, which is everything the routing
algorithm observes. The decoder cache is the temporal state of the causal
frame decoder; it is cloned before a draft is scored and restored when the
draft is rejected, so a rejected draft leaves no trace in emitted frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol, runtime_checkable

from .core import LatentBlock, Producer, block_digest

__all__ = [
    "CacheOwner",
    "ContiguityError",
    "IntegrityError",
    "SnapshotMismatchError",
    "KVEntry",
    "KVCache",
    "DecodeCacheSnapshot",
    "decode_snapshot",
    "decode_restore",
]


class CacheOwner(str, Enum):
    DRAFTER = "drafter"
    TARGET = "target"


class ContiguityError(ValueError):
    """Commit attempted at a block index other than the next one."""


class IntegrityError(RuntimeError):
    """A committed entry no longer matches its recorded digest."""


class SnapshotMismatchError(ValueError):
    """Snapshot restored into an incompatible decoder state."""


@dataclass(frozen=True)
class KVEntry:
    block_index: int
    producer: Producer
    digest: str
    block: LatentBlock


class KVCache:
    """Append-only commit log of generated blocks for one model.

    Entries are immutable once committed; indices are contiguous from 0.
    Each commit re-verifies the digests of all prior entries, which is
    cheap at desk scale and makes append-only violations loud.
    """

    def __init__(self, owner: CacheOwner):
        self.owner = owner
        self._entries: list[KVEntry] = []

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[KVEntry, ...]:
        return tuple(self._entries)

    def commit(self, block: LatentBlock) -> KVEntry:
        if block.block_index != len(self._entries):
            raise ContiguityError(
                f"{self.owner.value} cache expected block {len(self._entries)}, "
                f"got {block.block_index}"
            )
        self.verify_integrity()
        entry = KVEntry(block.block_index, block.producer, block_digest(block), block)
        self._entries.append(entry)
        return entry

    def verify_integrity(self) -> None:
        for entry in self._entries:
            if block_digest(entry.block) != entry.digest:
                raise IntegrityError(
                    f"{self.owner.value} cache entry {entry.block_index} was mutated"
                )

    def digests(self) -> tuple[str, ...]:
        return tuple(e.digest for e in self._entries)

    def producers(self) -> tuple[Producer, ...]:
        return tuple(e.producer for e in self._entries)

    def tip_digest(self) -> str:
        return self._entries[-1].digest if self._entries else "empty"

    def replay(self) -> KVCache:
        """Rebuild an equal cache by re-committing the logged payloads."""
        fresh = KVCache(self.owner)
        for entry in self._entries:
            fresh.commit(entry.block)
        return fresh

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KVCache):
            return NotImplemented
        return self.owner == other.owner and self.digests() == other.digests()


def kv_commit(cache: KVCache, block: LatentBlock) -> None:
    cache.commit(block)


# ---------------------------------------------------------------------------
# Decoder-state snapshots
# ---------------------------------------------------------------------------


@runtime_checkable
class RestorableState(Protocol):
    """What the snapshot machinery needs from a decoder state object."""

    def clone(self) -> "RestorableState": ...

    def digest(self) -> str: ...

    def load(self, other: "RestorableState") -> None: ...


@dataclass(frozen=True)
class DecodeCacheSnapshot:
    """Deep copy of decoder temporal state, tagged with capture position.

    A full copy rather than copy-on-write: state is small at desk scale
    and an independent copy keeps restore semantics trivially correct.
    """

    block_index: int
    state_copy: RestorableState = field(repr=False)
    captured_digest: str = ""


def decode_snapshot(state: RestorableState, block_index: int = -1) -> DecodeCacheSnapshot:
    return DecodeCacheSnapshot(
        block_index=block_index,
        state_copy=state.clone(),
        captured_digest=state.digest(),
    )


def decode_restore(state: RestorableState, snapshot: DecodeCacheSnapshot) -> None:
    """Restore state in place; afterwards its digest equals the captured one."""
    try:
        state.load(snapshot.state_copy)
    except SnapshotMismatchError:
        raise
    except Exception as exc:
        raise SnapshotMismatchError(f"snapshot restore failed: {exc}") from exc
    if state.digest() != snapshot.captured_digest:
        raise SnapshotMismatchError(
            "restored state digest does not match the digest recorded at capture"
        )
