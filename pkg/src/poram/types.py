"""Block and position domain types.

Block identifiers are plain ints in [0, N); the dummy identifier is the
sentinel ``DUMMY_ID``.  A :class:`Position` names where the up-to-date copy
of a block lives: a server slot (partition, level, index), a client cache
slot, the pending-write set of a queued shuffle job, or nowhere yet
(zeroed).

Positions pack into a single 64-bit word with a documented little-endian
layout so that position-map memory use is exact:

    bits 0-1    kind (0 zeroed, 1 cache slot, 2 server, 3 pending)
    bits 2-33   partition (server/pending) or slot number (cache)
    bits 34-41  level
    bits 42-63  index within the level
"""

from typing import NamedTuple

DUMMY_ID = -1

POS_ZEROED = 0
POS_CACHED = 1
POS_SERVER = 2
POS_PENDING = 3

POSITION_ENTRY_BYTES = 8

_PART_SHIFT = 2
_LEVEL_SHIFT = 34
_INDEX_SHIFT = 42
_PART_MASK = (1 << 32) - 1
_LEVEL_MASK = (1 << 8) - 1
_INDEX_MASK = (1 << 22) - 1


class Position(NamedTuple):
    kind: int
    partition: int = 0
    level: int = 0
    index: int = 0

    @property
    def is_zeroed(self) -> bool:
        return self.kind == POS_ZEROED

    def __repr__(self):
        if self.kind == POS_ZEROED:
            return "Position(zeroed)"
        if self.kind == POS_CACHED:
            return f"Position(cache slot {self.partition})"
        if self.kind == POS_PENDING:
            return f"Position(pending write, partition {self.partition})"
        return f"Position(partition {self.partition}, level {self.level}, index {self.index})"


ZEROED = Position(POS_ZEROED)


def cache_position(slot: int) -> Position:
    return Position(POS_CACHED, slot)


def server_position(partition: int, level: int, index: int) -> Position:
    return Position(POS_SERVER, partition, level, index)


def pending_position(partition: int) -> Position:
    return Position(POS_PENDING, partition)


def pack_position(pos: Position) -> int:
    """Encode a Position into the documented 64-bit layout."""
    if pos.kind == POS_ZEROED:
        return 0
    if pos.partition < 0 or pos.partition > _PART_MASK:
        raise ValueError(f"partition out of range: {pos.partition}")
    word = pos.kind | (pos.partition << _PART_SHIFT)
    if pos.kind == POS_SERVER:
        if pos.level < 0 or pos.level > _LEVEL_MASK:
            raise ValueError(f"level out of range: {pos.level}")
        if pos.index < 0 or pos.index > _INDEX_MASK:
            raise ValueError(f"index out of range: {pos.index}")
        word |= (pos.level << _LEVEL_SHIFT) | (pos.index << _INDEX_SHIFT)
    return word


def unpack_position(word: int) -> Position:
    kind = word & 3
    if kind == POS_ZEROED:
        return ZEROED
    partition = (word >> _PART_SHIFT) & _PART_MASK
    if kind != POS_SERVER:
        return Position(kind, partition)
    return Position(POS_SERVER, partition,
                    (word >> _LEVEL_SHIFT) & _LEVEL_MASK,
                    (word >> _INDEX_SHIFT) & _INDEX_MASK)


def pack_server_word(partition: int, level: int, index: int) -> int:
    """Fast path for the common server-position encoding."""
    return POS_SERVER | (partition << _PART_SHIFT) | (level << _LEVEL_SHIFT) | (index << _INDEX_SHIFT)


class Block(NamedTuple):
    """A logical block: identifier plus payload bytes (empty in meta mode)."""
    id: int
    payload: bytes

    @property
    def is_dummy(self) -> bool:
        return self.id == DUMMY_ID
