"""Core domain types for the multithreaded block DAG: protocol parameters,
slots, addresses, transactions, blocks, the block store, and the balance ledger.

Canonical block serialization (the wire format, all integers big-endian):

    u32 slot.thread | u64 slot.period | u64 creator
    u32 parent count   | 32 bytes per parent id
    u32 endorsement count | per endorsement:
        32B endorsed_block | u32 slot.thread | u64 slot.period | u32 index | u64 creator
    u32 transaction count | per transaction:
        32B sender | 32B receiver | u64 amount | u64 fee | u64 nonce | u32 size_bits
    u64 tx_count | u64 size_bits

The block id is the SHA-256 digest of this serialization.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping, Optional

from .errors import InsufficientBalance, MissingParent, StructuralViolation, UnknownBlock

log = logging.getLogger(__name__)

DIGEST_SIZE = 32
DEFAULT_TX_SIZE_BITS = 1040


@dataclass(frozen=True)
class ProtocolParams:
    """Protocol parameter tuple; thread_count must be a power of two."""

    thread_count: int = 32
    slot_interval: float = 32.0
    max_block_size: int = 12_000_000
    finality: int = 64
    endorsement_slots: int = 0

    def __post_init__(self):
        t = self.thread_count
        if t < 1 or (t & (t - 1)) != 0:
            raise ValueError(f"thread_count must be a power of two, got {t}")
        if self.slot_interval <= 0:
            raise ValueError("slot_interval must be positive")
        if self.max_block_size <= 0:
            raise ValueError("max_block_size must be positive")
        if self.finality < 1:
            raise ValueError("finality must be a positive integer")
        if self.endorsement_slots < 0:
            raise ValueError("endorsement_slots must be non-negative")

    @property
    def thread_bits(self) -> int:
        return self.thread_count.bit_length() - 1

    @property
    def finality_threshold(self) -> int:
        """Fitness gap beyond which a trailing clique settles stale."""
        return self.finality * (self.endorsement_slots + 1)

    @property
    def consensus_bitrate(self) -> float:
        """Sustained block-data rate in bits per second."""
        return self.thread_count * self.max_block_size / self.slot_interval

    def to_dict(self) -> dict:
        return {
            "thread_count": self.thread_count,
            "slot_interval": self.slot_interval,
            "max_block_size": self.max_block_size,
            "finality": self.finality,
            "endorsement_slots": self.endorsement_slots,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProtocolParams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True, order=False)
class Slot:
    """A (thread, period) block slot position."""

    thread: int
    period: int

    def __post_init__(self):
        if self.thread < 0 or self.period < 0:
            raise ValueError(f"invalid slot ({self.thread}, {self.period})")

    # Slots are totally ordered by timestamp; for any fixed thread count this
    # is the lexicographic (period, thread) order.
    def _key(self) -> tuple[int, int]:
        return (self.period, self.thread)

    def __lt__(self, other: "Slot") -> bool:
        return self._key() < other._key()

    def __le__(self, other: "Slot") -> bool:
        return self._key() <= other._key()

    def __gt__(self, other: "Slot") -> bool:
        return self._key() > other._key()

    def __ge__(self, other: "Slot") -> bool:
        return self._key() >= other._key()


def slot_timestamp(slot: Slot, params: ProtocolParams) -> float:
    """Protocol time of a slot in seconds since genesis."""
    if slot.thread >= params.thread_count:
        raise ValueError(f"slot thread {slot.thread} out of range")
    t0 = params.slot_interval
    return slot.period * t0 + slot.thread * t0 / params.thread_count


@dataclass(frozen=True)
class Address:
    """A 32-byte account address; its digest prefix fixes the owning thread."""

    digest: bytes

    def __post_init__(self):
        if len(self.digest) != DIGEST_SIZE:
            raise ValueError(f"address digest must be {DIGEST_SIZE} bytes")

    @classmethod
    def from_seed(cls, seed: bytes | str) -> "Address":
        if isinstance(seed, str):
            seed = seed.encode()
        return cls(hashlib.sha256(seed).digest())


def thread_of_address(address: Address, params: ProtocolParams) -> int:
    """Thread owning an address: the top log2(T) bits of its digest."""
    bits = params.thread_bits
    if bits == 0:
        return 0
    return int.from_bytes(address.digest, "big") >> (8 * DIGEST_SIZE - bits)


@dataclass(frozen=True)
class Transaction:
    sender: Address
    receiver: Address
    amount: int
    fee: int = 0
    nonce: int = 0
    size_bits: int = DEFAULT_TX_SIZE_BITS

    def __post_init__(self):
        if self.amount < 0 or self.fee < 0:
            raise ValueError("amount and fee must be non-negative")


@dataclass(frozen=True)
class Endorsement:
    """Attestation of the previous block in a thread, filling one of E slots."""

    endorsed_block: bytes
    slot: Slot
    endorsement_index: int
    creator: int


@dataclass(frozen=True)
class Block:
    """A slot-addressed DAG node. Genesis blocks carry no parents; every other
    block references exactly one parent per thread.

    ``transactions`` may be left empty with an explicit ``tx_count`` for
    synthetic load (the simulator never materializes transaction lists).
    """

    slot: Slot
    creator: int
    parents: tuple[bytes, ...]
    endorsements: tuple[Endorsement, ...] = ()
    transactions: tuple[Transaction, ...] = ()
    size_bits: int = 0
    tx_count: int = -1  # -1 means len(transactions)

    def __post_init__(self):
        if self.tx_count < 0:
            object.__setattr__(self, "tx_count", len(self.transactions))

    @property
    def is_genesis(self) -> bool:
        return not self.parents

    @property
    def thread(self) -> int:
        return self.slot.thread

    @cached_property
    def id(self) -> bytes:
        return hashlib.sha256(encode_block(self)).digest()


_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


def _w_slot(out: io.BytesIO, slot: Slot) -> None:
    out.write(_U32.pack(slot.thread))
    out.write(_U64.pack(slot.period))


def encode_block(block: Block) -> bytes:
    out = io.BytesIO()
    _w_slot(out, block.slot)
    out.write(_U64.pack(block.creator))
    out.write(_U32.pack(len(block.parents)))
    for p in block.parents:
        if len(p) != DIGEST_SIZE:
            raise ValueError("parent ids must be 32 bytes")
        out.write(p)
    out.write(_U32.pack(len(block.endorsements)))
    for e in block.endorsements:
        out.write(e.endorsed_block)
        _w_slot(out, e.slot)
        out.write(_U32.pack(e.endorsement_index))
        out.write(_U64.pack(e.creator))
    out.write(_U32.pack(len(block.transactions)))
    for tx in block.transactions:
        out.write(tx.sender.digest)
        out.write(tx.receiver.digest)
        out.write(_U64.pack(tx.amount))
        out.write(_U64.pack(tx.fee))
        out.write(_U64.pack(tx.nonce))
        out.write(_U32.pack(tx.size_bits))
    out.write(_U64.pack(block.tx_count))
    out.write(_U64.pack(block.size_bits))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated block encoding")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def slot(self) -> Slot:
        return Slot(self.u32(), self.u64())


def decode_block(data: bytes) -> Block:
    r = _Reader(data)
    slot = r.slot()
    creator = r.u64()
    parents = tuple(r.take(DIGEST_SIZE) for _ in range(r.u32()))
    endorsements = tuple(
        Endorsement(r.take(DIGEST_SIZE), r.slot(), r.u32(), r.u64())
        for _ in range(r.u32())
    )
    transactions = tuple(
        Transaction(
            Address(r.take(DIGEST_SIZE)), Address(r.take(DIGEST_SIZE)),
            r.u64(), r.u64(), r.u64(), r.u32(),
        )
        for _ in range(r.u32())
    )
    tx_count = r.u64()
    size_bits = r.u64()
    if r.pos != len(data):
        raise ValueError("trailing bytes in block encoding")
    return Block(slot, creator, parents, endorsements, transactions, size_bits, tx_count)


def make_genesis(thread: int) -> Block:
    """The protocol-given genesis block of a thread (period 0, no parents)."""
    return Block(slot=Slot(thread, 0), creator=0, parents=(), size_bits=0, tx_count=0)


class BlockStore:
    """Single-owner store of structurally valid blocks.

    Blocks whose parents are unknown are buffered in a bounded waiting pool and
    re-processed when the missing parents arrive. Genesis blocks are seeded at
    construction.
    """

    def __init__(self, params: ProtocolParams, oracle=None, validate: bool = True,
                 max_pending: int = 10_000):
        self.params = params
        self.oracle = oracle
        self.validate = validate
        self.max_pending = max_pending
        self.blocks: dict[bytes, Block] = {}
        # per block: own-thread parent id (None for genesis) for chain walks
        self._own_parent: dict[bytes, Optional[bytes]] = {}
        # per block: tuple over threads of (period, id) of the latest
        # thread-tau ancestor-or-self, or None when unreachable
        self._tips: dict[bytes, tuple] = {}
        self._waiting: dict[bytes, list[bytes]] = {}   # missing id -> waiting block ids
        self._pending: dict[bytes, Block] = {}         # waiting block id -> block
        self.rejected: list[tuple[bytes, list[str]]] = []
        self.dropped_pending = 0
        self.genesis_ids: list[bytes] = []
        for tau in range(params.thread_count):
            g = make_genesis(tau)
            self.genesis_ids.append(g.id)
            self._admit(g)

    def __contains__(self, block_id: bytes) -> bool:
        return block_id in self.blocks

    def get(self, block_id: bytes) -> Block:
        try:
            return self.blocks[block_id]
        except KeyError:
            raise UnknownBlock(block_id.hex()) from None

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def pending_count(self) -> int:
        return len(self._pending)

    def own_parent(self, block_id: bytes) -> Optional[bytes]:
        return self._own_parent[block_id]

    def path_in_thread(self, a: bytes, b: bytes, thread: int) -> bool:
        """True iff a is b or an ancestor of b along thread-local parent links."""
        if a not in self.blocks or b not in self.blocks:
            raise UnknownBlock("path query on unknown block")
        ba, bb = self.blocks[a], self.blocks[b]
        if ba.thread != thread or bb.thread != thread:
            return False
        return self._chain_covers(a, ba.slot.period, b)

    def _chain_covers(self, ancestor_id: bytes, ancestor_period: int, tip_id: bytes) -> bool:
        # walk tip's own-thread chain down to ancestor_period
        cur = tip_id
        cur_period = self.blocks[cur].slot.period
        while cur_period > ancestor_period:
            nxt = self._own_parent[cur]
            if nxt is None:
                return False
            cur = nxt
            cur_period = self.blocks[cur].slot.period
        return cur == ancestor_id

    def receive(self, block: Block) -> list[Block]:
        """Accept a block, buffering it if parents are missing.

        Returns the list of blocks admitted by this call, in admission order
        (the given block plus any waiting blocks it unblocked). Raises
        StructuralViolation when the given block itself is permanently
        invalid; invalid blocks released from the waiting pool are dropped
        and recorded in ``rejected``.
        """
        if block.id in self.blocks or block.id in self._pending:
            return []
        accepted: list[Block] = []
        queue = [(block, True)]
        while queue:
            blk, direct = queue.pop(0)
            missing = [p for p in blk.parents if p not in self.blocks]
            if missing:
                self._buffer(blk, missing)
                continue
            if self.validate:
                violations = validate_block_structure(blk, self, self.params, self.oracle)
                if violations:
                    if direct:
                        raise StructuralViolation(blk.id, violations)
                    self.rejected.append((blk.id, violations))
                    log.warning("dropped invalid buffered block %s: %s",
                                blk.id.hex()[:16], "; ".join(violations))
                    continue
            self._admit(blk)
            accepted.append(blk)
            # release any blocks that were waiting on this one
            for rid in self._waiting.pop(blk.id, ()):
                pending = self._pending.get(rid)
                if pending is not None and not any(
                    p not in self.blocks for p in pending.parents
                ):
                    del self._pending[rid]
                    queue.append((pending, False))
        return accepted

    def _buffer(self, block: Block, missing: list[bytes]) -> None:
        if block.id in self._pending:
            return
        if len(self._pending) >= self.max_pending:
            victim = next(iter(self._pending))
            del self._pending[victim]
            self.dropped_pending += 1
            log.warning("waiting pool full; dropped pending block %s", victim.hex()[:16])
        self._pending[block.id] = block
        for m in missing:
            self._waiting.setdefault(m, []).append(block.id)

    def _admit(self, block: Block) -> None:
        t = self.params.thread_count
        bid = block.id
        self.blocks[bid] = block
        if block.is_genesis:
            self._own_parent[bid] = None
            tips = [None] * t
            tips[block.thread] = (0, bid)
            self._tips[bid] = tuple(tips)
            return
        self._own_parent[bid] = block.parents[block.thread]
        tips: list = [None] * t
        for p in block.parents:
            for tau, tip in enumerate(self._tips[p]):
                if tip is not None and (tips[tau] is None or tip > tips[tau]):
                    tips[tau] = tip
        tips[block.thread] = (block.slot.period, bid)
        self._tips[bid] = tuple(tips)

    def tips(self, block_id: bytes) -> tuple:
        return self._tips[block_id]


def validate_block_structure(block: Block, store: BlockStore,
                             params: ProtocolParams, oracle=None) -> list[str]:
    """Check the structural validity of a block against known blocks.

    Returns a list of violations (empty when the block is valid). Raises
    MissingParent when some parent is not yet in the store; the caller is
    expected to buffer the block and retry once parents arrive.
    """
    t = params.thread_count
    if block.is_genesis:
        if block.id != make_genesis(block.thread).id:
            return ["non-canonical genesis block"]
        return []
    violations: list[str] = []
    if block.thread >= t:
        return [f"thread {block.thread} out of range for T={t}"]
    if len(block.parents) != t:
        return [f"expected {t} parents, got {len(block.parents)}"]
    missing = [p for p in block.parents if p not in store]
    if missing:
        raise MissingParent(block.id, missing)
    if block.slot.period < 1:
        violations.append("non-genesis block in period 0")
    if block.size_bits > params.max_block_size:
        violations.append(f"size {block.size_bits} exceeds limit {params.max_block_size}")
    for tau, pid in enumerate(block.parents):
        parent = store.get(pid)
        if parent.thread != tau:
            violations.append(f"parent {tau} lies in thread {parent.thread}")
    if violations:
        return violations
    own = store.get(block.parents[block.thread])
    if own.slot.period >= block.slot.period:
        violations.append("own-thread parent period is not strictly smaller")

    # Ancestor consistency: every thread-tau ancestor reachable through any
    # parent must lie on the own-thread chain of the declared parent in tau.
    for tau in range(t):
        ref = store.get(block.parents[tau])
        for p in block.parents:
            tip = store.tips(p)[tau]
            if tip is None:
                continue
            tip_period, tip_id = tip
            if tip_period > ref.slot.period or not store._chain_covers(tip_id, tip_period, ref.id):
                violations.append(
                    f"ancestor {tip_id.hex()[:12]} in thread {tau} is not covered "
                    f"by the declared parent"
                )
                break

    for tx in block.transactions:
        if thread_of_address(tx.sender, params) != block.thread:
            violations.append("transaction sender not assigned to the block thread")
            break

    e_max = params.endorsement_slots
    seen_idx = set()
    for e in block.endorsements:
        if not (0 <= e.endorsement_index < e_max):
            violations.append(f"endorsement index {e.endorsement_index} out of range")
            continue
        if e.endorsement_index in seen_idx:
            violations.append("duplicate endorsement index")
            continue
        seen_idx.add(e.endorsement_index)
        if e.slot != block.slot:
            violations.append("endorsement slot differs from block slot")
        if e.endorsed_block != block.parents[block.thread]:
            violations.append("endorsement does not reference the own-thread parent")
        if oracle is not None:
            expected = oracle.draw_endorsers(block.slot, e_max)[e.endorsement_index]
            if e.creator != expected:
                violations.append("endorsement creator does not match the selection draw")
    return violations


@dataclass(frozen=True)
class Ledger:
    """Address balances after processing some set of blocks."""

    balances: Mapping[Address, int] = field(default_factory=dict)

    def balance(self, address: Address) -> int:
        return self.balances.get(address, 0)


def apply_block_to_ledger(ledger: Ledger, block: Block) -> Ledger:
    """Apply a block's transactions; all-or-nothing on overdraft.

    Transactions are applied in block order, so later transactions see the
    credits of earlier ones.
    """
    balances = dict(ledger.balances)
    for tx in block.transactions:
        debit = tx.amount + tx.fee
        have = balances.get(tx.sender, 0)
        if have < debit:
            raise InsufficientBalance(
                f"sender has {have}, needs {debit} (block {block.id.hex()[:12]})"
            )
        balances[tx.sender] = have - debit
        balances[tx.receiver] = balances.get(tx.receiver, 0) + tx.amount
    return Ledger(balances)


# --- DAG trace files: one JSON object per line, one block per object -------

def block_to_record(block: Block) -> dict:
    return {
        "id": block.id.hex(),
        "slot": {"thread": block.slot.thread, "period": block.slot.period},
        "creator": block.creator,
        "parents": [p.hex() for p in block.parents],
        "endorsements": [
            {
                "endorsed_block": e.endorsed_block.hex(),
                "slot": {"thread": e.slot.thread, "period": e.slot.period},
                "endorsement_index": e.endorsement_index,
                "creator": e.creator,
            }
            for e in block.endorsements
        ],
        "size_bits": block.size_bits,
        "tx_count": block.tx_count,
    }


def record_to_block(record: Mapping) -> Block:
    """Rebuild a header-level block from a trace record (transactions stay
    synthetic; only the count survives the trace)."""
    block = Block(
        slot=Slot(record["slot"]["thread"], record["slot"]["period"]),
        creator=record["creator"],
        parents=tuple(bytes.fromhex(p) for p in record["parents"]),
        endorsements=tuple(
            Endorsement(
                bytes.fromhex(e["endorsed_block"]),
                Slot(e["slot"]["thread"], e["slot"]["period"]),
                e["endorsement_index"],
                e["creator"],
            )
            for e in record.get("endorsements", ())
        ),
        size_bits=record["size_bits"],
        tx_count=record["tx_count"],
    )
    declared = record.get("id")
    if declared is not None and bytes.fromhex(declared) != block.id:
        raise ValueError(f"trace record id {declared[:12]} does not match content")
    return block


def write_trace(blocks: Iterable[Block], fp) -> None:
    for b in blocks:
        fp.write(json.dumps(block_to_record(b), sort_keys=True) + "\n")


def read_trace(fp) -> Iterator[Block]:
    for line in fp:
        line = line.strip()
        if line:
            yield record_to_block(json.loads(line))
