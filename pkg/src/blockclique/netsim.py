"""Deterministic discrete-event simulation of a random peer-to-peer network of
consensus nodes.

The engine runs on a virtual clock: a priority queue of (time, sequence)
events replaces wall-clock execution, so identical configurations yield
bit-identical metrics. Per slot, the selected producer (unless it misses)
builds a full synthetic block on its local best parents and relays it;
deliveries queue on the sender's sequential upload channel, then cost
size/bandwidth plus the edge latency. Receivers pay a verification delay
before updating their consensus state and forwarding. Verification is modeled
as a time cost only; blocks are honest by construction and are not
re-validated at every node.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import math
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .chain import Block, Endorsement, ProtocolParams, Slot, slot_timestamp
from .consensus import CompatibilityState, HeaderMeta
from .errors import InsufficientData, TopologyError
from .selection import SelectionOracle

log = logging.getLogger(__name__)

DEFAULT_HEADER_BITS = 6720

_EV_SLOT = 0
_EV_ARRIVE = 1
_EV_PROCESS = 2
_EV_SEND_DONE = 3


@dataclass(frozen=True)
class SimConfig:
    node_count: int = 128
    mean_bandwidth: float = 32e6        # bits/s
    mean_latency: float = 0.100         # seconds
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    miss_rate: float = 0.0
    header_size: int = DEFAULT_HEADER_BITS
    tx_size: int = 1040
    block_verify_time: float = 0.050
    tx_verify_time: float = 0.000025
    duration: float = 600.0
    seed: int = 0
    endorsements_enabled: bool = False

    @property
    def tx_per_block(self) -> int:
        """Transactions fitting in a full block beside the header (and the
        endorsements, when those are simulated)."""
        payload = self.protocol.max_block_size - self.header_size
        if self.endorsements_enabled:
            payload -= self.protocol.endorsement_slots * self.tx_size
        if payload < 0:
            raise ValueError("header does not fit in the block size")
        return payload // self.tx_size

    @property
    def warmup(self) -> float:
        """Metrics ignore blocks created during the first settlement spans."""
        p = self.protocol
        return 2.0 * p.finality * p.slot_interval / p.thread_count

    def to_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "mean_bandwidth": self.mean_bandwidth,
            "mean_latency": self.mean_latency,
            "protocol": self.protocol.to_dict(),
            "miss_rate": self.miss_rate,
            "header_size": self.header_size,
            "tx_size": self.tx_size,
            "block_verify_time": self.block_verify_time,
            "tx_verify_time": self.tx_verify_time,
            "duration": self.duration,
            "seed": self.seed,
            "endorsements_enabled": self.endorsements_enabled,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        kwargs = {k: d[k] for k in cls.__dataclass_fields__ if k in d and k != "protocol"}
        if "protocol" in d:
            kwargs["protocol"] = ProtocolParams.from_dict(d["protocol"])
        return cls(**kwargs)


_OVERRIDE_ALIASES = {
    "N": "node_count",
    "B": "mean_bandwidth",
    "L": "mean_latency",
    "mu": "miss_rate",
    "S_H": "header_size",
    "S_tx": "tx_size",
}
_PROTOCOL_ALIASES = {
    "T": "thread_count",
    "t0": "slot_interval",
    "S_B": "max_block_size",
    "F": "finality",
    "E": "endorsement_slots",
}


def apply_overrides(cfg: SimConfig, overrides: Mapping[str, str]) -> SimConfig:
    """Apply ``key=value`` overrides; keys accept both field names and the
    short protocol aliases (N, B, L, T, t0, S_B, F, E, mu, C_B, ...)."""
    cfg_kwargs: dict = {}
    proto_kwargs: dict = {}
    bitrate = None
    for key, raw in overrides.items():
        if key == "C_B":
            bitrate = float(raw)
            continue
        if key in _PROTOCOL_ALIASES:
            proto_kwargs[_PROTOCOL_ALIASES[key]] = raw
        elif key in ProtocolParams.__dataclass_fields__:
            proto_kwargs[key] = raw
        elif key in _OVERRIDE_ALIASES:
            cfg_kwargs[_OVERRIDE_ALIASES[key]] = raw
        elif key in SimConfig.__dataclass_fields__:
            cfg_kwargs[key] = raw
        else:
            raise KeyError(f"unknown override {key!r}")
    proto = cfg.protocol
    if proto_kwargs:
        fields = {}
        for name, raw in proto_kwargs.items():
            kind = type(getattr(proto, name))
            fields[name] = _parse(raw, kind)
        proto = replace(proto, **fields)
    if bitrate is not None:
        proto = replace(proto, max_block_size=int(
            bitrate * proto.slot_interval / proto.thread_count))
    if proto is not cfg.protocol:
        cfg_kwargs["protocol"] = proto
    parsed = {}
    for name, raw in cfg_kwargs.items():
        if name == "protocol":
            parsed[name] = raw
            continue
        kind = type(getattr(cfg, name))
        parsed[name] = _parse(raw, kind)
    return replace(cfg, **parsed)


def _parse(raw, kind):
    if isinstance(raw, kind):
        return raw
    if kind is bool:
        return str(raw).lower() in ("1", "true", "yes", "on")
    return kind(float(raw)) if kind is int else kind(raw)


@dataclass
class NetworkTopology:
    """Random peer graph. ``successors`` lists the links each node initiates
    (out-degree floor(4 b / B)); messages flow both ways over a link, so the
    relay fan-out of a node is ``peers`` (initiated plus accepted links) with
    the symmetric per-link latency."""

    bandwidths: list[float]             # per-node upload bits/s
    successors: list[list[int]]
    latencies: list[list[float]]        # aligned with successors
    peers: list[list[int]]
    peer_latency: list[dict[int, float]]
    resampled: int = 0


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(label.encode() + struct.pack(">Q", seed & (2**64 - 1))).digest()
    return int.from_bytes(digest[:8], "big")


def _miss_draw(seed: int, slot: Slot, index: int) -> float:
    msg = b"blockclique.sim.miss.v1" + struct.pack(
        ">QIQI", seed & (2**64 - 1), slot.thread, slot.period, index)
    return int.from_bytes(hashlib.sha256(msg).digest()[:8], "big") / 2.0 ** 64


def build_topology(cfg: SimConfig, max_retries: int = 100) -> NetworkTopology:
    """Random peer graph: node upload bandwidth uniform in [B/2, 3B/2], each
    node initiates floor(4 b / B) links to distinct random peers, per-link
    latency uniform in [0, 2 L]. Disconnected samples are redrawn."""
    n = cfg.node_count
    if n < 2:
        raise TopologyError("need at least two nodes")
    rng = np.random.default_rng(np.random.PCG64(_derive_seed(cfg.seed, "blockclique.sim.topology")))
    b_mean = cfg.mean_bandwidth
    for attempt in range(max_retries):
        bandwidths = b_mean / 2.0 + rng.random(n) * b_mean
        successors: list[list[int]] = []
        latencies: list[list[float]] = []
        for u in range(n):
            degree = min(int(4.0 * bandwidths[u] / b_mean), n - 1)
            others = np.concatenate([np.arange(u), np.arange(u + 1, n)])
            succ = rng.choice(others, size=degree, replace=False)
            successors.append([int(s) for s in succ])
            latencies.append([float(x) for x in rng.random(degree) * 2.0 * cfg.mean_latency])
        peers, peer_latency = _link_graph(n, successors, latencies)
        if _connected(n, peers):
            if attempt:
                log.info("topology connected after %d resample(s)", attempt)
            return NetworkTopology([float(b) for b in bandwidths], successors,
                                   latencies, peers, peer_latency, resampled=attempt)
    raise TopologyError(f"no weakly connected topology within {max_retries} draws")


def _link_graph(n: int, successors: list[list[int]],
                latencies: list[list[float]]) -> tuple[list[list[int]], list[dict[int, float]]]:
    peer_latency: list[dict[int, float]] = [{} for _ in range(n)]
    for u, succ in enumerate(successors):
        for j, v in enumerate(succ):
            # keep the first latency drawn when both ends initiated a link
            if v not in peer_latency[u]:
                peer_latency[u][v] = latencies[u][j]
                peer_latency[v][u] = latencies[u][j]
    peers = [list(peer_latency[u]) for u in range(n)]
    return peers, peer_latency


def _connected(n: int, peers: list[list[int]]) -> bool:
    seen = bytearray(n)
    stack = [0]
    seen[0] = 1
    count = 1
    while stack:
        u = stack.pop()
        for v in peers[u]:
            if not seen[v]:
                seen[v] = 1
                count += 1
                stack.append(v)
    return count == n


@dataclass
class SimMetrics:
    throughput: float
    stale_rate: float
    confirmation_time: Optional[float]
    t_half: Optional[float]
    blocks_produced: int
    blocks_final: int
    blocks_stale: int
    blocks_active: int
    slots_scheduled: int
    slots_missed: int
    tx_per_block: int
    warmup: float
    max_processing_lag: float
    max_clique_count: int
    transmissions: int
    block_records: Optional[list] = None    # populated on request, not serialized
    propagation: Optional[list] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()
                if k not in ("block_records", "propagation")}


class _Node:
    """Per-node runtime state: consensus view plus an out-of-order buffer."""

    __slots__ = ("consensus", "seen", "pending", "waiting")

    def __init__(self, params: ProtocolParams):
        self.consensus = CompatibilityState(params)
        self.seen: set[bytes] = set()
        self.pending: dict[bytes, HeaderMeta] = {}
        self.waiting: dict[bytes, list[bytes]] = {}

    def admit(self, meta: HeaderMeta) -> list[HeaderMeta]:
        """Feed one verified header; returns all headers that became
        processable (parents-first order)."""
        known = self.consensus._meta
        out: list[HeaderMeta] = []
        queue = [meta]
        while queue:
            m = queue.pop(0)
            if m.id in known:
                continue
            if any(p not in known for p in m.parents):
                if m.id not in self.pending:
                    self.pending[m.id] = m
                    for p in m.parents:
                        if p not in known:
                            self.waiting.setdefault(p, []).append(m.id)
                continue
            out.append(m)
            self.consensus.extend_meta(m)
            for rid in self.waiting.pop(m.id, ()):
                pm = self.pending.get(rid)
                if pm is not None and not any(p not in known for p in pm.parents):
                    del self.pending[rid]
                    queue.append(pm)
        return out


def run_simulation(cfg: SimConfig, collect_blocks: bool = False,
                   collect_propagation: bool = False) -> SimMetrics:
    """Run the full network simulation and measure it.

    ``collect_blocks`` attaches one record per measured block;
    ``collect_propagation`` additionally attaches every (node, arrival time)
    pair per block for offline plotting.
    """
    params = cfg.protocol
    topo = build_topology(cfg)
    oracle = SelectionOracle(_derive_seed(cfg.seed, "blockclique.sim.selection"),
                             cfg.node_count)
    miss_seed = _derive_seed(cfg.seed, "blockclique.sim.miss")
    nodes = [_Node(params) for _ in range(cfg.node_count)]
    send_queue: list[deque] = [deque() for _ in range(cfg.node_count)]
    sending = [False] * cfg.node_count
    half_needed = math.ceil(cfg.node_count / 2)
    prop: Optional[dict[bytes, list]] = {} if collect_propagation else None

    blocks: dict[bytes, Block] = {}
    metas: dict[bytes, HeaderMeta] = {}
    created_at: dict[bytes, float] = {}
    holders: dict[bytes, int] = {}
    half_at: dict[bytes, float] = {}
    settle: dict[bytes, tuple[str, float]] = {}   # at the creating node
    max_lag = 0.0
    max_cliques = 1
    slots_missed = 0
    transmissions = 0

    wire_extra = params.endorsement_slots * cfg.tx_size if cfg.endorsements_enabled else 0
    tx_count = cfg.tx_per_block
    verify_cost = cfg.block_verify_time + tx_count * cfg.tx_verify_time

    heap: list[tuple] = []
    seq = 0
    n_periods = int(cfg.duration / params.slot_interval)
    slots_scheduled = 0
    for period in range(1, n_periods + 1):
        for tau in range(params.thread_count):
            slot = Slot(tau, period)
            ts = slot_timestamp(slot, params)
            if ts <= cfg.duration:
                heapq.heappush(heap, (ts, seq, _EV_SLOT, slot, None))
                seq += 1
                slots_scheduled += 1

    def relay(sender: int, block_id: bytes, now: float) -> None:
        """Queue a block for every link peer on the sender's sequential upload
        channel. Transmissions whose destination already holds the block by
        the time the channel frees up are skipped without cost."""
        q = send_queue[sender]
        lat = topo.peer_latency[sender]
        for dst in topo.peers[sender]:
            q.append((dst, lat[dst], block_id))
        if not sending[sender]:
            start_send(sender, now)

    def start_send(sender: int, now: float) -> None:
        nonlocal seq, transmissions
        q = send_queue[sender]
        while q:
            dst, lat, bid = q.popleft()
            if bid in nodes[dst].seen:
                continue
            done = now + (blocks[bid].size_bits + wire_extra) / topo.bandwidths[sender]
            sending[sender] = True
            transmissions += 1
            heapq.heappush(heap, (done, seq, _EV_SEND_DONE, sender, None))
            seq += 1
            heapq.heappush(heap, (done + lat, seq, _EV_ARRIVE, dst, bid))
            seq += 1
            return
        sending[sender] = False

    def process(node_idx: int, block_id: bytes, now: float) -> None:
        nonlocal max_lag, max_cliques
        lag = now - created_at[block_id]
        if lag > max_lag:
            max_lag = lag
        relay(node_idx, block_id, now)
        node = nodes[node_idx]
        for meta in node.admit(metas[block_id]):
            final, stale = node.consensus.update_finality()
            cliques = len(node.consensus.maximal_cliques())
            if cliques > max_cliques:
                max_cliques = cliques
            for bid in final:
                if bid in blocks and blocks[bid].creator == node_idx and bid not in settle:
                    settle[bid] = ("final", now)
            for bid in stale:
                if bid in blocks and blocks[bid].creator == node_idx and bid not in settle:
                    settle[bid] = ("stale", now)

    while heap:
        now, _, kind, a, b = heapq.heappop(heap)
        if now > cfg.duration:
            break
        if kind == _EV_SLOT:
            slot = a
            if cfg.miss_rate > 0.0 and _miss_draw(miss_seed, slot, 0) < cfg.miss_rate:
                slots_missed += 1
                continue
            producer = oracle.draw_block_producer(slot)
            state = nodes[producer].consensus
            parents = tuple(state.best_parents())
            endorsements = ()
            if cfg.endorsements_enabled and params.endorsement_slots:
                picked = []
                for i, endorser in enumerate(
                        oracle.draw_endorsers(slot, params.endorsement_slots)):
                    if cfg.miss_rate > 0.0 and _miss_draw(miss_seed, slot, i + 1) < cfg.miss_rate:
                        continue
                    picked.append(Endorsement(parents[slot.thread], slot, i, endorser))
                endorsements = tuple(picked)
            block = Block(slot=slot, creator=producer, parents=parents,
                          endorsements=endorsements, size_bits=params.max_block_size,
                          tx_count=tx_count)
            bid = block.id
            blocks[bid] = block
            metas[bid] = HeaderMeta.from_block(block)
            created_at[bid] = now
            holders[bid] = 1
            if half_needed <= 1:
                half_at[bid] = now
            if prop is not None:
                prop[bid] = [(producer, now)]
            nodes[producer].seen.add(bid)
            process(producer, bid, now)
        elif kind == _EV_ARRIVE:
            node = nodes[a]
            if b in node.seen:
                continue
            node.seen.add(b)
            count = holders[b] + 1
            holders[b] = count
            if count == half_needed:
                half_at[b] = now
            if prop is not None:
                prop[b].append((a, now))
            heapq.heappush(heap, (now + verify_cost, seq, _EV_PROCESS, a, b))
            seq += 1
        elif kind == _EV_PROCESS:
            process(a, b, now)
        else:
            start_send(a, now)

    # -- measurements over blocks created after the warm-up -------------------
    warmup = cfg.warmup
    scope = [bid for bid, t in created_at.items() if t >= warmup]
    produced = len(scope)
    final_tx = 0
    finals = stales = 0
    conf_times: list[float] = []
    half_times: list[float] = []
    records = [] if collect_blocks else None
    for bid in scope:
        verdict, when = settle.get(bid, (None, None))
        if verdict == "final":
            finals += 1
            final_tx += blocks[bid].tx_count
            conf_times.append(when - created_at[bid])
        elif verdict == "stale":
            stales += 1
        if bid in half_at:
            half_times.append(half_at[bid] - created_at[bid])
        if records is not None:
            records.append({
                "id": bid.hex(),
                "thread": blocks[bid].slot.thread,
                "period": blocks[bid].slot.period,
                "created": created_at[bid],
                "half_propagation": half_at[bid] - created_at[bid] if bid in half_at else None,
                "settled": when,
                "status": verdict or "active",
            })
    span = cfg.duration - warmup
    metrics = SimMetrics(
        throughput=final_tx / span if span > 0 else 0.0,
        stale_rate=stales / produced if produced else 0.0,
        confirmation_time=sum(conf_times) / len(conf_times) if conf_times else None,
        t_half=sum(half_times) / len(half_times) if half_times else None,
        blocks_produced=produced,
        blocks_final=finals,
        blocks_stale=stales,
        blocks_active=produced - finals - stales,
        slots_scheduled=slots_scheduled,
        slots_missed=slots_missed,
        tx_per_block=tx_count,
        warmup=warmup,
        max_processing_lag=max_lag,
        max_clique_count=max_cliques,
        transmissions=transmissions,
    )
    if collect_blocks:
        metrics.block_records = records
    if prop is not None:
        metrics.propagation = [
            {"id": bid.hex(), "created": created_at[bid],
             "arrivals": [[n, t] for n, t in prop[bid]]}
            for bid in scope
        ]
    return metrics


def measure_confirmation(cfg: SimConfig, min_final: int = 100) -> tuple[float, float]:
    """Mean creation-to-finality delay at the creating node, and the mean time
    for a block to reach half the nodes."""
    metrics = run_simulation(cfg)
    if metrics.blocks_final < min_final:
        raise InsufficientData(
            f"only {metrics.blocks_final} blocks finalized; need {min_final}")
    return metrics.confirmation_time, metrics.t_half
