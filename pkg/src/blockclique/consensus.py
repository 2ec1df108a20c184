"""Incremental compatibility graph, maximal-clique enumeration, blockclique
selection, and final/stale settlement.

Two blocks conflict when they are thread-incompatible (same thread, same
own-thread parent), grandpa-incompatible (neither covers the other's parent in
its own thread), or when either descends from a block in conflict with the
other. Inherited conflicts are materialized as explicit edges at admission
time, which keeps the incompatibility graph transitively closed under
descent: a block's edge set always contains every edge of its parents, so the
recursive compatibility definition reduces to local edge checks.

Maximal cliques of compatible blocks are enumerated as maximal independent
sets of the (sparse) incompatibility graph via pivoted Bron-Kerbosch on the
complement. The conflict-free common case short-circuits to a single clique.
"""

from __future__ import annotations

import logging
from typing import Iterable, Optional

from .chain import Block, BlockStore, ProtocolParams, read_trace
from .errors import CliqueExplosion, StructuralViolation, UnknownBlock, UnprocessedParent
from .selection import fitness

log = logging.getLogger(__name__)

STATUS_ACTIVE = "active"
STATUS_FINAL = "final"
STATUS_STALE = "stale"

DEFAULT_CLIQUE_CAP = 1024


class HeaderMeta:
    """Immutable per-block header facts shared by every consensus instance."""

    __slots__ = ("id", "thread", "period", "parents", "own_parent", "fitness", "is_genesis")

    def __init__(self, id: bytes, thread: int, period: int, parents: tuple,
                 own_parent: Optional[bytes], fit: int, is_genesis: bool):
        self.id = id
        self.thread = thread
        self.period = period
        self.parents = parents
        self.own_parent = own_parent
        self.fitness = fit
        self.is_genesis = is_genesis

    @classmethod
    def from_block(cls, block: Block) -> "HeaderMeta":
        own = None if block.is_genesis else block.parents[block.thread]
        return cls(block.id, block.thread, block.slot.period, block.parents,
                   own, fitness(block), block.is_genesis)


class CompatibilityState:
    """Single-owner consensus state machine over block headers.

    Blocks must be fed in a parent-respecting order (``UnprocessedParent``
    otherwise). Settlement is monotone: once a block id lands in the final or
    stale set it never moves.
    """

    def __init__(self, params: ProtocolParams, clique_cap: int = DEFAULT_CLIQUE_CAP):
        self.params = params
        self.threshold = params.finality_threshold
        self.clique_cap = clique_cap
        self._meta: dict[bytes, HeaderMeta] = {}
        self.active: dict[bytes, HeaderMeta] = {}
        self._incompat: dict[bytes, set[bytes]] = {}
        self._edge_count = 0
        self._children: dict[bytes, list[bytes]] = {}
        self._desc_fitness: dict[bytes, int] = {}
        self._thread_active: list[dict[bytes, HeaderMeta]] = [
            {} for _ in range(params.thread_count)
        ]
        self._latest_final: list[Optional[tuple[int, bytes]]] = [None] * params.thread_count
        self.final_set: set[bytes] = set()
        self.stale_set: set[bytes] = set()
        self._total_fitness = 0
        self._cliques: Optional[list[tuple[frozenset, int]]] = None
        from .chain import make_genesis
        self.genesis_ids: list[bytes] = []
        for tau in range(params.thread_count):
            g = HeaderMeta.from_block(make_genesis(tau))
            self.genesis_ids.append(g.id)
            self._meta[g.id] = g
            self._admit(g)

    # -- queries -------------------------------------------------------------

    def status(self, block_id: bytes) -> Optional[str]:
        if block_id in self.final_set:
            return STATUS_FINAL
        if block_id in self.stale_set:
            return STATUS_STALE
        if block_id in self.active:
            return STATUS_ACTIVE
        return None

    def path_in_thread(self, a: bytes, b: bytes, thread: int) -> bool:
        """True iff a equals b or is an ancestor of b along thread-local links."""
        ma = self._meta.get(a)
        mb = self._meta.get(b)
        if ma is None or mb is None:
            raise UnknownBlock("path query on unknown block")
        if ma.thread != thread or mb.thread != thread:
            return False
        return self._covers(ma, mb)

    def _covers(self, anc: HeaderMeta, tip: HeaderMeta) -> bool:
        cur = tip
        while cur.period > anc.period:
            cur = self._meta[cur.own_parent]
        return cur is anc

    def thread_incompatible(self, id1: bytes, id2: bytes) -> bool:
        m1, m2 = self._meta[id1], self._meta[id2]
        return self._ti(m1, m2)

    @staticmethod
    def _ti(m1: HeaderMeta, m2: HeaderMeta) -> bool:
        return (not m1.is_genesis and not m2.is_genesis
                and m1.thread == m2.thread and m1.own_parent == m2.own_parent
                and m1.id != m2.id)

    def grandpa_incompatible(self, id1: bytes, id2: bytes) -> bool:
        m1, m2 = self._meta[id1], self._meta[id2]
        return self._gpi(m1, m2)

    def _gpi(self, m1: HeaderMeta, m2: HeaderMeta) -> bool:
        if m1.is_genesis or m2.is_genesis or m1.id == m2.id:
            return False
        meta = self._meta
        if self._covers(meta[m1.own_parent], meta[m2.parents[m1.thread]]):
            return False
        if self._covers(meta[m2.own_parent], meta[m1.parents[m2.thread]]):
            return False
        return True

    # -- graph growth ---------------------------------------------------------

    def extend(self, block: Block) -> str:
        """Insert one structurally valid block; returns its resulting status."""
        return self.extend_meta(HeaderMeta.from_block(block))

    def extend_meta(self, meta: HeaderMeta) -> str:
        if meta.id in self._meta:
            return self.status(meta.id)
        for p in meta.parents:
            if p not in self._meta:
                raise UnprocessedParent(f"parent {p.hex()[:16]} not processed")
        self._meta[meta.id] = meta

        if any(p in self.stale_set for p in meta.parents):
            self.stale_set.add(meta.id)
            return STATUS_STALE
        if not self._frontier_compatible(meta):
            # in conflict with an already-final block: can never join the
            # blockclique again
            self.stale_set.add(meta.id)
            return STATUS_STALE

        incompat = self._incompat
        active_parents = [p for p in meta.parents if p in self.active]
        # parents carrying mutual conflicts make the block permanently stale
        for i, p1 in enumerate(active_parents):
            edges = incompat.get(p1)
            if edges and any(p2 in edges for p2 in active_parents[i + 1:]):
                self.stale_set.add(meta.id)
                return STATUS_STALE

        # thread incompatibility only arises inside the block's own thread
        direct: list[HeaderMeta] = []
        own = meta.own_parent
        for x in self._thread_active[meta.thread].values():
            if not x.is_genesis and x.own_parent == own:
                direct.append(x)
        gpi = self._gpi
        for x in self.active.values():
            if x.is_genesis:
                continue
            if x.thread == meta.thread and x.own_parent == own:
                continue  # already collected as thread-incompatible
            if gpi(meta, x):
                direct.append(x)

        conflicts: set[bytes] = set()
        for p in active_parents:
            edges = incompat.get(p)
            if edges:
                conflicts |= edges
        for x in direct:
            if x.id not in conflicts:
                conflicts.add(x.id)
                # descendants of x inherit the new edge
                for d in self._descendants(x):
                    conflicts.add(d.id)
        if any(p in conflicts for p in meta.parents):
            # incompatible with one of its own parents under the recursive rule
            self.stale_set.add(meta.id)
            return STATUS_STALE

        self._admit(meta)
        if conflicts:
            mine = incompat.setdefault(meta.id, set())
            for cid in conflicts:
                if cid not in mine:
                    mine.add(cid)
                    incompat.setdefault(cid, set()).add(meta.id)
                    self._edge_count += 1
        return STATUS_ACTIVE

    def _frontier_compatible(self, meta: HeaderMeta) -> bool:
        """Whether the block is compatible with every settled-final block.

        Active blocks never conflict with finals (a block only finalizes once
        nothing active conflicts with it), so this needs checking only at
        admission. Equivalent to pairwise incompatibility tests against the
        whole final set: the own-thread parent must be active or the thread's
        final tip (a deeper final parent has a final sibling above it), and
        wherever another thread's parent z is final below that thread's tip,
        every final above z's direct child must reference an own-thread
        ancestor the new block also covers."""
        meta_map = self._meta
        final = self.final_set
        t = meta.thread
        own = meta.own_parent
        if own in final:
            entry = self._latest_final[t]
            if entry is None or entry[1] != own:
                return False
        z_t = meta_map[own]
        for tau, pid in enumerate(meta.parents):
            if tau == t or pid not in final:
                continue
            tip_id = self._latest_final[tau][1]
            cur = meta_map[tip_id]
            while cur.id != pid:
                if cur.own_parent != pid:
                    ref = meta_map[cur.parents[t]]
                    if not self._covers(z_t, ref):
                        return False
                cur = meta_map[cur.own_parent]
        return True

    def _admit(self, meta: HeaderMeta) -> None:
        bid = meta.id
        self.active[bid] = meta
        self._thread_active[meta.thread][bid] = meta
        self._desc_fitness[bid] = 0
        self._total_fitness += meta.fitness
        self._cliques = None
        children = self._children
        desc = self._desc_fitness
        fit = meta.fitness
        seen: set[bytes] = set()
        stack = [p for p in meta.parents if p in self.active]
        active = self.active
        while stack:
            pid = stack.pop()
            if pid in seen:
                continue
            seen.add(pid)
            desc[pid] += fit
            for gp in active[pid].parents:
                if gp not in seen and gp in active:
                    stack.append(gp)
        for p in meta.parents:
            if p in active:
                children.setdefault(p, []).append(bid)

    def _descendants(self, meta: HeaderMeta) -> list[HeaderMeta]:
        """All active blocks having ``meta`` as a strict ancestor."""
        out: list[HeaderMeta] = []
        seen: set[bytes] = set()
        stack = list(self._children.get(meta.id, ()))
        active = self.active
        while stack:
            cid = stack.pop()
            if cid in seen:
                continue
            seen.add(cid)
            cm = active.get(cid)
            if cm is None:
                continue
            out.append(cm)
            stack.extend(self._children.get(cid, ()))
        return out

    def _ancestors(self, meta: HeaderMeta) -> list[bytes]:
        """Ids of active strict ancestors of ``meta``."""
        out: list[bytes] = []
        seen: set[bytes] = set()
        stack = [p for p in meta.parents if p in self.active]
        active = self.active
        while stack:
            pid = stack.pop()
            if pid in seen:
                continue
            seen.add(pid)
            out.append(pid)
            for gp in active[pid].parents:
                if gp not in seen and gp in active:
                    stack.append(gp)
        return out

    # -- cliques ---------------------------------------------------------------

    def maximal_cliques(self) -> list[tuple[frozenset, int]]:
        """Maximal cliques of compatible active blocks with their total
        fitness, sorted best-first per the blockclique rule."""
        if self._cliques is not None:
            return self._cliques
        if not self.active:
            self._cliques = [(frozenset(), 0)]
            return self._cliques
        if self._edge_count == 0:
            self._cliques = [(frozenset(self.active), self._total_fitness)]
            return self._cliques
        cliques = self._enumerate_cliques()
        ranked = sorted(
            ((members, sum(self.active[m].fitness for m in members))
             for members in cliques),
            key=lambda c: (-c[1], _id_sum(c[0]), tuple(sorted(c[0]))),
        )
        self._cliques = ranked
        return ranked

    def _enumerate_cliques(self) -> list[frozenset]:
        incompat = self._incompat
        empty: set = set()
        vertices = set(self.active)
        results: list[frozenset] = []
        cap = self.clique_cap

        def comp_neighbors(v: bytes) -> set:
            return vertices - incompat.get(v, empty) - {v}

        def bk(r: list, p: set, x: set) -> None:
            if not p and not x:
                results.append(frozenset(r))
                if len(results) > cap:
                    raise CliqueExplosion(f"more than {cap} maximal cliques")
                return
            pivot = max(p | x, key=lambda u: len(p) - len(p & incompat.get(u, empty)))
            ext = p & (incompat.get(pivot, empty) | {pivot})
            for v in list(ext):
                nv = comp_neighbors(v)
                bk(r + [v], p & nv, x & nv)
                p.remove(v)
                x.add(v)

        bk([], set(vertices), set())
        return results

    def select_blockclique(self) -> int:
        """Index of the best clique: maximum total fitness, ties broken by the
        smaller big-integer sum of member ids, then lexicographically."""
        cliques = self.maximal_cliques()
        best = 0
        for i in range(1, len(cliques)):
            b_m, b_f = cliques[best]
            c_m, c_f = cliques[i]
            if c_f > b_f or (
                c_f == b_f and (_id_sum(c_m), tuple(sorted(c_m)))
                < (_id_sum(b_m), tuple(sorted(b_m)))
            ):
                best = i
        return best

    @property
    def blockclique(self) -> frozenset:
        cliques = self.maximal_cliques()
        return cliques[self.select_blockclique()][0]

    # -- settlement --------------------------------------------------------------

    def update_finality(self) -> tuple[list[bytes], list[bytes]]:
        """Settle blocks on the current graph snapshot.

        Returns (newly final, newly stale) ids, both sorted in slot order.
        Staling applies to every block whose best containing clique trails the
        blockclique by strictly more than the finality threshold, plus all its
        active descendants. Finality applies to blocks present in all maximal
        cliques whose in-clique descendants cumulate fitness above the
        threshold. Both rules are evaluated on the same pre-removal snapshot.
        """
        cliques = self.maximal_cliques()
        bc_fitness = cliques[self.select_blockclique()][1]
        threshold = self.threshold
        incompat = self._incompat

        newly_stale: dict[bytes, None] = {}
        if len(cliques) > 1:
            best_fit: dict[bytes, int] = {}
            for members, fit in cliques:
                for m in members:
                    if fit > best_fit.get(m, -1):
                        best_fit[m] = fit
            cutoff = bc_fitness - threshold
            for bid in self.active:
                if best_fit.get(bid, 0) < cutoff:
                    newly_stale[bid] = None
            for bid in list(newly_stale):
                for d in self._descendants(self.active[bid]):
                    newly_stale[d.id] = None

        newly_final: list[bytes] = []
        desc = self._desc_fitness
        if len(cliques) == 1:
            for bid in self.active:
                if bid not in newly_stale and not incompat.get(bid) \
                        and desc[bid] > threshold:
                    newly_final.append(bid)
        else:
            for bid in self.active:
                if bid in newly_stale or incompat.get(bid) or desc[bid] <= threshold:
                    continue
                dset = {d.id for d in self._descendants(self.active[bid])}
                for members, _ in cliques:
                    acc = 0
                    for d in dset & members:
                        acc += self.active[d].fitness
                    if acc > threshold:
                        newly_final.append(bid)
                        break

        if newly_stale or newly_final:
            # remove stale descendants before their ancestors so weight
            # decrements still propagate through intermediate blocks
            if newly_stale:
                for bid in [b for b in reversed(self.active) if b in newly_stale]:
                    self._remove(bid, stale=True)
            for bid in newly_final:
                self._remove(bid, stale=False)
            self._cliques = None

        order = lambda bid: (self._meta[bid].period, self._meta[bid].thread, bid)
        return sorted(newly_final, key=order), sorted(newly_stale, key=order)

    def _remove(self, bid: bytes, stale: bool) -> None:
        meta = self.active.pop(bid)
        del self._thread_active[meta.thread][bid]
        self._total_fitness -= meta.fitness
        edges = self._incompat.pop(bid, None)
        if edges:
            for other in edges:
                oset = self._incompat.get(other)
                if oset is not None:
                    oset.discard(bid)
                    self._edge_count -= 1
        self._children.pop(bid, None)
        self._desc_fitness.pop(bid, None)
        if stale:
            self.stale_set.add(bid)
            # the block no longer counts toward its ancestors' settled weight
            desc = self._desc_fitness
            for aid in self._ancestors(meta):
                desc[aid] -= meta.fitness
        else:
            self.final_set.add(bid)
            cur = self._latest_final[meta.thread]
            if cur is None or (meta.period, bid) > cur:
                self._latest_final[meta.thread] = (meta.period, bid)

    # -- producer support -----------------------------------------------------

    def best_parents(self) -> list[bytes]:
        """Per thread, the blockclique member with the greatest period (falls
        back to the latest final block of the thread once pruned)."""
        bc = self.blockclique
        best: list[Optional[tuple[int, bytes]]] = list(self._latest_final)
        for bid in bc:
            meta = self.active[bid]
            cur = best[meta.thread]
            if cur is None or (meta.period, bid) > cur:
                best[meta.thread] = (meta.period, bid)
        out = []
        for tau, entry in enumerate(best):
            if entry is None:
                raise RuntimeError(f"thread {tau} has no candidate parent")
            out.append(entry[1])
        return out

    def add_block(self, block: Block) -> tuple[str, list[bytes], list[bytes]]:
        """Extend with one block and settle; the one-call driving loop."""
        status = self.extend(block)
        if status == STATUS_STALE:
            return status, [], []
        final, stale = self.update_finality()
        if block.id in self.stale_set:
            status = STATUS_STALE
        return status, final, stale


def _id_sum(members: Iterable[bytes]) -> int:
    total = 0
    for m in members:
        total += int.from_bytes(m, "big")
    return total


def replay_trace(fp, params: ProtocolParams, oracle=None, validate: bool = True,
                 clique_cap: int = DEFAULT_CLIQUE_CAP):
    """Replay a DAG trace file through a fresh consensus instance.

    Yields one record per input block, in input order, after the whole trace
    has been absorbed: ``{"id", "status", "cliques"}`` where status is one of
    active/final/stale/unresolved and ``cliques`` counts the maximal cliques
    containing the block at the end of the replay (the full clique count for
    final blocks, zero for stale or unresolved ones).
    """
    store = BlockStore(params, oracle=oracle, validate=validate)
    state = CompatibilityState(params, clique_cap=clique_cap)
    seen_order: list[bytes] = []
    violations: list[tuple[bytes, list[str]]] = []
    for block in read_trace(fp):
        if block.is_genesis:
            if block.id in state.genesis_ids:
                continue
            violations.append((block.id, ["non-canonical genesis block"]))
            seen_order.append(block.id)
            continue
        seen_order.append(block.id)
        try:
            admitted = store.receive(block)
        except StructuralViolation as e:
            violations.append((block.id, e.violations))
            continue
        for adm in admitted:
            if not adm.is_genesis:
                state.add_block(adm)
    violations.extend(store.rejected)
    bad = {bid for bid, _ in violations}
    cliques = state.maximal_cliques()
    records = []
    for bid in seen_order:
        if bid in bad:
            records.append({"id": bid.hex(), "status": "invalid", "cliques": 0})
            continue
        status = state.status(bid)
        if status is None:
            records.append({"id": bid.hex(), "status": "unresolved", "cliques": 0})
        elif status == STATUS_ACTIVE:
            n = sum(1 for members, _ in cliques if bid in members)
            records.append({"id": bid.hex(), "status": status, "cliques": n})
        elif status == STATUS_FINAL:
            records.append({"id": bid.hex(), "status": status, "cliques": len(cliques)})
        else:
            records.append({"id": bid.hex(), "status": status, "cliques": 0})
    return records, violations
