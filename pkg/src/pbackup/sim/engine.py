"""Deterministic discrete-event runtime for :class:`~pbackup.node.Node`.

One global heap ordered by (time, sequence number).  Nodes run timers only
while online; a message is delivered after ``latency`` iff both ends are
online at the send and delivery instants, otherwise the sender sees a
failure.  Transfers run one inbound pull per node at a time at
``min(B_src, B_dst)``, pause whenever either end goes offline and resume
from the stored progress.
"""
from __future__ import annotations

import heapq
import math
import random
from collections.abc import Callable
from dataclasses import dataclass, field

from ..model import ChunkId, PeerDescriptor, PeerId
from ..node import Node
from ..protocol import CancelPull, DropData, MsgType, Note, Send, StartPull
from ..registry import OracleRegistry
from ..simnet import AvailabilitySchedule

INF = math.inf
DAY = 86400.0


@dataclass
class PullRequest:
    chunk: ChunkId
    version: int
    size: int
    sources: tuple[PeerId, ...]
    owned: bool


@dataclass
class ActivePull:
    req: PullRequest
    source: PeerId
    started: float
    rate: float
    token: int


@dataclass
class SimNode:
    node: Node
    trace: AvailabilitySchedule
    requests: dict[ChunkId, PullRequest] = field(default_factory=dict)
    active: ActivePull | None = None


class Simulation:
    def __init__(self, nodes: dict[PeerId, Node], traces: dict[PeerId, AvailabilitySchedule], *,
                 seed: int, start: float = 0.0, latency: float = 0.05,
                 registry: OracleRegistry | None = None, on_note: Callable | None = None):
        self.now = start
        self.start = start
        self.latency = latency
        self.rng = random.Random(seed ^ 0x5EED)
        self.nodes = {p: SimNode(nodes[p], traces[p]) for p in sorted(nodes)}
        self.registry = registry or OracleRegistry()
        self.heap: list = []
        self.seq = 0
        self.token = 0
        self.progress: dict[tuple[PeerId, ChunkId, int], float] = {}
        self.on_note = on_note or (lambda peer, note, now: None)
        self.sent = 0
        self.failed = 0
        self.delivered = 0
        for p, sn in self.nodes.items():
            n = sn.node
            n.reachable = self.is_online
            n.resolve = self.registry.get
            n.members = self._members
        self._member_list = list(self.nodes)

    # ----- wiring -----

    def _members(self) -> list[PeerId]:
        return self._member_list

    def is_online(self, peer: PeerId, t: float | None = None) -> bool:
        sn = self.nodes.get(peer)
        return sn is not None and sn.trace.is_online(self.now if t is None else t)

    def push(self, t: float, kind: str, *payload) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, payload))

    def start_timers(self) -> None:
        for p, sn in self.nodes.items():
            for kind, period in sn.node.timer_periods().items():
                phase = self.rng.uniform(0, period)
                self.push(self._next_timer(sn, self.start + phase, period), "timer", p, kind, period)
            # online transitions wake the data plane
            t = sn.trace.next_online(self.start)
            if t < INF:
                self.push(t, "up", p)

    def _next_timer(self, sn: SimNode, t: float, period: float) -> float:
        if sn.trace.is_online(t):
            return t
        on = sn.trace.next_online(t)
        if on == INF:
            return INF
        return t + math.ceil((on - t) / period) * period

    # ----- main loop -----

    def run_until(self, end: float, hooks: list[tuple[float, Callable[[float], None]]] = ()) -> None:
        for t, fn in hooks:
            self.push(t, "hook", fn)
        while self.heap and self.heap[0][0] < end:
            t, _, kind, payload = heapq.heappop(self.heap)
            self.now = t
            getattr(self, "_ev_" + kind)(*payload)
        self.now = end

    def _ev_hook(self, fn) -> None:
        fn(self.now)

    def _ev_timer(self, peer: PeerId, kind: str, period: float) -> None:
        sn = self.nodes[peer]
        if sn.trace.is_online(self.now):
            self.execute(peer, sn.node.on_timer(kind, self.now))
        nxt = self._next_timer(sn, self.now + period, period)
        if nxt < INF:
            self.push(nxt, "timer", peer, kind, period)

    def _ev_up(self, peer: PeerId) -> None:
        sn = self.nodes[peer]
        nxt = sn.trace.next_online(sn.trace.session_end(self.now))
        if nxt < INF:
            self.push(nxt, "up", peer)
        self.schedule_all_pulls()

    def _ev_deliver(self, src: PeerId, dst: PeerId, mtype: MsgType, body: dict) -> None:
        self.delivered += 1
        self.execute(dst, self.nodes[dst].node.on_message(src, mtype, body, self.now))

    def _ev_result(self, src: PeerId, dst: PeerId, mtype: MsgType, body: dict, ok: bool) -> None:
        self.execute(src, self.nodes[src].node.on_send_result(dst, mtype, body, ok, self.now))

    # ----- effects -----

    def execute(self, peer: PeerId, effects: list) -> None:
        for e in effects:
            if isinstance(e, Send):
                self._send(peer, e)
            elif isinstance(e, StartPull):
                sn = self.nodes[peer]
                sn.requests[e.chunk] = PullRequest(e.chunk, e.version, e.size, e.sources, e.owned)
                if sn.active is not None and sn.active.req.chunk == e.chunk and sn.active.req.version != e.version:
                    self._pause(peer)
                self.schedule_pulls(peer)
            elif isinstance(e, CancelPull):
                sn = self.nodes[peer]
                sn.requests.pop(e.chunk, None)
                if sn.active is not None and sn.active.req.chunk == e.chunk:
                    sn.active = None
                    self.schedule_pulls(peer)
            elif isinstance(e, DropData):
                for key in [k for k in self.progress if k[0] == peer and k[1] == e.chunk]:
                    del self.progress[key]
            elif isinstance(e, Note):
                self.on_note(peer, e, self.now)

    def _send(self, src: PeerId, e: Send) -> None:
        self.sent += 1
        t = self.now
        dst = self.nodes.get(e.dst)
        ok = (dst is not None and self.is_online(src, t) and dst.trace.is_online(t)
              and dst.trace.is_online(t + self.latency))
        if ok:
            self.push(t + self.latency, "deliver", src, e.dst, e.mtype, e.body)
        else:
            self.failed += 1
        if e.track:
            self.push(t + self.latency, "result", src, e.dst, e.mtype, e.body, ok)

    # ----- data plane -----

    def _source_ok(self, src: PeerId, req: PullRequest) -> bool:
        sn = self.nodes.get(src)
        return (sn is not None and sn.trace.is_online(self.now)
                and sn.node.held_version(req.chunk) >= req.version)

    def schedule_all_pulls(self) -> None:
        for p, sn in self.nodes.items():
            if sn.active is None and sn.requests:
                self.schedule_pulls(p)

    def schedule_pulls(self, peer: PeerId) -> None:
        sn = self.nodes[peer]
        if sn.active is not None or not sn.requests or not sn.trace.is_online(self.now):
            return
        ready = []
        for req in sn.requests.values():
            srcs = [s for s in req.sources if s != peer and self._source_ok(s, req)]
            if srcs:
                ready.append((req, srcs))
        if not ready:
            return
        req, srcs = ready[self.rng.randrange(len(ready))]
        src = srcs[self.rng.randrange(len(srcs))]
        ss = self.nodes[src]
        rate = min(sn.node.bandwidth, ss.node.bandwidth)
        key = (peer, req.chunk, req.version)
        done = self.progress.get(key, 0.0)
        finish = self.now + (req.size - done) / rate
        stop = min(sn.trace.session_end(self.now), ss.trace.session_end(self.now))
        self.token += 1
        sn.active = ActivePull(req, src, self.now, rate, self.token)
        if finish <= stop:
            self.push(finish, "pull_done", peer, self.token)
        else:
            self.push(stop, "pull_pause", peer, self.token)

    def _pause(self, peer: PeerId) -> None:
        sn = self.nodes[peer]
        a = sn.active
        key = (peer, a.req.chunk, a.req.version)
        self.progress[key] = self.progress.get(key, 0.0) + (self.now - a.started) * a.rate
        sn.active = None

    def _ev_pull_pause(self, peer: PeerId, token: int) -> None:
        sn = self.nodes[peer]
        if sn.active is None or sn.active.token != token:
            return
        self._pause(peer)
        self.schedule_pulls(peer)

    def _ev_pull_done(self, peer: PeerId, token: int) -> None:
        sn = self.nodes[peer]
        a = sn.active
        if a is None or a.token != token:
            return
        sn.active = None
        req = a.req
        self.progress.pop((peer, req.chunk, req.version), None)
        if sn.requests.get(req.chunk) is req:
            del sn.requests[req.chunk]
        if self._source_ok(a.source, req) or self.nodes[a.source].node.held_version(req.chunk) >= req.version:
            self.on_note(peer, Note("transfer", {"chunk": req.chunk, "version": req.version, "source": a.source,
                                                 "bytes": req.size}), self.now)
            self.execute(peer, sn.node.on_pull_complete(req.chunk, req.version, req.owned, self.now))
        else:
            self.execute(peer, sn.node.on_pull_failed(req.chunk, self.now))
        self.schedule_all_pulls()


def register_descriptors(keys: dict[PeerId, bytes], sites: dict[PeerId, str], synchro_count: int,
                         rng: random.Random) -> OracleRegistry:
    """Pin a uniformly random synchro-peer set for every node."""
    reg = OracleRegistry()
    peers = sorted(keys)
    for p in peers:
        others = [q for q in peers if q != p]
        chosen = rng.sample(others, min(synchro_count, len(others)))
        reg.put(PeerDescriptor(p, keys[p], ("sim", 0), (p, *chosen), sites.get(p, ""), 1))
    return reg
