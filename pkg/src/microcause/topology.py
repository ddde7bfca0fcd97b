"""RPC dependency graphs and the latency-propagation causal DAG.

This layer has three jobs: reconstruct the RPC tree from raw spans, derive
the causal DAG wiring per-service metrics, latents and per-RPC latency
variables together (edges run opposite to the call direction: child-RPC
latencies, callee metrics and latents cause the parent RPC's server-side
latency), and answer the structural queries the model layer needs --
decode order, descendant sets for partial retraining, and structural
diffs between two versions of a deployment.

RPC identities are canonical call paths ("s0", "s0>s1", ...) so that a
graph built from a declarative config and a graph recovered from spans
agree exactly.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field

from .config import PARALLEL, SEQUENTIAL, TopologyConfig

CLIENT = "client"
SERVER = "server"

Y_VARS = ("y_c", "y_s", "y_req", "y_resp")


class TraceError(ValueError):
    pass


class MalformedTraceError(TraceError):
    pass


class IncompleteTraceError(TraceError):
    pass


class UnknownServiceError(KeyError):
    pass


@dataclass(frozen=True, slots=True)
class Span:
    """One client- or server-side timing record of a single RPC."""

    trace_id: str
    rpc_id: str
    parent_rpc_id: str | None
    service: str
    peer_service: str
    kind: str                  # "client" | "server"
    start_us: int
    duration_us: int

    def to_dict(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "rpc_id": self.rpc_id,
            "parent_rpc_id": self.parent_rpc_id,
            "service": self.service,
            "peer_service": self.peer_service,
            "kind": self.kind,
            "start_us": int(self.start_us),
            "duration_us": int(self.duration_us),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Span":
        return cls(
            trace_id=d["trace_id"],
            rpc_id=d["rpc_id"],
            parent_rpc_id=d.get("parent_rpc_id"),
            service=d["service"],
            peer_service=d["peer_service"],
            kind=d["kind"],
            start_us=int(d["start_us"]),
            duration_us=int(d["duration_us"]),
        )


@dataclass(frozen=True, slots=True)
class Rpc:
    rpc_id: str
    caller: str
    callee: str
    child_combine: str = SEQUENTIAL
    parent_id: str | None = None


@dataclass(frozen=True)
class RpcGraph:
    services: tuple[str, ...]          # sorted; includes the entry caller
    rpcs: tuple[Rpc, ...]              # sorted by rpc_id
    root_rpc: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "_by_id", {r.rpc_id: r for r in self.rpcs})
        kids: dict[str | None, list[Rpc]] = defaultdict(list)
        for r in self.rpcs:
            kids[r.parent_id].append(r)
        object.__setattr__(self, "_children", dict(kids))

    def rpc(self, rpc_id: str) -> Rpc:
        return self._by_id[rpc_id]

    def children(self, rpc_id: str) -> tuple[Rpc, ...]:
        return tuple(self._children.get(rpc_id, ()))

    @property
    def frontend_caller(self) -> str:
        return self.rpc(self.root_rpc).caller

    @property
    def frontend(self) -> str:
        return self.rpc(self.root_rpc).callee

    def serving_services(self) -> tuple[str, ...]:
        return tuple(sorted({r.callee for r in self.rpcs}))

    def inbound(self, service: str) -> tuple[Rpc, ...]:
        return tuple(r for r in self.rpcs if r.callee == service)

    def issued_by(self, service: str) -> tuple[Rpc, ...]:
        return tuple(r for r in self.rpcs if r.caller == service)

    def channel_id(self, rpc_id: str) -> str:
        r = self.rpc(rpc_id)
        return f"{r.caller}->{r.callee}"

    def channel_ids(self) -> tuple[str, ...]:
        return tuple(sorted({self.channel_id(r.rpc_id) for r in self.rpcs}))

    def validate(self) -> None:
        ids = {r.rpc_id for r in self.rpcs}
        for r in self.rpcs:
            if r.parent_id is not None and r.parent_id not in ids:
                raise MalformedTraceError(f"rpc {r.rpc_id} has unknown parent")
        roots = [r for r in self.rpcs if r.parent_id is None]
        if len(roots) != 1 or roots[0].rpc_id != self.root_rpc:
            raise MalformedTraceError("rpc relation is not a tree with a single root")
        callees = {r.callee for r in self.rpcs}
        for s in self.services:
            if s != self.frontend_caller and s not in callees:
                raise MalformedTraceError(f"service {s} is never called")

    def to_dict(self) -> dict:
        return {
            "services": list(self.services),
            "root_rpc": self.root_rpc,
            "rpcs": [
                {
                    "rpc_id": r.rpc_id,
                    "caller": r.caller,
                    "callee": r.callee,
                    "child_combine": r.child_combine,
                    "parent_id": r.parent_id,
                }
                for r in self.rpcs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RpcGraph":
        return cls(
            services=tuple(d["services"]),
            rpcs=tuple(Rpc(**r) for r in d["rpcs"]),
            root_rpc=d["root_rpc"],
        )


def _canonical_child_id(parent_id: str | None, callee: str, occurrence: int) -> str:
    base = callee if parent_id is None else f"{parent_id}>{callee}"
    return base if occurrence == 0 else f"{base}#{occurrence}"


def graph_from_config(topo: TopologyConfig) -> RpcGraph:
    """Materialize the declarative topology as an RpcGraph with canonical ids."""
    topo.validate()
    out_edges: dict[str, list[str]] = defaultdict(list)
    for caller, callee in topo.edges:
        out_edges[caller].append(callee)
    root_callees = out_edges.get(topo.entry_caller, [])
    if len(root_callees) != 1:
        raise MalformedTraceError("entry caller must issue exactly one root RPC")

    rpcs: list[Rpc] = []
    seen: set[str] = set()

    def walk(caller: str, callee: str, parent_id: str | None, occ: int) -> None:
        rpc_id = _canonical_child_id(parent_id, callee, occ)
        if rpc_id in seen:
            raise MalformedTraceError(f"cycle detected at {rpc_id}")
        seen.add(rpc_id)
        rpcs.append(Rpc(rpc_id=rpc_id, caller=caller, callee=callee,
                        child_combine=topo.combine_of(callee), parent_id=parent_id))
        counts: dict[str, int] = defaultdict(int)
        for child in out_edges.get(callee, []):
            walk(callee, child, rpc_id, counts[child])
            counts[child] += 1

    walk(topo.entry_caller, root_callees[0], None, 0)
    services = tuple(sorted({topo.entry_caller} | set(topo.services)))
    graph = RpcGraph(services=services, rpcs=tuple(sorted(rpcs, key=lambda r: r.rpc_id)),
                     root_rpc=root_callees[0])
    graph.validate()
    return graph


# ---------------------------------------------------------------------------
# span ingestion

@dataclass
class TraceView:
    """One trace resolved against canonical RPC identities."""

    trace_id: str
    pairs: dict[str, tuple[Span, Span]]              # rpc template -> (client, server)
    children: dict[str, list[str]]                   # template -> child templates
    root: str


def resolve_traces(spans: list[Span]) -> list[TraceView]:
    """Group spans into per-trace trees and key every RPC by its call path."""
    by_trace: dict[str, list[Span]] = defaultdict(list)
    for s in spans:
        if s.duration_us < 0:
            raise MalformedTraceError(f"negative duration in trace {s.trace_id}")
        by_trace[s.trace_id].append(s)
    if not by_trace:
        raise IncompleteTraceError("no spans given")

    views: list[TraceView] = []
    for trace_id in sorted(by_trace):
        tspans = by_trace[trace_id]
        client_spans: dict[str, Span] = {}
        server_spans: dict[str, Span] = {}
        for s in tspans:
            side = client_spans if s.kind == CLIENT else server_spans
            if s.rpc_id in side:
                raise MalformedTraceError(f"duplicate {s.kind} span for rpc {s.rpc_id}")
            side[s.rpc_id] = s
        if set(client_spans) != set(server_spans):
            raise IncompleteTraceError(f"unpaired spans in trace {trace_id}")
        for rid, c in client_spans.items():
            if c.duration_us < server_spans[rid].duration_us:
                raise MalformedTraceError(f"client shorter than server for rpc {rid}")

        parent_of: dict[str, str | None] = {}
        for rid, c in client_spans.items():
            parent_of[rid] = c.parent_rpc_id
            if c.parent_rpc_id is not None and c.parent_rpc_id not in client_spans:
                raise IncompleteTraceError(
                    f"trace {trace_id}: rpc {rid} references missing parent")
        roots = [rid for rid, p in parent_of.items() if p is None]
        if len(roots) != 1:
            raise MalformedTraceError(f"trace {trace_id} has {len(roots)} roots")

        # cycle check over parent links
        for rid in parent_of:
            slow, fast = rid, rid
            while True:
                fast = parent_of.get(fast)  # type: ignore[arg-type]
                if fast is None:
                    break
                fast = parent_of.get(fast)
                slow = parent_of.get(slow)  # type: ignore[assignment]
                if fast is None:
                    break
                if slow == fast:
                    raise MalformedTraceError(f"trace {trace_id} has a parent cycle")

        kids_inst: dict[str, list[str]] = defaultdict(list)
        for rid, p in parent_of.items():
            if p is not None:
                kids_inst[p].append(rid)

        template_of: dict[str, str] = {}
        pairs: dict[str, tuple[Span, Span]] = {}
        children: dict[str, list[str]] = defaultdict(list)

        def assign(rid: str, parent_template: str | None) -> None:
            callee = client_spans[rid].peer_service
            siblings = kids_inst.get(parent_of[rid], []) if parent_of[rid] else []
            same = [s for s in siblings if client_spans[s].peer_service == callee]
            same.sort(key=lambda s: (client_spans[s].start_us, s))
            occ = same.index(rid) if parent_of[rid] is not None else 0
            template = _canonical_child_id(parent_template, callee, occ)
            template_of[rid] = template
            pairs[template] = (client_spans[rid], server_spans[rid])
            if parent_template is not None:
                children[parent_template].append(template)
            for child in sorted(kids_inst.get(rid, []),
                                key=lambda s: (client_spans[s].start_us, s)):
                assign(child, template)

        assign(roots[0], None)
        views.append(TraceView(trace_id=trace_id, pairs=pairs,
                               children=dict(children), root=template_of[roots[0]]))
    return views


def _intervals_overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    # touching endpoints do not count as overlap
    return a[0] < b[1] and b[0] < a[1]


def build_rpc_graph(spans: list[Span]) -> RpcGraph:
    """Recover the RPC dependency tree from one or more complete traces.

    ``child_combine`` is inferred per parent RPC: parallel when sibling
    client spans overlap in time in a majority of traces, sequential
    otherwise.
    """
    views = resolve_traces(spans)

    shape: dict[str, tuple[str, str, str | None]] = {}
    votes: dict[str, list[int]] = defaultdict(lambda: [0, 0])   # template -> [seq, par]
    root = views[0].root
    for view in views:
        if view.root != root:
            raise MalformedTraceError("traces disagree on the root RPC")
        for template, (c, _s) in view.pairs.items():
            parent = template.rsplit(">", 1)[0] if ">" in template else None
            entry = (c.service, c.peer_service, parent)
            if shape.setdefault(template, entry) != entry:
                raise MalformedTraceError(f"traces disagree on rpc {template}")
        for parent, kids in view.children.items():
            if len(kids) < 2:
                continue
            spans_k = [view.pairs[k][0] for k in kids]
            ivals = [(s.start_us, s.start_us + s.duration_us) for s in spans_k]
            par = any(
                _intervals_overlap(ivals[i], ivals[j])
                for i in range(len(ivals))
                for j in range(i + 1, len(ivals))
            )
            votes[parent][1 if par else 0] += 1

    rpcs = []
    for template in sorted(shape):
        caller, callee, parent = shape[template]
        seq, par = votes.get(template, (0, 0))
        combine = PARALLEL if par > seq else SEQUENTIAL
        rpcs.append(Rpc(rpc_id=template, caller=caller, callee=callee,
                        child_combine=combine, parent_id=parent))
    services = tuple(sorted({r.caller for r in rpcs} | {r.callee for r in rpcs}))
    graph = RpcGraph(services=services, rpcs=tuple(rpcs), root_rpc=root)
    graph.validate()
    return graph


# ---------------------------------------------------------------------------
# causal DAG

@dataclass(frozen=True, slots=True)
class CbnNode:
    kind: str                  # "metric" | "latent" | "y_c" | "y_s" | "y_req" | "y_resp"
    owner: str                 # service, channel id, or rpc id
    metric: str | None = None

    @property
    def node_id(self) -> str:
        if self.kind == "metric":
            return f"metric:{self.owner}:{self.metric}"
        if self.kind == "latent":
            return f"latent:{self.owner}"
        return f"{self.kind}:{self.owner}"


@dataclass(frozen=True)
class MetricSchema:
    service_metrics: dict[str, tuple[str, ...]]
    channel_metrics: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "service_metrics": {k: list(v) for k, v in self.service_metrics.items()},
            "channel_metrics": list(self.channel_metrics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSchema":
        return cls(
            service_metrics={k: tuple(v) for k, v in d["service_metrics"].items()},
            channel_metrics=tuple(d["channel_metrics"]),
        )


@dataclass(frozen=True)
class Cbn:
    graph: RpcGraph
    schema: MetricSchema
    nodes: tuple[CbnNode, ...]
    edges: tuple[tuple[str, str], ...]     # (cause id, effect id)
    decode_order: tuple[str, ...]          # serving services, leaves first

    def __post_init__(self) -> None:
        adj: dict[str, list[str]] = defaultdict(list)
        for a, b in self.edges:
            adj[a].append(b)
        object.__setattr__(self, "_adj", dict(adj))
        object.__setattr__(self, "_node_ids", {n.node_id for n in self.nodes})

    def services(self) -> tuple[str, ...]:
        return self.decode_order

    def service_metric_names(self, service: str) -> tuple[str, ...]:
        return self.schema.service_metrics[service]

    def channels_into(self, service: str) -> tuple[str, ...]:
        return tuple(sorted({self.graph.channel_id(r.rpc_id)
                             for r in self.graph.inbound(service)}))

    def inbound_rpcs(self, service: str) -> tuple[str, ...]:
        return tuple(sorted(r.rpc_id for r in self.graph.inbound(service)))

    def child_rpcs(self, service: str) -> tuple[str, ...]:
        return tuple(sorted(r.rpc_id for r in self.graph.issued_by(service)))

    def successors(self, node_id: str) -> list[str]:
        return self._adj.get(node_id, [])

    def cbn_hash(self) -> str:
        payload = {
            "nodes": sorted(n.node_id for n in self.nodes),
            "edges": sorted(self.edges),
            "decode_order": list(self.decode_order),
            "graph": self.graph.to_dict(),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def is_acyclic(self) -> bool:
        indeg: dict[str, int] = {n.node_id: 0 for n in self.nodes}
        for _a, b in self.edges:
            indeg[b] += 1
        queue = sorted(n for n, d in indeg.items() if d == 0)
        seen = 0
        while queue:
            node = queue.pop()
            seen += 1
            for nxt in sorted(self.successors(node)):
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    queue.append(nxt)
        return seen == len(self.nodes)


def build_cbn(graph: RpcGraph, schema: MetricSchema) -> Cbn:
    """Wire metrics, latents and latency variables per the propagation rules.

    Per RPC r with callee v: metrics(v) and latent(v) and the client-side
    latency of every RPC issued by v feed y_s(r); y_s, y_req, y_resp feed
    y_c(r); the caller-callee channel metrics feed y_req(r) and y_resp(r).
    """
    for s in graph.serving_services():
        if not schema.service_metrics.get(s):
            raise UnknownServiceError(f"no metric schema for service {s}")

    nodes: list[CbnNode] = []
    edges: list[tuple[str, str]] = []

    for s in graph.serving_services():
        nodes.append(CbnNode(kind="latent", owner=s))
        for m in schema.service_metrics[s]:
            nodes.append(CbnNode(kind="metric", owner=f"svc:{s}", metric=m))
    for cid in graph.channel_ids():
        for m in schema.channel_metrics:
            nodes.append(CbnNode(kind="metric", owner=f"ch:{cid}", metric=m))

    for r in graph.rpcs:
        for kind in Y_VARS:
            nodes.append(CbnNode(kind=kind, owner=r.rpc_id))
        y_s, y_c = f"y_s:{r.rpc_id}", f"y_c:{r.rpc_id}"
        y_req, y_resp = f"y_req:{r.rpc_id}", f"y_resp:{r.rpc_id}"
        for m in schema.service_metrics[r.callee]:
            edges.append((f"metric:svc:{r.callee}:{m}", y_s))
        edges.append((f"latent:{r.callee}", y_s))
        for child in graph.children(r.rpc_id):
            edges.append((f"y_c:{child.rpc_id}", y_s))
        edges.append((y_s, y_c))
        edges.append((y_req, y_c))
        edges.append((y_resp, y_c))
        cid = graph.channel_id(r.rpc_id)
        for m in schema.channel_metrics:
            edges.append((f"metric:ch:{cid}:{m}", y_req))
            edges.append((f"metric:ch:{cid}:{m}", y_resp))

    decode_order = _service_decode_order(graph)
    cbn = Cbn(graph=graph, schema=schema, nodes=tuple(nodes), edges=tuple(edges),
              decode_order=decode_order)
    if not cbn.is_acyclic():
        raise MalformedTraceError("derived causal graph has a cycle")
    return cbn


def _service_decode_order(graph: RpcGraph) -> tuple[str, ...]:
    """Topological order over serving services, leaf services first."""
    serving = graph.serving_services()
    feeds: dict[str, set[str]] = {s: set() for s in serving}   # child -> parents
    for r in graph.rpcs:
        if r.caller in feeds:
            feeds[r.callee].add(r.caller)
    indeg = {s: 0 for s in serving}
    for _child, parents in feeds.items():
        for p in parents:
            indeg[p] += 1
    ready = sorted([s for s, d in indeg.items() if d == 0])
    order: list[str] = []
    while ready:
        s = ready.pop(0)
        order.append(s)
        for p in sorted(feeds[s]):
            indeg[p] -= 1
            if indeg[p] == 0:
                ready.append(p)
        ready.sort()
    if len(order) != len(serving):
        raise MalformedTraceError("service graph has a cycle")
    return tuple(order)


def descendants(cbn: Cbn, changed_services: set[str]) -> set[str]:
    """Services whose decoders are reachable from any changed service's nodes.

    Reachability runs along causal edges, i.e. toward the frontend; the
    changed services themselves are always included.
    """
    known = set(cbn.graph.services)
    for s in changed_services:
        if s not in known:
            raise UnknownServiceError(s)
    owner_of_rpc = {r.rpc_id: r.callee for r in cbn.graph.rpcs}
    start: list[str] = []
    for s in changed_services:
        start.append(f"latent:{s}")
        for m in cbn.schema.service_metrics.get(s, ()):
            start.append(f"metric:svc:{s}:{m}")
        for r in cbn.graph.inbound(s):
            for kind in Y_VARS:
                start.append(f"{kind}:{r.rpc_id}")
    seen: set[str] = set()
    stack = [n for n in start if n in cbn._node_ids]  # noqa: SLF001 - module-internal
    result = set(changed_services)
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        kind, _, rest = node.partition(":")
        if kind in Y_VARS:
            result.add(owner_of_rpc[rest])
        stack.extend(cbn.successors(node))
    return result


@dataclass(frozen=True)
class GraphDelta:
    added: tuple[str, ...]
    removed: tuple[str, ...]
    reshaped: tuple[str, ...]
    old_hash: str
    new_hash: str
    new_cbn: Cbn

    @property
    def is_empty(self) -> bool:
        return not (self.added or self.removed or self.reshaped)


def _unit_signature(cbn: Cbn, service: str) -> tuple:
    metric_names = tuple(sorted(cbn.service_metric_names(service)))
    channel_names = tuple(
        (cid, m) for cid in cbn.channels_into(service) for m in cbn.schema.channel_metrics
    )
    return (metric_names, channel_names, cbn.inbound_rpcs(service), cbn.child_rpcs(service))


def graph_diff(old: Cbn, new: Cbn) -> GraphDelta:
    """Structural delta between two causal graphs, keyed by service name."""
    old_s, new_s = set(old.services()), set(new.services())
    added = tuple(sorted(new_s - old_s))
    removed = tuple(sorted(old_s - new_s))
    reshaped = tuple(sorted(
        s for s in old_s & new_s if _unit_signature(old, s) != _unit_signature(new, s)
    ))
    return GraphDelta(added=added, removed=removed, reshaped=reshaped,
                      old_hash=old.cbn_hash(), new_hash=new.cbn_hash(), new_cbn=new)


def schema_from_config(graph: RpcGraph, service_metrics: tuple[str, ...],
                       channel_metrics: tuple[str, ...]) -> MetricSchema:
    return MetricSchema(
        service_metrics={s: tuple(service_metrics) for s in graph.serving_services()},
        channel_metrics=tuple(channel_metrics),
    )
