import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from microcause import config as C
from microcause.config import ExperimentConfig
from microcause.dataset import FeatureSchema
from microcause.simulator import make_cluster, step_window
from microcause.topology import (
    Cbn,
    IncompleteTraceError,
    MalformedTraceError,
    MetricSchema,
    Span,
    UnknownServiceError,
    build_cbn,
    build_rpc_graph,
    descendants,
    graph_diff,
    graph_from_config,
    schema_from_config,
)

METRICS = ("cpu_util", "mem_util")


def span_pair(trace, rpc, parent, caller, callee, start, y_req, y_s, y_resp):
    y_c = y_req + y_s + y_resp
    return [
        Span(trace_id=trace, rpc_id=rpc, parent_rpc_id=parent, service=caller,
             peer_service=callee, kind="client", start_us=start, duration_us=y_c),
        Span(trace_id=trace, rpc_id=rpc, parent_rpc_id=parent, service=callee,
             peer_service=caller, kind="server", start_us=start + y_req, duration_us=y_s),
    ]


def five_service_trace(trace_id="t0", start=0):
    """S0 calls S1, S1 calls S2, S2 calls S3 then S4 (sequential)."""
    spans = []
    spans += span_pair(trace_id, "a", None, "S0", "S1", start, 10, 560, 10)
    spans += span_pair(trace_id, "b", "a", "S1", "S2", start + 10, 10, 440, 10)
    spans += span_pair(trace_id, "c", "b", "S2", "S3", start + 20, 10, 100, 10)
    spans += span_pair(trace_id, "d", "b", "S2", "S4", start + 140, 10, 150, 10)
    return spans


class TestBuildRpcGraph:
    def test_five_services_four_rpcs(self):
        g = build_rpc_graph(five_service_trace())
        assert len(g.services) == 5
        assert len(g.rpcs) == 4
        root = g.rpc(g.root_rpc)
        assert (root.caller, root.callee) == ("S0", "S1")
        mid = g.rpc("S1>S2")
        assert mid.parent_id == "S1"
        kids = g.children("S1>S2")
        assert {k.callee for k in kids} == {"S3", "S4"}

    def test_single_pair(self):
        g = build_rpc_graph(span_pair("t", "r", None, "A", "B", 0, 5, 50, 5))
        assert len(g.rpcs) == 1
        assert set(g.services) == {"A", "B"}
        assert g.frontend == "B"

    def test_sequential_children_inferred(self):
        g = build_rpc_graph(five_service_trace())
        assert g.rpc("S1>S2").child_combine == "sequential"

    def test_parallel_inferred_from_simulated_fanout(self):
        cfg = ExperimentConfig(topology=C.fanout(5))
        cfg.workload.requests_per_window = 30
        cluster = make_cluster(cfg, seed=7)
        trace = step_window(cluster, 100.0, np.random.default_rng(1))
        g = build_rpc_graph(trace.spans)
        assert g == cluster.graph
        assert g.rpc(g.root_rpc).child_combine == "parallel"

    def test_roundtrip_identity_all_topologies(self):
        for topo in (C.chain(5), C.fanout(4), C.composed([("chain", 2), ("fanout", 3)])):
            cfg = ExperimentConfig(topology=topo)
            cfg.workload.requests_per_window = 20
            cluster = make_cluster(cfg, seed=3)
            trace = step_window(cluster, 80.0, np.random.default_rng(5))
            assert build_rpc_graph(trace.spans) == cluster.graph

    def test_orphan_parent_is_incomplete(self):
        spans = span_pair("t", "r1", "missing", "A", "B", 0, 1, 10, 1)
        with pytest.raises(IncompleteTraceError):
            build_rpc_graph(spans)

    def test_parent_cycle_is_malformed(self):
        spans = span_pair("t", "r1", "r2", "A", "B", 0, 1, 10, 1)
        spans += span_pair("t", "r2", "r1", "B", "A", 0, 1, 10, 1)
        with pytest.raises(MalformedTraceError):
            build_rpc_graph(spans)

    def test_unpaired_span_is_incomplete(self):
        spans = five_service_trace()[:-1]
        with pytest.raises(IncompleteTraceError):
            build_rpc_graph(spans)

    def test_client_shorter_than_server_is_malformed(self):
        bad = [
            Span("t", "r", None, "A", "B", "client", 0, 5),
            Span("t", "r", None, "B", "A", "server", 0, 50),
        ]
        with pytest.raises(MalformedTraceError):
            build_rpc_graph(bad)


def cbn_for(topo_cfg) -> Cbn:
    g = graph_from_config(topo_cfg)
    return build_cbn(g, schema_from_config(g, METRICS, ("net_util",)))


class TestBuildCbn:
    def test_three_service_chain_edges(self):
        # client -> A -> B -> C with rpcs r0 = "A", r1 = "A>B", r2 = "A>B>C"
        cbn = cbn_for(C.chain(3, service_overrides=None))
        edges = set(cbn.edges)
        g = cbn.graph
        r0, r1, r2 = sorted(r.rpc_id for r in g.rpcs)
        assert (f"y_c:{r1}", f"y_s:{r0}") in edges
        assert (f"metric:svc:s1:cpu_util", f"y_s:{r1}") in edges
        assert (f"latent:s1", f"y_s:{r1}") in edges
        assert (f"y_s:{r2}", f"y_c:{r2}") in edges
        assert (f"metric:ch:s0->s1:net_util", f"y_req:{r1}") in edges

    def test_single_rpc_counts(self):
        g = build_rpc_graph(span_pair("t", "r", None, "A", "B", 0, 5, 50, 5))
        cbn = build_cbn(g, MetricSchema(service_metrics={"B": METRICS},
                                        channel_metrics=("net_util",)))
        kinds = [n.kind for n in cbn.nodes]
        assert kinds.count("y_s") == kinds.count("y_c") == 1
        assert kinds.count("y_req") == kinds.count("y_resp") == 1
        assert kinds.count("latent") == 1
        assert kinds.count("metric") == len(METRICS) + 1
        assert cbn.decode_order == ("B",)

    def test_fanout_decode_order_by_enumeration(self):
        import itertools

        cbn = cbn_for(C.fanout(5))
        g = cbn.graph
        constraints = [(r.callee, r.caller) for r in g.rpcs
                       if r.caller in set(g.serving_services())]
        valid = [
            p for p in itertools.permutations(g.serving_services())
            if all(p.index(a) < p.index(b) for a, b in constraints)
        ]
        assert cbn.decode_order in valid
        assert cbn.decode_order[-1] == "root"

    def test_missing_schema_rejected(self):
        g = graph_from_config(C.chain(3))
        with pytest.raises(UnknownServiceError):
            build_cbn(g, MetricSchema(service_metrics={"s0": METRICS},
                                      channel_metrics=()))


service_names = st.integers(min_value=2, max_value=50)


@st.composite
def random_tree_topology(draw):
    n = draw(service_names)
    parents = [draw(st.integers(0, i - 1)) if i else None for i in range(n)]
    edges = [("client", "v0")]
    edges += [(f"v{parents[i]}", f"v{i}") for i in range(1, n)]
    services = {f"v{i}": C.ServiceConfig() for i in range(n)}
    combine = {f"v{i}": draw(st.sampled_from(["sequential", "parallel"]))
               for i in range(n)}
    return C.TopologyConfig(name="rand", services=services, edges=edges,
                            combine=combine)


class TestCbnProperties:
    @given(random_tree_topology())
    def test_acyclic_for_random_trees(self, topo):
        cbn = cbn_for(topo)
        dag = nx.DiGraph(list(cbn.edges))
        dag.add_nodes_from(n.node_id for n in cbn.nodes)
        assert nx.is_directed_acyclic_graph(dag)
        assert cbn.is_acyclic()

    @given(random_tree_topology(), st.data())
    def test_descendants_monotone(self, topo, data):
        cbn = cbn_for(topo)
        services = list(cbn.graph.serving_services())
        a = set(data.draw(st.sets(st.sampled_from(services), min_size=1)))
        b = set(data.draw(st.sets(st.sampled_from(services))))
        assert descendants(cbn, a) <= descendants(cbn, a | b)


class TestDescendants:
    def test_chain_tail_reaches_everything(self):
        cbn = cbn_for(C.chain(5))
        assert descendants(cbn, {"s4"}) == {"s0", "s1", "s2", "s3", "s4"}

    def test_fanout_leaf_reaches_root_only(self):
        cbn = cbn_for(C.fanout(5))
        assert descendants(cbn, {"l2"}) == {"l2", "root"}

    def test_frontend_is_sink(self):
        cbn = cbn_for(C.chain(5))
        assert descendants(cbn, {"s0"}) == {"s0"}

    def test_matches_brute_force_bfs(self):
        cbn = cbn_for(C.composed([("chain", 2), ("fanout", 4)]))
        adj = {}
        for a, b in cbn.edges:
            adj.setdefault(a, []).append(b)
        owner = {r.rpc_id: r.callee for r in cbn.graph.rpcs}
        for start in cbn.graph.serving_services():
            frontier = [n.node_id for n in cbn.nodes
                        if (n.kind in ("metric", "latent")
                            and n.owner in (start, f"svc:{start}"))
                        or (n.kind.startswith("y_") and owner[n.owner] == start)]
            seen, out = set(), {start}
            while frontier:
                node = frontier.pop()
                if node in seen:
                    continue
                seen.add(node)
                kind, _, rest = node.partition(":")
                if kind.startswith("y_"):
                    out.add(owner[rest])
                frontier.extend(adj.get(node, []))
            assert descendants(cbn, {start}) == out

    def test_unknown_service_rejected(self):
        cbn = cbn_for(C.chain(3))
        with pytest.raises(UnknownServiceError):
            descendants(cbn, {"nope"})


class TestGraphDiff:
    def test_identical_graphs_empty_delta(self):
        a, b = cbn_for(C.chain(5)), cbn_for(C.chain(5))
        delta = graph_diff(a, b)
        assert delta.is_empty
        assert delta.old_hash == delta.new_hash

    def test_metric_added_is_reshape(self):
        g = graph_from_config(C.chain(5))
        old = build_cbn(g, schema_from_config(g, METRICS, ("net_util",)))
        per_service = {s: METRICS for s in g.serving_services()}
        per_service["s2"] = METRICS + ("io_wait",)
        new = build_cbn(g, MetricSchema(service_metrics=per_service,
                                        channel_metrics=("net_util",)))
        delta = graph_diff(old, new)
        assert delta.added == () and delta.removed == ()
        assert delta.reshaped == ("s2",)

    def test_chain_grows_a_tail(self):
        delta = graph_diff(cbn_for(C.chain(5)), cbn_for(C.chain(6)))
        assert delta.added == ("s5",)
        assert delta.removed == ()
        assert delta.reshaped == ("s4",)

    def test_disjoint_delta_sets(self):
        delta = graph_diff(cbn_for(C.chain(5)), cbn_for(C.chain(6)))
        groups = [set(delta.added), set(delta.removed), set(delta.reshaped)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not groups[i] & groups[j]


class TestFeatureSchemaIndexing:
    def test_unit_widths_chain3(self):
        cbn = cbn_for(C.chain(3))
        schema = FeatureSchema.from_cbn(cbn, (50, 95))
        # mid service serves one RPC and issues one: child input is one RPC's
        # full latency tuple at both percentiles
        assert len(schema.child_y_names(cbn, "s1")) == 4 * 2
        assert len(schema.unit_y_names(cbn, "s1")) == 4 * 2
        assert len(schema.service_x_names(cbn, "s1")) == len(METRICS) + 1
        assert len(schema.child_y_names(cbn, "s2")) == 0
